//! Flat little-endian parameter blob.
//!
//! Layout: magic `NLPT`, version `u32`, parameter count `u32`, then per
//! parameter: layer `u32`, slot tag `u8`, head index `u32`, ndim `u32`,
//! dims as `u64`, and row-major `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::{ParamId, Params, Slot};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NLPT";
const VERSION: u32 = 1;

fn slot_tag(slot: Slot) -> (u8, u32) {
    match slot {
        Slot::DenseW => (0, 0),
        Slot::ConvW => (1, 0),
        Slot::AttnQ(h) => (2, h),
        Slot::AttnK(h) => (3, h),
        Slot::AttnV(h) => (4, h),
        Slot::AttnO => (5, 0),
        Slot::Embed => (6, 0),
    }
}

fn slot_from_tag(tag: u8, head: u32) -> Result<Slot> {
    Ok(match tag {
        0 => Slot::DenseW,
        1 => Slot::ConvW,
        2 => Slot::AttnQ(head),
        3 => Slot::AttnK(head),
        4 => Slot::AttnV(head),
        5 => Slot::AttnO,
        6 => Slot::Embed,
        other => return Err(Error::Format(format!("unknown slot tag {other}"))),
    })
}

pub fn write_params<W: Write>(params: &Params, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (id, t) in params.iter() {
        let (tag, head) = slot_tag(id.slot);
        w.write_all(&id.layer.to_le_bytes())?;
        w.write_all(&[tag])?;
        w.write_all(&head.to_le_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated parameter blob".into()))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn read_params<R: Read>(mut r: R) -> Result<Params> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("bad parameter blob magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = Params::new();
    for _ in 0..count {
        let layer = read_u32(&mut r)?;
        let [tag] = read_array::<1, _>(&mut r)?;
        let head = read_u32(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let id = ParamId::new(layer, slot_from_tag(tag, head)?);
        if params.insert(id, Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate parameter {id}")));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(3);
        let params: Params = [
            (ParamId::dense(0), rng.normal(&[3, 4])),
            (ParamId::new(1, Slot::AttnK(1)), rng.normal(&[2, 2])),
            (ParamId::new(2, Slot::ConvW), rng.normal(&[9, 4])),
        ]
        .into_iter()
        .collect();
        let mut buf = Vec::new();
        write_params(&params, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NLPT");
        let back = read_params(buf.as_slice()).unwrap();
        assert!(back.bit_identical(&params));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let params: Params = [(ParamId::dense(0), Tensor::vector(&[1.0, 2.0]))].into_iter().collect();
        let mut buf = Vec::new();
        write_params(&params, &mut buf).unwrap();
        buf.pop();
        assert!(read_params(buf.as_slice()).is_err());
    }
}
