//! Datasets, IDX ingestion, synthetic sequence windows and batching.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "NULLPORT_DATA_DIR";

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    /// Regression targets, one row per sample.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(t) => Targets::Values(select_rows(t, idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gathers samples along the leading axis.
fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("rows of a finite tensor")
}

/// Model-ready samples: inputs with a leading sample axis plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.shape()[0] != targets.len() {
            return Err(shape_err("Dataset::new", targets.len(), inputs.shape()));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::ClassOutOfRange {
                    index: bad,
                    classes: *classes,
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: select_rows(&self.inputs, idx),
            targets: self.targets.select(idx),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub split: String,
    /// `count x channels x h x w`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.images.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Image-shaped samples for convolutional models.
    pub fn into_dataset(self) -> Result<Dataset> {
        let name = format!("{}-{}", self.name, self.split);
        Dataset::new(
            name,
            self.images,
            Targets::Classes {
                labels: self.labels,
                classes: self.classes,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    /// `count x T x D`.
    pub inputs: Tensor,
    pub targets: Targets,
    pub window: usize,
    pub horizon: usize,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.name, self.inputs, self.targets)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxHeader {
    dims: Vec<usize>,
    offset: usize,
}

fn parse_idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<IdxHeader> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
    };
    let got = word(0)?;
    if got != magic {
        return Err(Error::Format(format!("{what}: bad magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let offset = 4 * (ndim + 1);
    let len: usize = dims.iter().product();
    if bytes.len() < offset + len {
        return Err(Error::Format(format!(
            "{what}: truncated payload ({} of {len} bytes)",
            bytes.len() - offset
        )));
    }
    Ok(IdxHeader { dims, offset })
}

/// Parses an IDX image/label file pair, decompressing gzip transparently.
/// Pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let img = open_maybe_gz(images_path.as_ref())?;
    let lab = open_maybe_gz(labels_path.as_ref())?;
    let ih = parse_idx_header(&img, IDX_IMAGES, "images")?;
    let lh = parse_idx_header(&lab, IDX_LABELS, "labels")?;
    let (count, h, w) = (ih.dims[0], ih.dims[1], ih.dims[2]);
    if lh.dims[0] != count {
        return Err(Error::Format(format!("{count} images but {} labels", lh.dims[0])));
    }
    let pixels = img[ih.offset..ih.offset + count * h * w]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lab[lh.offset..lh.offset + count].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let name = images_path
        .as_ref()
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("idx")
        .split('-')
        .next()
        .unwrap_or("idx")
        .to_string();
    Ok(ImageDataset {
        name,
        split: String::new(),
        images: Tensor::new(vec![count, 1, h, w], pixels)?,
        labels,
        classes,
    })
}

/// Writes a single-channel dataset as uncompressed IDX files. Pixels are
/// stored as `round(v · 255)`.
pub fn write_idx(ds: &ImageDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (n, c, h, w) = ds.dims();
    if c != 1 {
        return Err(Error::InvalidArgument("IDX images are single-channel".into()));
    }
    let mut out = BufWriter::new(File::create(images_path)?);
    for word in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.write_all(&word.to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    let mut out = BufWriter::new(File::create(labels_path)?);
    for word in [IDX_LABELS, n as u32] {
        out.write_all(&word.to_be_bytes())?;
    }
    let labels = ds
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<_>>>()?;
    out.write_all(&labels)?;
    out.flush()?;
    Ok(())
}

/// Directory holding dataset files: `$NULLPORT_DATA_DIR`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the train and test splits of an MNIST-layout directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(ImageDataset, ImageDataset)> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> Result<PathBuf> {
        [format!("{stem}.gz"), stem.to_string()]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Config(format!("{stem} not found in {}", dir.display())))
    };
    let mut train = load_idx(find("train-images-idx3-ubyte")?, find("train-labels-idx1-ubyte")?)?;
    let mut test = load_idx(find("t10k-images-idx3-ubyte")?, find("t10k-labels-idx1-ubyte")?)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("mnist").to_string();
    train.name.clone_from(&name);
    train.split = "train".into();
    test.name = name;
    test.split = "test".into();
    Ok((train, test))
}

/// Sliding windows over a seeded multivariate series. Each dimension is a
/// sum of three random sinusoids plus `0.1` white noise; the target of a
/// window is the series value `horizon` steps after its last element.
pub fn synth_timeseries_windows(
    rng: &mut SeededRng,
    dims: usize,
    length: usize,
    window: usize,
    horizon: usize,
) -> Result<SequenceDataset> {
    if window == 0 || horizon == 0 || dims == 0 {
        return Err(Error::InvalidArgument("window, horizon and dims must be positive".into()));
    }
    if length < window + horizon {
        return Err(Error::InvalidArgument(format!(
            "series length {length} shorter than window {window} + horizon {horizon}"
        )));
    }
    let mut series = vec![0.0; length * dims];
    for d in 0..dims {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let amp = rng.uniform_f64(0.2, 1.0);
                let period = rng.uniform_f64(8.0, 64.0);
                let phase = rng.uniform_f64(0.0, std::f64::consts::TAU);
                (amp, std::f64::consts::TAU / period, phase)
            })
            .collect();
        for t in 0..length {
            let clean: f64 = waves.iter().map(|(a, f, p)| a * (f * t as f64 + p).sin()).sum();
            series[t * dims + d] = clean + 0.1 * rng.standard_normal();
        }
    }
    let count = length - window - horizon + 1;
    let mut inputs = Vec::with_capacity(count * window * dims);
    let mut targets = Vec::with_capacity(count * dims);
    for i in 0..count {
        inputs.extend_from_slice(&series[i * dims..(i + window) * dims]);
        let at = i + window - 1 + horizon;
        targets.extend_from_slice(&series[at * dims..(at + 1) * dims]);
    }
    Ok(SequenceDataset {
        name: "synthetic-series".into(),
        inputs: Tensor::new(vec![count, window, dims], inputs)?,
        targets: Targets::Values(Tensor::new(vec![count, dims], targets)?),
        window,
        horizon,
    })
}

/// Mean-pools non-overlapping `factor x factor` blocks.
pub fn downsample_images(ds: &ImageDataset, factor: usize) -> Result<ImageDataset> {
    let (n, c, h, w) = ds.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!("factor {factor} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let src = ds.images.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out[plane * oh * ow + (y / factor) * ow + x / factor] += src[plane * h * w + y * w + x] / norm;
            }
        }
    }
    Ok(ImageDataset {
        images: Tensor::new(vec![n, c, oh, ow], out)?,
        ..ds.clone()
    })
}

/// Keeps the central `size x size` window of every image.
pub fn center_crop(ds: &ImageDataset, size: usize) -> Result<ImageDataset> {
    let (n, c, h, w) = ds.dims();
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!("crop {size} does not fit {h}x{w}")));
    }
    let (y0, x0) = ((h - size) / 2, (w - size) / 2);
    let src = ds.images.data();
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in 0..n * c {
        for y in y0..y0 + size {
            let row = plane * h * w + y * w;
            out.extend_from_slice(&src[row + x0..row + x0 + size]);
        }
    }
    Ok(ImageDataset {
        images: Tensor::new(vec![n, c, size, size], out)?,
        ..ds.clone()
    })
}

/// Uniform random subset of `count` samples, kept in original order.
pub fn subset(ds: &ImageDataset, count: usize, rng: &mut SeededRng) -> Result<ImageDataset> {
    if count > ds.len() {
        return Err(Error::InvalidArgument(format!("subset of {count} from {} samples", ds.len())));
    }
    let mut idx: Vec<usize> = rng.shuffle(ds.len()).into_iter().take(count).collect();
    idx.sort_unstable();
    Ok(ImageDataset {
        images: select_rows(&ds.images, &idx),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        ..ds.clone()
    })
}

/// Row-major flattening of every image into one vector.
pub fn flatten_for_mlp(ds: &ImageDataset) -> Result<Dataset> {
    let (n, c, h, w) = ds.dims();
    Dataset::new(
        format!("{}-{}", ds.name, ds.split),
        ds.images.clone().reshape(&[n, c * h * w])?,
        Targets::Classes {
            labels: ds.labels.clone(),
            classes: ds.classes,
        },
    )
}

/// Sequential view: one token per pixel in raster order, channels as features.
pub fn to_sequence(ds: &ImageDataset) -> Result<SequenceDataset> {
    let (n, c, h, w) = ds.dims();
    let src = ds.images.data();
    let mut out = vec![0.0; n * h * w * c];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out[(s * h * w + p) * c + ch] = src[(s * c + ch) * h * w + p];
            }
        }
    }
    Ok(SequenceDataset {
        name: format!("{}-{}-seq", ds.name, ds.split),
        inputs: Tensor::new(vec![n, h * w, c], out)?,
        targets: Targets::Classes {
            labels: ds.labels.clone(),
            classes: ds.classes,
        },
        window: h * w,
        horizon: 0,
    })
}

/// Mini-batches over one epoch in a seeded order; the last partial batch is
/// kept.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(BatchIterator {
            order: rng.shuffle(len),
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }
}
