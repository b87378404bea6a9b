//! Parameter identifiers, parameter tables and gradient sets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Which weight of a layer a parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    DenseW,
    ConvW,
    AttnQ(u32),
    AttnK(u32),
    AttnV(u32),
    AttnO,
    Embed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: u32,
    pub slot: Slot,
}

impl ParamId {
    pub const fn new(layer: u32, slot: Slot) -> Self {
        ParamId { layer, slot }
    }

    pub const fn dense(layer: u32) -> Self {
        ParamId::new(layer, Slot::DenseW)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.", self.layer)?;
        match self.slot {
            Slot::DenseW => write!(f, "dense_w"),
            Slot::ConvW => write!(f, "conv_w"),
            Slot::AttnQ(h) => write!(f, "attn_q{h}"),
            Slot::AttnK(h) => write!(f, "attn_k{h}"),
            Slot::AttnV(h) => write!(f, "attn_v{h}"),
            Slot::AttnO => write!(f, "attn_o"),
            Slot::Embed => write!(f, "embed"),
        }
    }
}

/// Ordered parameter storage; iteration order is the `ParamId` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<ParamId, Tensor>);

impl Params {
    pub fn new() -> Self {
        Params(BTreeMap::new())
    }

    pub fn insert(&mut self, id: ParamId, value: Tensor) -> Option<Tensor> {
        self.0.insert(id, value)
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut Tensor> {
        self.0.get_mut(id)
    }

    pub fn require(&self, id: &ParamId) -> Result<&Tensor> {
        self.0
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.values().map(Tensor::frobenius_norm_sq).sum()
    }

    /// `self += alpha · delta` for every parameter in `delta`.
    pub fn axpy(&mut self, alpha: f64, delta: &GradientSet) -> Result<()> {
        for (id, d) in delta.iter() {
            let p = self
                .0
                .get_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {id}")))?;
            p.axpy(alpha, d)?;
        }
        Ok(())
    }

    /// Squared Euclidean distance to another table with the same keys.
    pub fn distance_sq(&self, other: &Params) -> Result<f64> {
        let mut total = 0.0;
        for (id, a) in self.iter() {
            let b = other.require(id)?;
            total += a.sub(b)?.frobenius_norm_sq();
        }
        Ok(total)
    }

    /// Bitwise equality, which distinguishes `0.0` from `-0.0`.
    pub fn bit_identical(&self, other: &Params) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((ia, a), (ib, b))| {
                ia == ib
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradient (or any per-parameter direction) keyed by `ParamId`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet(BTreeMap<ParamId, Tensor>);

impl GradientSet {
    pub fn new() -> Self {
        GradientSet(BTreeMap::new())
    }

    pub fn zeros_like(params: &Params) -> Self {
        GradientSet(
            params
                .iter()
                .map(|(id, p)| (*id, Tensor::zeros(p.shape())))
                .collect(),
        )
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) -> Option<Tensor> {
        self.0.insert(id, g)
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `g` into the entry for `id`, inserting it when absent.
    pub fn accumulate(&mut self, id: ParamId, g: Tensor) -> Result<()> {
        match self.0.get_mut(&id) {
            Some(existing) => existing.axpy(1.0, &g),
            None => {
                self.0.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> GradientSet {
        GradientSet(self.0.iter().map(|(id, g)| (*id, g.scale(alpha))).collect())
    }

    /// `(self - other) · alpha`, entry by entry over identical key sets.
    pub fn diff_scaled(&self, other: &GradientSet, alpha: f64) -> Result<GradientSet> {
        if self.len() != other.len() {
            return Err(shape_err("GradientSet::diff_scaled", self.len(), other.len()));
        }
        let mut out = BTreeMap::new();
        for (id, a) in self.iter() {
            let b = other
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {id}")))?;
            let d = a.zip_map(b, "GradientSet::diff_scaled", |x, y| (x - y) * alpha)?;
            out.insert(*id, d);
        }
        Ok(GradientSet(out))
    }

    pub fn dot(&self, other: &GradientSet) -> Result<f64> {
        let mut total = 0.0;
        for (id, a) in self.iter() {
            let b = other
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {id}")))?;
            total += a.dot(b)?;
        }
        Ok(total)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        self.0.values().try_for_each(|g| g.check_finite(op))
    }
}

impl FromIterator<(ParamId, Tensor)> for GradientSet {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor)>>(iter: I) -> Self {
        GradientSet(iter.into_iter().collect())
    }
}

impl FromIterator<(ParamId, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor)>>(iter: I) -> Self {
        Params(iter.into_iter().collect())
    }
}

/// `Σ ‖g_p‖²` over every parameter: twice the teleport objective.
pub fn grad_norm_sq(g: &GradientSet) -> f64 {
    g.0.values().map(Tensor::frobenius_norm_sq).sum()
}
