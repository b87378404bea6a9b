//! Multi-head self-attention with per-head projections and an output
//! projection applied to the concatenated heads.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{GradientSet, ParamId, Params, Slot};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttentionLayer {
    pub layer: u32,
    pub heads: usize,
    /// Token feature dimension `D_i`.
    pub d_in: usize,
    /// Model dimension `D_k`; each head has width `D_k / N_h`.
    pub d_model: usize,
    pub d_out: usize,
    pub causal: bool,
}

impl MultiHeadAttentionLayer {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn q(&self, h: usize) -> ParamId {
        ParamId::new(self.layer, Slot::AttnQ(h as u32))
    }

    pub fn k(&self, h: usize) -> ParamId {
        ParamId::new(self.layer, Slot::AttnK(h as u32))
    }

    pub fn v(&self, h: usize) -> ParamId {
        ParamId::new(self.layer, Slot::AttnV(h as u32))
    }

    pub fn o(&self) -> ParamId {
        ParamId::new(self.layer, Slot::AttnO)
    }

    /// The per-head q/k/v weights, all of which multiply the same token matrix.
    pub fn qkv_ids(&self) -> Vec<ParamId> {
        (0..self.heads)
            .flat_map(|h| [self.q(h), self.k(h), self.v(h)])
            .collect()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub layer: u32,
    pub batch: usize,
    pub tokens: usize,
    /// Token matrix `X`, `(N·T) x D_i`.
    pub x: Tensor,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Attention probabilities per head, `(N·T) x T`.
    probs: Vec<Tensor>,
    /// Concatenated head outputs, `(N·T) x D_k`.
    pub concat: Tensor,
}

fn block(t: &Tensor, sample: usize, tokens: usize) -> Tensor {
    let c = t.cols();
    let rows = &t.data()[sample * tokens * c..(sample + 1) * tokens * c];
    Tensor::new(vec![tokens, c], rows.to_vec()).expect("finite block")
}

fn write_block(dst: &mut Tensor, src: &Tensor, sample: usize, col0: usize) {
    let tokens = src.rows();
    for i in 0..tokens {
        for j in 0..src.cols() {
            dst.set(sample * tokens + i, col0 + j, src.at(i, j));
        }
    }
}

fn softmax_rows(scores: &mut Tensor, causal: bool) {
    let (t, c) = (scores.rows(), scores.cols());
    let data = scores.data_mut();
    for i in 0..t {
        let row = &mut data[i * c..(i + 1) * c];
        let limit = if causal { i + 1 } else { c };
        let max = row[..limit].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row[..limit].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..limit].iter_mut() {
            *v /= sum;
        }
        for v in row[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

pub(crate) fn forward(layer: &MultiHeadAttentionLayer, params: &Params, input: &Tensor) -> Result<(Tensor, AttentionCache)> {
    if input.ndim() != 3 || input.shape()[2] != layer.d_in {
        return Err(shape_err("attention", ["N", "T", &layer.d_in.to_string()], input.shape()));
    }
    let (n, t) = (input.shape()[0], input.shape()[1]);
    let x = input.clone().reshape(&[n * t, layer.d_in])?;
    let dh = layer.head_dim();
    let mut concat = Tensor::zeros(&[n * t, layer.d_model]);
    let (mut qs, mut ks, mut vs, mut probs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for h in 0..layer.heads {
        let q = x.matmul(params.require(&layer.q(h))?)?;
        let k = x.matmul(params.require(&layer.k(h))?)?;
        let v = x.matmul(params.require(&layer.v(h))?)?;
        let mut p_all = Tensor::zeros(&[n * t, t]);
        for s in 0..n {
            let (qb, kb, vb) = (block(&q, s, t), block(&k, s, t), block(&v, s, t));
            let mut scores = qb.matmul_t(&kb)?.scale(layer.scale());
            softmax_rows(&mut scores, layer.causal);
            let head = scores.matmul(&vb)?;
            write_block(&mut concat, &head, s, h * dh);
            write_block(&mut p_all, &scores, s, 0);
        }
        qs.push(q);
        ks.push(k);
        vs.push(v);
        probs.push(p_all);
    }
    let out = concat.matmul(params.require(&layer.o())?)?;
    let out = out.reshape(&[n, t, layer.d_out])?;
    let cache = AttentionCache {
        layer: layer.layer,
        batch: n,
        tokens: t,
        x,
        q: qs,
        k: ks,
        v: vs,
        probs,
        concat,
    };
    Ok((out, cache))
}

pub(crate) fn backward(
    layer: &MultiHeadAttentionLayer,
    params: &Params,
    cache: &AttentionCache,
    d_out: &Tensor,
    grads: &mut GradientSet,
) -> Result<Tensor> {
    let (n, t) = (cache.batch, cache.tokens);
    let d_out = d_out.clone().reshape(&[n * t, layer.d_out])?;
    let wo = params.require(&layer.o())?;
    grads.accumulate(layer.o(), cache.concat.t_matmul(&d_out)?)?;
    let d_concat = d_out.matmul_t(wo)?;
    let dh = layer.head_dim();
    let scale = layer.scale();
    let mut dx = Tensor::zeros(&[n * t, layer.d_in]);
    for h in 0..layer.heads {
        let d_head_all = d_concat.columns(h * dh, (h + 1) * dh)?;
        let mut dq = Tensor::zeros(&[n * t, dh]);
        let mut dk = Tensor::zeros(&[n * t, dh]);
        let mut dv = Tensor::zeros(&[n * t, dh]);
        for s in 0..n {
            let p = block(&cache.probs[h], s, t);
            let (qb, kb, vb) = (block(&cache.q[h], s, t), block(&cache.k[h], s, t), block(&cache.v[h], s, t));
            let d_head = block(&d_head_all, s, t);
            let dp = d_head.matmul_t(&vb)?;
            let dvb = p.t_matmul(&d_head)?;
            // Softmax Jacobian, row by row: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
            let mut ds = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let inner: f64 = (0..t).map(|j| dp.at(i, j) * p.at(i, j)).sum();
                for j in 0..t {
                    ds.set(i, j, p.at(i, j) * (dp.at(i, j) - inner) * scale);
                }
            }
            write_block(&mut dq, &ds.matmul(&kb)?, s, 0);
            write_block(&mut dk, &ds.t_matmul(&qb)?, s, 0);
            write_block(&mut dv, &dvb, s, 0);
        }
        for (id, d) in [(layer.q(h), &dq), (layer.k(h), &dk), (layer.v(h), &dv)] {
            grads.accumulate(id, cache.x.t_matmul(d)?)?;
            dx.axpy(1.0, &d.matmul_t(params.require(&id)?)?)?;
        }
    }
    dx.reshape(&[n, t, layer.d_in])
}
