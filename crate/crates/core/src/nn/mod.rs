//! Models as explicit node lists with a hand-written forward pass (which
//! records the operand multiplying every weight) and reverse pass.
//!
//! Activations flow as tensors whose leading axis is the batch:
//! `[N, d]` for MLPs, `[N, C, h, w]` for CNNs and `[N, T, D]` for token
//! sequences. Dense layers act on the last axis, so the same layer type
//! serves as an MLP layer and as a token-wise feed-forward layer.

pub mod attention;
pub mod blob;
pub mod build;
pub mod conv;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{GradientSet, ParamId, Params};
use crate::projection::Side;
use crate::tensor::Tensor;

pub use attention::{AttentionCache, MultiHeadAttentionLayer};
pub use build::{CnnSpec, MlpSpec, Pooling, TransformerSpec};
pub use conv::{col2im, im2col, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Identity,
    /// Row-wise softmax over the last axis.
    Softmax,
}

impl Activation {
    fn forward(&self, z: &Tensor) -> Tensor {
        match *self {
            Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::LeakyRelu { alpha } => z.map(|v| if v > 0.0 { v } else { alpha * v }),
            Activation::Identity => z.clone(),
            Activation::Softmax => {
                let mut y = z.clone();
                let c = *z.shape().last().unwrap_or(&1);
                for row in y.data_mut().chunks_mut(c.max(1)) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                y
            }
        }
    }

    /// `dL/dz` from `dL/dy`. The ReLU subgradient at zero is zero.
    fn backward(&self, dy: &Tensor, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        match *self {
            Activation::Relu => dy.zip_map(z, "relu'", |d, v| if v > 0.0 { d } else { 0.0 }),
            Activation::LeakyRelu { alpha } => dy.zip_map(z, "leaky_relu'", |d, v| if v > 0.0 { d } else { alpha * d }),
            Activation::Identity => Ok(dy.clone()),
            Activation::Softmax => {
                let c = *y.shape().last().unwrap_or(&1);
                let mut dz = dy.clone();
                for (drow, yrow) in dz.data_mut().chunks_mut(c.max(1)).zip(y.data().chunks(c.max(1))) {
                    let inner: f64 = drow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                    for (d, p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - inner);
                    }
                }
                dz.check_finite("softmax'")?;
                Ok(dz)
            }
        }
    }

    /// `σ'(z)` for element-wise activations.
    pub fn derivative(&self, z: f64) -> Option<f64> {
        match *self {
            Activation::Relu => Some(if z > 0.0 { 1.0 } else { 0.0 }),
            Activation::LeakyRelu { alpha } => Some(if z > 0.0 { 1.0 } else { alpha }),
            Activation::Identity => Some(1.0),
            Activation::Softmax => None,
        }
    }

    pub fn apply(&self, z: f64) -> Option<f64> {
        match *self {
            Activation::Relu => Some(z.max(0.0)),
            Activation::LeakyRelu { alpha } => Some(if z > 0.0 { z } else { alpha * z }),
            Activation::Identity => Some(z),
            Activation::Softmax => None,
        }
    }

    /// `σ⁻¹(y)`, defined only for bijective activations.
    pub fn inverse(&self, y: f64) -> Option<f64> {
        match *self {
            Activation::LeakyRelu { alpha } if alpha > 0.0 => Some(if y >= 0.0 { y } else { y / alpha }),
            Activation::Identity => Some(y),
            _ => None,
        }
    }

    pub fn is_bijective(&self) -> bool {
        matches!(*self, Activation::Identity) || matches!(*self, Activation::LeakyRelu { alpha } if alpha > 0.0)
    }
}

/// Fully connected layer with the bias folded into the last weight column:
/// `w` is `d_out x (d_in + 1)` and inputs are extended with a trailing 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

/// Bias-free convolution with weights stored as `(C_i·k·k) x C_o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub pool: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Attention(MultiHeadAttentionLayer),
    /// `y = x + f(x)` with `f` the inner node list.
    Residual(Vec<Node>),
    Flatten,
    /// `[N, T, D] -> [N, D]` by averaging over tokens.
    MeanPoolTokens,
    /// `[N, T, D] -> [N, D]` keeping the final token.
    LastToken,
}

#[derive(Clone, Debug)]
pub enum NodeCache {
    Dense {
        w: ParamId,
        in_shape: Vec<usize>,
        /// Homogeneous input `[x | 1]`, one row per sample or token.
        x_h: Tensor,
        z: Tensor,
        y: Tensor,
    },
    Conv {
        w: ParamId,
        batch: usize,
        geometry: ConvGeometry,
        /// Stacked per-sample im2col matrices, `(N·h_o·w_o) x (C_i·k·k)`.
        cols: Tensor,
        z: Tensor,
        y: Tensor,
        pool_argmax: Option<Vec<usize>>,
    },
    Attention(AttentionCache),
    Residual(Vec<NodeCache>),
    Reshape {
        in_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Parameter version the trace was recorded at.
    pub version: u64,
    pub caches: Vec<NodeCache>,
    pub outputs: Tensor,
}

/// Parameters that share one input representation, and which side of the
/// weight that input multiplies.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub key: ParamId,
    pub members: Vec<ParamId>,
    pub side: Side,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    params: Params,
    /// Per-sample input shape (the batch axis excluded).
    input_shape: Vec<usize>,
    version: u64,
}

impl ModelGraph {
    /// Assembles a graph and checks every referenced parameter exists with
    /// the right shape and is referenced exactly once.
    pub fn new(nodes: Vec<Node>, params: Params, input_shape: Vec<usize>) -> Result<Self> {
        let model = ModelGraph {
            nodes,
            params,
            input_shape,
            version: 0,
        };
        let mut seen = Vec::new();
        collect_ids(&model.nodes, &mut seen);
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != seen.len() {
            return Err(Error::InvalidArgument("a parameter is referenced more than once".into()));
        }
        if sorted.len() != model.params.len() || !sorted.iter().zip(model.params.ids()).all(|(a, b)| a == b) {
            return Err(Error::InvalidArgument("parameter table does not match the graph".into()));
        }
        for (id, shape) in expected_shapes(&model.nodes) {
            let got = model.params.require(&id)?;
            if got.shape() != shape.as_slice() {
                return Err(shape_err("ModelGraph::new", shape, got.shape()));
            }
        }
        Ok(model)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access; bumps the version so older traces go stale.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    /// Replaces all parameters, keeping shapes.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape_err("set_params", self.params.len(), params.len()));
        }
        for (id, p) in params.iter() {
            let cur = self.params.require(id)?;
            if cur.shape() != p.shape() {
                return Err(shape_err("set_params", cur.shape(), p.shape()));
            }
        }
        self.version += 1;
        self.params = params;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.len()).sum()
    }

    /// Groups of teleportable parameters, in graph order. Attention q/k/v of
    /// one layer share a group; the attention output projection forms its own.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        groups_of(&self.nodes, &mut out);
        out
    }

    /// Dense layers in order, or `None` if the graph is not a plain MLP.
    pub fn dense_chain(&self) -> Option<Vec<&DenseLayer>> {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Dense(d) => Some(d),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<ForwardTrace> {
        if inputs.ndim() != self.input_shape.len() + 1 || inputs.shape()[1..] != self.input_shape[..] {
            return Err(shape_err("forward", ["N"].iter().map(|s| s.to_string()).chain(self.input_shape.iter().map(|d| d.to_string())).collect::<Vec<_>>(), inputs.shape()));
        }
        let (outputs, caches) = forward_nodes(&self.nodes, &self.params, inputs.clone())?;
        Ok(ForwardTrace {
            version: self.version,
            caches,
            outputs,
        })
    }

    /// Outputs only.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.forward(inputs)?.outputs)
    }

    pub fn backward(&self, trace: &ForwardTrace, d_outputs: &Tensor) -> Result<GradientSet> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        if d_outputs.shape() != trace.outputs.shape() {
            return Err(shape_err("backward", trace.outputs.shape(), d_outputs.shape()));
        }
        let mut grads = GradientSet::new();
        backward_nodes(&self.nodes, &self.params, &trace.caches, d_outputs.clone(), &mut grads)?;
        grads.check_finite("backward")?;
        Ok(grads)
    }
}

pub fn forward(model: &ModelGraph, batch_inputs: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let trace = model.forward(batch_inputs)?;
    Ok((trace.outputs.clone(), trace))
}

pub fn backward(model: &ModelGraph, trace: &ForwardTrace, d_outputs: &Tensor) -> Result<GradientSet> {
    model.backward(trace, d_outputs)
}

impl ForwardTrace {
    /// The operand that multiplies `id` in the forward pass, one row per
    /// feature vector (sample, token or output position).
    pub fn captured_rows(&self, id: &ParamId) -> Option<&Tensor> {
        find_capture(&self.caches, id)
    }

    /// Pre-activation `Z` (one row per sample) of a top-level dense layer.
    pub fn dense_preactivation(&self, id: &ParamId) -> Option<&Tensor> {
        self.caches.iter().find_map(|c| match c {
            NodeCache::Dense { w, z, .. } if w == id => Some(z),
            _ => None,
        })
    }
}

fn collect_ids(nodes: &[Node], out: &mut Vec<ParamId>) {
    for n in nodes {
        match n {
            Node::Dense(d) => out.push(d.w),
            Node::Conv2d(c) => out.push(c.w),
            Node::Attention(a) => {
                out.extend(a.qkv_ids());
                out.push(a.o());
            }
            Node::Residual(inner) => collect_ids(inner, out),
            _ => {}
        }
    }
}

fn expected_shapes(nodes: &[Node]) -> Vec<(ParamId, Vec<usize>)> {
    let mut out = Vec::new();
    for n in nodes {
        match n {
            Node::Dense(d) => out.push((d.w, vec![d.d_out, d.d_in + 1])),
            Node::Conv2d(c) => out.push((c.w, vec![c.in_channels * c.kernel * c.kernel, c.out_channels])),
            Node::Attention(a) => {
                for id in a.qkv_ids() {
                    out.push((id, vec![a.d_in, a.head_dim()]));
                }
                out.push((a.o(), vec![a.d_model, a.d_out]));
            }
            Node::Residual(inner) => out.extend(expected_shapes(inner)),
            _ => {}
        }
    }
    out
}

fn groups_of(nodes: &[Node], out: &mut Vec<ParamGroup>) {
    for n in nodes {
        match n {
            Node::Dense(d) => out.push(ParamGroup {
                key: d.w,
                members: vec![d.w],
                side: Side::Right,
            }),
            Node::Conv2d(c) => out.push(ParamGroup {
                key: c.w,
                members: vec![c.w],
                side: Side::Left,
            }),
            Node::Attention(a) => {
                out.push(ParamGroup {
                    key: a.q(0),
                    members: a.qkv_ids(),
                    side: Side::Left,
                });
                out.push(ParamGroup {
                    key: a.o(),
                    members: vec![a.o()],
                    side: Side::Left,
                });
            }
            Node::Residual(inner) => groups_of(inner, out),
            _ => {}
        }
    }
}

fn find_capture<'a>(caches: &'a [NodeCache], id: &ParamId) -> Option<&'a Tensor> {
    use crate::params::Slot;
    for c in caches {
        let hit = match c {
            NodeCache::Dense { w, x_h, .. } => (w == id).then_some(x_h),
            NodeCache::Conv { w, cols, .. } => (w == id).then_some(cols),
            NodeCache::Attention(a) if a.layer == id.layer => match id.slot {
                Slot::AttnQ(_) | Slot::AttnK(_) | Slot::AttnV(_) => Some(&a.x),
                Slot::AttnO => Some(&a.concat),
                _ => None,
            },
            NodeCache::Residual(inner) => find_capture(inner, id),
            _ => None,
        };
        if hit.is_some() {
            return hit;
        }
    }
    None
}

fn forward_nodes(nodes: &[Node], params: &Params, mut x: Tensor) -> Result<(Tensor, Vec<NodeCache>)> {
    let mut caches = Vec::with_capacity(nodes.len());
    for node in nodes {
        let (y, cache) = forward_node(node, params, x)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

fn forward_node(node: &Node, params: &Params, x: Tensor) -> Result<(Tensor, NodeCache)> {
    match node {
        Node::Dense(d) => {
            let in_shape = x.shape().to_vec();
            if in_shape.last() != Some(&d.d_in) {
                return Err(shape_err("dense", d.d_in, &in_shape));
            }
            let rows = x.len() / d.d_in;
            let x_h = x.reshape(&[rows, d.d_in])?.with_ones_column()?;
            let z = x_h.matmul_t(params.require(&d.w)?)?;
            let y = d.activation.forward(&z);
            y.check_finite("dense activation")?;
            let mut out_shape = in_shape.clone();
            *out_shape.last_mut().expect("non-empty shape") = d.d_out;
            let out = y.clone().reshape(&out_shape)?;
            Ok((out, NodeCache::Dense { w: d.w, in_shape, x_h, z, y }))
        }
        Node::Conv2d(c) => conv_forward(c, params, x),
        Node::Attention(a) => {
            let (y, cache) = attention::forward(a, params, &x)?;
            Ok((y, NodeCache::Attention(cache)))
        }
        Node::Residual(inner) => {
            let (fx, caches) = forward_nodes(inner, params, x.clone())?;
            if fx.shape() != x.shape() {
                return Err(shape_err("residual", x.shape(), fx.shape()));
            }
            Ok((x.add(&fx)?, NodeCache::Residual(caches)))
        }
        Node::Flatten => {
            let in_shape = x.shape().to_vec();
            let n = in_shape[0];
            let rest = x.len() / n.max(1);
            Ok((x.reshape(&[n, rest])?, NodeCache::Reshape { in_shape }))
        }
        Node::MeanPoolTokens | Node::LastToken => {
            if x.ndim() != 3 {
                return Err(shape_err("token pooling", "N x T x D", x.shape()));
            }
            let in_shape = x.shape().to_vec();
            let (n, t, d) = (in_shape[0], in_shape[1], in_shape[2]);
            let mut out = Tensor::zeros(&[n, d]);
            for s in 0..n {
                for j in 0..d {
                    let v = if matches!(node, Node::MeanPoolTokens) {
                        (0..t).map(|i| x.data()[(s * t + i) * d + j]).sum::<f64>() / t as f64
                    } else {
                        x.data()[(s * t + t - 1) * d + j]
                    };
                    out.set(s, j, v);
                }
            }
            Ok((out, NodeCache::Reshape { in_shape }))
        }
    }
}

fn conv_forward(c: &Conv2dLayer, params: &Params, x: Tensor) -> Result<(Tensor, NodeCache)> {
    if x.ndim() != 4 || x.shape()[1] != c.in_channels {
        return Err(shape_err("conv2d", ["N", &c.in_channels.to_string(), "h", "w"], x.shape()));
    }
    let n = x.shape()[0];
    let geometry = ConvGeometry {
        channels: c.in_channels,
        height: x.shape()[2],
        width: x.shape()[3],
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
    };
    geometry.validate()?;
    let per = c.in_channels * geometry.height * geometry.width;
    let parts = (0..n)
        .map(|s| conv::im2col_slice(&x.data()[s * per..(s + 1) * per], &geometry))
        .collect::<Result<Vec<_>>>()?;
    let cols = if n == 0 {
        Tensor::zeros(&[0, geometry.patch_len()])
    } else {
        Tensor::vstack(&parts)?
    };
    let z = cols.matmul(params.require(&c.w)?)?;
    let y = c.activation.forward(&z);
    y.check_finite("conv activation")?;
    let (ho, wo, co) = (geometry.out_height(), geometry.out_width(), c.out_channels);
    let hw = ho * wo;
    // Rows are (sample, position); the image layout wants (sample, channel, position).
    let mut img = vec![0.0; n * co * hw];
    for s in 0..n {
        for p in 0..hw {
            for ch in 0..co {
                img[s * co * hw + ch * hw + p] = y.at(s * hw + p, ch);
            }
        }
    }
    let (out, pool_argmax) = match c.pool {
        Some(win) if win > 1 => {
            let (ph, pw) = (ho / win, wo / win);
            let mut vals = Vec::with_capacity(n * co * ph * pw);
            let mut idx = Vec::with_capacity(n * co * ph * pw);
            for s in 0..n {
                let (v, i) = conv::max_pool(&img[s * co * hw..(s + 1) * co * hw], co, ho, wo, win);
                vals.extend(v);
                idx.extend(i);
            }
            (Tensor::new(vec![n, co, ph, pw], vals)?, Some(idx))
        }
        _ => (Tensor::new(vec![n, co, ho, wo], img)?, None),
    };
    Ok((
        out,
        NodeCache::Conv {
            w: c.w,
            batch: n,
            geometry,
            cols,
            z,
            y,
            pool_argmax,
        },
    ))
}

fn backward_nodes(nodes: &[Node], params: &Params, caches: &[NodeCache], mut dy: Tensor, grads: &mut GradientSet) -> Result<Tensor> {
    for (node, cache) in nodes.iter().zip(caches).rev() {
        dy = backward_node(node, params, cache, dy, grads)?;
    }
    Ok(dy)
}

fn backward_node(node: &Node, params: &Params, cache: &NodeCache, dy: Tensor, grads: &mut GradientSet) -> Result<Tensor> {
    match (node, cache) {
        (Node::Dense(d), NodeCache::Dense { in_shape, x_h, z, y, .. }) => {
            let dy = dy.reshape(&[x_h.rows(), d.d_out])?;
            let dz = d.activation.backward(&dy, z, y)?;
            grads.accumulate(d.w, dz.t_matmul(x_h)?)?;
            let dx_h = dz.matmul(params.require(&d.w)?)?;
            dx_h.columns(0, d.d_in)?.reshape(in_shape)
        }
        (
            Node::Conv2d(c),
            NodeCache::Conv {
                batch,
                geometry,
                cols,
                z,
                y,
                pool_argmax,
                ..
            },
        ) => {
            let n = *batch;
            let (ho, wo, co) = (geometry.out_height(), geometry.out_width(), c.out_channels);
            let hw = ho * wo;
            let mut d_img = vec![0.0; n * co * hw];
            match pool_argmax {
                Some(idx) => {
                    let per_out = idx.len() / n.max(1);
                    for s in 0..n {
                        for k in 0..per_out {
                            d_img[s * co * hw + idx[s * per_out + k]] += dy.data()[s * per_out + k];
                        }
                    }
                }
                None => d_img.copy_from_slice(dy.data()),
            }
            let mut d_act = Tensor::zeros(&[n * hw, co]);
            for s in 0..n {
                for p in 0..hw {
                    for ch in 0..co {
                        d_act.set(s * hw + p, ch, d_img[s * co * hw + ch * hw + p]);
                    }
                }
            }
            let dz = c.activation.backward(&d_act, z, y)?;
            grads.accumulate(c.w, cols.t_matmul(&dz)?)?;
            let d_cols = dz.matmul_t(params.require(&c.w)?)?;
            let width = geometry.patch_len();
            let mut dx = Vec::with_capacity(n * c.in_channels * geometry.height * geometry.width);
            for s in 0..n {
                dx.extend(conv::col2im_slice(&d_cols.data()[s * hw * width..(s + 1) * hw * width], geometry)?);
            }
            Tensor::new(vec![n, c.in_channels, geometry.height, geometry.width], dx)
        }
        (Node::Attention(a), NodeCache::Attention(cache)) => attention::backward(a, params, cache, &dy, grads),
        (Node::Residual(inner), NodeCache::Residual(caches)) => {
            let d_inner = backward_nodes(inner, params, caches, dy.clone(), grads)?;
            dy.add(&d_inner)
        }
        (Node::Flatten, NodeCache::Reshape { in_shape }) => dy.reshape(in_shape),
        (Node::MeanPoolTokens | Node::LastToken, NodeCache::Reshape { in_shape }) => {
            let (n, t, d) = (in_shape[0], in_shape[1], in_shape[2]);
            let mut dx = Tensor::zeros(in_shape);
            let data = dx.data_mut();
            for s in 0..n {
                for j in 0..d {
                    let g = dy.data()[s * d + j];
                    if matches!(node, Node::MeanPoolTokens) {
                        for i in 0..t {
                            data[(s * t + i) * d + j] = g / t as f64;
                        }
                    } else {
                        data[(s * t + t - 1) * d + j] = g;
                    }
                }
            }
            Ok(dx)
        }
        _ => Err(Error::InvalidArgument("trace does not match the model graph".into())),
    }
}
