//! Builders for the three model families, with uniform `±1/√fan_in` init.

use serde::{Deserialize, Serialize};

use super::{Activation, Conv2dLayer, DenseLayer, ModelGraph, MultiHeadAttentionLayer, Node};
use crate::error::{Error, Result};
use crate::params::{ParamId, Params, Slot};
use crate::rng::SeededRng;

fn init(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> crate::tensor::Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform(shape, -bound, bound)
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn build(&self, rng: &mut SeededRng) -> Result<ModelGraph> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("MLP widths must be positive".into()));
        }
        let dims: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect();
        let mut nodes = Vec::new();
        let mut params = Params::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let last = i + 2 == dims.len();
            let id = ParamId::dense(i as u32);
            params.insert(id, init(rng, &[pair[1], pair[0] + 1], pair[0]));
            nodes.push(Node::Dense(DenseLayer {
                w: id,
                d_in: pair[0],
                d_out: pair[1],
                activation: if last { Activation::Identity } else { self.activation },
            }));
        }
        ModelGraph::new(nodes, params, vec![self.input_dim])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv layer.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub padding: usize,
    #[serde(default)]
    pub pool: Option<usize>,
    pub classes: usize,
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

impl CnnSpec {
    pub fn build(&self, rng: &mut SeededRng) -> Result<ModelGraph> {
        if self.channels.is_empty() || self.classes == 0 {
            return Err(Error::InvalidArgument("CNN needs at least one conv layer and one class".into()));
        }
        let mut nodes = Vec::new();
        let mut params = Params::new();
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        for (i, &co) in self.channels.iter().enumerate() {
            let geometry = super::ConvGeometry {
                channels: c,
                height: h,
                width: w,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            };
            geometry.validate()?;
            let id = ParamId::new(i as u32, Slot::ConvW);
            let fan_in = geometry.patch_len();
            params.insert(id, init(rng, &[fan_in, co], fan_in));
            nodes.push(Node::Conv2d(Conv2dLayer {
                w: id,
                in_channels: c,
                out_channels: co,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
                activation: Activation::Relu,
                pool: self.pool,
            }));
            (c, h, w) = (co, geometry.out_height(), geometry.out_width());
            if let Some(win) = self.pool.filter(|&p| p > 1) {
                (h, w) = (h / win, w / win);
            }
            if h == 0 || w == 0 {
                return Err(Error::InvalidArgument(format!("conv stack collapses the image at layer {i}")));
            }
        }
        nodes.push(Node::Flatten);
        let flat = c * h * w;
        let id = ParamId::dense(self.channels.len() as u32);
        params.insert(id, init(rng, &[self.classes, flat + 1], flat));
        nodes.push(Node::Dense(DenseLayer {
            w: id,
            d_in: flat,
            d_out: self.classes,
            activation: Activation::Identity,
        }));
        ModelGraph::new(nodes, params, vec![self.in_channels, self.height, self.width])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

/// Token-wise input projection, `blocks` transformer blocks, token pooling
/// and a dense head. Each block is `x + Attn(x)` followed by
/// `x + Dense(relu(Dense(x)))`; there is no layer normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub tokens: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    pub outputs: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub causal: bool,
}

impl TransformerSpec {
    pub fn build(&self, rng: &mut SeededRng) -> Result<ModelGraph> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model dim {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.tokens == 0 || self.d_in == 0 || self.ff_hidden == 0 || self.outputs == 0 {
            return Err(Error::InvalidArgument("transformer extents must be positive".into()));
        }
        let d = self.d_model;
        let mut nodes = Vec::new();
        let mut params = Params::new();
        let mut layer = 0u32;
        let dense = |params: &mut Params, rng: &mut SeededRng, layer: &mut u32, d_in, d_out, activation| {
            let id = ParamId::dense(*layer);
            *layer += 1;
            params.insert(id, init(rng, &[d_out, d_in + 1], d_in));
            Node::Dense(DenseLayer { w: id, d_in, d_out, activation })
        };
        nodes.push(dense(&mut params, rng, &mut layer, self.d_in, d, Activation::Identity));
        for _ in 0..self.blocks {
            let attn = MultiHeadAttentionLayer {
                layer,
                heads: self.heads,
                d_in: d,
                d_model: d,
                d_out: d,
                causal: self.causal,
            };
            layer += 1;
            for id in attn.qkv_ids() {
                params.insert(id, init(rng, &[d, attn.head_dim()], d));
            }
            params.insert(attn.o(), init(rng, &[d, d], d));
            nodes.push(Node::Residual(vec![Node::Attention(attn)]));
            let up = dense(&mut params, rng, &mut layer, d, self.ff_hidden, Activation::Relu);
            let down = dense(&mut params, rng, &mut layer, self.ff_hidden, d, Activation::Identity);
            nodes.push(Node::Residual(vec![up, down]));
        }
        nodes.push(match self.pooling {
            Pooling::Mean => Node::MeanPoolTokens,
            Pooling::Last => Node::LastToken,
        });
        nodes.push(dense(&mut params, rng, &mut layer, d, self.outputs, Activation::Identity));
        ModelGraph::new(nodes, params, vec![self.tokens, self.d_in])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_layer_count_and_shapes() {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![3, 2],
            output_dim: 2,
            activation: Activation::Relu,
        };
        let m = spec.build(&mut SeededRng::new(0)).unwrap();
        assert_eq!(m.params().len(), 3);
        assert_eq!(m.params().get(&ParamId::dense(0)).unwrap().shape(), &[3, 5]);
        assert_eq!(m.dense_chain().unwrap().len(), 3);
    }

    #[test]
    fn cnn_output_shape() {
        let spec = CnnSpec {
            in_channels: 1,
            height: 8,
            width: 8,
            channels: vec![4, 8],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: Some(2),
            classes: 10,
        };
        let m = spec.build(&mut SeededRng::new(0)).unwrap();
        let out = m.predict(&crate::tensor::Tensor::zeros(&[3, 1, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[3, 10]);
        assert_eq!(m.params().get(&ParamId::dense(2)).unwrap().shape(), &[10, 33]);
    }

    #[test]
    fn transformer_groups() {
        let spec = TransformerSpec {
            tokens: 16,
            d_in: 1,
            d_model: 8,
            heads: 2,
            ff_hidden: 16,
            blocks: 1,
            outputs: 10,
            pooling: Pooling::Mean,
            causal: false,
        };
        let m = spec.build(&mut SeededRng::new(0)).unwrap();
        let groups = m.param_groups();
        // input projection, qkv, o, ff up, ff down, head
        assert_eq!(groups.len(), 6);
        assert_eq!(groups[1].members.len(), 6);
        let out = m.predict(&crate::tensor::Tensor::zeros(&[2, 16, 1])).unwrap();
        assert_eq!(out.shape(), &[2, 10]);
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let spec = TransformerSpec {
            tokens: 4,
            d_in: 1,
            d_model: 6,
            heads: 4,
            ff_hidden: 4,
            blocks: 1,
            outputs: 2,
            pooling: Pooling::Mean,
            causal: false,
        };
        assert!(spec.build(&mut SeededRng::new(0)).is_err());
    }
}
