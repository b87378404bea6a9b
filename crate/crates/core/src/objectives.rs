//! Primary losses, the teleport objective `½‖∇L‖²` and its gradient `H·∇L`
//! by central differences of first-order gradients.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Targets};
use crate::error::{shape_err, Error, Result};
use crate::nn::ModelGraph;
use crate::params::{grad_norm_sq, GradientSet, Params};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy on logits against class indices.
    CrossEntropy,
    /// Batch mean of `½‖y − t‖²`.
    Mse,
}

/// Batch-mean loss and its gradient with respect to the outputs.
pub fn loss_and_grad(outputs: &Tensor, targets: &Targets, kind: LossKind) -> Result<(f64, Tensor)> {
    if outputs.ndim() != 2 {
        return Err(shape_err("loss", "N x C", outputs.shape()));
    }
    let (n, c) = (outputs.rows(), outputs.cols());
    if targets.len() != n {
        return Err(shape_err("loss", n, targets.len()));
    }
    if n == 0 {
        return Err(Error::Empty { op: "loss" });
    }
    let inv_n = 1.0 / n as f64;
    let mut d = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            for (i, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(Error::ClassOutOfRange { index: label, classes: c });
                }
                let row = outputs.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[label];
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - lse).exp();
                    d.set(i, j, (p - f64::from(u8::from(j == label))) * inv_n);
                }
            }
        }
        (LossKind::Mse, Targets::Values(t)) => {
            if t.shape() != outputs.shape() {
                return Err(shape_err("mse", outputs.shape(), t.shape()));
            }
            for (k, (y, t)) in outputs.data().iter().zip(t.data()).enumerate() {
                let r = y - t;
                total += 0.5 * r * r;
                d.data_mut()[k] = r * inv_n;
            }
        }
        (LossKind::CrossEntropy, _) => {
            return Err(Error::InvalidArgument("cross-entropy needs class targets".into()))
        }
        (LossKind::Mse, _) => return Err(Error::InvalidArgument("mse needs value targets".into())),
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok((loss, d))
}

pub fn loss_value(outputs: &Tensor, targets: &Targets, kind: LossKind) -> Result<f64> {
    Ok(loss_and_grad(outputs, targets, kind)?.0)
}

/// Fraction of rows whose arg-max matches the label; `None` for regression.
pub fn accuracy(outputs: &Tensor, targets: &Targets) -> Option<f64> {
    let Targets::Classes { labels, .. } = targets else {
        return None;
    };
    if labels.is_empty() {
        return None;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = outputs.row(i);
            // First maximum wins, matching a stable arg-max.
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == l
        })
        .count();
    Some(hits as f64 / labels.len() as f64)
}

pub fn batch_loss(model: &ModelGraph, batch: &Batch, kind: LossKind) -> Result<f64> {
    loss_value(&model.predict(&batch.inputs)?, &batch.targets, kind)
}

pub fn primary_gradient(model: &ModelGraph, batch: &Batch, kind: LossKind) -> Result<(f64, GradientSet)> {
    let trace = model.forward(&batch.inputs)?;
    let (loss, d) = loss_and_grad(&trace.outputs, &batch.targets, kind)?;
    Ok((loss, model.backward(&trace, &d)?))
}

/// Anything with parameters and a first-order gradient oracle.
pub trait Objective {
    fn params(&self) -> &Params;
    fn set_params(&mut self, params: Params) -> Result<()>;
    /// Loss and gradient at the current parameters.
    fn gradient(&self) -> Result<(f64, GradientSet)>;
}

/// A model paired with a fixed batch and loss.
pub struct BatchObjective<'a> {
    pub model: &'a mut ModelGraph,
    pub batch: &'a Batch,
    pub kind: LossKind,
}

impl Objective for BatchObjective<'_> {
    fn params(&self) -> &Params {
        self.model.params()
    }

    fn set_params(&mut self, params: Params) -> Result<()> {
        self.model.set_params(params)
    }

    fn gradient(&self) -> Result<(f64, GradientSet)> {
        primary_gradient(self.model, self.batch, self.kind)
    }
}

/// Everything one teleport-gradient evaluation produces.
#[derive(Clone, Debug)]
pub struct TeleportGradient {
    pub loss: f64,
    /// Primary gradient `∇L` at the unperturbed point.
    pub grad: GradientSet,
    pub grad_norm_sq: f64,
    /// `H·∇L`, the gradient of `½‖∇L‖²`.
    pub hvp: GradientSet,
}

/// `H·∇L` as `‖∇L‖ · (∇L(w + εu) − ∇L(w − εu)) / 2ε` with `u = ∇L/‖∇L‖`
/// and `ε = fd_step_scale · (1 + ‖w‖)`. Parameters are restored bit-exactly.
pub fn teleport_gradient_full<O: Objective>(obj: &mut O, fd_step_scale: f64) -> Result<TeleportGradient> {
    let (loss, grad) = obj.gradient()?;
    grad.check_finite("teleport_gradient")?;
    let gsq = grad_norm_sq(&grad);
    if gsq == 0.0 {
        let hvp = grad.scaled(0.0);
        return Ok(TeleportGradient {
            loss,
            grad,
            grad_norm_sq: 0.0,
            hvp,
        });
    }
    let gnorm = gsq.sqrt();
    let saved = obj.params().clone();
    let base = 1.0 + saved.norm_sq().sqrt();
    let eps = fd_step_scale * base;
    if !(eps.is_finite() && eps > 0.0) || base + eps == base {
        return Err(Error::StepUnderflow(eps));
    }
    let step = eps / gnorm;
    let mut eval = |alpha: f64| -> Result<GradientSet> {
        let mut p = saved.clone();
        p.axpy(alpha, &grad)?;
        obj.set_params(p)?;
        let (_, g) = obj.gradient()?;
        g.check_finite("teleport_gradient")?;
        Ok(g)
    };
    let plus = eval(step);
    let minus = plus.as_ref().ok().map(|_| eval(-step));
    obj.set_params(saved)?;
    let (plus, minus) = (plus?, minus.expect("evaluated after plus")?);
    let hvp = plus.diff_scaled(&minus, gnorm / (2.0 * eps))?;
    hvp.check_finite("teleport_gradient")?;
    Ok(TeleportGradient {
        loss,
        grad,
        grad_norm_sq: gsq,
        hvp,
    })
}

pub fn teleport_gradient(model: &mut ModelGraph, batch: &Batch, kind: LossKind, fd_step_scale: f64) -> Result<GradientSet> {
    let mut obj = BatchObjective { model, batch, kind };
    Ok(teleport_gradient_full(&mut obj, fd_step_scale)?.hvp)
}
