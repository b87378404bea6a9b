//! Group-action teleportation for MLPs with bijective activations, used as a
//! correctness and runtime baseline.
//!
//! For adjacent dense layers `m−1, m` with hidden activations `A = σ(Z)`,
//! `Z = W_{m−1}·h̃`, the action of an invertible `g` is
//! `W_m[:, :d] ← W_m[:, :d]·g⁻¹` and
//! `W_{m−1} ← W_{m−1} + (σ⁻¹(g·A) − Z)·h̃⁺`, which leaves the batch outputs
//! unchanged whenever `h̃` has full column rank.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Targets};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, ForwardTrace, MlpSpec, ModelGraph};
use crate::objectives::{batch_loss, teleport_gradient_full, BatchObjective, LossKind};
use crate::params::ParamId;
use crate::projection::SIGMA_CLAMP;
use crate::rng::SeededRng;
use crate::svd::thin_svd;
use crate::teleport::{draw_batches, run_teleport_for_epoch, StepRecord, TeleportConfig, TeleportMethod, TeleportReport};
use crate::tensor::Tensor;

/// Moore–Penrose pseudo-inverse and numerical rank.
pub fn pinv_with_rank(a: &Tensor) -> Result<(Tensor, usize)> {
    let f = thin_svd(a)?;
    let smax = f.s.first().copied().unwrap_or(0.0);
    let mut rank = 0;
    // a⁺ = V · Σ⁺ · Uᵀ, built as (Σ⁺ Vt)ᵀ Uᵀ.
    let mut svt = f.vt.clone();
    for (i, &s) in f.s.iter().enumerate() {
        let inv = if s > 0.0 && s >= SIGMA_CLAMP * smax {
            rank += 1;
            1.0 / s
        } else {
            0.0
        };
        for j in 0..svt.cols() {
            let v = svt.at(i, j) * inv;
            svt.set(i, j, v);
        }
    }
    Ok((svt.t_matmul(&f.u.transpose()?)?, rank))
}

pub fn pinv(a: &Tensor) -> Result<Tensor> {
    Ok(pinv_with_rank(a)?.0)
}

/// Inverse by LU factorization with partial pivoting.
pub fn lu_inverse(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.rows() != a.cols() {
        return Err(shape_err("lu_inverse", "square", a.shape()));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.max_abs();
    if scale == 0.0 {
        return Err(Error::Singular);
    }
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| lu.at(i, k).abs().total_cmp(&lu.at(j, k).abs()).then(j.cmp(&i)))
            .expect("non-empty range");
        if lu.at(p, k).abs() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                let (x, y) = (lu.at(k, j), lu.at(p, j));
                lu.set(k, j, y);
                lu.set(p, j, x);
            }
        }
        let pivot = lu.at(k, k);
        for i in k + 1..n {
            let f = lu.at(i, k) / pivot;
            lu.set(i, k, f);
            for j in k + 1..n {
                let v = lu.at(i, j) - f * lu.at(k, j);
                lu.set(i, j, v);
            }
        }
    }
    let mut inv = Tensor::zeros(&[n, n]);
    for col in 0..n {
        // Solve L·U·x = P·e_col.
        let mut x: Vec<f64> = perm.iter().map(|&p| f64::from(u8::from(p == col))).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| lu.at(i, j) * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| lu.at(i, j) * x[j]).sum();
            x[i] = (x[i] - s) / lu.at(i, i);
        }
        for (i, v) in x.into_iter().enumerate() {
            inv.set(i, col, v);
        }
    }
    inv.check_finite("lu_inverse")?;
    Ok(inv)
}

/// Dense layer ids of an MLP whose hidden activations are all invertible.
fn mlp_layers(model: &ModelGraph) -> Result<Vec<(ParamId, usize, Activation)>> {
    let chain = model
        .dense_chain()
        .ok_or_else(|| Error::InvalidArgument("symmetry teleport needs a plain MLP".into()))?;
    let last = chain.len().saturating_sub(1);
    for d in &chain[..last] {
        if !d.activation.is_bijective() {
            return Err(Error::InvalidArgument(format!(
                "symmetry teleport needs invertible hidden activations, {} has {:?}",
                d.w, d.activation
            )));
        }
    }
    Ok(chain.iter().map(|d| (d.w, d.d_out, d.activation)).collect())
}

/// Per-pair quantities captured from one forward pass.
struct PairState {
    /// Index of the second layer of the pair.
    m: usize,
    z: Tensor,
    a: Tensor,
    h_pinv: Tensor,
}

fn pair_state(
    trace: &ForwardTrace,
    layers: &[(ParamId, usize, Activation)],
    m: usize,
) -> Result<std::result::Result<PairState, usize>> {
    let (prev, _, act) = layers[m - 1];
    let x = trace
        .captured_rows(&prev)
        .ok_or_else(|| Error::MissingCapture(prev.to_string()))?;
    let z = trace
        .dense_preactivation(&prev)
        .ok_or_else(|| Error::MissingCapture(prev.to_string()))?
        .clone();
    let (h_pinv, rank) = pinv_with_rank(&x.transpose()?)?;
    if rank < x.rows() {
        return Ok(Err(rank));
    }
    let a = z.map(|v| act.apply(v).expect("element-wise activation"));
    Ok(Ok(PairState { m, z, a, h_pinv }))
}

/// Applies `g` to the pair `(m−1, m)` using activations captured before any
/// action in this step. Returns the number of inverses computed.
fn act_on_pair(model: &mut ModelGraph, layers: &[(ParamId, usize, Activation)], st: &PairState, g: &Tensor) -> Result<usize> {
    if *g == Tensor::eye(g.rows()) {
        return Ok(0);
    }
    let (prev, d, act) = layers[st.m - 1];
    let (next, _, _) = layers[st.m];
    let g_inv = lu_inverse(g)?;
    let ga = st.a.matmul_t(g)?;
    let z_new = ga.map(|v| act.inverse(v).expect("bijective activation"));
    let delta = z_new.sub(&st.z)?.t_matmul(&st.h_pinv)?;
    let params = model.params_mut();
    let w_next = params.get_mut(&next).expect("validated layer");
    let head = w_next.columns(0, d)?.matmul(&g_inv)?;
    let cols = w_next.cols();
    for i in 0..w_next.rows() {
        for j in 0..d {
            w_next.data_mut()[i * cols + j] = head.at(i, j);
        }
    }
    params.get_mut(&prev).expect("validated layer").axpy(1.0, &delta)?;
    Ok(1)
}

/// Applies `g` to the hidden layer between dense layers `m−1` and `m`
/// (0-based `m ≥ 1`), keeping the batch outputs that produced `trace`.
pub fn apply_group_action(model: &mut ModelGraph, m: usize, g: &Tensor, trace: &ForwardTrace) -> Result<()> {
    let layers = mlp_layers(model)?;
    if m == 0 || m >= layers.len() {
        return Err(Error::InvalidArgument(format!("no layer pair ending at {m}")));
    }
    let d = layers[m - 1].1;
    if g.shape() != [d, d] {
        return Err(shape_err("apply_group_action", [d, d], g.shape()));
    }
    if trace.version != model.version() {
        return Err(Error::StaleTrace {
            trace: trace.version,
            model: model.version(),
        });
    }
    match pair_state(trace, &layers, m)? {
        Ok(st) => act_on_pair(model, &layers, &st, g).map(|_| ()),
        Err(rank) => Err(Error::RankDeficient {
            rank,
            needed: trace.outputs.rows(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryStep {
    pub loss: f64,
    pub loss_after: f64,
    pub grad_norm_sq: f64,
    pub cap_hit: bool,
    /// Pairs (by second layer index) skipped for a rank-deficient `h̃`.
    pub skipped: Vec<usize>,
    pub inverse_calls: usize,
    pub direction_norm: f64,
}

/// One ascent step on every `M_m` (from `M = 0`), then the actions
/// `g_m = I + lr·∂F/∂M_m` applied from the last pair to the first.
pub fn symmetry_teleport_step(
    model: &mut ModelGraph,
    batch: &Batch,
    kind: LossKind,
    lr: f64,
    cap: f64,
    fd_step_scale: f64,
) -> Result<SymmetryStep> {
    let layers = mlp_layers(model)?;
    let trace = model.forward(&batch.inputs)?;
    let tg = {
        let mut obj = BatchObjective { model, batch, kind };
        teleport_gradient_full(&mut obj, fd_step_scale)?
    };
    let mut out = SymmetryStep {
        loss: tg.loss,
        loss_after: tg.loss,
        grad_norm_sq: tg.grad_norm_sq,
        cap_hit: tg.grad_norm_sq.is_nan() || tg.grad_norm_sq >= cap,
        skipped: Vec::new(),
        inverse_calls: 0,
        direction_norm: 0.0,
    };
    if out.cap_hit {
        return Ok(out);
    }
    let mut actions = Vec::new();
    let mut norm_sq = 0.0;
    for m in 1..layers.len() {
        out.inverse_calls += 1;
        let st = match pair_state(&trace, &layers, m)? {
            Ok(st) => st,
            Err(_) => {
                out.skipped.push(m);
                continue;
            }
        };
        let (prev, d, act) = layers[m - 1];
        let (next, _, _) = layers[m];
        let g_next = tg.hvp.get(&next).expect("gradient for every layer").columns(0, d)?;
        let w_next = model.params().require(&next)?.columns(0, d)?;
        let g_prev = tg.hvp.get(&prev).expect("gradient for every layer");
        // ∂F/∂M = −W_mᵀ·G_m + [(G_{m−1}·h̃⁺ᵀ) ⊘ σ'(Z)]·A, in column convention.
        let through = g_prev.matmul_t(&st.h_pinv)?;
        let through = through.zip_map(&st.z.transpose()?, "symmetry_step", |v, z| {
            v / act.derivative(z).expect("element-wise activation")
        })?;
        let dm = through.matmul(&st.a)?.sub(&w_next.t_matmul(&g_next)?)?;
        norm_sq += dm.frobenius_norm_sq();
        let g = Tensor::eye(d).add(&dm.scale(lr))?;
        actions.push((st, g));
    }
    out.direction_norm = norm_sq.sqrt();
    for (st, g) in actions.iter().rev() {
        out.inverse_calls += act_on_pair(model, &layers, st, g)?;
    }
    out.loss_after = batch_loss(model, batch, kind)?;
    Ok(out)
}

pub fn run_symmetry_for_epoch(
    model: &mut ModelGraph,
    dataset: &Dataset,
    kind: LossKind,
    cfg: &TeleportConfig,
    rng: &mut SeededRng,
) -> Result<TeleportReport> {
    mlp_layers(model)?;
    let mut report = TeleportReport::default();
    if cfg.batches == 0 || cfg.steps == 0 {
        return Ok(report);
    }
    let start = Instant::now();
    let before = model.params().clone();
    for (b, idx) in draw_batches(dataset.len(), cfg.batch_size, cfg.batches, rng)?.into_iter().enumerate() {
        let batch = dataset.batch(&idx);
        for s in 0..cfg.steps {
            let st = symmetry_teleport_step(model, &batch, kind, cfg.eta, cfg.cap, cfg.fd_step_scale)?;
            report.inverse_calls += st.inverse_calls;
            report.steps.push(StepRecord {
                batch: b,
                step: s,
                grad_norm_sq: st.grad_norm_sq,
                loss: st.loss,
                loss_after: st.loss_after,
                ranks: Vec::new(),
                projected_norm: st.direction_norm,
                cap_hit: st.cap_hit,
                elapsed: start.elapsed().as_secs_f64(),
            });
            if st.cap_hit {
                break;
            }
        }
    }
    report.displacement_sq = model.params().distance_sq(&before)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    Nullspace,
    Symmetry,
}

/// Dimensions of a runtime probe: steps `t`, width `d`, batch size `n`,
/// weight layers `l` and batches `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeDims {
    pub t: usize,
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub method: ProbeMethod,
    pub dims: ProbeDims,
    /// Median over the timed runs.
    pub seconds: f64,
    pub svd_calls: usize,
    pub inverse_calls: usize,
}

pub const PROBE_REPEATS: usize = 3;

/// Times the teleport phase alone on a width-`d` leaky-relu MLP with `l`
/// weight layers, random inputs and `b·n` samples.
pub fn runtime_probe(method: ProbeMethod, dims: ProbeDims, seed: u64) -> Result<ProbeResult> {
    if dims.l < 2 || dims.d == 0 || dims.n == 0 {
        return Err(Error::InvalidArgument("probe needs l >= 2 and positive d, n".into()));
    }
    let mut rng = SeededRng::new(seed);
    let spec = MlpSpec {
        input_dim: dims.d,
        hidden: vec![dims.d; dims.l - 1],
        output_dim: 10,
        activation: Activation::LeakyRelu { alpha: 0.1 },
    };
    let model = spec.build(&mut rng)?;
    let count = (dims.b * dims.n).max(dims.n);
    let x = rng.normal(&[count, dims.d]);
    let labels = (0..count).map(|_| rng.below(10)).collect();
    let data = Dataset::new("probe", x, Targets::Classes { labels, classes: 10 })?;
    let cfg = TeleportConfig {
        eta: 1e-3,
        batches: dims.b,
        steps: dims.t,
        cap: f64::INFINITY,
        batch_size: dims.n,
        method: match method {
            ProbeMethod::Nullspace => TeleportMethod::Nullspace,
            ProbeMethod::Symmetry => TeleportMethod::Symmetry,
        },
        ..TeleportConfig::default()
    };
    let mut times = Vec::with_capacity(PROBE_REPEATS);
    let mut last = TeleportReport::default();
    for rep in 0..PROBE_REPEATS {
        let mut m = model.clone();
        let mut r = SeededRng::with_stream(seed, rep as u64);
        let start = Instant::now();
        last = run_teleport_for_epoch(&mut m, &data, LossKind::CrossEntropy, &cfg, &mut r)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(ProbeResult {
        method,
        dims,
        seconds: times[times.len() / 2],
        svd_calls: last.svd_calls,
        inverse_calls: last.inverse_calls,
    })
}
