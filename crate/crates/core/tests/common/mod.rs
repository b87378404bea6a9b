//! Strategies and checks shared by the property tests and the acceptance
//! gate. Every check returns `Err` with a description on violation.
#![allow(dead_code)]

use std::path::PathBuf;

use nullport::objectives::{batch_loss, teleport_gradient_full, BatchObjective};
use nullport::projection::{core_basis, cumulative_energy, RepresentationMatrix};
use nullport::symmetry::apply_group_action;
use nullport::teleport::teleport_step;
use nullport::{
    build_all_bases, grad_norm_sq, primary_gradient, project, select_rank, thin_svd, Activation, Batch, CnnSpec,
    LossKind, MlpSpec, ModelGraph, ParamId, Pooling, SeededRng, Slot, Targets, TeleportConfig, Tensor,
    TransformerSpec,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub type Check = Result<(), TestCaseError>;

pub const CASES: u32 = 128;

pub fn config() -> ProptestConfig {
    ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Runs `check` over `CASES` draws of `strategy`.
pub fn run<S: Strategy>(strategy: S, check: impl Fn(S::Value) -> Check) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

pub fn mnist_dir() -> PathBuf {
    match std::env::var_os(nullport::data::DATA_DIR_ENV) {
        Some(d) => PathBuf::from(d).join("mnist-subset"),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset"),
    }
}

fn frob(a: &Tensor) -> f64 {
    a.frobenius_norm()
}

fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
    SeededRng::new(seed).normal(shape)
}

fn targets(seed: u64, n: usize, outputs: usize, kind: LossKind) -> Targets {
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    match kind {
        LossKind::CrossEntropy => Targets::Classes {
            labels: (0..n).map(|_| rng.below(outputs)).collect(),
            classes: outputs,
        },
        LossKind::Mse => Targets::Values(rng.normal(&[n, outputs])),
    }
}

fn loss_kind(ce: bool) -> LossKind {
    if ce {
        LossKind::CrossEntropy
    } else {
        LossKind::Mse
    }
}

fn activation(i: u8) -> Activation {
    match i % 3 {
        0 => Activation::Relu,
        1 => Activation::LeakyRelu { alpha: 0.2 },
        _ => Activation::Identity,
    }
}

/// Central differences over every scalar parameter, compared with
/// backprop as `‖g_fd − g‖ / max(‖g‖, 1e-8)`. Coordinates whose one-sided
/// slopes disagree straddle a relu or max-pool kink and are skipped; the
/// second value is the skipped fraction.
fn fd_relative_error(model: &mut ModelGraph, batch: &Batch, kind: LossKind) -> (f64, f64) {
    let (_, grads) = primary_gradient(model, batch, kind).unwrap();
    let ids: Vec<ParamId> = model.params().ids().copied().collect();
    let (mut diff, mut norm, mut skipped, mut total) = (0.0, 0.0, 0usize, 0usize);
    for id in ids {
        let len = model.params().require(&id).unwrap().len();
        for i in 0..len {
            let orig = model.params().require(&id).unwrap().data()[i];
            let h = 1e-6 * (1.0 + orig.abs());
            let mut at = |v: f64| {
                model.params_mut().get_mut(&id).unwrap().data_mut()[i] = v;
                batch_loss(model, batch, kind).unwrap()
            };
            let (up, down, mid) = (at(orig + h), at(orig - h), at(orig));
            let g = grads.get(&id).unwrap().data()[i];
            total += 1;
            if ((up - mid) - (mid - down)).abs() / h > 1e-4 * (1.0 + g.abs()) {
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g).powi(2);
            norm += g * g;
        }
    }
    (diff.sqrt() / norm.sqrt().max(1e-8), skipped as f64 / total as f64)
}

fn check_fd(model: &mut ModelGraph, batch: &Batch, kind: LossKind) -> Check {
    let (err, skipped) = fd_relative_error(model, batch, kind);
    prop_assert!(err <= 1e-5, "relative error {err:e}");
    prop_assert!(skipped <= 0.1, "skipped {skipped}");
    Ok(())
}

pub type SvdCase = (usize, usize, u64, usize);

pub fn svd_case() -> impl Strategy<Value = SvdCase> {
    (1usize..14, 1usize..14, any::<u64>(), 0usize..4)
}

pub fn check_svd((m, n, seed, rank_cut): SvdCase) -> Check {
    let mut a = gaussian(seed, &[m, n]);
    // Duplicate columns give exact rank deficiency in some cases.
    for j in 0..rank_cut.min(n.saturating_sub(1)) {
        for i in 0..m {
            let v = a.at(i, 0);
            a.set(i, n - 1 - j, v);
        }
    }
    let f = thin_svd(&a).unwrap();
    let r = f.s.len();
    prop_assert_eq!(r, m.min(n));
    prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]) && f.s.iter().all(|&s| s >= 0.0));
    let tol = 1e-10;
    // Columns for zero singular values are still unit vectors.
    let utu = f.u.t_matmul(&f.u).unwrap();
    let vvt = f.vt.matmul_t(&f.vt).unwrap();
    prop_assert!(frob(&utu.sub(&Tensor::eye(r)).unwrap()) <= tol, "UᵀU");
    prop_assert!(frob(&vvt.sub(&Tensor::eye(r)).unwrap()) <= tol, "VVᵀ");
    let usv = f.u.matmul(&Tensor::diag(&f.s)).unwrap().matmul(&f.vt).unwrap();
    prop_assert!(frob(&usv.sub(&a).unwrap()) <= tol * frob(&a).max(1.0), "reconstruction");
    Ok(())
}

pub type ProjectionCase = (usize, usize, usize, bool, usize, u64);

pub fn projection_case() -> impl Strategy<Value = ProjectionCase> {
    (2usize..12, 1usize..12, 1usize..6, any::<bool>(), 0usize..3, any::<u64>())
}

pub fn check_projection((features, columns, outs, left, tau_idx, seed): ProjectionCase) -> Check {
    let tau = [1.0, 0.99, 0.9][tau_idx];
    let owner = if left {
        ParamId::new(0, Slot::ConvW)
    } else {
        ParamId::dense(0)
    };
    let r = gaussian(seed, &[features, columns]);
    let basis = core_basis(&RepresentationMatrix { owner, mat: r.clone() }, tau).unwrap();
    let shape = if left { [features, outs] } else { [outs, features] };
    let g = gaussian(seed.wrapping_add(1), &shape);
    let p = project(&g, &basis).unwrap();
    let gn = frob(&g);
    let tol = 1e-10 * gn.max(1.0);
    prop_assert!(frob(&project(&p, &basis).unwrap().sub(&p).unwrap()) <= tol, "idempotence");
    prop_assert!(frob(&p) <= gn * (1.0 + 1e-12), "contraction");
    prop_assert!(p.dot(&g.sub(&p).unwrap()).unwrap().abs() <= tol * gn.max(1.0), "orthogonality");
    if tau == 1.0 {
        let applied = if left { r.t_matmul(&p).unwrap() } else { p.matmul(&r).unwrap() };
        prop_assert!(frob(&applied) <= 1e-10 * gn.max(1.0) * frob(&r).max(1.0), "annihilation");
    }
    Ok(())
}

pub type RankCase = (Vec<f64>, f64, f64);

pub fn rank_case() -> impl Strategy<Value = RankCase> {
    (prop::collection::vec(0.0f64..10.0, 0..16), 0.0f64..=1.0, 0.0f64..=1.0)
}

pub fn check_select_rank((raw, t1, t2): RankCase) -> Check {
    let mut sigma = raw;
    sigma.sort_by(|a, b| b.total_cmp(a));
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let (klo, khi) = (select_rank(&sigma, lo).unwrap(), select_rank(&sigma, hi).unwrap());
    prop_assert!(klo <= khi);
    let curve = cumulative_energy(&sigma);
    prop_assert!(curve.windows(2).all(|w| w[0] <= w[1] + 1e-15));
    if khi > 0 {
        prop_assert!(curve[khi - 1] >= hi - 1e-12);
    }
    prop_assert!(khi <= select_rank(&sigma, 1.0).unwrap());
    Ok(())
}

pub type MlpCase = (usize, Vec<usize>, usize, u8, bool, usize, u64);

pub fn mlp_case() -> impl Strategy<Value = MlpCase> {
    (
        1usize..6,
        prop::collection::vec(1usize..6, 0..3),
        2usize..5,
        any::<u8>(),
        any::<bool>(),
        1usize..6,
        any::<u64>(),
    )
}

pub fn check_mlp_backward((d_in, hidden, d_out, act, ce, n, seed): MlpCase) -> Check {
    let mut model = MlpSpec {
        input_dim: d_in,
        hidden,
        output_dim: d_out,
        activation: activation(act),
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let kind = loss_kind(ce);
    let batch = Batch {
        inputs: gaussian(seed.wrapping_add(1), &[n, d_in]),
        targets: targets(seed, n, d_out, kind),
    };
    check_fd(&mut model, &batch, kind)
}

pub type CnnCase = (usize, usize, Vec<usize>, bool, bool, usize, u64);

pub fn cnn_case() -> impl Strategy<Value = CnnCase> {
    (
        1usize..3,
        4usize..7,
        prop::collection::vec(1usize..4, 1..3),
        any::<bool>(),
        any::<bool>(),
        1usize..4,
        any::<u64>(),
    )
}

pub fn check_cnn_backward((in_channels, side, channels, pool, ce, n, seed): CnnCase) -> Check {
    let pool = if pool && channels.len() == 1 { Some(2) } else { None };
    let mut model = CnnSpec {
        in_channels,
        height: side,
        width: side,
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        pool,
        classes: 3,
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let kind = loss_kind(ce);
    let batch = Batch {
        inputs: gaussian(seed.wrapping_add(1), &[n, in_channels, side, side]),
        targets: targets(seed, n, 3, kind),
    };
    check_fd(&mut model, &batch, kind)
}

/// Tokens, input width, heads, head width, ff width, blocks, last-token
/// pooling, causal mask, cross-entropy, batch size, seed.
pub type TransformerCase = ((usize, usize, usize, usize, usize, usize), (bool, bool, bool, usize, u64));

pub fn transformer_case() -> impl Strategy<Value = TransformerCase> {
    (
        (1usize..5, 1usize..3, 1usize..3, 1usize..3, 2usize..5, 1usize..3),
        (any::<bool>(), any::<bool>(), any::<bool>(), 1usize..3, any::<u64>()),
    )
}

pub fn check_transformer_backward(case: TransformerCase) -> Check {
    let ((tokens, d_in, heads, head_dim, ff_hidden, blocks), (last, causal, ce, n, seed)) = case;
    let mut model = TransformerSpec {
        tokens,
        d_in,
        d_model: heads * head_dim,
        heads,
        ff_hidden,
        blocks,
        outputs: 3,
        pooling: if last { Pooling::Last } else { Pooling::Mean },
        causal,
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let kind = loss_kind(ce);
    let batch = Batch {
        inputs: gaussian(seed.wrapping_add(1), &[n, tokens, d_in]),
        targets: targets(seed, n, 3, kind),
    };
    check_fd(&mut model, &batch, kind)
}

pub type HvpCase = (usize, usize, bool, usize, u64);

pub fn hvp_case() -> impl Strategy<Value = HvpCase> {
    (2usize..6, 2usize..8, any::<bool>(), 2usize..8, any::<u64>())
}

/// `⟨H∇L, d⟩` against a difference quotient of `½‖∇L‖²` along a random
/// direction `d`, on a smooth model.
pub fn check_hvp((d_in, width, ce, n, seed): HvpCase) -> Check {
    let mut model = MlpSpec {
        input_dim: d_in,
        hidden: vec![width],
        output_dim: 3,
        activation: Activation::Identity,
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let kind = loss_kind(ce);
    let batch = Batch {
        inputs: gaussian(seed.wrapping_add(1), &[n, d_in]),
        targets: targets(seed, n, 3, kind),
    };
    let tg = {
        let mut obj = BatchObjective {
            model: &mut model,
            batch: &batch,
            kind,
        };
        teleport_gradient_full(&mut obj, 1e-6).unwrap()
    };
    let mut rng = SeededRng::new(seed.wrapping_add(2));
    let mut dir = tg.grad.scaled(0.0);
    for (id, g) in tg.grad.iter() {
        dir.insert(*id, rng.normal(g.shape()));
    }
    let predicted = tg.hvp.dot(&dir).unwrap();
    let saved = model.params().clone();
    let mut f = |alpha: f64| {
        let mut p = saved.clone();
        p.axpy(alpha, &dir).unwrap();
        model.set_params(p).unwrap();
        0.5 * grad_norm_sq(&primary_gradient(&model, &batch, kind).unwrap().1)
    };
    let mut central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    // Richardson extrapolation cancels the h² truncation term.
    let h = 1e-4;
    let measured = (4.0 * central(h / 2.0) - central(h)) / 3.0;
    let scale = predicted.abs().max(measured.abs()).max(1e-6);
    prop_assert!((predicted - measured).abs() / scale <= 1e-4, "{predicted} vs {measured}");
    Ok(())
}

pub type GroupCase = (usize, usize, f64, u64);

/// Width above the fixed batch size of 8, 2–3 weight layers and `ε ≤ 1e-2`.
pub fn group_case() -> impl Strategy<Value = GroupCase> {
    (9usize..17, 2usize..4, 1e-4f64..=1e-2, any::<u64>())
}

/// Applies `g = I + ε·M` with Gaussian `M` to every hidden layer and
/// checks the batch outputs.
pub fn check_group_action((width, layers, eps, seed): GroupCase) -> Check {
    let n = 8;
    let mut model = MlpSpec {
        input_dim: width,
        hidden: vec![width; layers - 1],
        output_dim: 4,
        activation: Activation::LeakyRelu { alpha: 0.1 },
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let x = gaussian(seed.wrapping_add(1), &[n, width]);
    let before = model.predict(&x).unwrap();
    let mut rng = SeededRng::new(seed.wrapping_add(2));
    for m in (1..layers).rev() {
        let trace = model.forward(&x).unwrap();
        let g = Tensor::eye(width).add(&rng.normal(&[width, width]).scale(eps)).unwrap();
        apply_group_action(&mut model, m, &g, &trace).unwrap();
    }
    let after = model.predict(&x).unwrap();
    let dev = frob(&after.sub(&before).unwrap()) / frob(&before);
    prop_assert!(dev <= 1e-6, "relative output deviation {dev:e}");
    Ok(())
}

pub type StepCase = (usize, f64, u64);

pub fn step_case() -> impl Strategy<Value = StepCase> {
    (2usize..10, 1e-3f64..0.5, any::<u64>())
}

pub fn check_projected_step((n, eta, seed): StepCase) -> Check {
    let mut model = MlpSpec {
        input_dim: 12,
        hidden: vec![6],
        output_dim: 3,
        activation: Activation::Relu,
    }
    .build(&mut SeededRng::new(seed))
    .unwrap();
    let kind = LossKind::CrossEntropy;
    let batch = Batch {
        inputs: gaussian(seed.wrapping_add(1), &[n, 12]),
        targets: targets(seed, n, 3, kind),
    };
    let trace = model.forward(&batch.inputs).unwrap();
    let bases = build_all_bases(&model, &trace, 1.0).unwrap();
    let cfg = TeleportConfig {
        eta,
        cap: f64::INFINITY,
        ..TeleportConfig::default()
    };
    let rec = teleport_step(&mut model, &bases, &batch, kind, &cfg).unwrap();
    prop_assert!((rec.loss_after - rec.loss).abs() <= 1e-9 * rec.loss.abs().max(1.0));
    Ok(())
}
