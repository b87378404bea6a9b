//! The teleport loop: per batch, one forward pass and one set of bases, then
//! `t` projected ascent steps on `½‖∇L‖²` gated by a ceiling on `‖∇L‖²`.
//! Also the primary training loops, with and without teleportation.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{ClockMode, MetricRow, Stopwatch};
use crate::nn::ModelGraph;
use crate::objectives::{accuracy, batch_loss, loss_value, primary_gradient, teleport_gradient_full, BatchObjective, LossKind};
use crate::optim::OptimizerState;
use crate::params::{GradientSet, ParamId};
use crate::projection::{build_all_bases, project, BasisMap};
use crate::rng::SeededRng;

/// RNG stream for primary mini-batch order.
pub const PRIMARY_STREAM: u64 = 0;
/// RNG stream for teleport batch selection.
pub const TELEPORT_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSign {
    /// `W ← W + η·π(H∇L)`: climb the gradient norm.
    #[default]
    Ascent,
    /// `W ← W − η·π(H∇L)`.
    Descent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeleportMethod {
    #[default]
    Nullspace,
    /// Group-action teleport for leaky-relu MLPs.
    Symmetry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeleportConfig {
    pub eta: f64,
    pub batches: usize,
    pub steps: usize,
    /// Epochs (0-based) at which teleportation runs.
    pub schedule: BTreeSet<usize>,
    pub cap: f64,
    pub tau: f64,
    pub warmup_steps: u64,
    pub fd_step_scale: f64,
    pub batch_size: usize,
    pub sign: UpdateSign,
    pub method: TeleportMethod,
}

impl Default for TeleportConfig {
    fn default() -> Self {
        TeleportConfig {
            eta: 0.2,
            batches: 32,
            steps: 8,
            schedule: (0..5).collect(),
            cap: 5.0,
            tau: 1.0,
            warmup_steps: 0,
            fd_step_scale: crate::objectives::DEFAULT_FD_STEP_SCALE,
            batch_size: 32,
            sign: UpdateSign::Ascent,
            method: TeleportMethod::Nullspace,
        }
    }
}

impl TeleportConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("teleport eta must be finite and >= 0, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.cap.is_nan() || self.cap < 0.0 {
            return bad(format!("cap must be >= 0, got {}", self.cap));
        }
        if self.batch_size == 0 {
            return bad("teleport batch size must be >= 1".into());
        }
        if !(self.fd_step_scale.is_finite() && self.fd_step_scale > 0.0) {
            return bad(format!("fd_step_scale must be positive, got {}", self.fd_step_scale));
        }
        Ok(())
    }

    fn signed_eta(&self) -> f64 {
        match self.sign {
            UpdateSign::Ascent => self.eta,
            UpdateSign::Descent => -self.eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub batch: usize,
    pub step: usize,
    /// `‖∇L‖²` on the teleport batch before the update.
    pub grad_norm_sq: f64,
    /// Teleport-batch loss before the update.
    pub loss: f64,
    pub loss_after: f64,
    /// Selected rank per parameter group (empty for the symmetry method).
    pub ranks: Vec<(ParamId, usize)>,
    /// Frobenius norm of the projected update direction.
    pub projected_norm: f64,
    pub cap_hit: bool,
    /// Seconds since the teleport phase started.
    #[serde(skip)]
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TeleportReport {
    pub steps: Vec<StepRecord>,
    /// SVDs (or pseudo-inverse-class operations) performed.
    pub svd_calls: usize,
    pub inverse_calls: usize,
    /// Squared distance between parameters before and after the phase.
    pub displacement_sq: f64,
}

impl TeleportReport {
    /// Largest `|loss − loss₀| / |loss₀|` over all steps, with `loss₀` the
    /// batch loss before its first step.
    pub fn max_relative_drift(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut base = None;
        for r in &self.steps {
            if r.step == 0 {
                base = Some(r.loss);
            }
            let b = base.unwrap_or(r.loss);
            let scale = b.abs().max(f64::MIN_POSITIVE);
            worst = worst.max((r.loss - b).abs() / scale).max((r.loss_after - b).abs() / scale);
        }
        worst
    }

    /// Steps grouped by batch, in order.
    pub fn by_batch(&self) -> Vec<&[StepRecord]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.steps.len() {
            if i == self.steps.len() || self.steps[i].batch != self.steps[start].batch {
                if i > start {
                    out.push(&self.steps[start..i]);
                }
                start = i;
            }
        }
        out
    }
}

/// One projected step. Every teleportable parameter moves simultaneously
/// from a single teleport-gradient evaluation, unless `‖∇L‖² ≥ cap`.
pub fn teleport_step(
    model: &mut ModelGraph,
    bases: &BasisMap,
    batch: &Batch,
    kind: LossKind,
    cfg: &TeleportConfig,
) -> Result<StepRecord> {
    let tg = {
        let mut obj = BatchObjective { model, batch, kind };
        teleport_gradient_full(&mut obj, cfg.fd_step_scale)?
    };
    let ranks = bases.ranks();
    let mut record = StepRecord {
        batch: 0,
        step: 0,
        grad_norm_sq: tg.grad_norm_sq,
        loss: tg.loss,
        loss_after: tg.loss,
        ranks,
        projected_norm: 0.0,
        cap_hit: tg.grad_norm_sq.is_nan() || tg.grad_norm_sq >= cfg.cap,
        elapsed: 0.0,
    };
    if record.cap_hit {
        return Ok(record);
    }
    let mut delta = GradientSet::new();
    let mut norm_sq = 0.0;
    for (id, h) in tg.hvp.iter() {
        let basis = bases
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no basis for {id}")))?;
        let p = project(h, basis)?;
        norm_sq += p.frobenius_norm_sq();
        delta.insert(*id, p);
    }
    delta.check_finite("teleport_step")?;
    record.projected_norm = norm_sq.sqrt();
    if cfg.eta != 0.0 {
        model.params_mut().axpy(cfg.signed_eta(), &delta)?;
        if model.params().iter().any(|(_, p)| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "teleport_step" });
        }
    }
    record.loss_after = batch_loss(model, batch, kind)?;
    Ok(record)
}

/// Index lists for `count` teleport batches of `size`, drawn without
/// replacement; the pool is reshuffled once exhausted.
pub(crate) fn draw_batches(len: usize, size: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if len < size {
        return Err(Error::InvalidArgument(format!(
            "dataset has {len} samples, fewer than the teleport batch size {size}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut pool = rng.shuffle(len);
    let mut cursor = 0;
    for _ in 0..count {
        if cursor + size > pool.len() {
            pool = rng.shuffle(len);
            cursor = 0;
        }
        out.push(pool[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(out)
}

pub fn run_teleport_for_epoch(
    model: &mut ModelGraph,
    dataset: &Dataset,
    kind: LossKind,
    cfg: &TeleportConfig,
    rng: &mut SeededRng,
) -> Result<TeleportReport> {
    cfg.validate()?;
    if cfg.method == TeleportMethod::Symmetry {
        return crate::symmetry::run_symmetry_for_epoch(model, dataset, kind, cfg, rng);
    }
    let mut report = TeleportReport::default();
    if cfg.batches == 0 || cfg.steps == 0 {
        return Ok(report);
    }
    let start = Instant::now();
    let before = model.params().clone();
    for (b, idx) in draw_batches(dataset.len(), cfg.batch_size, cfg.batches, rng)?.into_iter().enumerate() {
        let batch = dataset.batch(&idx);
        let trace = model.forward(&batch.inputs)?;
        let bases = build_all_bases(model, &trace, cfg.tau)?;
        report.svd_calls += bases.svd_calls();
        for s in 0..cfg.steps {
            let mut rec = teleport_step(model, &bases, &batch, kind, cfg)?;
            rec.batch = b;
            rec.step = s;
            rec.elapsed = start.elapsed().as_secs_f64();
            let hit = rec.cap_hit;
            report.steps.push(rec);
            if hit {
                break;
            }
        }
    }
    report.displacement_sq = model.params().distance_sq(&before)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub clock: ClockMode,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<MetricRow>,
    /// Teleport phases in the order they ran, tagged with their epoch.
    pub teleports: Vec<(usize, TeleportReport)>,
}

fn evaluate(
    model: &ModelGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    kind: LossKind,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let train_loss = batch_loss(model, &train.all(), kind)?;
    match test.filter(|t| !t.is_empty()) {
        Some(t) => {
            let out = model.predict(&t.inputs)?;
            Ok((train_loss, Some(loss_value(&out, &t.targets, kind)?), accuracy(&out, &t.targets)))
        }
        None => Ok((train_loss, None, None)),
    }
}

/// Mini-batch training with teleport phases. A phase scheduled for epoch
/// `e` runs at the first step boundary of that epoch where the global step
/// has reached `warmup_steps`; if none does, it is skipped.
pub fn train_with_teleport(
    model: &mut ModelGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    optimizer: &mut OptimizerState,
    kind: LossKind,
    cfg: &TeleportConfig,
    tc: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut batch_rng = SeededRng::with_stream(tc.seed, PRIMARY_STREAM);
    let mut tele_rng = SeededRng::with_stream(tc.seed, TELEPORT_STREAM);
    let mut clock = Stopwatch::new(tc.clock);
    let mut log = TrainLog::default();
    let mut global_step = 0u64;

    let (l, tl, ta) = evaluate(model, train, test, kind)?;
    log.rows.push(MetricRow {
        seed: tc.seed,
        epoch: 0,
        global_step,
        wall_seconds: 0.0,
        train_loss: l,
        test_loss: tl,
        test_accuracy: ta,
        teleport: false,
    });
    for epoch in 0..tc.epochs {
        let mut pending = cfg.schedule.contains(&epoch);
        let mut teleported = false;
        clock.start();
        for idx in BatchIterator::new(train.len(), tc.batch_size, &mut batch_rng)? {
            if pending && global_step >= cfg.warmup_steps {
                pending = false;
                teleported = true;
                let report = run_teleport_for_epoch(model, train, kind, cfg, &mut tele_rng)?;
                log.teleports.push((epoch, report));
            }
            let batch = train.batch(&idx);
            let (_, grads) = primary_gradient(model, &batch, kind)?;
            optimizer.step(model.params_mut(), &grads)?;
            global_step += 1;
        }
        clock.stop();
        let (l, tl, ta) = evaluate(model, train, test, kind)?;
        log.rows.push(MetricRow {
            seed: tc.seed,
            epoch: epoch + 1,
            global_step,
            wall_seconds: clock.seconds(),
            train_loss: l,
            test_loss: tl,
            test_accuracy: ta,
            teleport: teleported,
        });
    }
    Ok(log)
}

/// Optimizer-only training, kept separate from [`train_with_teleport`] so
/// the two can be checked against each other.
pub fn train_plain(
    model: &mut ModelGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    optimizer: &mut OptimizerState,
    kind: LossKind,
    tc: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    let mut rng = SeededRng::with_stream(tc.seed, PRIMARY_STREAM);
    let mut clock = Stopwatch::new(tc.clock);
    let mut rows = Vec::with_capacity(tc.epochs + 1);
    let mut step = 0u64;
    for epoch in 0..=tc.epochs {
        if epoch > 0 {
            clock.start();
            for idx in BatchIterator::new(train.len(), tc.batch_size, &mut rng)? {
                let (_, g) = primary_gradient(model, &train.batch(&idx), kind)?;
                optimizer.step(model.params_mut(), &g)?;
                step += 1;
            }
            clock.stop();
        }
        let (train_loss, test_loss, test_accuracy) = evaluate(model, train, test, kind)?;
        rows.push(MetricRow {
            seed: tc.seed,
            epoch,
            global_step: step,
            wall_seconds: clock.seconds(),
            train_loss,
            test_loss,
            test_accuracy,
            teleport: false,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use crate::nn::MlpSpec;
    use crate::optim::OptimizerKind;

    fn toy() -> (ModelGraph, Dataset) {
        let mut rng = SeededRng::new(11);
        let model = MlpSpec {
            input_dim: 12,
            hidden: vec![10, 8],
            output_dim: 3,
            activation: crate::nn::Activation::Relu,
        }
        .build(&mut rng)
        .unwrap();
        let x = rng.normal(&[40, 12]);
        let labels = (0..40).map(|i| i % 3).collect();
        let ds = Dataset::new("toy", x, Targets::Classes { labels, classes: 3 }).unwrap();
        (model, ds)
    }

    fn cfg() -> TeleportConfig {
        TeleportConfig {
            eta: 1e-2,
            batches: 2,
            steps: 3,
            cap: 1e9,
            batch_size: 8,
            ..TeleportConfig::default()
        }
    }

    #[test]
    fn zero_cap_blocks_updates() {
        let (mut m, ds) = toy();
        let before = m.params().clone();
        let cfg = TeleportConfig { cap: 0.0, ..cfg() };
        let r = run_teleport_for_epoch(&mut m, &ds, LossKind::CrossEntropy, &cfg, &mut SeededRng::new(0)).unwrap();
        assert!(r.steps.iter().all(|s| s.cap_hit));
        assert_eq!(r.steps.len(), 2);
        assert!(m.params().bit_identical(&before));
    }

    #[test]
    fn zero_eta_keeps_bits() {
        let (mut m, ds) = toy();
        let before = m.params().clone();
        let cfg = TeleportConfig { eta: 0.0, ..cfg() };
        let r = run_teleport_for_epoch(&mut m, &ds, LossKind::CrossEntropy, &cfg, &mut SeededRng::new(0)).unwrap();
        assert!(r.steps.iter().all(|s| !s.cap_hit));
        assert!(m.params().bit_identical(&before));
    }

    #[test]
    fn empty_phase() {
        let (mut m, ds) = toy();
        let before = m.params().clone();
        for (b, t) in [(0, 3), (2, 0)] {
            let cfg = TeleportConfig { batches: b, steps: t, ..cfg() };
            let r = run_teleport_for_epoch(&mut m, &ds, LossKind::CrossEntropy, &cfg, &mut SeededRng::new(0)).unwrap();
            assert!(r.steps.is_empty());
        }
        assert!(m.params().bit_identical(&before));
    }

    #[test]
    fn one_step_keeps_batch_loss() {
        let (mut m, ds) = toy();
        let batch = ds.batch(&(0..8).collect::<Vec<_>>());
        let trace = m.forward(&batch.inputs).unwrap();
        let bases = build_all_bases(&m, &trace, 1.0).unwrap();
        let before = m.params().clone();
        let rec = teleport_step(&mut m, &bases, &batch, LossKind::CrossEntropy, &cfg()).unwrap();
        assert!((rec.loss_after - rec.loss).abs() <= 1e-8 * rec.loss.abs());
        assert!(m.params().distance_sq(&before).unwrap() > 0.0);
    }

    #[test]
    fn dataset_smaller_than_batch() {
        let (mut m, ds) = toy();
        let cfg = TeleportConfig { batch_size: 41, ..cfg() };
        assert!(run_teleport_for_epoch(&mut m, &ds, LossKind::CrossEntropy, &cfg, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn teleport_reports_are_deterministic() {
        let run = || {
            let (mut m, ds) = toy();
            let mut r = run_teleport_for_epoch(&mut m, &ds, LossKind::CrossEntropy, &cfg(), &mut SeededRng::new(3)).unwrap();
            r.steps.iter_mut().for_each(|s| s.elapsed = 0.0);
            r
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_delays_first_teleport() {
        let (mut m, ds) = toy();
        let cfg = TeleportConfig {
            warmup_steps: 7,
            schedule: [0, 1].into_iter().collect(),
            ..cfg()
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 10,
            seed: 2,
            clock: ClockMode::None,
        };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.01);
        let log = train_with_teleport(&mut m, &ds, None, &mut opt, LossKind::CrossEntropy, &cfg, &tc).unwrap();
        // Four steps per epoch: epoch 0 never reaches step 7, epoch 1 does mid-way.
        assert_eq!(log.teleports.iter().map(|(e, _)| *e).collect::<Vec<_>>(), vec![1]);
        assert!(!log.rows[1].teleport && log.rows[2].teleport);
    }
}
