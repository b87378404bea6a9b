//! Experiment commands behind the CLI. Each command takes a resolved
//! [`ExperimentConfig`] and an output directory, writes CSV/JSON artifacts
//! and returns an in-memory summary.

mod config;
pub mod presets;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

pub use config::{
    BenchConfig, DatasetConfig, ErrorControlConfig, ExperimentConfig, ModelConfig, OptimizerConfig, Splits,
    INIT_STREAM,
};

use crate::error::{Error, Result};
use crate::metrics::{write_metrics, MetricRow};
use crate::nn::{blob, Activation};
use crate::projection::{build_all_bases, cumulative_energy};
use crate::rng::SeededRng;
use crate::symmetry::{runtime_probe, ProbeDims, ProbeMethod, ProbeResult};
use crate::teleport::{
    draw_batches, run_teleport_for_epoch, train_plain, train_with_teleport, StepRecord, TeleportMethod,
    TeleportReport, TELEPORT_STREAM,
};

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, cfg: &ExperimentConfig, results: &T) -> Result<()> {
    let doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "results": results,
    });
    let mut w = create(out, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn format_ranks(r: &StepRecord) -> String {
    r.ranks.iter().map(|(id, k)| format!("{id}:{k}")).collect::<Vec<_>>().join(";")
}

#[derive(Serialize)]
struct TeleportRow<'a> {
    epoch: usize,
    batch: usize,
    step: usize,
    grad_norm_sq: f64,
    loss: f64,
    loss_after: f64,
    projected_norm: f64,
    cap_hit: bool,
    ranks: &'a str,
}

fn write_teleport_steps(out: &Path, name: &str, phases: &[(usize, TeleportReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    if phases.iter().all(|(_, r)| r.steps.is_empty()) {
        w.write_record([
            "epoch",
            "batch",
            "step",
            "grad_norm_sq",
            "loss",
            "loss_after",
            "projected_norm",
            "cap_hit",
            "ranks",
        ])?;
    }
    for (epoch, report) in phases {
        for r in &report.steps {
            let ranks = format_ranks(r);
            w.serialize(TeleportRow {
                epoch: *epoch,
                batch: r.batch,
                step: r.step,
                grad_norm_sq: r.grad_norm_sq,
                loss: r.loss,
                loss_after: r.loss_after,
                projected_norm: r.projected_norm,
                cap_hit: r.cap_hit,
                ranks: &ranks,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one seed's training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub teleport_steps: usize,
    pub svd_calls: usize,
    pub inverse_calls: usize,
    pub max_relative_drift: f64,
    /// Sum over teleport phases of the parameter distance each one moved.
    pub teleport_displacement: f64,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
}

fn run_one(cfg: &ExperimentConfig, splits: &Splits, seed: u64, label: &str, out: &Path) -> Result<RunSummary> {
    let mut model = cfg.build_model(&splits.train, seed)?;
    let mut opt = cfg.optimizer_state();
    let log = train_with_teleport(
        &mut model,
        &splits.train,
        splits.test.as_ref(),
        &mut opt,
        cfg.loss_kind(),
        &cfg.teleport,
        &cfg.train_config(seed),
    )?;
    write_metrics(&log.rows, create(out, &format!("{label}_seed{seed}.csv"))?)?;
    write_teleport_steps(&out.join("teleport"), &format!("{label}_seed{seed}.csv"), &log.teleports)?;
    blob::write_params(model.params(), create(&out.join("params"), &format!("{label}_seed{seed}.nlpt"))?)?;
    let last = log.rows.last().expect("epoch-0 row is always present");
    Ok(RunSummary {
        label: label.to_string(),
        seed,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        final_test_accuracy: last.test_accuracy,
        teleport_steps: log.teleports.iter().map(|(_, r)| r.steps.len()).sum(),
        svd_calls: log.teleports.iter().map(|(_, r)| r.svd_calls).sum(),
        inverse_calls: log.teleports.iter().map(|(_, r)| r.inverse_calls).sum(),
        max_relative_drift: log.teleports.iter().map(|(_, r)| r.max_relative_drift()).fold(0.0, f64::max),
        teleport_displacement: log.teleports.iter().map(|(_, r)| r.displacement_sq.sqrt()).sum(),
        rows: log.rows,
    })
}

/// Trains one model per seed. Writes `metrics_seed{S}.csv`, the teleport
/// step log `teleport/metrics_seed{S}.csv`, the final weights
/// `params/metrics_seed{S}.nlpt` and `manifest.json`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    let splits = cfg.load_splits()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_one(cfg, &splits, seed, "metrics", out))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(out, "train", cfg, &runs)?;
    Ok(runs)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub method: ProbeMethod,
    pub axis: char,
    pub value: usize,
    pub t: usize,
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub b: usize,
    pub seconds: f64,
    pub svd_calls: usize,
    pub inverse_calls: usize,
}

impl ScalingRow {
    fn new(axis: char, value: usize, r: ProbeResult) -> Self {
        let ProbeDims { t, d, n, l, b } = r.dims;
        ScalingRow {
            method: r.method,
            axis,
            value,
            t,
            d,
            n,
            l,
            b,
            seconds: r.seconds,
            svd_calls: r.svd_calls,
            inverse_calls: r.inverse_calls,
        }
    }
}

/// Probe dimensions for every (axis, value) cell, one axis varied at a time.
pub fn scaling_grid(bench: &BenchConfig) -> Vec<(char, usize, ProbeDims)> {
    let mut cells = Vec::new();
    let axes: [(char, &Vec<usize>); 5] = [
        ('t', &bench.t),
        ('d', &bench.d),
        ('n', &bench.n),
        ('l', &bench.l),
        ('b', &bench.b),
    ];
    for (axis, values) in axes {
        for &v in values {
            let mut dims = bench.base;
            match axis {
                't' => dims.t = v,
                'd' => dims.d = v,
                'n' => dims.n = v,
                'l' => dims.l = v,
                _ => dims.b = v,
            }
            cells.push((axis, v, dims));
        }
    }
    cells
}

/// Runtime probes for both methods over the scaling grid; writes
/// `scaling.csv` and `manifest.json`.
pub fn cmd_bench_scaling(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ScalingRow>> {
    let seed = cfg.seeds[0];
    let mut rows = Vec::new();
    for (axis, value, dims) in scaling_grid(&cfg.bench) {
        for method in [ProbeMethod::Nullspace, ProbeMethod::Symmetry] {
            rows.push(ScalingRow::new(axis, value, runtime_probe(method, dims, seed)?));
        }
    }
    let mut w = csv::Writer::from_writer(create(out, "scaling.csv")?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_manifest(out, "bench-scaling", cfg, &rows.len())?;
    Ok(rows)
}

/// One τ setting of the error-control sweep.
#[derive(Clone, Debug, Serialize)]
pub struct TauSweep {
    pub tau: f64,
    pub max_relative_drift: f64,
    pub svd_calls: usize,
    #[serde(skip)]
    pub report: TeleportReport,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    tau: f64,
    batch: usize,
    step: usize,
    grad_norm_sq: f64,
    loss: f64,
    loss_after: f64,
    relative_drift: f64,
    ranks: &'a str,
}

#[derive(Serialize)]
struct EnergyRow {
    layer: String,
    index: usize,
    sigma: f64,
    cumulative_energy: f64,
}

/// Teleport-only phases from one snapshot per τ, each drawing the same
/// teleport batches. Writes `error_control.csv`, `energy.csv` (spectrum of
/// every group on the first teleport batch) and `manifest.json`.
pub fn cmd_error_control(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TauSweep>> {
    if cfg.teleport.method != TeleportMethod::Nullspace {
        return Err(Error::Config("error-control sweeps need the nullspace method".into()));
    }
    let seed = cfg.seeds[0];
    let splits = cfg.load_splits()?;
    let kind = cfg.loss_kind();
    let mut snapshot = cfg.build_model(&splits.train, seed)?;
    if cfg.error_control.pretrain_epochs > 0 {
        let mut tc = cfg.train_config(seed);
        tc.epochs = cfg.error_control.pretrain_epochs;
        train_plain(&mut snapshot, &splits.train, None, &mut cfg.optimizer_state(), kind, &tc)?;
    }

    let mut rng = SeededRng::with_stream(seed, TELEPORT_STREAM);
    let first = draw_batches(splits.train.len(), cfg.teleport.batch_size, 1, &mut rng)?;
    let batch = splits.train.batch(&first[0]);
    let trace = snapshot.forward(&batch.inputs)?;
    let bases = build_all_bases(&snapshot, &trace, 1.0)?;
    let mut energy = csv::Writer::from_writer(create(out, "energy.csv")?);
    for b in bases.bases() {
        for (i, (s, e)) in b.singular_values.iter().zip(cumulative_energy(&b.singular_values)).enumerate() {
            energy.serialize(EnergyRow {
                layer: b.owner.to_string(),
                index: i + 1,
                sigma: *s,
                cumulative_energy: e,
            })?;
        }
    }
    energy.flush()?;

    let mut sweeps = Vec::new();
    let mut w = csv::Writer::from_writer(create(out, "error_control.csv")?);
    for &tau in &cfg.error_control.taus {
        let mut model = snapshot.clone();
        let tele = crate::teleport::TeleportConfig {
            tau,
            ..cfg.teleport.clone()
        };
        let mut rng = SeededRng::with_stream(seed, TELEPORT_STREAM);
        let report = run_teleport_for_epoch(&mut model, &splits.train, kind, &tele, &mut rng)?;
        let mut base = 0.0;
        for r in &report.steps {
            if r.step == 0 {
                base = r.loss;
            }
            let ranks = format_ranks(r);
            w.serialize(SweepRow {
                tau,
                batch: r.batch,
                step: r.step,
                grad_norm_sq: r.grad_norm_sq,
                loss: r.loss,
                loss_after: r.loss_after,
                relative_drift: (r.loss_after - base).abs() / base.abs().max(f64::MIN_POSITIVE),
                ranks: &ranks,
            })?;
        }
        sweeps.push(TauSweep {
            tau,
            max_relative_drift: report.max_relative_drift(),
            svd_calls: report.svd_calls,
            report,
        });
    }
    w.flush()?;
    write_manifest(out, "error-control", cfg, &sweeps)?;
    Ok(sweeps)
}

/// Three runs per seed that differ only in the teleport method: `none`,
/// `symmetry` and `nullspace`. Requires a leaky-relu MLP.
pub fn cmd_compare_baseline(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    match &cfg.model {
        ModelConfig::Mlp {
            activation: Activation::LeakyRelu { .. },
            ..
        } => {}
        ModelConfig::Mlp { .. } => {
            return Err(Error::Config(
                "compare-baseline needs an invertible activation (leaky_relu)".into(),
            ))
        }
        _ => return Err(Error::Config("compare-baseline needs an MLP model".into())),
    }
    let splits = cfg.load_splits()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for (label, method) in [
            ("none", None),
            ("symmetry", Some(TeleportMethod::Symmetry)),
            ("nullspace", Some(TeleportMethod::Nullspace)),
        ] {
            let mut variant = cfg.clone();
            match method {
                Some(m) => variant.teleport.method = m,
                None => variant.teleport.schedule.clear(),
            }
            runs.push(run_one(&variant, &splits, seed, label, out)?);
        }
    }
    write_manifest(out, "compare-baseline", cfg, &runs)?;
    Ok(runs)
}
