//! Per-epoch metric rows, their CSV encoding and the training clock.

use std::io::Write;
use std::time::Instant;

use cpu_time::ProcessTime;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub epoch: usize,
    pub global_step: u64,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Whether a teleport phase ran during this epoch.
    pub teleport: bool,
}

pub fn write_metrics<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record([
            "seed",
            "epoch",
            "global_step",
            "wall_seconds",
            "train_loss",
            "test_loss",
            "test_accuracy",
            "teleport",
        ])?;
    }
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Into::into))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Process CPU time.
    #[default]
    Cpu,
    Real,
    /// Always reads zero; makes metric files byte-reproducible.
    None,
}

#[derive(Clone, Copy, Debug)]
enum Mark {
    Cpu(ProcessTime),
    Real(Instant),
}

/// Accumulates time over start/stop intervals.
#[derive(Clone, Debug)]
pub struct Stopwatch {
    mode: ClockMode,
    total: f64,
    running: Option<Mark>,
}

impl Stopwatch {
    pub fn new(mode: ClockMode) -> Self {
        Stopwatch {
            mode,
            total: 0.0,
            running: None,
        }
    }

    pub fn start(&mut self) {
        self.running = match self.mode {
            ClockMode::Cpu => Some(Mark::Cpu(ProcessTime::now())),
            ClockMode::Real => Some(Mark::Real(Instant::now())),
            ClockMode::None => None,
        };
    }

    pub fn stop(&mut self) {
        self.total += match self.running.take() {
            Some(Mark::Cpu(t)) => t.elapsed().as_secs_f64(),
            Some(Mark::Real(t)) => t.elapsed().as_secs_f64(),
            None => 0.0,
        };
    }

    pub fn seconds(&self) -> f64 {
        self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_nulls() {
        let rows = vec![
            MetricRow {
                seed: 1,
                epoch: 0,
                global_step: 0,
                wall_seconds: 0.0,
                train_loss: 2.5,
                test_loss: None,
                test_accuracy: None,
                teleport: false,
            },
            MetricRow {
                seed: 1,
                epoch: 1,
                global_step: 63,
                wall_seconds: 0.25,
                train_loss: 1.0,
                test_loss: Some(1.1),
                test_accuracy: Some(0.5),
                teleport: true,
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,teleport\n"));
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn none_clock_reads_zero() {
        let mut s = Stopwatch::new(ClockMode::None);
        s.start();
        s.stop();
        assert_eq!(s.seconds(), 0.0);
    }
}
