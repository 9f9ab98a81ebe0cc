//! Per-epoch training metrics and their on-disk form.
//!
//! A run writes two line-delimited JSON files:
//!
//! * `trace.jsonl` — header line echoing the full hyperparameter assignment,
//!   then one record per epoch with the deterministic fields (`run_id`,
//!   `strategy`, `epoch`, `loss`, `id_acc`, `ood_acc`, `mem_bytes`, and for
//!   distillation runs `kl`). Rerunning with the same seed reproduces this
//!   file byte for byte.
//! * `timing.jsonl` — one `iter_time_s` wall-clock record per epoch. Timing
//!   is inherently non-deterministic, so it is segregated here and excluded
//!   from reproducibility comparisons.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Malformed {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("trace file {0} is empty (missing header line)")]
    MissingHeader(String),
}

/// One completed epoch. `iter_time_s` is wall-clock and therefore excluded
/// from the deterministic trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub iter_time_s: f64,
    pub mem_bytes: u64,
}

/// Header line of `trace.jsonl`: identifies the run and echoes the resolved
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub run_id: String,
    pub strategy: String,
    pub hyperparameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceLine {
    run_id: String,
    strategy: String,
    epoch: usize,
    loss: f64,
    id_acc: f64,
    ood_acc: f64,
    mem_bytes: u64,
    /// End-of-epoch scaled KL to the teacher; distillation runs only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingLine {
    run_id: String,
    epoch: usize,
    iter_time_s: f64,
}

/// Full metric history of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub run_id: String,
    pub strategy: String,
    pub hyperparameters: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    /// Scaled KL term of the distillation objective, evaluated over the train
    /// prompts at the end of each epoch; present only for distillation runs.
    pub kl_by_epoch: Option<Vec<f64>>,
}

impl MetricsTrace {
    pub fn new(run_id: &str, strategy: &str, hyperparameters: serde_json::Value) -> MetricsTrace {
        MetricsTrace {
            run_id: run_id.to_string(),
            strategy: strategy.to_string(),
            hyperparameters,
            epochs: Vec::new(),
            kl_by_epoch: None,
        }
    }

    /// Best in-distribution accuracy over all epochs (the tuning objective).
    pub fn best_id_acc(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.id_acc).fold(None, |acc, x| {
            Some(match acc {
                Some(a) if a >= x => a,
                _ => x,
            })
        })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Equality on everything except wall-clock timing. Two runs of the same
    /// seed must agree under this comparison.
    pub fn content_eq(&self, other: &MetricsTrace) -> bool {
        self.run_id == other.run_id
            && self.strategy == other.strategy
            && self.hyperparameters == other.hyperparameters
            && self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| {
                    a.epoch == b.epoch
                        && a.loss.to_bits() == b.loss.to_bits()
                        && a.id_acc.to_bits() == b.id_acc.to_bits()
                        && a.ood_acc.to_bits() == b.ood_acc.to_bits()
                        && a.mem_bytes == b.mem_bytes
                })
            && self.kl_by_epoch == other.kl_by_epoch
    }

    /// Writes `trace.jsonl` (deterministic) and `timing.jsonl` (wall clock)
    /// into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), MetricsError> {
        let trace_path = dir.join("trace.jsonl");
        let timing_path = dir.join("timing.jsonl");
        let io_err = |path: &Path| {
            let p = path.display().to_string();
            move |source| MetricsError::Io {
                path: p.clone(),
                source,
            }
        };

        let mut trace = Vec::new();
        let header = TraceHeader {
            run_id: self.run_id.clone(),
            strategy: self.strategy.clone(),
            hyperparameters: self.hyperparameters.clone(),
        };
        serde_json::to_writer(&mut trace, &header).expect("header serializes");
        trace.push(b'\n');
        for (i, e) in self.epochs.iter().enumerate() {
            let line = TraceLine {
                run_id: self.run_id.clone(),
                strategy: self.strategy.clone(),
                epoch: e.epoch,
                loss: e.loss,
                id_acc: e.id_acc,
                ood_acc: e.ood_acc,
                mem_bytes: e.mem_bytes,
                kl: self.kl_by_epoch.as_ref().and_then(|v| v.get(i).copied()),
            };
            serde_json::to_writer(&mut trace, &line).expect("record serializes");
            trace.push(b'\n');
        }
        std::fs::write(&trace_path, trace).map_err(io_err(&trace_path))?;

        let mut timing = Vec::new();
        for e in &self.epochs {
            let line = TimingLine {
                run_id: self.run_id.clone(),
                epoch: e.epoch,
                iter_time_s: e.iter_time_s,
            };
            serde_json::to_writer(&mut timing, &line).expect("record serializes");
            timing.push(b'\n');
        }
        std::fs::write(&timing_path, timing).map_err(io_err(&timing_path))?;
        Ok(())
    }

    /// Reads a trace back from `dir`. Timing records are merged in when the
    /// sidecar exists; otherwise `iter_time_s` is 0.
    pub fn load(dir: &Path) -> Result<MetricsTrace, MetricsError> {
        let trace_path = dir.join("trace.jsonl");
        let path_str = trace_path.display().to_string();
        let file = std::fs::File::open(&trace_path).map_err(|source| MetricsError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let (_, first) = lines.next().ok_or_else(|| MetricsError::MissingHeader(path_str.clone()))?;
        let first = first.map_err(|source| MetricsError::Io {
            path: path_str.clone(),
            source,
        })?;
        let header: TraceHeader =
            serde_json::from_str(&first).map_err(|e| MetricsError::Malformed {
                path: path_str.clone(),
                line: 1,
                detail: e.to_string(),
            })?;

        let mut trace = MetricsTrace::new(&header.run_id, &header.strategy, header.hyperparameters);
        let mut kls: Vec<Option<f64>> = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|source| MetricsError::Io {
                path: path_str.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceLine = serde_json::from_str(&line).map_err(|e| MetricsError::Malformed {
                path: path_str.clone(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
            trace.epochs.push(EpochRecord {
                epoch: rec.epoch,
                loss: rec.loss,
                id_acc: rec.id_acc,
                ood_acc: rec.ood_acc,
                iter_time_s: 0.0,
                mem_bytes: rec.mem_bytes,
            });
            kls.push(rec.kl);
        }
        if !kls.is_empty() && kls.iter().all(Option::is_some) {
            trace.kl_by_epoch = Some(kls.into_iter().flatten().collect());
        }

        let timing_path = dir.join("timing.jsonl");
        if timing_path.exists() {
            let t_str = timing_path.display().to_string();
            let file = std::fs::File::open(&timing_path).map_err(|source| MetricsError::Io {
                path: t_str.clone(),
                source,
            })?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| MetricsError::Io {
                    path: t_str.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TimingLine =
                    serde_json::from_str(&line).map_err(|e| MetricsError::Malformed {
                        path: t_str.clone(),
                        line: idx + 1,
                        detail: e.to_string(),
                    })?;
                if let Some(e) = trace.epochs.iter_mut().find(|e| e.epoch == rec.epoch) {
                    e.iter_time_s = rec.iter_time_s;
                }
            }
        }
        Ok(trace)
    }
}
