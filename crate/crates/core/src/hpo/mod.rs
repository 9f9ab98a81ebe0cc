//! Hyperparameter search: flat search spaces, a Tree-structured Parzen
//! Estimator sampler, and a random-search baseline, driven by a sequential
//! ask→evaluate→tell loop.

pub mod tpe;

pub use tpe::{split_good_bad, tpe_suggest, tpe_suggest_detailed, TpeKnobs, TpeSuggestion};

use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("parameter {name} value {value} violates its spec")]
    OutOfBounds { name: String, value: String },
    #[error("assignment is missing parameter {0}")]
    MissingParam(String),
    #[error("n_trials must be >= 1")]
    NoTrials,
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
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
}

/// A sampled hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Float(f) => Some(*f),
            ParamValue::Text(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{}", i),
            ParamValue::Float(x) => write!(f, "{}", x),
            ParamValue::Text(s) => write!(f, "{}", s),
        }
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Uniform { lo: f64, hi: f64 },
    Loguniform { lo: f64, hi: f64 },
    QuantizedInt { lo: i64, hi: i64, step: i64 },
    Categorical { choices: Vec<ParamValue> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl ParamSpec {
    fn validate(&self) -> Result<(), HpoError> {
        let bad = |msg: String| Err(HpoError::InvalidSpace(msg));
        match &self.kind {
            ParamKind::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("{}: uniform requires lo < hi", self.name));
                }
            }
            ParamKind::Loguniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                    return bad(format!("{}: loguniform requires 0 < lo < hi", self.name));
                }
            }
            ParamKind::QuantizedInt { lo, hi, step } => {
                if lo >= hi || *step <= 0 {
                    return bad(format!("{}: quantized_int requires lo < hi, step > 0", self.name));
                }
            }
            ParamKind::Categorical { choices } => {
                if choices.is_empty() {
                    return bad(format!("{}: categorical requires choices", self.name));
                }
            }
        }
        Ok(())
    }

    /// Whether `value` lies within this spec.
    pub fn contains(&self, value: &ParamValue) -> bool {
        match (&self.kind, value) {
            (ParamKind::Uniform { lo, hi }, v) => {
                v.as_f64().map(|x| (*lo..=*hi).contains(&x)).unwrap_or(false)
            }
            (ParamKind::Loguniform { lo, hi }, v) => {
                v.as_f64().map(|x| (*lo..=*hi).contains(&x)).unwrap_or(false)
            }
            (ParamKind::QuantizedInt { lo, hi, step }, ParamValue::Int(i)) => {
                (*lo..=*hi).contains(i) && (i - lo) % step == 0
            }
            (ParamKind::Categorical { choices }, v) => choices.contains(v),
            _ => false,
        }
    }
}

/// An ordered, flat collection of parameter specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HpoError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.params {
            p.validate()?;
            if !seen.insert(&p.name) {
                return Err(HpoError::InvalidSpace(format!(
                    "duplicate parameter {}",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Checks that `assignment` covers every parameter and respects bounds.
    pub fn check_assignment(&self, assignment: &Assignment) -> Result<(), HpoError> {
        for spec in &self.params {
            let value = assignment
                .get(&spec.name)
                .ok_or_else(|| HpoError::MissingParam(spec.name.clone()))?;
            if !spec.contains(value) {
                return Err(HpoError::OutOfBounds {
                    name: spec.name.clone(),
                    value: value.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// One independent draw from every parameter's prior.
pub fn sample_prior(space: &SearchSpace, rng: &mut Rng) -> Assignment {
    let mut assignment = Assignment::new();
    for spec in &space.params {
        let value = match &spec.kind {
            ParamKind::Uniform { lo, hi } => ParamValue::Float(rng.range_f64(*lo, *hi)),
            ParamKind::Loguniform { lo, hi } => {
                ParamValue::Float(rng.range_f64(lo.ln(), hi.ln()).exp())
            }
            ParamKind::QuantizedInt { lo, hi, step } => {
                let ticks = (hi - lo) / step + 1;
                ParamValue::Int(lo + rng.range_usize(ticks as usize) as i64 * step)
            }
            ParamKind::Categorical { choices } => choices[rng.range_usize(choices.len())].clone(),
        };
        assignment.insert(spec.name.clone(), value);
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One evaluated assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub seed: u64,
    pub assignment: Assignment,
    /// Maximized. `None` exactly when the trial failed.
    pub objective: Option<f64>,
    pub ood_acc: Option<f64>,
    /// Run directory or trace file produced by the trial, if any.
    pub trace_ref: Option<String>,
    pub status: TrialStatus,
    pub error: Option<String>,
}

/// Successful evaluation of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub objective: f64,
    pub ood_acc: Option<f64>,
    pub trace_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Tpe,
    Random,
}

impl Sampler {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Tpe => "tpe",
            Sampler::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Sampler> {
        match name {
            "tpe" => Some(Sampler::Tpe),
            "random" => Some(Sampler::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

/// Sequential ask→evaluate→tell loop. Each trial gets the deterministic
/// seed `base_seed + id`, passed to `eval` so a stored best trial can be
/// replayed bit for bit. `eval` errors are recorded as failed trials and
/// excluded from density estimation; a non-finite objective counts as a
/// failure too.
pub fn optimize<F>(
    space: &SearchSpace,
    n_trials: usize,
    sampler: Sampler,
    knobs: &TpeKnobs,
    rng: &mut Rng,
    base_seed: u64,
    mut eval: F,
) -> Result<OptimizeResult, HpoError>
where
    F: FnMut(usize, u64, &Assignment) -> Result<TrialOutcome, String>,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(HpoError::NoTrials);
    }
    let mut trials: Vec<Trial> = Vec::with_capacity(n_trials);
    for id in 0..n_trials {
        let assignment = match sampler {
            Sampler::Random => {
                let a = sample_prior(space, rng);
                space.check_assignment(&a)?;
                a
            }
            Sampler::Tpe => tpe_suggest(space, &trials, knobs, rng)?,
        };
        let seed = base_seed.wrapping_add(id as u64);
        let trial = match eval(id, seed, &assignment) {
            Ok(outcome) if outcome.objective.is_finite() => Trial {
                id,
                seed,
                assignment,
                objective: Some(outcome.objective),
                ood_acc: outcome.ood_acc,
                trace_ref: outcome.trace_ref,
                status: TrialStatus::Ok,
                error: None,
            },
            Ok(outcome) => Trial {
                id,
                seed,
                assignment,
                objective: None,
                ood_acc: None,
                trace_ref: outcome.trace_ref,
                status: TrialStatus::Failed,
                error: Some(format!("non-finite objective {}", outcome.objective)),
            },
            Err(message) => Trial {
                id,
                seed,
                assignment,
                objective: None,
                ood_acc: None,
                trace_ref: None,
                status: TrialStatus::Failed,
                error: Some(message),
            },
        };
        trials.push(trial);
    }
    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .max_by(|a, b| {
            let (oa, ob) = (a.objective.unwrap(), b.objective.unwrap());
            oa.partial_cmp(&ob).expect("finite").then(b.id.cmp(&a.id)) // ties -> earliest
        })
        .cloned()
        .ok_or(HpoError::AllTrialsFailed(n_trials))?;
    Ok(OptimizeResult { best, trials })
}

/// Appends nothing; writes the full trial list as one record per line.
pub fn save_trials(trials: &[Trial], path: &Path) -> Result<(), HpoError> {
    let mut out = Vec::new();
    for t in trials {
        serde_json::to_writer(&mut out, t).expect("trial serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|source| HpoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>, HpoError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| HpoError::Io {
        path: p.clone(),
        source,
    })?;
    let mut trials = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| HpoError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(&line).map_err(|e| HpoError::Malformed {
            path: p.clone(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        trials.push(trial);
    }
    Ok(trials)
}

fn uniform(name: &str, lo: f64, hi: f64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Uniform { lo, hi },
    }
}

fn loguniform(name: &str, lo: f64, hi: f64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Loguniform { lo, hi },
    }
}

fn qint(name: &str, lo: i64, hi: i64, step: i64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::QuantizedInt { lo, hi, step },
    }
}

fn cat_text(name: &str, choices: &[&str]) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Categorical {
            choices: choices.iter().map(|c| ParamValue::Text(c.to_string())).collect(),
        },
    }
}

fn cat_int(name: &str, choices: &[i64]) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Categorical {
            choices: choices.iter().map(|&c| ParamValue::Int(c)).collect(),
        },
    }
}

/// The four frozen search spaces. `dropout` maps to both the hidden and
/// attention sites at run time.
pub fn builtin_spaces() -> Vec<SearchSpace> {
    let vft = SearchSpace {
        name: "vft_space".into(),
        params: vec![
            qint("num_epochs", 2, 50, 1),
            uniform("dropout", 0.0001, 0.3),
            cat_text("optimizer", &["adam", "adamw", "sgd"]),
            loguniform("learning_rate", 1e-6, 1e-4),
        ],
    };
    let pbft = SearchSpace {
        name: "pbft_space".into(),
        params: vec![
            loguniform("learning_rate", 1e-6, 1e-4),
            qint("batch_size", 2, 16, 1),
            uniform("dropout", 0.0, 0.5),
            uniform("warmup_ratio", 0.0, 0.2),
            qint("k_per_class", 2, 32, 1),
            qint("epochs", 5, 20, 1),
            cat_text("template", &["minimal", "gpt3", "eval_harness"]),
        ],
    };
    let mut cd_params = pbft.params.clone();
    cd_params.push(uniform("temperature", 0.5, 4.0));
    cd_params.push(uniform("distill_weight", 0.0, 1.0));
    let cd = SearchSpace {
        name: "cd_space".into(),
        params: cd_params,
    };
    let lora = SearchSpace {
        name: "lora_space".into(),
        params: vec![
            cat_int("rank", &[4, 8, 16, 32]),
            cat_int("alpha", &[16, 32, 64, 128]),
            uniform("lora_dropout", 0.0, 0.5),
        ],
    };
    vec![vft, pbft, cd, lora]
}

pub fn builtin_space(name: &str) -> Option<SearchSpace> {
    builtin_spaces().into_iter().find(|s| s.name == name)
}
