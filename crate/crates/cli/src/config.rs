//! Experiment configuration: one JSON file describes a run or a sweep.
//!
//! Configs round-trip through serde unchanged, and the resolved config
//! (defaults filled in) is echoed into every run directory so runs are
//! self-describing and replayable.

use crate::error::AppError;
use ftlab_core::hpo::{self, Assignment, Sampler, SearchSpace};
use ftlab_core::lora::LoraConfig;
use ftlab_core::model::ModelConfig;
use ftlab_core::training::{DistillConfig, OptimizerKind, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where a run's examples come from: explicit files, or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: bool,
    /// Train-split size for the generator; eval splits get a quarter each.
    pub n: usize,
    /// Generator seed. Defaults to the experiment seed, and stays fixed
    /// across sweep trials so every trial sees the same corpus.
    pub data_seed: Option<u64>,
    pub train_path: Option<PathBuf>,
    pub id_eval_path: Option<PathBuf>,
    pub ood_eval_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            synthetic: true,
            n: 2000,
            data_seed: None,
            train_path: None,
            id_eval_path: None,
            ood_eval_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: Option<DistillConfig>,
    pub lora: Option<LoraConfig>,
    pub data: DataConfig,
    /// Built-in search space for sweeps; also validates a single run's
    /// assignment when present.
    pub space: Option<String>,
    pub n_trials: usize,
    pub sampler: Sampler,
    /// Distillation-teacher provenance: false (default) trains the teacher
    /// first; true freezes a randomly initialized twin instead.
    pub cd_teacher_random: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            strategy: Strategy::Vft,
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            distill: None,
            lora: None,
            data: DataConfig::default(),
            space: None,
            n_trials: 50,
            sampler: Sampler::Tpe,
            cd_teacher_random: false,
            seed: 42,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::usage(format!("cannot read config {}: {}", path.display(), e)))?;
        serde_json::from_str(&text)
            .map_err(|e| AppError::usage(format!("invalid config {}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<(), AppError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| AppError::runtime(format!("config encoding: {}", e)))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| AppError::runtime(format!("cannot write {}: {}", path.display(), e)))
    }

    /// Structural checks shared by every command: strategy-specific
    /// sections, model/train field sanity, and referenced files.
    pub fn validate(&self) -> Result<(), AppError> {
        self.model
            .validate()
            .map_err(|e| AppError::usage(format!("model: {}", e)))?;
        self.train
            .validate()
            .map_err(|e| AppError::usage(format!("train: {}", e)))?;
        if self.strategy == Strategy::Cd {
            let dc = self.distill.ok_or_else(|| {
                AppError::usage("strategy cd requires a distill section".to_string())
            })?;
            dc.validate()
                .map_err(|e| AppError::usage(format!("distill: {}", e)))?;
        } else if self.distill.is_some() {
            return Err(AppError::usage(format!(
                "strategy {} does not take a distill section",
                self.strategy.name()
            )));
        }
        if !self.strategy.uses_lora() && self.lora.is_some() {
            return Err(AppError::usage(format!(
                "strategy {} does not take a lora section",
                self.strategy.name()
            )));
        }
        if self.strategy.uses_lora() {
            let lc = self.lora.clone().unwrap_or_default();
            lc.validate(self.model.d_model)
                .map_err(|e| AppError::usage(format!("lora: {}", e)))?;
        }
        if matches!(self.strategy, Strategy::Pbft | Strategy::PbftLora) && self.train.template.is_none()
        {
            return Err(AppError::usage(format!(
                "strategy {} requires train.template",
                self.strategy.name()
            )));
        }
        if let Some(name) = &self.space {
            if hpo::builtin_space(name).is_none() {
                return Err(AppError::usage(format!("unknown search space {}", name)));
            }
        }
        if self.n_trials == 0 {
            return Err(AppError::usage("n_trials must be >= 1".to_string()));
        }
        if !self.data.synthetic {
            for (what, path) in [
                ("data.train_path", &self.data.train_path),
                ("data.id_eval_path", &self.data.id_eval_path),
                ("data.ood_eval_path", &self.data.ood_eval_path),
            ] {
                let path = path.as_ref().ok_or_else(|| {
                    AppError::usage(format!("{} is required when data.synthetic is false", what))
                })?;
                if !path.exists() {
                    return Err(AppError::usage(format!(
                        "{} does not exist: {}",
                        what,
                        path.display()
                    )));
                }
            }
        } else if self.data.n < 8 {
            return Err(AppError::usage("data.n must be >= 8 for the generator".to_string()));
        }
        Ok(())
    }

    /// For single runs that declare a space: the config's own assignment
    /// must lie within that space's bounds.
    pub fn validate_against_space(&self) -> Result<(), AppError> {
        let Some(name) = &self.space else {
            return Ok(());
        };
        let space = hpo::builtin_space(name)
            .ok_or_else(|| AppError::usage(format!("unknown search space {}", name)))?;
        let assignment = self.to_assignment(&space);
        space
            .check_assignment(&assignment)
            .map_err(|e| AppError::usage(format!("config outside space {}: {}", name, e)))
    }

    /// Reads the space-controlled values back out of this config.
    fn to_assignment(&self, space: &SearchSpace) -> Assignment {
        use ftlab_core::hpo::ParamValue;
        let mut a = Assignment::new();
        for spec in &space.params {
            let value = match spec.name.as_str() {
                "num_epochs" | "epochs" => Some(ParamValue::Int(self.train.epochs as i64)),
                "learning_rate" => Some(ParamValue::Float(self.train.learning_rate)),
                "batch_size" => Some(ParamValue::Int(self.train.batch_size as i64)),
                "warmup_ratio" => Some(ParamValue::Float(self.train.warmup_ratio)),
                "dropout" => self.train.hidden_dropout.map(ParamValue::Float),
                "optimizer" => Some(ParamValue::Text(self.train.optimizer.name().to_string())),
                "k_per_class" => self.train.k_per_class.map(|k| ParamValue::Int(k as i64)),
                "template" => self.train.template.map(|t| ParamValue::Text(t.name().to_string())),
                "temperature" => self.distill.map(|d| ParamValue::Float(d.temperature)),
                "distill_weight" => self.distill.map(|d| ParamValue::Float(d.distill_weight)),
                "rank" => self.lora.as_ref().map(|l| ParamValue::Int(l.rank as i64)),
                "alpha" => self.lora.as_ref().map(|l| ParamValue::Int(l.alpha as i64)),
                "lora_dropout" => self.lora.as_ref().map(|l| ParamValue::Float(l.dropout)),
                _ => None,
            };
            if let Some(v) = value {
                a.insert(spec.name.clone(), v);
            }
        }
        a
    }

    /// Writes a sampled assignment into a copy of this config, producing the
    /// exact config a trial runs (and the replayable best-config file).
    pub fn with_assignment(&self, assignment: &Assignment, seed: u64) -> ExperimentConfig {
        use ftlab_core::data::Template;
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.train.seed = seed;
        // The corpus must not vary across trials.
        cfg.data.data_seed = Some(self.data.data_seed.unwrap_or(self.seed));
        for (name, value) in assignment {
            match name.as_str() {
                "num_epochs" | "epochs" => {
                    if let Some(i) = value.as_i64() {
                        cfg.train.epochs = i as usize;
                    }
                }
                "learning_rate" => {
                    if let Some(x) = value.as_f64() {
                        cfg.train.learning_rate = x;
                    }
                }
                "batch_size" => {
                    if let Some(i) = value.as_i64() {
                        cfg.train.batch_size = i as usize;
                    }
                }
                "warmup_ratio" => {
                    if let Some(x) = value.as_f64() {
                        cfg.train.warmup_ratio = x;
                    }
                }
                "dropout" => {
                    if let Some(x) = value.as_f64() {
                        cfg.train.hidden_dropout = Some(x);
                        cfg.train.attention_dropout = Some(x);
                    }
                }
                "optimizer" => {
                    if let Some(kind) = value.as_str().and_then(OptimizerKind::from_name) {
                        cfg.train.optimizer = kind;
                    }
                }
                "k_per_class" => {
                    if let Some(i) = value.as_i64() {
                        cfg.train.k_per_class = Some(i as usize);
                    }
                }
                "template" => {
                    if let Some(t) = value.as_str().and_then(Template::from_name) {
                        cfg.train.template = Some(t);
                    }
                }
                "temperature" => {
                    if let Some(x) = value.as_f64() {
                        cfg.distill.get_or_insert_with(DistillConfig::default).temperature = x;
                    }
                }
                "distill_weight" => {
                    if let Some(x) = value.as_f64() {
                        cfg.distill.get_or_insert_with(DistillConfig::default).distill_weight = x;
                    }
                }
                "rank" => {
                    if let Some(i) = value.as_i64() {
                        cfg.lora.get_or_insert_with(LoraConfig::default).rank = i as usize;
                    }
                }
                "alpha" => {
                    if let Some(i) = value.as_i64() {
                        cfg.lora.get_or_insert_with(LoraConfig::default).alpha = i as f64;
                    }
                }
                "lora_dropout" => {
                    if let Some(x) = value.as_f64() {
                        cfg.lora.get_or_insert_with(LoraConfig::default).dropout = x;
                        cfg.train.lora_dropout = Some(x);
                    }
                }
                _ => {}
            }
        }
        cfg
    }
}
