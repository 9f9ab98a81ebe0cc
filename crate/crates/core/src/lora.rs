//! Low-rank adapter injection, merging, and adapter-only checkpoints for the
//! attention projection matrices.
//!
//! An adapter replaces a frozen weight W functionally by
//! `x·W + s·(dropout(x)·A)·B` with `s = alpha / rank`. A starts at
//! normal(0, 0.02) and B at zero, so the adapted model is exactly the base
//! model until the first update. Dropout touches only the adapter path.

use crate::model::{Linear, TransformerClassifier};
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds d_model {d_model}")]
    RankTooLarge { rank: usize, d_model: usize },
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("adapters are already attached")]
    AlreadyInjected,
    #[error("no adapters are attached")]
    NoAdapters,
    #[error("adapter checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adapter checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("adapter checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O];

    fn key(&self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    /// The best-found configuration: rank 16, alpha 64, dropout 0.2 on the
    /// query and value projections.
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 64.0,
            dropout: 0.2,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::InvalidConfig("rank must be positive".to_string()));
        }
        if self.rank > d_model {
            return Err(LoraError::RankTooLarge {
                rank: self.rank,
                d_model,
            });
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(LoraError::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LoraError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(LoraError::InvalidConfig("target set is empty".to_string()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(LoraError::InvalidConfig("duplicate targets".to_string()));
        }
        Ok(())
    }
}

pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
    pub dropout: f64,
}

fn target_linears(block: &mut crate::model::Block, target: LoraTarget) -> &mut Linear {
    match target {
        LoraTarget::Q => &mut block.q,
        LoraTarget::K => &mut block.k,
        LoraTarget::V => &mut block.v,
        LoraTarget::O => &mut block.o,
    }
}

/// Attaches fresh adapters to every layer's target projections, freezes all
/// base parameters, and leaves the classification head trainable.
pub fn inject(model: &mut TransformerClassifier, cfg: &LoraConfig, rng: &mut Rng) -> Result<(), LoraError> {
    let d = model.config().d_model;
    cfg.validate(d)?;
    if model.lora_config.is_some() {
        return Err(LoraError::AlreadyInjected);
    }
    for (_, t) in model.named_parameters() {
        t.set_requires_grad(false);
    }
    model.head.w.set_requires_grad(true);
    model.head.b.set_requires_grad(true);
    let r = cfg.rank;
    for block in model.blocks.iter_mut() {
        for &target in LoraTarget::ALL.iter().filter(|t| cfg.targets.contains(t)) {
            let lin = target_linears(block, target);
            let (d_in, d_out) = (lin.w.shape()[0], lin.w.shape()[1]);
            let a: Vec<f64> = (0..d_in * r).map(|_| rng.normal(0.0, 0.02)).collect();
            lin.adapter = Some(LoraAdapter {
                a: Tensor::param(vec![d_in, r], a)?,
                b: Tensor::param(vec![r, d_out], vec![0.0; r * d_out])?,
                scaling: cfg.scaling(),
                dropout: cfg.dropout,
            });
        }
    }
    model.lora_config = Some(cfg.clone());
    Ok(())
}

/// Folds every adapter into its base weight (`W += s·A·B`), removes the
/// adapters, and unfreezes the model. Eval outputs are preserved.
pub fn merge(model: &mut TransformerClassifier) -> Result<(), LoraError> {
    if model.lora_config.is_none() {
        return Err(LoraError::NoAdapters);
    }
    for block in model.blocks.iter_mut() {
        for target in LoraTarget::ALL {
            let lin = target_linears(block, target);
            let Some(ad) = lin.adapter.take() else {
                continue;
            };
            let (d_in, d_out) = (lin.w.shape()[0], lin.w.shape()[1]);
            let r = ad.a.shape()[1];
            let mut delta = vec![0.0; d_in * d_out];
            kernels::matmul_nn(&ad.a.data(), &ad.b.data(), d_in, r, d_out, &mut delta);
            let mut w = lin.w.data_mut();
            for (wv, &dv) in w.iter_mut().zip(&delta) {
                // Skipping exact zeros keeps untrained merges bit-identical.
                if dv != 0.0 {
                    *wv += ad.scaling * dv;
                }
            }
            drop(w);
            crate::tensor::ensure_finite("lora_merge", &lin.w.data())?;
        }
    }
    model.lora_config = None;
    for (_, t) in model.named_parameters() {
        t.set_requires_grad(true);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AdapterRecord {
    a_shape: Vec<usize>,
    a: Vec<f64>,
    b_shape: Vec<usize>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdapterCheckpoint {
    config: LoraConfig,
    d_model: usize,
    n_layers: usize,
    adapters: BTreeMap<String, AdapterRecord>,
}

/// Writes only the adapter tensors plus their config.
pub fn save_adapters(model: &TransformerClassifier, path: &Path) -> Result<(), LoraError> {
    let cfg = model.lora_config.clone().ok_or(LoraError::NoAdapters)?;
    let mut adapters = BTreeMap::new();
    for (i, block) in model.blocks.iter().enumerate() {
        for (target, lin) in [
            (LoraTarget::Q, &block.q),
            (LoraTarget::K, &block.k),
            (LoraTarget::V, &block.v),
            (LoraTarget::O, &block.o),
        ] {
            if let Some(ad) = &lin.adapter {
                adapters.insert(
                    format!("layers.{}.{}", i, target.key()),
                    AdapterRecord {
                        a_shape: ad.a.shape().to_vec(),
                        a: ad.a.to_vec(),
                        b_shape: ad.b.shape().to_vec(),
                        b: ad.b.to_vec(),
                    },
                );
            }
        }
    }
    let file = AdapterCheckpoint {
        config: cfg,
        d_model: model.config().d_model,
        n_layers: model.config().n_layers,
        adapters,
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads an adapter-only checkpoint onto a plain base model; any shape or
/// layout disagreement is a hard error.
pub fn load_adapters(model: &mut TransformerClassifier, path: &Path) -> Result<(), LoraError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let file: AdapterCheckpoint = serde_json::from_reader(reader)?;
    if file.d_model != model.config().d_model || file.n_layers != model.config().n_layers {
        return Err(LoraError::Mismatch(format!(
            "checkpoint built for d_model {} / {} layers, base has {} / {}",
            file.d_model,
            file.n_layers,
            model.config().d_model,
            model.config().n_layers
        )));
    }
    // Build zero-initialized adapters in place, then overwrite from records.
    inject(model, &file.config, &mut Rng::from_seed(0))?;
    let expected = model.config().n_layers * file.config.targets.len();
    if file.adapters.len() != expected {
        return Err(LoraError::Mismatch(format!(
            "checkpoint holds {} adapters, config implies {}",
            file.adapters.len(),
            expected
        )));
    }
    for (i, block) in model.blocks.iter_mut().enumerate() {
        for target in LoraTarget::ALL {
            let lin = target_linears(block, target);
            let Some(ad) = &lin.adapter else {
                continue;
            };
            let key = format!("layers.{}.{}", i, target.key());
            let record = file
                .adapters
                .get(&key)
                .ok_or_else(|| LoraError::Mismatch(format!("missing adapter `{}`", key)))?;
            for (tensor, shape, data) in [
                (&ad.a, &record.a_shape, &record.a),
                (&ad.b, &record.b_shape, &record.b),
            ] {
                if shape != tensor.shape() || data.len() != tensor.numel() {
                    return Err(LoraError::Mismatch(format!(
                        "adapter `{}` has shape {:?}, expected {:?}",
                        key,
                        shape,
                        tensor.shape()
                    )));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(LoraError::Mismatch(format!("adapter `{}` has non-finite values", key)));
                }
                tensor.data_mut().copy_from_slice(data);
            }
        }
    }
    Ok(())
}
