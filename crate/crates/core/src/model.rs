//! A small pre-LN causal transformer for binary sequence classification.
//!
//! The classifier reads its logits from the last non-padding position of
//! each row. Hidden dropout sits on the embedding sum and on both residual
//! branches; attention dropout sits on the attention probabilities. Both are
//! active only in train mode.

use crate::lora::{LoraAdapter, LoraConfig};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch row {row} is entirely padding")]
    EmptyRow { row: usize },
    #[error("batch rows must share one length and mask shape")]
    RaggedBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

pub const LN_EPS: f64 = 1e-5;
pub const MASK_FILL: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
}

fn default_n_classes() -> usize {
    2
}

impl ModelConfig {
    /// The desk-scale default: 64-token context, 2 layers of width 64.
    /// Larger variants (e.g. a 256-token context) are config choices, not constants.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 1000,
            max_seq_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{} must be positive", name)));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        for (name, p) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::InvalidConfig(format!(
                    "{} must lie in [0, 1), got {}",
                    name, p
                )));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `V*d + L*d + n_layers*(4d + 4(d^2+d) + (d*f+f) + (f*d+d)) + 2d + (d*c+c)`
    /// covering embeddings, per-layer norms/projections/FFN, the final norm,
    /// and the head.
    pub fn param_count(&self) -> usize {
        let (d, f, c) = (self.d_model, self.d_ffn, self.n_classes);
        let per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + (d * c + c)
    }
}

pub(crate) struct Linear {
    pub(crate) w: Tensor,
    pub(crate) b: Tensor,
    pub(crate) adapter: Option<LoraAdapter>,
}

impl Linear {
    fn new(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.normal(0.0, INIT_STD)).collect();
        Linear {
            w: Tensor::param(vec![d_in, d_out], w).expect("finite init"),
            b: Tensor::param(vec![d_out], vec![0.0; d_out]).expect("finite init"),
            adapter: None,
        }
    }

    fn apply(&self, x: &Tensor, train: bool, rng: &mut Rng) -> Result<Tensor, TensorError> {
        let mut y = x.matmul(&self.w)?.add_bias(&self.b)?;
        if let Some(ad) = &self.adapter {
            let path = if train && ad.dropout > 0.0 {
                x.dropout(ad.dropout, rng)?
            } else {
                x.clone()
            };
            let delta = path.matmul(&ad.a)?.matmul(&ad.b)?.scale(ad.scaling)?;
            y = y.add(&delta)?;
        }
        Ok(y)
    }
}

pub(crate) struct LayerNormParams {
    pub(crate) gamma: Tensor,
    pub(crate) beta: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::param(vec![d], vec![1.0; d]).expect("finite init"),
            beta: Tensor::param(vec![d], vec![0.0; d]).expect("finite init"),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

pub(crate) struct Block {
    pub(crate) ln1: LayerNormParams,
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) o: Linear,
    pub(crate) ln2: LayerNormParams,
    pub(crate) w1: Linear,
    pub(crate) w2: Linear,
}

pub struct TransformerClassifier {
    pub(crate) config: ModelConfig,
    pub(crate) tok_emb: Tensor,
    pub(crate) pos_emb: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNormParams,
    pub(crate) head: Linear,
    pub(crate) lora_config: Option<LoraConfig>,
}

pub fn build_model(config: &ModelConfig, rng: &mut Rng) -> Result<TransformerClassifier, ModelError> {
    config.validate()?;
    let (v, l, d, f) = (config.vocab_size, config.max_seq_len, config.d_model, config.d_ffn);
    let tok: Vec<f64> = (0..v * d).map(|_| rng.normal(0.0, INIT_STD)).collect();
    let pos: Vec<f64> = (0..l * d).map(|_| rng.normal(0.0, INIT_STD)).collect();
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            ln1: LayerNormParams::new(d),
            q: Linear::new(rng, d, d),
            k: Linear::new(rng, d, d),
            v: Linear::new(rng, d, d),
            o: Linear::new(rng, d, d),
            ln2: LayerNormParams::new(d),
            w1: Linear::new(rng, d, f),
            w2: Linear::new(rng, f, d),
        })
        .collect();
    Ok(TransformerClassifier {
        config: config.clone(),
        tok_emb: Tensor::param(vec![v, d], tok).expect("finite init"),
        pos_emb: Tensor::param(vec![l, d], pos).expect("finite init"),
        blocks,
        ln_f: LayerNormParams::new(d),
        head: Linear::new(rng, d, config.n_classes),
        lora_config: None,
    })
}

impl TransformerClassifier {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora_config.as_ref()
    }

    /// Every parameter exactly once, in a stable order. Adapter tensors
    /// appear right after the weight they wrap.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        out.push(("tok_emb.weight".to_string(), self.tok_emb.clone()));
        out.push(("pos_emb.weight".to_string(), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            let push_ln = |name: &str, ln: &LayerNormParams, out: &mut Vec<(String, Tensor)>| {
                out.push((format!("layers.{}.{}.gamma", i, name), ln.gamma.clone()));
                out.push((format!("layers.{}.{}.beta", i, name), ln.beta.clone()));
            };
            let push_linear = |name: &str, lin: &Linear, out: &mut Vec<(String, Tensor)>| {
                out.push((format!("layers.{}.{}.weight", i, name), lin.w.clone()));
                out.push((format!("layers.{}.{}.bias", i, name), lin.b.clone()));
                if let Some(ad) = &lin.adapter {
                    out.push((format!("layers.{}.{}.lora_a", i, name), ad.a.clone()));
                    out.push((format!("layers.{}.{}.lora_b", i, name), ad.b.clone()));
                }
            };
            push_ln("ln1", &b.ln1, &mut out);
            push_linear("attn.q", &b.q, &mut out);
            push_linear("attn.k", &b.k, &mut out);
            push_linear("attn.v", &b.v, &mut out);
            push_linear("attn.o", &b.o, &mut out);
            push_ln("ln2", &b.ln2, &mut out);
            push_linear("ffn.w1", &b.w1, &mut out);
            push_linear("ffn.w2", &b.w2, &mut out);
        }
        out.push(("ln_f.gamma".to_string(), self.ln_f.gamma.clone()));
        out.push(("ln_f.beta".to_string(), self.ln_f.beta.clone()));
        out.push(("head.weight".to_string(), self.head.w.clone()));
        out.push(("head.bias".to_string(), self.head.b.clone()));
        out
    }

    /// The registry entries currently flagged trainable, in registry order.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_trainable_parameters(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_parameters() {
            t.zero_grad();
        }
    }

    /// Logits `[batch, n_classes]` read from the last non-padding position
    /// of each row. `rng` is consumed only when `train` enables dropout.
    pub fn forward(
        &self,
        token_ids: &[Vec<usize>],
        attn_mask: &[Vec<bool>],
        train: bool,
        rng: &mut Rng,
    ) -> Result<Tensor, ModelError> {
        let positions = self.last_real_positions(token_ids, attn_mask)?;
        self.forward_pooled_at(token_ids, attn_mask, &positions, train, rng)
    }

    /// Like [`forward`](Self::forward) but reads the classification vector
    /// at explicit positions. Exposed for causality diagnostics.
    pub fn forward_pooled_at(
        &self,
        token_ids: &[Vec<usize>],
        attn_mask: &[Vec<bool>],
        positions: &[usize],
        train: bool,
        rng: &mut Rng,
    ) -> Result<Tensor, ModelError> {
        let (bsz, seq) = self.check_batch(token_ids, attn_mask)?;
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let p_h = self.config.hidden_dropout;
        let p_a = self.config.attention_dropout;

        let flat_ids: Vec<usize> = token_ids.iter().flatten().copied().collect();
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let tok = Tensor::embedding(&flat_ids, &self.tok_emb)?;
        let pos = Tensor::embedding(&pos_ids, &self.pos_emb)?;
        let mut x = tok.add(&pos)?.reshape(vec![bsz, seq, d])?;
        x = maybe_dropout(x, p_h, train, rng)?;

        // blocked[b,h,i,j] = attention from i to j is forbidden
        let mut blocked = vec![false; bsz * h * seq * seq];
        let mut w = 0;
        for row_mask in attn_mask.iter() {
            for _ in 0..h {
                for i in 0..seq {
                    for (j, &real) in row_mask.iter().enumerate() {
                        blocked[w] = j > i || !real;
                        w += 1;
                    }
                }
            }
        }

        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let normed = block.ln1.apply(&x)?;
            let split = |t: Tensor| -> Result<Tensor, TensorError> {
                t.reshape(vec![bsz, seq, h, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(vec![bsz * h, seq, dh])
            };
            let q = split(block.q.apply(&normed, train, rng)?)?;
            let k = split(block.k.apply(&normed, train, rng)?)?;
            let v = split(block.v.apply(&normed, train, rng)?)?;
            let scores = q.bmm(&k, true)?.scale(inv_sqrt_dh)?;
            let masked = scores.masked_fill(&blocked, MASK_FILL)?;
            let mut probs = masked.softmax(1.0)?;
            probs = maybe_dropout(probs, p_a, train, rng)?;
            let ctx = probs
                .bmm(&v, false)?
                .reshape(vec![bsz, h, seq, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![bsz, seq, d])?;
            let attn_out = maybe_dropout(block.o.apply(&ctx, train, rng)?, p_h, train, rng)?;
            x = x.add(&attn_out)?;

            let normed2 = block.ln2.apply(&x)?;
            let hidden = block.w1.apply(&normed2, train, rng)?.gelu()?;
            let ffn_out = maybe_dropout(block.w2.apply(&hidden, train, rng)?, p_h, train, rng)?;
            x = x.add(&ffn_out)?;
        }

        let pooled = self.ln_f.apply(&x)?.select_rows(positions)?;
        Ok(self.head.apply(&pooled, train, rng)?)
    }

    fn check_batch(&self, token_ids: &[Vec<usize>], attn_mask: &[Vec<bool>]) -> Result<(usize, usize), ModelError> {
        if token_ids.is_empty() || token_ids.len() != attn_mask.len() {
            return Err(ModelError::RaggedBatch);
        }
        let seq = token_ids[0].len();
        if seq == 0 {
            return Err(ModelError::RaggedBatch);
        }
        if token_ids.iter().any(|r| r.len() != seq) || attn_mask.iter().any(|r| r.len() != seq) {
            return Err(ModelError::RaggedBatch);
        }
        if seq > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        Ok((token_ids.len(), seq))
    }

    fn last_real_positions(&self, token_ids: &[Vec<usize>], attn_mask: &[Vec<bool>]) -> Result<Vec<usize>, ModelError> {
        self.check_batch(token_ids, attn_mask)?;
        attn_mask
            .iter()
            .enumerate()
            .map(|(row, m)| m.iter().rposition(|&r| r).ok_or(ModelError::EmptyRow { row }))
            .collect()
    }

    /// Writes config plus every named parameter (values, shape, trainable
    /// flag) as a single structured-text file. Loading it back reproduces the
    /// model bit for bit.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let params: BTreeMap<String, ParamRecord> = self
            .named_parameters()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    ParamRecord {
                        shape: t.shape().to_vec(),
                        data: t.to_vec(),
                        trainable: t.requires_grad(),
                    },
                )
            })
            .collect();
        let file = Checkpoint {
            config: self.config.clone(),
            lora: self.lora_config.clone(),
            params,
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<TransformerClassifier, ModelError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let file: Checkpoint = serde_json::from_reader(reader)?;
        let mut rng = Rng::from_seed(0);
        let mut model = build_model(&file.config, &mut rng)?;
        if let Some(lora_cfg) = &file.lora {
            crate::lora::inject(&mut model, lora_cfg, &mut rng)
                .map_err(|e| ModelError::Mismatch(format!("adapter rebuild failed: {}", e)))?;
        }
        let named = model.named_parameters();
        if named.len() != file.params.len() {
            return Err(ModelError::Mismatch(format!(
                "checkpoint has {} tensors, model wants {}",
                file.params.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let record = file
                .params
                .get(&name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing tensor `{}`", name)))?;
            if record.shape != tensor.shape() {
                return Err(ModelError::Mismatch(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    name,
                    record.shape,
                    tensor.shape()
                )));
            }
            if record.data.len() != tensor.numel() {
                return Err(ModelError::Mismatch(format!("tensor `{}` length mismatch", name)));
            }
            if record.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Mismatch(format!("tensor `{}` has non-finite values", name)));
            }
            tensor.data_mut().copy_from_slice(&record.data);
            tensor.set_requires_grad(record.trainable);
        }
        Ok(model)
    }
}

fn maybe_dropout(x: Tensor, p: f64, train: bool, rng: &mut Rng) -> Result<Tensor, TensorError> {
    if train && p > 0.0 {
        x.dropout(p, rng)
    } else {
        Ok(x)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    params: BTreeMap<String, ParamRecord>,
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(logits: &[f64], width: usize) -> Vec<usize> {
    logits
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
