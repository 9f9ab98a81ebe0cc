//! Training strategies, evaluation, and distillation.
//!
//! Five strategies share one loop: `vft` (full fine-tune on the raw
//! sentence), `pbft` (full fine-tune on a templated prompt), their LoRA
//! variants, and `cd` (context distillation: a frozen teacher reading the
//! scratchpad prompt guides the student through a temperature-scaled KL
//! term blended with cross-entropy).

pub mod metrics;
pub mod optim;

pub use metrics::{EpochRecord, MetricsError, MetricsTrace};
pub use optim::{lr_at, OptimError, Optimizer, OptimizerKind};

use crate::data::{self, apply_template, teacher_prompt, DataError, Example, Template, Vocab};
use crate::model::{argmax_rows, build_model, ModelError, TransformerClassifier};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("strategy {strategy} requires {what}")]
    MissingIngredient {
        strategy: &'static str,
        what: &'static str,
    },
    #[error("teacher model must be frozen (found {0} trainable values)")]
    TeacherNotFrozen(usize),
    #[error("dataset `{0}` is empty")]
    EmptyDataset(&'static str),
    #[error("vocabulary has {vocab} entries but the model embeds only {max}")]
    VocabTooLarge { vocab: usize, max: usize },
    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    StepFailed {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vft,
    Pbft,
    VftLora,
    PbftLora,
    Cd,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Vft,
        Strategy::Pbft,
        Strategy::VftLora,
        Strategy::PbftLora,
        Strategy::Cd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vft => "vft",
            Strategy::Pbft => "pbft",
            Strategy::VftLora => "vft_lora",
            Strategy::PbftLora => "pbft_lora",
            Strategy::Cd => "cd",
        }
    }

    pub fn from_name(name: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self, Strategy::VftLora | Strategy::PbftLora)
    }

    pub fn uses_template(&self) -> bool {
        matches!(self, Strategy::Pbft | Strategy::PbftLora | Strategy::Cd)
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Override for the model's hidden dropout; applied when the model is
    /// built, echoed here so the assignment is self-describing.
    pub hidden_dropout: Option<f64>,
    pub attention_dropout: Option<f64>,
    pub lora_dropout: Option<f64>,
    /// Cap on encoded sequence length; the model's own limit still applies.
    pub max_seq_len: Option<usize>,
    /// Few-shot subsample: this many examples per class drawn from the
    /// train split. `None` trains on the full split.
    pub k_per_class: Option<usize>,
    pub template: Option<Template>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            hidden_dropout: None,
            attention_dropout: None,
            lora_dropout: None,
            max_seq_len: None,
            k_per_class: None,
            template: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=0.2).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must be in [0, 0.2], got {}", self.warmup_ratio));
        }
        for (name, v) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
            ("lora_dropout", self.lora_dropout),
        ] {
            if let Some(p) = v {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("{} must be in [0, 1), got {}", name, p));
                }
            }
        }
        if self.max_seq_len == Some(0) {
            return bad("max_seq_len must be >= 1".into());
        }
        if self.k_per_class == Some(0) {
            return bad("k_per_class must be >= 1".into());
        }
        Ok(())
    }
}

/// Temperature and mixing weight for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub distill_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig {
            temperature: 2.0,
            distill_weight: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.distill_weight) {
            return Err(TrainError::InvalidConfig(format!(
                "distill_weight must be in [0, 1], got {}",
                self.distill_weight
            )));
        }
        Ok(())
    }
}

/// `(1−w)·CE(student, labels) + w·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`.
/// The teacher side must already be detached (run it under `no_grad`).
pub fn distill_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    dc: &DistillConfig,
) -> Result<Tensor, TrainError> {
    dc.validate()?;
    let (ce, kl) = distill_parts(student_logits, teacher_logits, labels, dc)?;
    Ok(ce.add(&kl)?)
}

/// The two weighted terms of the distillation loss, for component tracking.
fn distill_parts(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    dc: &DistillConfig,
) -> Result<(Tensor, Tensor), TrainError> {
    let w = dc.distill_weight;
    let t = dc.temperature;
    let ce = student_logits.cross_entropy(labels)?.scale(1.0 - w)?;
    let kl = Tensor::kl_divergence(teacher_logits, student_logits, t)?.scale(w * t * t)?;
    Ok((ce, kl))
}

/// The three corpus splits a run consumes.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<Example>,
    pub id_eval: Vec<Example>,
    pub ood_eval: Vec<Example>,
}

/// Token ids, padding masks, and labels for one split, unpadded. Rows are
/// padded per batch; pooled logits are invariant to trailing padding, so
/// batching does not change predictions.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub ids: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encodes a split with `vocab`, rendering each sentence through `render`.
pub fn encode_set(
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
    render: impl Fn(&str) -> String,
) -> Result<EncodedSet, DataError> {
    let mut ids = Vec::with_capacity(examples.len());
    let mut masks = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let (row, mask) = vocab.encode(&render(&ex.sentence), max_len)?;
        ids.push(row);
        masks.push(mask);
        labels.push(ex.label as usize);
    }
    Ok(EncodedSet { ids, masks, labels })
}

fn pad_rows(
    set: &EncodedSet,
    batch: &[usize],
) -> (Vec<Vec<usize>>, Vec<Vec<bool>>, Vec<usize>) {
    let width = batch.iter().map(|&i| set.ids[i].len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let mut row = set.ids[i].clone();
        let mut mask = set.masks[i].clone();
        row.resize(width, data::PAD_ID);
        mask.resize(width, false);
        ids.push(row);
        masks.push(mask);
        labels.push(set.labels[i]);
    }
    (ids, masks, labels)
}

/// Fraction of argmax-correct predictions in eval mode (no dropout, no
/// gradient tape). Invariant under `batch_size`.
pub fn evaluate(
    model: &TransformerClassifier,
    set: &EncodedSet,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset("eval"));
    }
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let _guard = no_grad();
    let mut eval_rng = Rng::from_seed(0); // unused: dropout is off in eval mode
    let order: Vec<usize> = (0..set.len()).collect();
    let n_classes = model.config().n_classes;
    let mut correct = 0usize;
    for batch in order.chunks(batch_size) {
        let (ids, masks, labels) = pad_rows(set, batch);
        let logits = model.forward(&ids, &masks, false, &mut eval_rng)?;
        let preds = argmax_rows(&logits.to_vec(), n_classes);
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Run identity and strategy wiring for [`train`], beyond the plain
/// hyperparameters in [`TrainConfig`].
pub struct TrainRun<'a> {
    pub strategy: Strategy,
    pub distill: Option<DistillConfig>,
    /// Frozen teacher for `cd`.
    pub teacher: Option<&'a TransformerClassifier>,
    /// Use this vocabulary instead of building one from the train split
    /// (required to keep teacher and student token ids aligned).
    pub vocab: Option<&'a Vocab>,
    /// Render inputs with the scratchpad suffix. Used when preparing a
    /// distillation teacher; normal runs leave this false.
    pub scratchpad_inputs: bool,
    pub run_id: String,
    /// When set, `trace.jsonl` and `timing.jsonl` are written here.
    pub out_dir: Option<&'a Path>,
}

impl<'a> TrainRun<'a> {
    pub fn new(strategy: Strategy, run_id: impl Into<String>) -> TrainRun<'a> {
        TrainRun {
            strategy,
            distill: None,
            teacher: None,
            vocab: None,
            scratchpad_inputs: false,
            run_id: run_id.into(),
            out_dir: None,
        }
    }
}

/// Rendering used for the student-side inputs of `strategy`.
fn student_render(strategy: Strategy, template: Option<Template>, scratchpad: bool, s: &str) -> String {
    let base = match strategy {
        Strategy::Vft | Strategy::VftLora => s.to_string(),
        Strategy::Pbft | Strategy::PbftLora | Strategy::Cd => {
            apply_template(s, template.unwrap_or(Template::Gpt3))
        }
    };
    if scratchpad {
        format!("{}{}", base, data::SCRATCHPAD_SUFFIX)
    } else {
        base
    }
}

/// Text the vocabulary is built over: the richest rendering this run will
/// ever see, so every variant of the prompt tokenizes without surprises.
fn vocab_render(strategy: Strategy, template: Option<Template>, scratchpad: bool, s: &str) -> String {
    if strategy == Strategy::Cd {
        teacher_prompt(s, template.unwrap_or(Template::Gpt3))
    } else {
        student_render(strategy, template, scratchpad, s)
    }
}

fn validate_run(
    model: &TransformerClassifier,
    datasets: &Datasets,
    tc: &TrainConfig,
    run: &TrainRun,
) -> Result<(), TrainError> {
    tc.validate()?;
    if datasets.train.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if datasets.id_eval.is_empty() {
        return Err(TrainError::EmptyDataset("id_eval"));
    }
    if datasets.ood_eval.is_empty() {
        return Err(TrainError::EmptyDataset("ood_eval"));
    }
    let strategy = run.strategy;
    if strategy.uses_lora() && model.lora_config().is_none() {
        return Err(TrainError::MissingIngredient {
            strategy: strategy.name(),
            what: "injected adapters",
        });
    }
    if !strategy.uses_lora() && model.lora_config().is_some() {
        return Err(TrainError::MissingIngredient {
            strategy: strategy.name(),
            what: "a model without adapters",
        });
    }
    if matches!(strategy, Strategy::Pbft | Strategy::PbftLora) && tc.template.is_none() {
        return Err(TrainError::MissingIngredient {
            strategy: strategy.name(),
            what: "a template",
        });
    }
    if strategy == Strategy::Cd {
        let dc = run.distill.as_ref().ok_or(TrainError::MissingIngredient {
            strategy: "cd",
            what: "a distill config",
        })?;
        dc.validate()?;
        let teacher = run.teacher.ok_or(TrainError::MissingIngredient {
            strategy: "cd",
            what: "a frozen teacher",
        })?;
        let trainable = teacher.num_trainable_parameters();
        if trainable > 0 {
            return Err(TrainError::TeacherNotFrozen(trainable));
        }
    } else if run.teacher.is_some() || run.distill.is_some() {
        return Err(TrainError::InvalidConfig(format!(
            "strategy {} does not take a teacher or distill config",
            strategy.name()
        )));
    }
    Ok(())
}

/// Hyperparameter echo written as the first trace line.
fn assignment_echo(tc: &TrainConfig, run: &TrainRun) -> serde_json::Value {
    let mut v = serde_json::json!({
        "strategy": run.strategy.name(),
        "train": serde_json::to_value(tc).expect("config serializes"),
    });
    if let Some(dc) = &run.distill {
        v["distill"] = serde_json::to_value(dc).expect("config serializes");
    }
    v
}

/// Runs `tc.epochs` of shuffled minibatch training and per-epoch ID/OOD
/// evaluation. See [`TrainRun`] for strategy wiring. The trace is returned
/// and, when `run.out_dir` is set, persisted.
pub fn train(
    model: &TransformerClassifier,
    datasets: &Datasets,
    tc: &TrainConfig,
    run: &TrainRun,
) -> Result<MetricsTrace, TrainError> {
    validate_run(model, datasets, tc, run)?;
    let strategy = run.strategy;
    let template = tc.template;

    let mut master = Rng::from_seed(tc.seed);
    let mut data_rng = master.fork();
    let mut train_rng = master.fork();

    // Few-shot subset, if requested.
    let train_examples: Vec<Example> = match tc.k_per_class {
        Some(k) => data::few_shot_sample(&datasets.train, k, &mut data_rng)?,
        None => datasets.train.clone(),
    };

    // Vocabulary over the full train split (not the few-shot subset), so a
    // run is comparable across k and teacher/student ids stay aligned.
    let built_vocab;
    let vocab: &Vocab = match run.vocab {
        Some(v) => v,
        None => {
            let texts: Vec<String> = datasets
                .train
                .iter()
                .map(|e| vocab_render(strategy, template, run.scratchpad_inputs, &e.sentence))
                .collect();
            built_vocab = Vocab::build(texts.iter().map(|s| s.as_str()), 1);
            &built_vocab
        }
    };
    let cfg = model.config();
    if vocab.len() > cfg.vocab_size {
        return Err(TrainError::VocabTooLarge {
            vocab: vocab.len(),
            max: cfg.vocab_size,
        });
    }
    let max_len = tc.max_seq_len.unwrap_or(cfg.max_seq_len).min(cfg.max_seq_len);

    let render = |s: &str| student_render(strategy, template, run.scratchpad_inputs, s);
    let train_set = encode_set(&train_examples, vocab, max_len, render)?;
    let id_set = encode_set(&datasets.id_eval, vocab, max_len, render)?;
    let ood_set = encode_set(&datasets.ood_eval, vocab, max_len, render)?;
    let teacher_set = if strategy == Strategy::Cd {
        let base = template.unwrap_or(Template::Gpt3);
        Some(encode_set(&train_examples, vocab, max_len, |s| {
            teacher_prompt(s, base)
        })?)
    } else {
        None
    };

    let n_train = train_set.len();
    if n_train == 0 {
        return Err(TrainError::EmptyDataset("train"));
    }
    let n_batches = n_train.div_ceil(tc.batch_size);
    let total_steps = tc.epochs * n_batches;

    let params: Vec<Tensor> = model
        .trainable_parameters()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let mut opt = Optimizer::new(tc.optimizer, params, tc.weight_decay);

    let mut trace = MetricsTrace::new(&run.run_id, strategy.name(), assignment_echo(tc, run));
    let mut kl_by_epoch = (strategy == Strategy::Cd).then(Vec::new);

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut global_step = 0usize;
    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        crate::mem::reset_peak();
        data_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let step = global_step;
            let loss = run_batch(
                model,
                &train_set,
                teacher_set.as_ref(),
                run,
                tc,
                batch,
                step,
                total_steps,
                &mut opt,
                &mut train_rng,
            )
            .map_err(|source| TrainError::StepFailed {
                epoch,
                step,
                source: Box::new(source),
            })?;
            loss_sum += loss * batch.len() as f64;
            global_step += 1;
        }

        let id_acc = evaluate(model, &id_set, tc.batch_size)?;
        let ood_acc = evaluate(model, &ood_set, tc.batch_size)?;
        if let Some(kls) = kl_by_epoch.as_mut() {
            // End-of-epoch state, like the accuracy columns: the scaled KL
            // term of the objective, evaluated over the train prompts.
            let teacher = run.teacher.expect("validated");
            let dc = run.distill.as_ref().expect("validated");
            let t_set = teacher_set.as_ref().expect("cd encodes a teacher set");
            kls.push(mean_scaled_kl(model, teacher, &train_set, t_set, dc, tc.batch_size)?);
        }
        trace.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n_train as f64,
            id_acc,
            ood_acc,
            iter_time_s: started.elapsed().as_secs_f64(),
            mem_bytes: crate::mem::peak_bytes() as u64,
        });
    }
    trace.kl_by_epoch = kl_by_epoch;

    if let Some(dir) = run.out_dir {
        trace.persist(dir)?;
    }
    Ok(trace)
}

/// One optimizer step on one minibatch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &TransformerClassifier,
    train_set: &EncodedSet,
    teacher_set: Option<&EncodedSet>,
    run: &TrainRun,
    tc: &TrainConfig,
    batch: &[usize],
    step: usize,
    total_steps: usize,
    opt: &mut Optimizer,
    train_rng: &mut Rng,
) -> Result<f64, TrainError> {
    let (ids, masks, labels) = pad_rows(train_set, batch);
    let logits = model.forward(&ids, &masks, true, train_rng)?;

    let loss = match run.strategy {
        Strategy::Cd => {
            let teacher = run.teacher.expect("validated");
            let dc = run.distill.as_ref().expect("validated");
            let t_set = teacher_set.expect("cd encodes a teacher set");
            let (t_ids, t_masks, _) = pad_rows(t_set, batch);
            let teacher_logits = {
                let _guard = no_grad();
                let mut rng = Rng::from_seed(0); // eval mode: dropout off
                teacher.forward(&t_ids, &t_masks, false, &mut rng)?
            };
            distill_loss(&logits, &teacher_logits, &labels, dc)?
        }
        _ => logits.cross_entropy(&labels)?,
    };

    let loss_value = loss.item()?;
    loss.backward()?;
    let lr = lr_at(step, total_steps, tc.warmup_ratio, tc.learning_rate)?;
    opt.step(lr)?;
    model.zero_grad();
    Ok(loss_value)
}

/// Example-weighted mean of the scaled KL term `w·T²·KL(teacher ‖ student)`
/// over a split, with both models in eval mode and no gradient tape.
fn mean_scaled_kl(
    student: &TransformerClassifier,
    teacher: &TransformerClassifier,
    student_set: &EncodedSet,
    teacher_set: &EncodedSet,
    dc: &DistillConfig,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let _guard = no_grad();
    let mut eval_rng = Rng::from_seed(0); // unused: dropout is off in eval mode
    let order: Vec<usize> = (0..student_set.len()).collect();
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let (ids, masks, labels) = pad_rows(student_set, batch);
        let (t_ids, t_masks, _) = pad_rows(teacher_set, batch);
        let student_logits = student.forward(&ids, &masks, false, &mut eval_rng)?;
        let teacher_logits = teacher.forward(&t_ids, &t_masks, false, &mut eval_rng)?;
        let (_, kl) = distill_parts(&student_logits, &teacher_logits, &labels, dc)?;
        total += kl.item()? * batch.len() as f64;
    }
    Ok(total / student_set.len() as f64)
}

/// Builds and trains a distillation teacher: a fresh model fine-tuned with
/// plain cross-entropy on the scratchpad-suffixed prompt, then frozen.
///
/// Pass the shared `vocab` that the student run will use so token ids line
/// up. Returns the frozen teacher and its training trace.
pub fn prepare_teacher(
    config: &crate::model::ModelConfig,
    datasets: &Datasets,
    tc: &TrainConfig,
    vocab: &Vocab,
    run_id: &str,
    out_dir: Option<&Path>,
) -> Result<(TransformerClassifier, MetricsTrace), TrainError> {
    let mut rng = Rng::from_seed(tc.seed);
    let teacher = build_model(config, &mut rng)?;
    let mut run = TrainRun::new(Strategy::Pbft, run_id);
    run.scratchpad_inputs = true;
    run.vocab = Some(vocab);
    run.out_dir = out_dir;
    let mut teacher_tc = tc.clone();
    if teacher_tc.template.is_none() {
        teacher_tc.template = Some(Template::Gpt3);
    }
    let trace = train(&teacher, datasets, &teacher_tc, &run)?;
    for (_, p) in teacher.named_parameters() {
        p.set_requires_grad(false);
    }
    Ok((teacher, trace))
}

/// Vocabulary shared by a distillation teacher and its student: built over
/// the teacher-side rendering (a superset of the student prompt's tokens).
pub fn cd_vocab(datasets: &Datasets, template: Option<Template>) -> Vocab {
    let base = template.unwrap_or(Template::Gpt3);
    let texts: Vec<String> = datasets
        .train
        .iter()
        .map(|e| teacher_prompt(&e.sentence, base))
        .collect();
    Vocab::build(texts.iter().map(|s| s.as_str()), 1)
}
