//! Shared run engine: builds the corpus and the model from an
//! [`ExperimentConfig`], trains, and lays down the run-directory artifacts.
//!
//! `cmd_train` and every `cmd_optimize` trial go through the same
//! [`run_experiment`] path, so a stored best-trial config replays bit for
//! bit. Everything written here is deterministic given (config, seed)
//! except `timing.jsonl` and `run.log`, which hold wall-clock and host
//! facts by design.

use crate::config::ExperimentConfig;
use crate::error::AppError;
use ftlab_core::data::{self, Split, Vocab};
use ftlab_core::hpo::{self, TpeKnobs, TrialOutcome};
use ftlab_core::lora;
use ftlab_core::model::{build_model, TransformerClassifier};
use ftlab_core::rng::Rng;
use ftlab_core::training::{self, Datasets, MetricsTrace, Strategy, TrainRun};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub fn run_id(strategy: Strategy, seed: u64) -> String {
    format!("{}-seed{}", strategy.name(), seed)
}

/// Materializes the three splits, either from the generator (eval splits a
/// quarter of the train size) or from explicit files. The generator seed
/// defaults to the experiment seed and is independent of the training seed,
/// so sweep trials share one corpus.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets, AppError> {
    if cfg.data.synthetic {
        let seed = cfg.data.data_seed.unwrap_or(cfg.seed);
        let mut rng = Rng::from_seed(seed);
        let eval_n = (cfg.data.n / 4).max(2);
        Ok(Datasets {
            train: data::generate_synthetic(cfg.data.n, &mut rng, Split::Train)?,
            id_eval: data::generate_synthetic(eval_n, &mut rng, Split::IdEval)?,
            ood_eval: data::generate_synthetic(eval_n, &mut rng, Split::OodEval)?,
        })
    } else {
        let read = |what: &str, path: &Option<PathBuf>| -> Result<Vec<data::Example>, AppError> {
            let path = path
                .as_ref()
                .ok_or_else(|| AppError::usage(format!("{} is required", what)))?;
            data::read_jsonl(path).map_err(|e| AppError::runtime(e.to_string()))
        };
        Ok(Datasets {
            train: read("data.train_path", &cfg.data.train_path)?,
            id_eval: read("data.id_eval_path", &cfg.data.id_eval_path)?,
            ood_eval: read("data.ood_eval_path", &cfg.data.ood_eval_path)?,
        })
    }
}

/// One complete run of `cfg.strategy` on `datasets`. When `out_dir` is set,
/// the directory afterwards holds: `config.json` (resolved echo),
/// `trace.jsonl`, `checkpoint.json`, `adapters.json` (LoRA strategies),
/// a `teacher/` subrun (cd with a trained teacher), and the `timing.jsonl` /
/// `run.log` sidecars.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    datasets: &Datasets,
    out_dir: Option<&Path>,
) -> Result<MetricsTrace, AppError> {
    let started = Instant::now();
    let start_stamp = unix_now();

    let mut mc = cfg.model.clone();
    if let Some(p) = cfg.train.hidden_dropout {
        mc.hidden_dropout = p;
    }
    if let Some(p) = cfg.train.attention_dropout {
        mc.attention_dropout = p;
    }

    let mut rng = Rng::from_seed(cfg.train.seed);
    let mut model = build_model(&mc, &mut rng)?;
    if cfg.strategy.uses_lora() {
        let mut lc = cfg.lora.clone().unwrap_or_default();
        if let Some(p) = cfg.train.lora_dropout {
            lc.dropout = p;
        }
        lora::inject(&mut model, &lc, &mut rng)
            .map_err(|e| AppError::runtime(format!("adapter injection: {}", e)))?;
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        cfg.save(&dir.join("config.json"))?;
    }

    let rid = run_id(cfg.strategy, cfg.train.seed);
    let (vocab, teacher): (Option<Vocab>, Option<TransformerClassifier>) =
        if cfg.strategy == Strategy::Cd {
            let vocab = training::cd_vocab(datasets, cfg.train.template);
            let teacher = if cfg.cd_teacher_random {
                // The literal reading: a frozen, randomly initialized twin.
                let mut twin_rng = Rng::from_seed(cfg.train.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
                let twin = build_model(&mc, &mut twin_rng)?;
                for (_, p) in twin.named_parameters() {
                    p.set_requires_grad(false);
                }
                twin
            } else {
                let teacher_dir = out_dir.map(|d| d.join("teacher"));
                if let Some(d) = &teacher_dir {
                    std::fs::create_dir_all(d)?;
                }
                let (model, _trace) = training::prepare_teacher(
                    &mc,
                    datasets,
                    &cfg.train,
                    &vocab,
                    &format!("{}-teacher", rid),
                    teacher_dir.as_deref(),
                )?;
                model
            };
            (Some(vocab), Some(teacher))
        } else {
            (None, None)
        };

    let mut run = TrainRun::new(cfg.strategy, rid);
    run.distill = cfg.distill;
    run.vocab = vocab.as_ref();
    run.teacher = teacher.as_ref();
    run.out_dir = out_dir;

    let trace = training::train(&model, datasets, &cfg.train, &run)?;

    if let Some(dir) = out_dir {
        model.save_checkpoint(&dir.join("checkpoint.json"))?;
        if cfg.strategy.uses_lora() {
            lora::save_adapters(&model, &dir.join("adapters.json"))
                .map_err(|e| AppError::runtime(format!("adapter save: {}", e)))?;
        }
        write_run_log(dir, &trace, start_stamp, started.elapsed().as_secs_f64())?;
    }

    Ok(trace)
}

/// Trains one run into `<out_dir>/<strategy>-seed<seed>/` and prints where
/// it landed plus the headline numbers.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf, AppError> {
    cfg.validate()?;
    cfg.validate_against_space()?;
    let datasets = build_datasets(cfg)?;
    let run_dir = cfg.out_dir.join(run_id(cfg.strategy, cfg.train.seed));
    let trace = run_experiment(cfg, &datasets, Some(&run_dir))?;
    println!("run dir: {}", run_dir.display());
    println!(
        "epochs: {}  final loss: {:.4}  max id_acc: {:.4}",
        trace.epochs.len(),
        trace.final_loss().unwrap_or(f64::NAN),
        trace.best_id_acc().unwrap_or(f64::NAN),
    );
    Ok(run_dir)
}

/// Runs the sweep declared by `cfg.space`: `n_trials` sequential trials,
/// each a full `run_experiment` under `<out_dir>/trial-NNN/`. Afterwards
/// `<out_dir>` holds `trials.jsonl` and `best_config.json`, a ready-to-run
/// config carrying the best assignment and that trial's exact seed.
pub fn cmd_optimize(cfg: &ExperimentConfig) -> Result<PathBuf, AppError> {
    cfg.validate()?;
    let space_name = cfg
        .space
        .as_ref()
        .ok_or_else(|| AppError::usage("optimize requires a space name in the config".to_string()))?;
    let space = hpo::builtin_space(space_name)
        .ok_or_else(|| AppError::usage(format!("unknown search space {}", space_name)))?;

    let datasets = build_datasets(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut sampler_rng = Rng::from_seed(cfg.seed);
    let result = hpo::optimize(
        &space,
        cfg.n_trials,
        cfg.sampler,
        &TpeKnobs::default(),
        &mut sampler_rng,
        cfg.seed,
        |id, seed, assignment| {
            let trial_cfg = cfg.with_assignment(assignment, seed);
            let trial_dir = cfg.out_dir.join(format!("trial-{:03}", id));
            let trace = run_experiment(&trial_cfg, &datasets, Some(&trial_dir))
                .map_err(|e| e.to_string())?;
            let objective = trace
                .best_id_acc()
                .ok_or_else(|| "trial produced no epochs".to_string())?;
            let ood = trace
                .epochs
                .iter()
                .map(|e| e.ood_acc)
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "trial {:>3}  objective {:.4}  {}",
                id,
                objective,
                summarize_assignment(assignment)
            );
            Ok(TrialOutcome {
                objective,
                ood_acc: Some(ood),
                trace_ref: Some(trial_dir.display().to_string()),
            })
        },
    )?;

    hpo::save_trials(&result.trials, &cfg.out_dir.join("trials.jsonl"))?;
    let best_cfg = cfg.with_assignment(&result.best.assignment, result.best.seed);
    let best_path = cfg.out_dir.join("best_config.json");
    best_cfg.save(&best_path)?;
    println!(
        "best trial: {}  objective {:.4}  seed {}",
        result.best.id,
        result.best.objective.unwrap_or(f64::NAN),
        result.best.seed
    );
    println!("best config: {}", best_path.display());
    Ok(best_path)
}

fn summarize_assignment(assignment: &hpo::Assignment) -> String {
    let parts: Vec<String> = assignment.iter().map(|(k, v)| format!("{}={}", k, v)).collect();
    parts.join(" ")
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Wall-clock and host facts, quarantined away from the content files.
fn write_run_log(
    dir: &Path,
    trace: &MetricsTrace,
    start_stamp: u64,
    elapsed_s: f64,
) -> Result<(), AppError> {
    let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "unknown".to_string());
    let mut f = std::fs::File::create(dir.join("run.log"))?;
    writeln!(f, "run_id: {}", trace.run_id)?;
    writeln!(f, "started_unix: {}", start_stamp)?;
    writeln!(f, "elapsed_s: {:.3}", elapsed_s)?;
    writeln!(f, "host: {}", host)?;
    writeln!(f, "epochs: {}", trace.epochs.len())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use ftlab_core::model::ModelConfig;
    use ftlab_core::training::{DistillConfig, TrainConfig};

    fn tiny_cfg(strategy: Strategy, dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            strategy,
            model: ModelConfig {
                vocab_size: 128,
                max_seq_len: 32,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ffn: 32,
                hidden_dropout: 0.0,
                attention_dropout: 0.0,
                n_classes: 2,
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                learning_rate: 1e-3,
                template: strategy.uses_template().then_some(ftlab_core::data::Template::Gpt3),
                ..TrainConfig::default()
            },
            distill: (strategy == Strategy::Cd).then_some(DistillConfig::default()),
            data: DataConfig { n: 32, ..DataConfig::default() },
            out_dir: dir.to_path_buf(),
            seed: 7,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn datasets_are_shared_across_seeds_via_data_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let mut a = tiny_cfg(Strategy::Vft, tmp.path());
        let mut b = tiny_cfg(Strategy::Vft, tmp.path());
        a.data.data_seed = Some(11);
        b.data.data_seed = Some(11);
        a.train.seed = 1;
        b.train.seed = 2;
        let da = build_datasets(&a).unwrap();
        let db = build_datasets(&b).unwrap();
        assert_eq!(da.train, db.train);
        assert_eq!(da.ood_eval, db.ood_eval);
    }

    #[test]
    fn run_dir_carries_full_artifact_set() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Strategy::VftLora, tmp.path());
        cfg.train.seed = cfg.seed;
        let datasets = build_datasets(&cfg).unwrap();
        let dir = tmp.path().join("run");
        run_experiment(&cfg, &datasets, Some(&dir)).unwrap();
        for file in ["config.json", "trace.jsonl", "timing.jsonl", "checkpoint.json", "adapters.json", "run.log"] {
            assert!(dir.join(file).exists(), "missing {}", file);
        }
        let echoed = ExperimentConfig::load(&dir.join("config.json")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn rerun_reproduces_trace_and_checkpoint_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Strategy::Vft, tmp.path());
        cfg.train.seed = cfg.seed;
        let datasets = build_datasets(&cfg).unwrap();
        let d1 = tmp.path().join("first");
        let d2 = tmp.path().join("second");
        run_experiment(&cfg, &datasets, Some(&d1)).unwrap();
        run_experiment(&cfg, &datasets, Some(&d2)).unwrap();
        for file in ["trace.jsonl", "checkpoint.json"] {
            let a = std::fs::read(d1.join(file)).unwrap();
            let b = std::fs::read(d2.join(file)).unwrap();
            assert_eq!(a, b, "{} differs between reruns", file);
        }
    }

    #[test]
    fn random_teacher_flag_skips_teacher_training() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Strategy::Cd, tmp.path());
        cfg.cd_teacher_random = true;
        cfg.train.seed = cfg.seed;
        let datasets = build_datasets(&cfg).unwrap();
        let dir = tmp.path().join("cd-random");
        let trace = run_experiment(&cfg, &datasets, Some(&dir)).unwrap();
        assert!(!dir.join("teacher").exists());
        assert_eq!(trace.epochs.len(), cfg.train.epochs);
    }
}
