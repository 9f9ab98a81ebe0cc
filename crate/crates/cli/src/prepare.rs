//! Dataset preparation: canonical `train.jsonl` / `id_eval.jsonl` /
//! `ood_eval.jsonl` files plus a stats summary, from either the synthetic
//! grammar generator or CoLA-format TSVs.

use crate::error::AppError;
use ftlab_core::data::{self, Example, Split};
use ftlab_core::rng::Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub struct PrepareArgs {
    pub synthetic: bool,
    pub n: usize,
    pub cola: Option<PathBuf>,
    pub ood_cola: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SplitStats {
    file: String,
    count: usize,
    label_0: usize,
    label_1: usize,
}

#[derive(Debug, Serialize)]
struct PrepareStats {
    source: String,
    seed: u64,
    splits: Vec<SplitStats>,
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<(), AppError> {
    let (train, id_eval, ood_eval, source) = if args.synthetic {
        if args.n < 8 {
            return Err(AppError::usage("--n must be >= 8".to_string()));
        }
        let mut rng = Rng::from_seed(args.seed);
        let eval_n = (args.n / 4).max(2);
        let train = data::generate_synthetic(args.n, &mut rng, Split::Train)?;
        let id_eval = data::generate_synthetic(eval_n, &mut rng, Split::IdEval)?;
        let ood_eval = data::generate_synthetic(eval_n, &mut rng, Split::OodEval)?;
        (train, id_eval, ood_eval, "synthetic".to_string())
    } else {
        let cola = args
            .cola
            .as_ref()
            .ok_or_else(|| AppError::usage("either --synthetic or --cola PATH is required".to_string()))?;
        let ood = args.ood_cola.as_ref().ok_or_else(|| {
            AppError::usage("--ood-cola PATH is required alongside --cola".to_string())
        })?;
        let in_domain = read_cola(cola)?;
        let ood_eval = read_cola(ood)?;
        if in_domain.len() < 2 {
            return Err(AppError::usage(format!(
                "{} holds {} examples; need at least 2 to split",
                cola.display(),
                in_domain.len()
            )));
        }
        // Deterministic 90/10 train / id_eval split of the in-domain file.
        let mut order: Vec<usize> = (0..in_domain.len()).collect();
        let mut rng = Rng::from_seed(args.seed);
        rng.shuffle(&mut order);
        let n_eval = (in_domain.len() / 10).max(1);
        let eval_idx: std::collections::BTreeSet<usize> = order[..n_eval].iter().copied().collect();
        let mut train = Vec::with_capacity(in_domain.len() - n_eval);
        let mut id_eval = Vec::with_capacity(n_eval);
        for (i, ex) in in_domain.into_iter().enumerate() {
            if eval_idx.contains(&i) {
                id_eval.push(ex);
            } else {
                train.push(ex);
            }
        }
        (train, id_eval, ood_eval, format!("cola:{}", cola.display()))
    };

    std::fs::create_dir_all(&args.out)?;
    let mut stats = PrepareStats { source, seed: args.seed, splits: Vec::new() };
    for (name, examples) in [
        ("train.jsonl", &train),
        ("id_eval.jsonl", &id_eval),
        ("ood_eval.jsonl", &ood_eval),
    ] {
        let path = args.out.join(name);
        data::write_jsonl(examples, &path).map_err(|e| AppError::runtime(e.to_string()))?;
        let (label_0, label_1) = data::label_counts(examples);
        stats.splits.push(SplitStats {
            file: name.to_string(),
            count: examples.len(),
            label_0,
            label_1,
        });
    }

    let mut stats_text = serde_json::to_string_pretty(&stats)
        .map_err(|e| AppError::runtime(format!("stats encoding: {}", e)))?;
    stats_text.push('\n');
    std::fs::write(args.out.join("stats.json"), &stats_text)?;

    for s in &stats.splits {
        println!(
            "{:<14} {:>6} examples  (label 0: {}, label 1: {})",
            s.file, s.count, s.label_0, s.label_1
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn read_cola(path: &Path) -> Result<Vec<Example>, AppError> {
    let file = std::fs::File::open(path)
        .map_err(|e| AppError::usage(format!("cannot open {}: {}", path.display(), e)))?;
    data::parse_cola_tsv(std::io::BufReader::new(file))
        .map_err(|e| AppError::usage(format!("{}: {}", path.display(), e)))
}
