//! Datasets: CoLA-format TSV ingestion, prompt templates, a word-level
//! vocabulary, balanced few-shot sampling, and a synthetic subject-verb
//! agreement corpus with a lexically disjoint out-of-domain split.

use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected 4 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: label must be 0 or 1, got `{value}`")]
    BadLabel { line: usize, value: String },
    #[error("line {line}: sentence is empty")]
    EmptySentence { line: usize },
    #[error("line {line}: invalid record: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error("class {label} has only {available} examples, need {needed}")]
    NotEnoughExamples { label: u8, available: usize, needed: usize },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("synthetic corpus needs n >= 2, got {0}")]
    TooSmall(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One labeled sentence. Label 1 means grammatically acceptable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub sentence: String,
    pub label: u8,
    pub source: String,
}

/// Parses the CoLA file layout: four tab-separated fields per line
/// (source, label, original annotation, sentence), no header. The third
/// field is ignored. Errors carry 1-based line numbers.
pub fn parse_cola_tsv<R: Read>(reader: R) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::BadLabel {
                    line: line_no,
                    value: other.to_string(),
                })
            }
        };
        let sentence = fields[3].trim();
        if sentence.is_empty() {
            return Err(DataError::EmptySentence { line: line_no });
        }
        out.push(Example {
            sentence: sentence.to_string(),
            label,
            source: fields[0].to_string(),
        });
    }
    Ok(out)
}

/// Counts per label, for the (imbalanced) ingested corpus report.
pub fn label_counts(examples: &[Example]) -> (usize, usize) {
    let ones = examples.iter().filter(|e| e.label == 1).count();
    (examples.len() - ones, ones)
}

/// Down-samples the majority class to the minority size, deterministically
/// under the given rng. Order of survivors follows the original sequence.
pub fn balance(examples: &[Example], rng: &mut Rng) -> Vec<Example> {
    let (zeros, ones) = label_counts(examples);
    let (majority, keep) = if zeros > ones { (0u8, ones) } else { (1u8, zeros) };
    let majority_idx: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == majority)
        .map(|(i, _)| i)
        .collect();
    let mut chosen = rng.sample_indices(majority_idx.len(), keep);
    chosen.sort_unstable();
    let keep_set: std::collections::BTreeSet<usize> = chosen.iter().map(|&i| majority_idx[i]).collect();
    examples
        .iter()
        .enumerate()
        .filter(|(i, e)| e.label != majority || keep_set.contains(i))
        .map(|(_, e)| e.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Minimal,
    Gpt3,
    EvalHarness,
    CdStudent,
    CdTeacher,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Minimal,
        Template::Gpt3,
        Template::EvalHarness,
        Template::CdStudent,
        Template::CdTeacher,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Template::Minimal => "minimal",
            Template::Gpt3 => "gpt3",
            Template::EvalHarness => "eval_harness",
            Template::CdStudent => "cd_student",
            Template::CdTeacher => "cd_teacher",
        }
    }

    pub fn from_name(name: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Renders a sentence through a prompt template. Every rendering contains
/// the sentence verbatim, so the mapping is injective per template.
pub fn apply_template(sentence: &str, template: Template) -> String {
    match template {
        Template::Minimal => format!("{}?", sentence),
        Template::Gpt3 | Template::CdStudent => {
            format!("Is this sentence grammatically correct? {}", sentence)
        }
        Template::EvalHarness => format!(
            "Sentence: {}\nQuestion: Is this sentence grammatically acceptable?\nAnswer:",
            sentence
        ),
        Template::CdTeacher => format!(
            "Is this sentence grammatically correct? {} Let me think about this step by step:",
            sentence
        ),
    }
}

/// Scratchpad cue appended to a prompt to form the teacher's input for
/// distillation.
pub const SCRATCHPAD_SUFFIX: &str = " Let me think about this step by step:";

/// Teacher-side rendering for distillation: the base prompt followed by the
/// scratchpad cue. With [`Template::Gpt3`] this reproduces
/// [`Template::CdTeacher`] exactly.
pub fn teacher_prompt(sentence: &str, base: Template) -> String {
    format!("{}{}", apply_template(sentence, base), SCRATCHPAD_SUFFIX)
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Word-level vocabulary with reserved PAD=0 and UNK=1. Tokens are
/// lowercased; punctuation splits into standalone tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercased whitespace-plus-punctuation tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

impl Vocab {
    /// Builds from training text only. Tokens below `min_freq` are dropped.
    /// Ids are assigned by descending frequency, ties broken alphabetically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, min_freq: usize) -> Vocab {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        id_to_token.extend(entries.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Token ids plus a real-token mask, truncated to `max_len`. No padding
    /// is added here; batching pads.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<(Vec<usize>, Vec<bool>), DataError> {
        if max_len == 0 {
            return Err(DataError::ZeroMaxLen);
        }
        let ids: Vec<usize> = tokenize(text)
            .into_iter()
            .take(max_len)
            .map(|t| self.id_of(&t))
            .collect();
        let mask = vec![true; ids.len()];
        Ok((ids, mask))
    }
}

/// Draws exactly `k_per_class` examples per label uniformly without
/// replacement, then shuffles the combined order. Deterministic under seed.
pub fn few_shot_sample(examples: &[Example], k_per_class: usize, rng: &mut Rng) -> Result<Vec<Example>, DataError> {
    let mut picked = Vec::with_capacity(2 * k_per_class);
    for label in [0u8, 1u8] {
        let class: Vec<&Example> = examples.iter().filter(|e| e.label == label).collect();
        if class.len() < k_per_class {
            return Err(DataError::NotEnoughExamples {
                label,
                available: class.len(),
                needed: k_per_class,
            });
        }
        let idx = rng.sample_indices(class.len(), k_per_class);
        picked.extend(idx.into_iter().map(|i| class[i].clone()));
    }
    rng.shuffle(&mut picked);
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdEval,
    OodEval,
}

const ID_NOUNS: [&str; 10] = [
    "dog", "cat", "bird", "horse", "teacher", "student", "doctor", "farmer", "singer", "lawyer",
];
const ID_VERBS: [&str; 10] = [
    "run", "sing", "jump", "sleep", "talk", "laugh", "dance", "swim", "play", "read",
];
const OOD_NOUNS: [&str; 10] = [
    "pilot", "chef", "sailor", "painter", "poet", "nurse", "judge", "monk", "clerk", "guard",
];
const OOD_VERBS: [&str; 10] = [
    "walk", "shout", "smile", "drift", "climb", "cough", "whistle", "wander", "knit", "paddle",
];
const ADVERBS: [&str; 4] = ["today", "now", "often", "again"];

pub fn id_lexicon() -> (Vec<&'static str>, Vec<&'static str>) {
    (ID_NOUNS.to_vec(), ID_VERBS.to_vec())
}

pub fn ood_lexicon() -> (Vec<&'static str>, Vec<&'static str>) {
    (OOD_NOUNS.to_vec(), OOD_VERBS.to_vec())
}

/// Label-balanced sentences from a fixed context-free grammar over a small
/// lexicon (regular plurals only): acceptable sentences satisfy subject-verb
/// agreement ("The dog runs."), unacceptable ones violate it ("The dog
/// run."). The OOD split swaps in a disjoint set of nouns and verbs.
pub fn generate_synthetic(n: usize, rng: &mut Rng, split: Split) -> Result<Vec<Example>, DataError> {
    if n < 2 {
        return Err(DataError::TooSmall(n));
    }
    let (nouns, verbs) = match split {
        Split::Train | Split::IdEval => (ID_NOUNS, ID_VERBS),
        Split::OodEval => (OOD_NOUNS, OOD_VERBS),
    };
    let source = match split {
        Split::Train => "synthetic_train",
        Split::IdEval => "synthetic_id",
        Split::OodEval => "synthetic_ood",
    };
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // First half acceptable, then shuffled; odd n leans acceptable.
        let acceptable = i < n - half;
        let noun = nouns[rng.range_usize(nouns.len())];
        let verb = verbs[rng.range_usize(verbs.len())];
        let plural_subject = rng.bernoulli(0.5);
        // Singular subjects take the -s verb form; agreement holds when
        // exactly one of subject/verb carries the suffix.
        let verb_plural_form = if acceptable { plural_subject } else { !plural_subject };
        let subject = if plural_subject { format!("{}s", noun) } else { noun.to_string() };
        let verb_form = if verb_plural_form { verb.to_string() } else { format!("{}s", verb) };
        let mut sentence = format!("The {} {}", subject, verb_form);
        if rng.bernoulli(0.5) {
            sentence.push(' ');
            sentence.push_str(ADVERBS[rng.range_usize(ADVERBS.len())]);
        }
        sentence.push('.');
        out.push(Example {
            sentence,
            label: u8::from(acceptable),
            source: source.to_string(),
        });
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Writes examples as line-delimited records, one object per line.
pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::BadRecord {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if ex.label > 1 {
            return Err(DataError::BadRecord {
                line: idx + 1,
                detail: format!("label must be 0 or 1, got {}", ex.label),
            });
        }
        if ex.sentence.is_empty() {
            return Err(DataError::BadRecord {
                line: idx + 1,
                detail: "sentence is empty".to_string(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cola_layout() {
        let tsv = "gj04\t1\t\tThey sang.\ngj04\t0\t*\tThey sangs.\n";
        let examples = parse_cola_tsv(tsv.as_bytes()).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0], Example {
            sentence: "They sang.".to_string(),
            label: 1,
            source: "gj04".to_string(),
        });
        assert_eq!(examples[1].label, 0);
    }

    #[test]
    fn empty_stream_parses_to_empty() {
        assert!(parse_cola_tsv("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn bad_label_names_the_line() {
        let tsv = "gj04\t1\t\tFine.\ngj04\t2\t\tBad label.\n";
        match parse_cola_tsv(tsv.as_bytes()) {
            Err(DataError::BadLabel { line: 2, value }) => assert_eq!(value, "2"),
            other => panic!("unexpected: {:?}", other),
        }
    }

    #[test]
    fn wrong_field_count_names_the_line() {
        let tsv = "gj04\t1\tonly three fields\n";
        assert!(matches!(
            parse_cola_tsv(tsv.as_bytes()),
            Err(DataError::FieldCount { line: 1, found: 3 })
        ));
    }

    #[test]
    fn template_strings_are_exact() {
        let s = "They sang.";
        assert_eq!(apply_template(s, Template::Minimal), "They sang.?");
        assert_eq!(
            apply_template(s, Template::Gpt3),
            "Is this sentence grammatically correct? They sang."
        );
        assert_eq!(
            apply_template(s, Template::EvalHarness),
            "Sentence: They sang.\nQuestion: Is this sentence grammatically acceptable?\nAnswer:"
        );
        assert_eq!(
            apply_template(s, Template::CdStudent),
            apply_template(s, Template::Gpt3)
        );
        assert_eq!(
            apply_template(s, Template::CdTeacher),
            "Is this sentence grammatically correct? They sang. Let me think about this step by step:"
        );
    }

    #[test]
    fn teacher_prompt_appends_scratchpad_cue() {
        let s = "They sang.";
        assert_eq!(
            teacher_prompt(s, Template::Gpt3),
            apply_template(s, Template::CdTeacher)
        );
        assert_eq!(teacher_prompt(s, Template::Minimal), "They sang.? Let me think about this step by step:");
    }

    #[test]
    fn templates_keep_the_sentence_verbatim() {
        let s = "The horse raced past the barn fell.";
        for t in Template::ALL {
            assert!(apply_template(s, t).contains(s), "{:?}", t);
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("The dog, runs."),
            vec!["the", "dog", ",", "runs", "."]
        );
        assert_eq!(tokenize("Answer:"), vec!["answer", ":"]);
        assert_eq!(tokenize("don't"), vec!["don't"]);
    }

    #[test]
    fn vocab_round_trips_known_tokens() {
        let vocab = Vocab::build(["the dog runs", "the cat runs"], 1);
        let (ids, mask) = vocab.encode("The dog runs.", 16).unwrap();
        assert_eq!(mask.len(), ids.len());
        let back: Vec<&str> = ids.iter().map(|&i| vocab.token_of(i).unwrap()).collect();
        // "." was never in training text, so it maps to UNK.
        assert_eq!(back, vec!["the", "dog", "runs", "<unk>"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = Vocab::build(["the dog"], 1);
        assert_eq!(vocab.id_of("zebra"), UNK_ID);
        assert!(vocab.id_of("the") > UNK_ID);
    }

    #[test]
    fn encode_truncates_to_max_len() {
        let vocab = Vocab::build(["a b c"], 1);
        let long = "a ".repeat(300);
        let (ids, mask) = vocab.encode(&long, 256).unwrap();
        assert_eq!(ids.len(), 256);
        assert!(mask.iter().all(|&m| m));
        assert!(matches!(vocab.encode("a", 0), Err(DataError::ZeroMaxLen)));
    }

    #[test]
    fn few_shot_sampling_is_balanced_and_seeded() {
        let mut rng = Rng::from_seed(3);
        let examples = generate_synthetic(100, &mut rng, Split::Train).unwrap();
        let picked = few_shot_sample(&examples, 2, &mut Rng::from_seed(5)).unwrap();
        assert_eq!(picked.len(), 4);
        assert_eq!(picked.iter().filter(|e| e.label == 1).count(), 2);

        let again = few_shot_sample(&examples, 2, &mut Rng::from_seed(5)).unwrap();
        assert_eq!(picked, again);

        let k32 = few_shot_sample(&examples, 32, &mut Rng::from_seed(5)).unwrap();
        assert_eq!(k32.len(), 64);

        assert!(matches!(
            few_shot_sample(&examples, 51, &mut Rng::from_seed(5)),
            Err(DataError::NotEnoughExamples { .. })
        ));
    }

    #[test]
    fn synthetic_corpus_is_balanced() {
        let examples = generate_synthetic(100, &mut Rng::from_seed(11), Split::Train).unwrap();
        assert_eq!(examples.len(), 100);
        assert_eq!(examples.iter().filter(|e| e.label == 1).count(), 50);
    }

    #[test]
    fn synthetic_agreement_labels_are_consistent() {
        let examples = generate_synthetic(500, &mut Rng::from_seed(12), Split::Train).unwrap();
        for ex in &examples {
            let toks = tokenize(&ex.sentence);
            // "the NOUN VERB [adv] ."
            let noun = &toks[1];
            let verb = &toks[2];
            let noun_plural = ID_NOUNS.iter().all(|n| *n != noun.as_str());
            let verb_sg = verb.ends_with('s') && ID_VERBS.iter().any(|v| format!("{}s", v) == *verb);
            let agrees = noun_plural != verb_sg;
            assert_eq!(ex.label == 1, agrees, "{}", ex.sentence);
        }
    }

    #[test]
    fn ood_content_words_are_disjoint_from_train() {
        let train = generate_synthetic(400, &mut Rng::from_seed(1), Split::Train).unwrap();
        let ood = generate_synthetic(400, &mut Rng::from_seed(2), Split::OodEval).unwrap();
        let function_words: std::collections::BTreeSet<String> = ADVERBS
            .iter()
            .map(|s| s.to_string())
            .chain(["the".to_string(), ".".to_string()])
            .collect();
        let content = |examples: &[Example]| -> std::collections::BTreeSet<String> {
            examples
                .iter()
                .flat_map(|e| tokenize(&e.sentence))
                .filter(|t| !function_words.contains(t))
                .collect()
        };
        let train_content = content(&train);
        let ood_content = content(&ood);
        assert!(train_content.is_disjoint(&ood_content));
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let a = generate_synthetic(50, &mut Rng::from_seed(4), Split::IdEval).unwrap();
        let b = generate_synthetic(50, &mut Rng::from_seed(4), Split::IdEval).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            generate_synthetic(1, &mut Rng::from_seed(4), Split::Train),
            Err(DataError::TooSmall(1))
        ));
    }

    #[test]
    fn majority_class_scores_near_half_on_large_splits() {
        for split in [Split::Train, Split::IdEval, Split::OodEval] {
            let examples = generate_synthetic(200, &mut Rng::from_seed(8), split).unwrap();
            let ones = examples.iter().filter(|e| e.label == 1).count() as f64;
            let acc = ones.max(200.0 - ones) / 200.0;
            assert!((acc - 0.5).abs() <= 0.05, "{:?}: {}", split, acc);
        }
    }

    #[test]
    fn balance_downsamples_majority_only() {
        let mut examples = vec![
            Example { sentence: "a".into(), label: 1, source: "t".into() };
            7
        ];
        examples.extend(vec![
            Example { sentence: "b".into(), label: 0, source: "t".into() };
            3
        ]);
        let balanced = balance(&examples, &mut Rng::from_seed(0));
        let (zeros, ones) = label_counts(&balanced);
        assert_eq!((zeros, ones), (3, 3));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let examples = generate_synthetic(20, &mut Rng::from_seed(3), Split::Train).unwrap();
        write_jsonl(&examples, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(examples, back);
    }
}
