//! Deterministic multi-domain synthetic QA corpora.
//!
//! Four generator kinds mirror the four QA format families: key-value
//! lookup (extractive), word arithmetic (abstractive), option picking
//! (multiple choice) and set membership (yes/no). Each kind uses a disjoint
//! surface vocabulary in its contexts so the hashed context embeddings
//! separate the domains, and every answer is mechanically derivable from
//! the context, so a correctly trained model can reach full exact match.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{save_jsonl, AnswerFormat, QAExample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Lookup,
    Arithmetic,
    Choice,
    Boolean,
}

impl DomainKind {
    pub const ALL: [DomainKind; 4] = [
        DomainKind::Lookup,
        DomainKind::Arithmetic,
        DomainKind::Choice,
        DomainKind::Boolean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Lookup => "lookup",
            DomainKind::Arithmetic => "arithmetic",
            DomainKind::Choice => "choice",
            DomainKind::Boolean => "boolean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(DomainKind::Lookup),
            "arithmetic" => Ok(DomainKind::Arithmetic),
            "choice" => Ok(DomainKind::Choice),
            "boolean" => Ok(DomainKind::Boolean),
            other => Err(Error::Config(format!("unknown domain kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub domains: Vec<DomainKind>,
    pub examples_per_domain: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            domains: DomainKind::ALL.to_vec(),
            examples_per_domain: 400,
            train_ratio: 0.75,
            val_ratio: 0.125,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("corpus needs at least one domain kind".into()));
        }
        if self.examples_per_domain == 0 {
            return Err(Error::Config("examples_per_domain must be >= 1".into()));
        }
        if self.train_ratio <= 0.0 || self.val_ratio < 0.0 || self.train_ratio + self.val_ratio >= 1.0 + 1e-12
        {
            return Err(Error::Config(
                "split ratios must satisfy 0 < train, 0 <= val, train + val <= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
    pub test: Vec<QAExample>,
    /// Planted domain labels (index into the spec's domain list), keyed by
    /// example id. Test-only ground truth for clustering checks.
    pub planted: BTreeMap<String, usize>,
}

const LOOKUP_KEYS: [&str; 8] = [
    "alpha", "bravo", "delta", "echo", "kilo", "omega", "sigma", "zulu",
];
const NUMBER_WORDS: [&str; 19] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
];
const COLORS: [&str; 8] = [
    "crimson", "teal", "ivory", "maroon", "indigo", "coral", "olive", "navy",
];
const FRUITS: [&str; 8] = [
    "mango", "kiwi", "papaya", "guava", "lychee", "fig", "plum", "date",
];

fn gen_lookup(id: String, rng: &mut ChaCha8Rng) -> QAExample {
    let mut keys = LOOKUP_KEYS.to_vec();
    keys.shuffle(rng);
    // values carry their key's initial ("alpha = a7 sigma = s2") so the
    // right one is identifiable by content, not by position
    let pairs: Vec<(&str, String)> = keys[..2]
        .iter()
        .map(|&k| {
            let v = rng.random_range(0..4);
            (k, format!("{}{v}", &k[..1]))
        })
        .collect();
    let target = rng.random_range(0..pairs.len());
    let context = pairs
        .iter()
        .map(|(k, v)| format!("{k} = {v}"))
        .collect::<Vec<_>>()
        .join(" ");
    QAExample {
        id,
        question: format!("what is {}", pairs[target].0),
        context,
        choices: None,
        gold_answers: vec![pairs[target].1.clone()],
        format: AnswerFormat::Extractive,
        domain_id: None,
    }
}

fn gen_arithmetic(id: String, rng: &mut ChaCha8Rng) -> QAExample {
    // 81 operand pairs: a few hundred training draws cover nearly all of
    // them, so validation stays answerable without real generalization
    let a = rng.random_range(0..9);
    let b = rng.random_range(0..9);
    QAExample {
        id,
        question: format!("what is {} plus {}", NUMBER_WORDS[a], NUMBER_WORDS[b]),
        context: format!("calc numbers {} plus {}", NUMBER_WORDS[a], NUMBER_WORDS[b]),
        choices: None,
        gold_answers: vec![NUMBER_WORDS[a + b].to_string()],
        format: AnswerFormat::Abstractive,
        domain_id: None,
    }
}

fn gen_choice(id: String, rng: &mut ChaCha8Rng) -> QAExample {
    let mut colors = COLORS.to_vec();
    colors.shuffle(rng);
    let options: Vec<String> = colors[..4].iter().map(|c| c.to_string()).collect();
    let answer = options[rng.random_range(0..4)].clone();
    QAExample {
        id,
        question: "which item is marked".into(),
        context: format!("marked item shows {answer}"),
        choices: Some(options),
        gold_answers: vec![answer],
        format: AnswerFormat::MultipleChoice,
        domain_id: None,
    }
}

fn gen_boolean(id: String, rng: &mut ChaCha8Rng) -> QAExample {
    let mut fruits = FRUITS.to_vec();
    fruits.shuffle(rng);
    let held = &fruits[..3];
    let yes = rng.random_bool(0.5);
    let probe = if yes {
        held[rng.random_range(0..held.len())]
    } else {
        fruits[3 + rng.random_range(0..fruits.len() - 3)]
    };
    QAExample {
        id,
        question: format!("is {probe} in the basket"),
        context: format!("basket holds {}", held.join(" ")),
        choices: None,
        gold_answers: vec![if yes { "yes".into() } else { "no".into() }],
        format: AnswerFormat::YesNo,
        domain_id: None,
    }
}

fn gen_one(kind: DomainKind, id: String, rng: &mut ChaCha8Rng) -> QAExample {
    match kind {
        DomainKind::Lookup => gen_lookup(id, rng),
        DomainKind::Arithmetic => gen_arithmetic(id, rng),
        DomainKind::Choice => gen_choice(id, rng),
        DomainKind::Boolean => gen_boolean(id, rng),
    }
}

/// Rule-based solver; recovers the answer of any generated example straight
/// from its question and context. The upper bound any model can reach.
pub fn oracle_answer(example: &QAExample) -> Option<String> {
    match example.format {
        AnswerFormat::Extractive => {
            let key = example.question.rsplit(' ').next()?;
            let toks: Vec<&str> = example.context.split_whitespace().collect();
            toks.windows(3)
                .find(|w| w[0] == key && w[1] == "=")
                .map(|w| w[2].to_string())
        }
        AnswerFormat::Abstractive => {
            let words: Vec<&str> = example.question.split_whitespace().collect();
            let idx = |w: &str| NUMBER_WORDS.iter().position(|&n| n == w);
            let a = idx(words.get(2)?)?;
            let b = idx(words.get(4)?)?;
            Some(NUMBER_WORDS[a + b].to_string())
        }
        AnswerFormat::MultipleChoice => example
            .context
            .rsplit(' ')
            .next()
            .map(str::to_string),
        AnswerFormat::YesNo => {
            let probe = example.question.split_whitespace().nth(1)?;
            let held: Vec<&str> = example.context.split_whitespace().skip(2).collect();
            Some(if held.contains(&probe) { "yes" } else { "no" }.to_string())
        }
    }
}

/// Generate the three splits. A pure function of the spec and seed.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut planted = BTreeMap::new();

    for (ki, &kind) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add((ki as u64).wrapping_mul(0x9e3779b97f4a7c15)),
        );
        let total = spec.examples_per_domain;
        let n_train = (total as f64 * spec.train_ratio).round() as usize;
        let n_val = (total as f64 * spec.val_ratio).round() as usize;
        for i in 0..total {
            let id = format!("{}-{i:05}", kind.name());
            let example = gen_one(kind, id.clone(), &mut rng);
            planted.insert(id, ki);
            if i < n_train {
                train.push(example);
            } else if i < n_train + n_val {
                val.push(example);
            } else {
                test.push(example);
            }
        }
    }
    Ok(Corpus {
        train,
        val,
        test,
        planted,
    })
}

/// Write train/val/test JSONL plus the planted-label sidecar into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    save_jsonl(&dir.join("val.jsonl"), &corpus.val)?;
    save_jsonl(&dir.join("test.jsonl"), &corpus.test)?;
    let f = std::fs::File::create(dir.join("planted_labels.json"))?;
    serde_json::to_writer(f, &corpus.planted)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{adjusted_rand_index, embed_context, kmeans};
    use crate::metrics::exact_match;

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec {
            examples_per_domain: 40,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec, 7).unwrap();
        let b = generate_corpus(&spec, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&a, &dir.path().join("a")).unwrap();
        write_corpus(&b, &dir.path().join("b")).unwrap();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl", "planted_labels.json"] {
            let fa = std::fs::read(dir.path().join("a").join(name)).unwrap();
            let fb = std::fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between identical seeds");
        }
    }

    #[test]
    fn examples_are_valid_and_oracle_solvable() {
        let spec = CorpusSpec {
            examples_per_domain: 60,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 3).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for ex in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            ex.validate().unwrap();
            let answer = oracle_answer(ex).expect("oracle failed");
            total += exact_match(&answer, &ex.gold_answers);
            count += 1;
        }
        assert_eq!(total, count as f64, "oracle exact match below 1.0");
    }

    #[test]
    fn lookup_answers_appear_in_context() {
        let spec = CorpusSpec {
            domains: vec![DomainKind::Lookup],
            examples_per_domain: 30,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 5).unwrap();
        for ex in &corpus.train {
            assert!(ex
                .context
                .split_whitespace()
                .any(|t| t == ex.gold_answers[0]));
        }
    }

    #[test]
    fn clustering_contexts_recovers_planted_domains() {
        let spec = CorpusSpec {
            examples_per_domain: 50,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 11).unwrap();
        let ids: Vec<String> = corpus.train.iter().map(|e| e.id.clone()).collect();
        let points: Vec<Vec<f64>> = corpus
            .train
            .iter()
            .map(|e| embed_context(&e.context))
            .collect();
        let model = kmeans(&ids, &points, 4, 0).unwrap();
        let got: Vec<usize> = ids.iter().map(|id| model.assignments[id]).collect();
        let want: Vec<usize> = ids.iter().map(|id| corpus.planted[id]).collect();
        assert_eq!(adjusted_rand_index(&got, &want), 1.0);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let spec = CorpusSpec {
            examples_per_domain: 400,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 1).unwrap();
        assert_eq!(corpus.train.len(), 4 * 300);
        assert_eq!(corpus.val.len(), 4 * 50);
        assert_eq!(corpus.test.len(), 4 * 50);
        // ids are disjoint across splits
        let mut all: Vec<&str> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.test)
            .map(|e| e.id.as_str())
            .collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        assert_eq!(before, all.len());
    }
}
