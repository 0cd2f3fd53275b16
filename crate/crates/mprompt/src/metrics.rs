//! Answer scoring: token-overlap F1, ROUGE-L and exact match, each taking
//! the maximum over multiple gold answers after SQuAD-style normalization.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::AnswerFormat;

/// Lowercase, strip punctuation, drop articles, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// ROUGE-style normalization: as [`normalize`] but articles are kept, which
/// is what the reference ROUGE implementation does.
fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_from(prec: f64, rec: f64) -> f64 {
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn single_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pc = counts(pred);
    let gc = counts(gold);
    let overlap: usize = pc
        .iter()
        .map(|(t, &n)| n.min(gc.get(t).copied().unwrap_or(0)))
        .sum();
    f1_from(overlap as f64 / pred.len() as f64, overlap as f64 / gold.len() as f64)
}

/// Multiset token-overlap F1, maximized over gold answers.
pub fn token_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    assert!(!golds.is_empty(), "token_f1 requires at least one gold");
    let p = normalize(pred);
    golds
        .iter()
        .map(|g| single_f1(&p, &normalize(g.as_ref())))
        .fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev = 0;
        for (j, bj) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ai == bj {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

fn single_rouge_l(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, gold) as f64;
    f1_from(lcs / pred.len() as f64, lcs / gold.len() as f64)
}

/// ROUGE-L over normalized tokens with balanced F (beta = 1), maximized over
/// gold answers.
pub fn rouge_l<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    assert!(!golds.is_empty(), "rouge_l requires at least one gold");
    let p = rouge_tokens(pred);
    golds
        .iter()
        .map(|g| single_rouge_l(&p, &rouge_tokens(g.as_ref())))
        .fold(0.0, f64::max)
}

/// 1 iff the normalized prediction equals the normalized tokens of some gold.
pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    assert!(!golds.is_empty(), "exact_match requires at least one gold");
    let p = normalize(pred);
    if golds.iter().any(|g| normalize(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MetricKind {
    #[serde(rename = "token_f1")]
    TokenF1,
    #[serde(rename = "rouge_l")]
    RougeL,
    #[serde(rename = "exact_match")]
    ExactMatch,
}

impl MetricKind {
    pub fn score<S: AsRef<str>>(self, pred: &str, golds: &[S]) -> f64 {
        match self {
            MetricKind::TokenF1 => token_f1(pred, golds),
            MetricKind::RougeL => rouge_l(pred, golds),
            MetricKind::ExactMatch => exact_match(pred, golds),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::TokenF1 => "token_f1",
            MetricKind::RougeL => "rouge_l",
            MetricKind::ExactMatch => "exact_match",
        }
    }
}

/// Primary metric per answer format: F1 for extractive, ROUGE-L for
/// abstractive, exact match for multiple-choice and yes/no.
pub fn primary_metric(format: AnswerFormat) -> MetricKind {
    match format {
        AnswerFormat::Extractive => MetricKind::TokenF1,
        AnswerFormat::Abstractive => MetricKind::RougeL,
        AnswerFormat::MultipleChoice | AnswerFormat::YesNo => MetricKind::ExactMatch,
    }
}

/// Primary metric for a whole dataset: the shared format's metric, or exact
/// match when formats are mixed.
pub fn dataset_metric(formats: impl IntoIterator<Item = AnswerFormat>) -> MetricKind {
    let mut iter = formats.into_iter();
    let Some(first) = iter.next() else {
        return MetricKind::ExactMatch;
    };
    if iter.all(|f| f == first) {
        primary_metric(first)
    } else {
        MetricKind::ExactMatch
    }
}

/// Per-example scores for one prediction.
#[derive(Clone, Debug, Serialize)]
pub struct ScoredPrediction {
    pub id: String,
    pub prediction: String,
    pub token_f1: f64,
    pub rouge_l: f64,
    pub exact_match: f64,
}

impl ScoredPrediction {
    pub fn new<S: AsRef<str>>(id: &str, pred: &str, golds: &[S]) -> Self {
        Self {
            id: id.to_string(),
            prediction: pred.to_string(),
            token_f1: token_f1(pred, golds),
            rouge_l: rouge_l(pred, golds),
            exact_match: exact_match(pred, golds),
        }
    }
}
