//! QA records, the unified text-to-text rendering, and tokenization.
//!
//! Four QA formats (extractive, abstractive, multiple-choice, yes/no) are
//! rendered into one lowercase input string `question \n choices \n context`
//! (the choices segment exists only for multiple choice) and an answer
//! string. Tokenization is whitespace word-level over a frequency-capped
//! vocabulary; the corpora here are closed-vocabulary by construction.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The literal separator token between segments of the unified rendering:
/// the two printable characters backslash and n, not a newline.
pub const SEP_TOKEN: &str = "\\n";
/// Maximum number of multiple-choice options (letters a..h).
pub const MAX_CHOICES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerFormat {
    #[serde(rename = "EX")]
    Extractive,
    #[serde(rename = "AB")]
    Abstractive,
    #[serde(rename = "MC")]
    MultipleChoice,
    #[serde(rename = "YN")]
    YesNo,
}

impl fmt::Display for AnswerFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnswerFormat::Extractive => "EX",
            AnswerFormat::Abstractive => "AB",
            AnswerFormat::MultipleChoice => "MC",
            AnswerFormat::YesNo => "YN",
        };
        f.write_str(s)
    }
}

/// One QA record in raw form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub format: AnswerFormat,
    /// Domain assignment, attached after clustering. Not part of the file
    /// schema.
    #[serde(skip)]
    pub domain_id: Option<usize>,
}

impl QAExample {
    /// Structural invariants: non-empty golds, choices iff multiple choice,
    /// yes/no golds restricted to {"yes","no"}.
    pub fn validate(&self) -> Result<()> {
        if self.gold_answers.is_empty() {
            return Err(Error::Data(format!("{}: gold_answers empty", self.id)));
        }
        match self.format {
            AnswerFormat::MultipleChoice => {
                let n = self.choices.as_ref().map_or(0, Vec::len);
                if n == 0 {
                    return Err(Error::Data(format!("{}: MC example without choices", self.id)));
                }
            }
            _ => {
                if self.choices.is_some() {
                    return Err(Error::Data(format!(
                        "{}: choices present on non-MC example",
                        self.id
                    )));
                }
            }
        }
        if self.format == AnswerFormat::YesNo {
            for a in &self.gold_answers {
                let a = a.to_lowercase();
                if a != "yes" && a != "no" {
                    return Err(Error::Data(format!("{}: YN answer {a:?}", self.id)));
                }
            }
        }
        Ok(())
    }
}

fn sanitize(text: &str) -> String {
    // fields may not contain a standalone separator token; this keeps the
    // unified rendering injective on (question, choices, context)
    text.to_lowercase()
        .split_whitespace()
        .filter(|t| *t != SEP_TOKEN)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render the input side of the unified text-to-text form.
pub fn render_unified(example: &QAExample) -> Result<String> {
    example.validate()?;
    let mut segments = vec![sanitize(&example.question)];
    if let Some(choices) = &example.choices {
        if choices.len() > MAX_CHOICES {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {} choices exceed the supported {MAX_CHOICES}",
                example.id,
                choices.len()
            )));
        }
        let rendered: Vec<String> = choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("({}) {}", (b'a' + i as u8) as char, sanitize(c)))
            .collect();
        segments.push(rendered.join(" "));
    }
    segments.push(sanitize(&example.context));
    Ok(segments.join(&format!(" {SEP_TOKEN} ")))
}

/// The target side: the first gold answer, lowercased.
pub fn target_text(example: &QAExample) -> String {
    sanitize(&example.gold_answers[0])
}

/// Token <-> id bijection with reserved ids for pad, end-of-sequence,
/// unknown, and the literal separator token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "</s>", "<unk>", SEP_TOKEN];

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(f, &self.id_to_token)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let id_to_token: Vec<String> = serde_json::from_reader(f)?;
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }
}

/// Build a vocabulary from a corpus: most frequent tokens first, ties broken
/// lexicographically, capped at `max_size` including the reserved slots.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocab size {max_size} below the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for tok in text.as_ref().split_whitespace() {
            if RESERVED.contains(&tok) {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());

    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        token_to_id,
        id_to_token,
    })
}

/// Whitespace tokenization; out-of-vocabulary tokens map to the unknown id.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    text.split_whitespace()
        .map(|tok| vocab.id(tok).unwrap_or(UNK_ID))
        .collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ids of an example's raw context, for the prompt generator encoder.
pub fn context_tokens(example: &QAExample, vocab: &Vocabulary) -> Vec<usize> {
    tokenize(&sanitize(&example.context), vocab)
}

/// Vocabulary over a training split: the unified input renderings plus all
/// gold answers (answer tokens need not appear in any input text).
pub fn build_training_vocab(examples: &[QAExample], max_size: usize) -> Result<Vocabulary> {
    let mut texts = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        texts.push(render_unified(ex)?);
        for gold in &ex.gold_answers {
            texts.push(sanitize(gold));
        }
    }
    build_vocab(&texts, max_size)
}

/// One QA record in tokenized form.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub input_ids: Vec<usize>,
    /// Terminated by the end-of-sequence id.
    pub target_ids: Vec<usize>,
    pub domain_id: usize,
}

/// Render, tokenize and truncate one example.
pub fn encode_example(
    example: &QAExample,
    vocab: &Vocabulary,
    max_input_len: usize,
    max_ans_length: usize,
    domain_id: usize,
) -> Result<EncodedExample> {
    let mut input_ids = tokenize(&render_unified(example)?, vocab);
    if input_ids.is_empty() {
        return Err(Error::Data(format!("{}: empty input after rendering", example.id)));
    }
    input_ids.truncate(max_input_len);

    if max_ans_length == 0 {
        return Err(Error::Config("max_ans_length must be >= 1".into()));
    }
    let mut target_ids = tokenize(&target_text(example), vocab);
    target_ids.truncate(max_ans_length - 1);
    target_ids.push(EOS_ID);

    Ok(EncodedExample {
        input_ids,
        target_ids,
        domain_id,
    })
}

/// Load a JSONL dataset. Unknown keys are ignored; structural invariants are
/// checked per record.
pub fn load_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: QAExample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        example.validate()?;
        out.push(example);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(q: &str, ctx: &str, format: AnswerFormat) -> QAExample {
        QAExample {
            id: "t0".into(),
            question: q.into(),
            context: ctx.into(),
            choices: None,
            gold_answers: vec!["x".into()],
            format,
            domain_id: None,
        }
    }

    #[test]
    fn renders_extractive() {
        let ex = example("what is b?", "a = 3 b = 7", AnswerFormat::Extractive);
        assert_eq!(render_unified(&ex).unwrap(), r"what is b? \n a = 3 b = 7");
    }

    #[test]
    fn renders_multiple_choice_with_letters() {
        let mut ex = example("what color?", "the sky", AnswerFormat::MultipleChoice);
        ex.choices = Some(vec!["red".into(), "blue".into()]);
        ex.gold_answers = vec!["blue".into()];
        assert_eq!(
            render_unified(&ex).unwrap(),
            r"what color? \n (a) red (b) blue \n the sky"
        );
    }

    #[test]
    fn renders_lowercase() {
        let mut ex = example("Is B Seven?", "B = 7", AnswerFormat::YesNo);
        ex.gold_answers = vec!["yes".into()];
        assert_eq!(render_unified(&ex).unwrap(), r"is b seven? \n b = 7");
    }

    #[test]
    fn too_many_choices_is_unsupported() {
        let mut ex = example("q", "c", AnswerFormat::MultipleChoice);
        ex.choices = Some((0..9).map(|i| format!("c{i}")).collect());
        assert!(matches!(
            render_unified(&ex),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn bad_yes_no_answer_rejected() {
        let mut ex = example("q", "c", AnswerFormat::YesNo);
        ex.gold_answers = vec!["maybe".into()];
        assert!(ex.validate().is_err());
    }

    #[test]
    fn tokenize_maps_known_and_unknown() {
        let vocab = build_vocab(&["a a b"], 16).unwrap();
        assert_eq!(tokenize("", &vocab), Vec::<usize>::new());
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(tokenize("a a b", &vocab), vec![a, a, b]);
        assert_eq!(tokenize("a zzz", &vocab), vec![a, UNK_ID]);
        assert_eq!(tokenize(r"a \n b", &vocab), vec![a, SEP_ID, b]);
    }

    #[test]
    fn vocab_frequency_and_tiebreak() {
        // capacity for exactly two corpus tokens
        let vocab = build_vocab(&["a b", "a"], RESERVED.len() + 2).unwrap();
        assert!(vocab.id("a").is_some());
        assert!(vocab.id("b").is_some());

        // equal frequency, one slot: lexicographically smaller wins
        let vocab = build_vocab(&["x y"], RESERVED.len() + 1).unwrap();
        assert!(vocab.id("x").is_some());
        assert!(vocab.id("y").is_none());
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = ["c a b b", "a c c"];
        let v1 = build_vocab(&corpus, 32).unwrap();
        let v2 = build_vocab(&corpus, 32).unwrap();
        assert_eq!(v1.id_to_token, v2.id_to_token);
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        assert!(matches!(build_vocab(&["a"], 3), Err(Error::Config(_))));
    }

    #[test]
    fn encode_truncates_and_terminates() {
        let vocab = build_vocab(&[r"what is b? \n a = 3 b = 7"], 32).unwrap();
        let ex = example("what is b?", "a = 3 b = 7", AnswerFormat::Extractive);
        let enc = encode_example(&ex, &vocab, 4, 3, 0).unwrap();
        assert_eq!(enc.input_ids.len(), 4);
        assert_eq!(*enc.target_ids.last().unwrap(), EOS_ID);
        assert!(enc.target_ids.len() <= 3);
    }

    #[test]
    fn jsonl_roundtrip_ignores_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"e1","question":"q","context":"c","answers":["a"],"format":"EX","extra":1}
"#,
        )
        .unwrap();
        let examples = load_jsonl(&path).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].id, "e1");

        save_jsonl(&path, &examples).unwrap();
        let again = load_jsonl(&path).unwrap();
        assert_eq!(again[0].question, "q");
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_roundtrip(ids in prop::collection::vec(0usize..8, 0..20)) {
            let vocab = build_vocab(&["a b c d"], RESERVED.len() + 4).unwrap();
            prop_assume!(ids.iter().all(|&i| i < vocab.size() && i != UNK_ID));
            let text = detokenize(&ids, &vocab);
            prop_assert_eq!(tokenize(&text, &vocab), ids);
        }

        #[test]
        fn rendering_is_deterministic(q in "[a-z ]{1,12}", ctx in "[a-z ]{1,12}") {
            let ex = example(&q, &ctx, AnswerFormat::Abstractive);
            prop_assert_eq!(render_unified(&ex).unwrap(), render_unified(&ex).unwrap());
        }
    }
}
