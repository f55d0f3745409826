//! Word-level tokenization, vocabulary management, and JSONL corpus I/O.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("vocabulary max_size {0} is too small (4 reserved ids + at least 1 token)")]
    VocabTooSmall(usize),
    #[error("vocabulary file {path} is corrupt: {detail}")]
    BadVocabFile { path: String, detail: String },
    #[error("token id {0} is out of vocabulary range")]
    IdOutOfRange(usize),
}

/// Lowercase, split on whitespace, and detach every non-alphanumeric
/// character as its own token. Output tokens are therefore either
/// alphanumeric runs or single punctuation characters, which makes the
/// function idempotent across a detokenize round trip.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
        } else if ch.is_alphanumeric() {
            for low in ch.to_lowercase() {
                run.push(low);
            }
        } else {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            out.push(ch.to_string());
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

/// Inverse-ish of [`tokenize`]: single-space join.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token/id bijection with four fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_token_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Keep the most frequent corpus tokens, ties broken lexicographically.
    pub fn build(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Self, TextError> {
        if max_size < 5 {
            return Err(TextError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in &corpus.examples {
            for tok in tokenize(&ex.document).into_iter().chain(tokenize(&ex.summary)) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 4);

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from_token_list(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Map tokens to ids, unknown tokens to [`UNK_ID`].
    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    /// Map ids back to tokens; reserved ids keep their surface forms.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, TextError> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or(TextError::IdOutOfRange(i))
            })
            .collect()
    }

    /// Decode to plain text, dropping structural (pad/start/end) ids.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String, TextError> {
        let kept: Vec<String> = self
            .decode(ids)?
            .into_iter()
            .zip(ids)
            .filter(|(_, &i)| i != PAD_ID && i != START_ID && i != END_ID)
            .map(|(t, _)| t)
            .collect();
        Ok(detokenize(&kept))
    }

    /// One token per line, the four reserved tokens first; id == line index.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let body = fs::read_to_string(path).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED_TOKENS.map(str::to_string) {
            return Err(TextError::BadVocabFile {
                path: path.display().to_string(),
                detail: "first four lines must be the reserved tokens".into(),
            });
        }
        let vocab = Vocabulary::from_token_list(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TextError::BadVocabFile {
                path: path.display().to_string(),
                detail: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slant {
    Left,
    Right,
    Center,
    Neutral,
}

impl fmt::Display for Slant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Slant::Left => "left",
            Slant::Right => "right",
            Slant::Center => "center",
            Slant::Neutral => "neutral",
        };
        f.write_str(s)
    }
}

/// Optional bias annotations; unknown keys are rejected at load time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_nationality: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name_pool: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slant: Option<Slant>,
}

impl Meta {
    pub fn is_empty(&self) -> bool {
        self.true_nationality.is_none() && self.name_pool.is_none() && self.slant.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub document: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Meta::is_empty")]
    pub meta: Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl Corpus {
    pub fn new(split: Split) -> Self {
        Corpus { examples: Vec::new(), split }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Read a JSONL corpus, one `Example` per line, preserving file order.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus, TextError> {
    let file = fs::File::open(path).map_err(|e| TextError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut corpus = Corpus::new(split);
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| TextError::MalformedLine {
            line: line_no,
            detail: e.to_string(),
        })?;
        if ex.document.is_empty() || ex.summary.is_empty() {
            return Err(TextError::MalformedLine {
                line: line_no,
                detail: "document and summary must be non-empty".into(),
            });
        }
        if seen.insert(ex.id.clone(), ()).is_some() {
            return Err(TextError::DuplicateId(ex.id));
        }
        corpus.examples.push(ex);
    }
    Ok(corpus)
}

/// Infer the split from the file stem (`train.jsonl`, `val.jsonl`,
/// `test.jsonl`); anything else loads as test data.
pub fn load_corpus_auto(path: &Path) -> Result<Corpus, TextError> {
    let split = match path.file_stem().and_then(|s| s.to_str()) {
        Some("train") => Split::Train,
        Some("val") => Split::Val,
        _ => Split::Test,
    };
    load_corpus(path, split)
}

/// Write a corpus as JSONL; inverse of [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), TextError> {
    let mut file = fs::File::create(path).map_err(|e| TextError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for ex in &corpus.examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(file, "{line}").map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}
