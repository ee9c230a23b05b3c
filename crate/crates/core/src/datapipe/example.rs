use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Result};

/// A pre-tokenized question/context pair with inclusive gold spans in
/// context coordinates. No spans means "no answer".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question_tokens: Vec<u32>,
    pub context_tokens: Vec<u32>,
    #[serde(default)]
    pub answers: Vec<(usize, usize)>,
    #[serde(default)]
    pub gold_texts: Vec<String>,
}

impl QAExample {
    pub fn has_answer(&self) -> bool {
        !self.answers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for &(s, e) in &self.answers {
            if s > e || e >= self.context_tokens.len() {
                return Err(DataError::Config(format!(
                    "example {}: span ({s}, {e}) outside context of {} tokens",
                    self.id,
                    self.context_tokens.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub cls: u32,
    pub sep: u32,
}

impl Default for SpecialTokens {
    /// BERT uncased ids.
    fn default() -> Self {
        Self { cls: 101, sep: 102 }
    }
}

/// Turns token ids back into answer text.
pub trait Detokenizer: Sync {
    fn render(&self, ids: &[u32]) -> String;
}

/// Renders id `k` as the word `w{k}`; the vocabulary used by synthetic data.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticVocab;

impl SyntheticVocab {
    pub fn word(id: u32) -> String {
        format!("w{id}")
    }
}

impl Detokenizer for SyntheticVocab {
    fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| Self::word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Line-per-token vocabulary; `##` continuation pieces are glued to the previous word.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::new(text.lines().map(str::to_string).collect()))
    }
}

impl Detokenizer for Vocab {
    fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let piece = self
                .tokens
                .get(id as usize)
                .map(String::as_str)
                .unwrap_or("[UNK]");
            match piece.strip_prefix("##") {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        out
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[QAExample]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wordpiece_rendering() {
        let v = Vocab::new(vec![
            "the".into(),
            "play".into(),
            "##ing".into(),
            "cat".into(),
        ]);
        assert_eq!(v.render(&[0, 1, 2, 3]), "the playing cat");
        assert_eq!(v.render(&[9]), "[UNK]");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let ex = QAExample {
            id: "q1".into(),
            question_tokens: vec![5, 6],
            context_tokens: vec![7, 8, 9],
            answers: vec![(1, 2)],
            gold_texts: vec!["w8 w9".into()],
        };
        write_jsonl(&path, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![ex]);
    }

    #[test]
    fn out_of_bounds_span_is_rejected() {
        let ex = QAExample {
            id: "bad".into(),
            question_tokens: vec![1],
            context_tokens: vec![1, 2],
            answers: vec![(1, 2)],
            gold_texts: vec![],
        };
        assert!(ex.validate().is_err());
    }
}
