use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataError, QAExample, Result, SpecialTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub max_len: usize,
    /// Context tokens shared by adjacent windows.
    pub overlap: usize,
    #[serde(default)]
    pub special: SpecialTokens,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            max_len: 386,
            overlap: 128,
            special: SpecialTokens::default(),
        }
    }
}

impl WindowConfig {
    pub fn new(max_len: usize, overlap: usize) -> Self {
        Self {
            max_len,
            overlap,
            special: SpecialTokens::default(),
        }
    }

    /// Context tokens that fit next to a question of `question_len` tokens.
    pub fn capacity(&self, question_len: usize) -> Result<usize> {
        let cap = self
            .max_len
            .checked_sub(question_len + 3)
            .filter(|&c| c > 0)
            .ok_or_else(|| {
                DataError::Config(format!(
                    "max_len {} leaves no room for context after a {question_len}-token question",
                    self.max_len
                ))
            })?;
        if cap <= self.overlap {
            return Err(DataError::Config(format!(
                "context capacity {cap} must exceed overlap {}",
                self.overlap
            )));
        }
        Ok(cap)
    }
}

/// One `[CLS] question [SEP] context-slice [SEP]` segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub example_id: String,
    pub window_index: usize,
    pub token_ids: Vec<u32>,
    pub question_len: usize,
    /// Index of the first included context token.
    pub context_offset: usize,
    pub context_len: usize,
    pub start_label: usize,
    pub end_label: usize,
}

impl Window {
    /// Window position of the first context token.
    pub fn context_start(&self) -> usize {
        self.question_len + 2
    }

    /// Window positions holding context tokens.
    pub fn context_range(&self) -> Range<usize> {
        let s = self.context_start();
        s..s + self.context_len
    }

    /// Maps a window position back to its context index.
    pub fn to_context(&self, pos: usize) -> Option<usize> {
        self.context_range()
            .contains(&pos)
            .then(|| pos - self.context_start() + self.context_offset)
    }

    /// Context slice `[context_offset, context_offset + context_len)`.
    pub fn context_span(&self) -> Range<usize> {
        self.context_offset..self.context_offset + self.context_len
    }

    pub fn is_no_answer(&self) -> bool {
        self.start_label == 0 && self.end_label == 0
    }
}

/// Labels for `window`: the first gold span fully inside its context slice,
/// shifted to window coordinates, or `(0, 0)` at the CLS slot.
pub fn assign_labels(window: &Window, ex: &QAExample) -> (usize, usize) {
    let slice = window.context_span();
    ex.answers
        .iter()
        .find(|&&(s, e)| slice.start <= s && e < slice.end)
        .map(|&(s, e)| {
            let shift = window.context_start();
            (s - slice.start + shift, e - slice.start + shift)
        })
        .unwrap_or((0, 0))
}

/// Splits `ex` into windows whose context slices advance by
/// `capacity - overlap`; the last window ends at the final context token.
pub fn window_example(ex: &QAExample, cfg: &WindowConfig) -> Result<Vec<Window>> {
    let q = ex.question_tokens.len();
    let cap = cfg.capacity(q)?;
    let stride = cap - cfg.overlap;
    let n = ex.context_tokens.len();

    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let len = cap.min(n - start);
        let mut token_ids = Vec::with_capacity(q + len + 3);
        token_ids.push(cfg.special.cls);
        token_ids.extend_from_slice(&ex.question_tokens);
        token_ids.push(cfg.special.sep);
        token_ids.extend_from_slice(&ex.context_tokens[start..start + len]);
        token_ids.push(cfg.special.sep);
        let mut w = Window {
            example_id: ex.id.clone(),
            window_index: windows.len(),
            token_ids,
            question_len: q,
            context_offset: start,
            context_len: len,
            start_label: 0,
            end_label: 0,
        };
        (w.start_label, w.end_label) = assign_labels(&w, ex);
        windows.push(w);
        if start + len >= n {
            break;
        }
        start += stride;
    }
    Ok(windows)
}
