use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::datapipe::{Detokenizer, Window};
use crate::tensor::{softmax, Tensor};

/// Inclusive `(start, end)` window positions with joint score `p_start * p_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl SpanCandidate {
    pub fn is_no_answer(&self) -> bool {
        self.start == 0 && self.end == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub start_probs: Vec<f32>,
    pub end_probs: Vec<f32>,
    pub best: SpanCandidate,
    pub second_best: Option<SpanCandidate>,
    pub no_answer_score: f64,
}

/// Default cap on answer length in tokens.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

fn probs(logits: &[f32]) -> Result<Vec<f32>> {
    let t = Tensor::from_vec(logits.to_vec())?;
    Ok(softmax(&t, 0)?.into_data())
}

/// Softmaxes both logit vectors, then picks the best span among `(0, 0)` and
/// every `i <= j < i + max_answer_len` inside `context`.
pub fn decode_window(
    start_logits: &[f32],
    end_logits: &[f32],
    context: Range<usize>,
    max_answer_len: usize,
) -> Result<WindowPrediction> {
    if start_logits.len() != end_logits.len() {
        return Err(EvalError::Contract(format!(
            "start/end logits differ in length ({} vs {})",
            start_logits.len(),
            end_logits.len()
        )));
    }
    decode_probs(
        probs(start_logits)?,
        probs(end_logits)?,
        context,
        max_answer_len,
    )
}

/// Decoding over precomputed per-position scores. The vectors need not sum
/// to one, which lets ensembles feed element-wise maxima through unchanged.
///
/// Candidates are enumerated as `(0, 0)` first, then by ascending `i`, then
/// ascending `j`; the first of equal scores wins.
pub fn decode_probs(
    start_probs: Vec<f32>,
    end_probs: Vec<f32>,
    context: Range<usize>,
    max_answer_len: usize,
) -> Result<WindowPrediction> {
    let t = start_probs.len();
    if end_probs.len() != t || t == 0 {
        return Err(EvalError::Contract(format!(
            "start/end vectors must be non-empty and equal length ({t} vs {})",
            end_probs.len()
        )));
    }
    if max_answer_len == 0 {
        return Err(EvalError::Contract("max_answer_len must be >= 1".into()));
    }
    if context.start == 0 || context.end > t {
        return Err(EvalError::Contract(format!(
            "context range {context:?} must lie within 1..{t}"
        )));
    }

    let no_answer_score = start_probs[0] as f64 * end_probs[0] as f64;
    let mut best = SpanCandidate {
        start: 0,
        end: 0,
        score: no_answer_score,
    };
    let mut second: Option<SpanCandidate> = None;
    for i in context.clone() {
        let ps = start_probs[i] as f64;
        let j_end = context.end.min(i + max_answer_len);
        for (j, &pe) in end_probs.iter().enumerate().take(j_end).skip(i) {
            let c = SpanCandidate {
                start: i,
                end: j,
                score: ps * pe as f64,
            };
            if c.score > best.score {
                second = Some(best);
                best = c;
            } else if second.is_none_or(|s| c.score > s.score) {
                second = Some(c);
            }
        }
    }
    Ok(WindowPrediction {
        start_probs,
        end_probs,
        best,
        second_best: second,
        no_answer_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub text: String,
    pub score: f64,
}

/// Final answer for one example after cross-window aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePrediction {
    pub example_id: String,
    /// Empty for "no answer".
    #[serde(rename = "text")]
    pub answer_text: String,
    pub score: f64,
    pub second_best: Option<Alternative>,
    pub window_index: usize,
    /// Inclusive context-token span of the answer, if any.
    #[serde(default)]
    pub span: Option<(usize, usize)>,
}

impl ExamplePrediction {
    pub fn is_no_answer(&self) -> bool {
        self.answer_text.is_empty()
    }
}

fn candidate_text(w: &Window, c: &SpanCandidate, detok: &dyn Detokenizer) -> String {
    if c.is_no_answer() {
        String::new()
    } else {
        detok.render(&w.token_ids[c.start..=c.end])
    }
}

/// Picks the highest-scoring window candidate across all windows of one
/// example (earlier windows win ties). The second-best answer is the
/// highest-scoring remaining candidate whose text differs from the winner's.
pub fn aggregate_windows(
    windows: &[Window],
    preds: &[WindowPrediction],
    detok: &dyn Detokenizer,
) -> Result<ExamplePrediction> {
    if windows.is_empty() || windows.len() != preds.len() {
        return Err(EvalError::Contract(format!(
            "aggregation needs one prediction per window ({} windows, {} predictions)",
            windows.len(),
            preds.len()
        )));
    }
    let id = &windows[0].example_id;
    if let Some(w) = windows.iter().find(|w| &w.example_id != id) {
        return Err(EvalError::Alignment(format!(
            "windows from different examples: {id} and {}",
            w.example_id
        )));
    }
    for (w, p) in windows.iter().zip(preds) {
        if p.start_probs.len() < w.token_ids.len() {
            return Err(EvalError::Contract(format!(
                "window {} of {id} has {} tokens but only {} scores",
                w.window_index,
                w.token_ids.len(),
                p.start_probs.len()
            )));
        }
    }

    let mut candidates: Vec<(usize, SpanCandidate)> = Vec::new();
    for (k, p) in preds.iter().enumerate() {
        candidates.push((k, p.best));
    }
    for (k, p) in preds.iter().enumerate() {
        if let Some(s) = p.second_best {
            candidates.push((k, s));
        }
    }
    let (win_k, win) = preds
        .iter()
        .enumerate()
        .fold(None::<(usize, SpanCandidate)>, |acc, (k, p)| match acc {
            Some((_, b)) if b.score >= p.best.score => acc,
            _ => Some((k, p.best)),
        })
        .expect("non-empty");
    let w = &windows[win_k];
    let text = candidate_text(w, &win, detok);

    candidates.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let second_best = candidates
        .iter()
        .filter(|(k, c)| !(*k == win_k && c == &win))
        .map(|(k, c)| (candidate_text(&windows[*k], c, detok), c.score))
        .find(|(t, _)| t != &text)
        .map(|(text, score)| Alternative { text, score });

    let span = (!win.is_no_answer())
        .then(|| Some((w.to_context(win.start)?, w.to_context(win.end)?)))
        .flatten();
    Ok(ExamplePrediction {
        example_id: id.clone(),
        answer_text: text,
        score: win.score,
        second_best,
        window_index: w.window_index,
        span,
    })
}
