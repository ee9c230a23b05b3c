use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{EvalError, ExamplePrediction, Result};
use crate::datapipe::{Detokenizer, QAExample};

const PUNCTUATION: &str = r##"!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~"##;

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("static regex"))
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punc: String = lower
        .chars()
        .filter(|c| !PUNCTUATION.contains(*c))
        .collect();
    let no_articles = articles().replace_all(&no_punc, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    let mut common = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match and token F1 of `pred` against the best of `golds`.
/// An empty gold list means the example has no answer.
pub fn em_f1(pred: &str, golds: &[String]) -> (f64, f64) {
    let pred_norm = normalize_answer(pred);
    let pred_toks = tokens(pred);
    let no_answer = [String::new()];
    let golds = if golds.is_empty() {
        &no_answer[..]
    } else {
        golds
    };
    golds.iter().fold((0.0f64, 0.0f64), |(em, f1), g| {
        let e = if normalize_answer(g) == pred_norm {
            1.0
        } else {
            0.0
        };
        (em.max(e), f1.max(f1_single(&pred_toks, &tokens(g))))
    })
}

/// Gold answers and context size for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gold {
    pub example_id: String,
    /// Empty when the example has no answer.
    pub texts: Vec<String>,
    pub context_tokens: usize,
}

impl Gold {
    pub fn has_answer(&self) -> bool {
        !self.texts.is_empty()
    }

    /// Uses `gold_texts` when present, otherwise renders the gold spans.
    pub fn from_example(ex: &QAExample, detok: &dyn Detokenizer) -> Self {
        let texts = if !ex.has_answer() {
            Vec::new()
        } else if !ex.gold_texts.is_empty() {
            ex.gold_texts.clone()
        } else {
            ex.answers
                .iter()
                .map(|&(s, e)| detok.render(&ex.context_tokens[s..=e]))
                .collect()
        };
        Self {
            example_id: ex.id.clone(),
            texts,
            context_tokens: ex.context_tokens.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    pub f1: f64,
    pub n_examples: usize,
    pub has_answer: CategoryCounts,
    pub no_answer: CategoryCounts,
}

/// Per-example scores used by both the report and the analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample<'a> {
    pub gold: &'a Gold,
    pub pred: &'a ExamplePrediction,
    pub em: f64,
    pub f1: f64,
}

impl ScoredExample<'_> {
    pub fn correct(&self) -> bool {
        self.em == 1.0
    }
}

/// Pairs every gold with exactly one prediction, in gold order.
pub fn align<'a>(
    preds: &'a [ExamplePrediction],
    golds: &'a [Gold],
) -> Result<Vec<ScoredExample<'a>>> {
    let mut by_id: HashMap<&str, &ExamplePrediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.example_id.as_str(), p).is_some() {
            return Err(EvalError::Alignment(format!(
                "duplicate prediction for {}",
                p.example_id
            )));
        }
    }
    let mut seen = HashSet::with_capacity(golds.len());
    let mut out = Vec::with_capacity(golds.len());
    for g in golds {
        if !seen.insert(g.example_id.as_str()) {
            return Err(EvalError::Alignment(format!(
                "duplicate gold for {}",
                g.example_id
            )));
        }
        let p = by_id
            .get(g.example_id.as_str())
            .ok_or_else(|| EvalError::Alignment(format!("no prediction for {}", g.example_id)))?;
        let (em, f1) = em_f1(&p.answer_text, &g.texts);
        out.push(ScoredExample {
            gold: g,
            pred: p,
            em,
            f1,
        });
    }
    if let Some(extra) = preds.iter().find(|p| !seen.contains(p.example_id.as_str())) {
        return Err(EvalError::Alignment(format!(
            "prediction for unknown example {}",
            extra.example_id
        )));
    }
    Ok(out)
}

pub fn evaluate(preds: &[ExamplePrediction], golds: &[Gold]) -> Result<MetricsReport> {
    let scored = align(preds, golds)?;
    let n = scored.len();
    let mut report = MetricsReport {
        em: 0.0,
        f1: 0.0,
        n_examples: n,
        has_answer: CategoryCounts::default(),
        no_answer: CategoryCounts::default(),
    };
    let (mut em, mut f1) = (0.0, 0.0);
    for s in &scored {
        em += s.em;
        f1 += s.f1;
        let cat = if s.gold.has_answer() {
            &mut report.has_answer
        } else {
            &mut report.no_answer
        };
        cat.total += 1;
        cat.correct += s.correct() as usize;
    }
    if n > 0 {
        report.em = em / n as f64;
        report.f1 = f1 / n as f64;
    }
    Ok(report)
}

/// Binary "has answer" decision from a classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub example_id: String,
    pub logit: f32,
    pub has_answer: bool,
}

impl ClassPrediction {
    pub fn from_logit(example_id: impl Into<String>, logit: f32) -> Self {
        Self {
            example_id: example_id.into(),
            logit,
            has_answer: logit > 0.0,
        }
    }
}

/// Accuracy (reported as `em`) and positive-class F1 for classification.
pub fn evaluate_class(preds: &[ClassPrediction], golds: &[Gold]) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &ClassPrediction> = HashMap::new();
    for p in preds {
        if by_id.insert(p.example_id.as_str(), p).is_some() {
            return Err(EvalError::Alignment(format!(
                "duplicate prediction for {}",
                p.example_id
            )));
        }
    }
    if by_id.len() != golds.len() {
        return Err(EvalError::Alignment(format!(
            "{} predictions for {} examples",
            by_id.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut has = CategoryCounts::default();
    let mut none = CategoryCounts::default();
    for g in golds {
        let p = by_id
            .get(g.example_id.as_str())
            .ok_or_else(|| EvalError::Alignment(format!("no prediction for {}", g.example_id)))?;
        let truth = g.has_answer();
        match (p.has_answer, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        let cat = if truth { &mut has } else { &mut none };
        cat.total += 1;
        cat.correct += (p.has_answer == truth) as usize;
    }
    let n = golds.len();
    let correct = has.correct + none.correct;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(MetricsReport {
        em: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        f1,
        n_examples: n,
        has_answer: has,
        no_answer: none,
    })
}
