use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{align, em_f1, ExamplePrediction, Gold, Result, ScoredExample};

/// Answer-type breakdown and second-best statistics for one model, plus
/// context-length comparisons when a second model is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_examples: usize,
    /// Accuracy on answerable examples; absent when there are none.
    pub has_answer_accuracy: Option<f64>,
    pub no_answer_accuracy: Option<f64>,
    /// Among answerable examples answered wrongly, the share predicted as no-answer.
    pub wrong_has_answer_predicted_no_answer: Option<f64>,
    /// Among examples whose best answer is wrong, the share whose second-best is right.
    pub second_best_correct_rate: Option<f64>,
    /// Mean gold context length in tokens over correctly answered examples.
    pub mean_gold_context_tokens_correct: Option<f64>,
    pub comparison: Option<ComparisonStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub comparison_mean_gold_context_tokens_correct: Option<f64>,
    pub uniquely_correct: usize,
    pub comparison_uniquely_correct: usize,
    pub mean_gold_context_tokens_uniquely_correct: Option<f64>,
    pub comparison_mean_gold_context_tokens_uniquely_correct: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean<'a>(xs: impl Iterator<Item = &'a ScoredExample<'a>>) -> Option<f64> {
    let (sum, n) = xs.fold((0usize, 0usize), |(s, n), x| {
        (s + x.gold.context_tokens, n + 1)
    });
    ratio(sum, n)
}

pub fn analyze(
    preds: &[ExamplePrediction],
    golds: &[Gold],
    comparison: Option<&[ExamplePrediction]>,
) -> Result<AnalysisReport> {
    let scored = align(preds, golds)?;
    let has: Vec<_> = scored.iter().filter(|s| s.gold.has_answer()).collect();
    let none: Vec<_> = scored.iter().filter(|s| !s.gold.has_answer()).collect();
    let count = |v: &[&ScoredExample]| v.iter().filter(|s| s.correct()).count();

    let wrong_has: Vec<_> = has.iter().filter(|s| !s.correct()).collect();
    let wrong_has_said_none = wrong_has.iter().filter(|s| s.pred.is_no_answer()).count();

    let wrong: Vec<_> = scored.iter().filter(|s| !s.correct()).collect();
    let second_right = wrong
        .iter()
        .filter(|s| {
            s.pred
                .second_best
                .as_ref()
                .is_some_and(|alt| em_f1(&alt.text, &s.gold.texts).0 == 1.0)
        })
        .count();

    let comparison = comparison
        .map(|other| -> Result<ComparisonStats> {
            let theirs = align(other, golds)?;
            let mine_only: Vec<_> = scored
                .iter()
                .zip(&theirs)
                .filter(|(a, b)| a.correct() && !b.correct())
                .map(|(a, _)| a)
                .collect();
            let theirs_only: Vec<_> = scored
                .iter()
                .zip(&theirs)
                .filter(|(a, b)| !a.correct() && b.correct())
                .map(|(_, b)| b)
                .collect();
            Ok(ComparisonStats {
                comparison_mean_gold_context_tokens_correct: mean(
                    theirs.iter().filter(|s| s.correct()),
                ),
                uniquely_correct: mine_only.len(),
                comparison_uniquely_correct: theirs_only.len(),
                mean_gold_context_tokens_uniquely_correct: mean(mine_only.into_iter()),
                comparison_mean_gold_context_tokens_uniquely_correct: mean(theirs_only.into_iter()),
            })
        })
        .transpose()?;

    Ok(AnalysisReport {
        n_examples: scored.len(),
        has_answer_accuracy: ratio(count(&has), has.len()),
        no_answer_accuracy: ratio(count(&none), none.len()),
        wrong_has_answer_predicted_no_answer: ratio(wrong_has_said_none, wrong_has.len()),
        second_best_correct_rate: ratio(second_right, wrong.len()),
        mean_gold_context_tokens_correct: mean(scored.iter().filter(|s| s.correct())),
        comparison,
    })
}

impl AnalysisReport {
    /// `metric,value` rows; absent values are left empty.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&str, Option<f64>)> = vec![
            ("n_examples", Some(self.n_examples as f64)),
            ("has_answer_accuracy", self.has_answer_accuracy),
            ("no_answer_accuracy", self.no_answer_accuracy),
            (
                "wrong_has_answer_predicted_no_answer",
                self.wrong_has_answer_predicted_no_answer,
            ),
            ("second_best_correct_rate", self.second_best_correct_rate),
            (
                "mean_gold_context_tokens_correct",
                self.mean_gold_context_tokens_correct,
            ),
        ];
        if let Some(c) = &self.comparison {
            rows.extend([
                (
                    "comparison_mean_gold_context_tokens_correct",
                    c.comparison_mean_gold_context_tokens_correct,
                ),
                ("uniquely_correct", Some(c.uniquely_correct as f64)),
                (
                    "comparison_uniquely_correct",
                    Some(c.comparison_uniquely_correct as f64),
                ),
                (
                    "mean_gold_context_tokens_uniquely_correct",
                    c.mean_gold_context_tokens_uniquely_correct,
                ),
                (
                    "comparison_mean_gold_context_tokens_uniquely_correct",
                    c.comparison_mean_gold_context_tokens_uniquely_correct,
                ),
            ]);
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            match v {
                Some(v) => writeln!(out, "{k},{v}"),
                None => writeln!(out, "{k},"),
            }
            .expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Alternative;

    fn pred(id: &str, text: &str, second: Option<&str>) -> ExamplePrediction {
        ExamplePrediction {
            example_id: id.into(),
            answer_text: text.into(),
            score: 0.5,
            second_best: second.map(|t| Alternative {
                text: t.into(),
                score: 0.1,
            }),
            window_index: 0,
            span: None,
        }
    }

    fn gold(id: &str, texts: &[&str], ctx: usize) -> Gold {
        Gold {
            example_id: id.into(),
            texts: texts.iter().map(|s| s.to_string()).collect(),
            context_tokens: ctx,
        }
    }

    #[test]
    fn second_best_fixture() {
        let golds = vec![
            gold("a", &["x"], 10),
            gold("b", &["y"], 20),
            gold("c", &[], 30),
            gold("d", &["z"], 40),
        ];
        let preds = vec![
            pred("a", "x", None),
            pred("b", "", Some("y")),
            pred("c", "", None),
            pred("d", "q", Some("r")),
        ];
        let r = analyze(&preds, &golds, None).unwrap();
        assert_eq!(r.second_best_correct_rate, Some(0.5));
        assert_eq!(r.has_answer_accuracy, Some(1.0 / 3.0));
        assert_eq!(r.no_answer_accuracy, Some(1.0));
        assert_eq!(r.wrong_has_answer_predicted_no_answer, Some(0.5));
        assert_eq!(r.mean_gold_context_tokens_correct, Some(20.0));
        assert!(r.comparison.is_none());
    }

    #[test]
    fn identical_comparison_has_no_unique_sets() {
        let golds = vec![gold("a", &["x"], 10), gold("b", &[], 4)];
        let preds = vec![pred("a", "x", None), pred("b", "w", None)];
        let r = analyze(&preds, &golds, Some(&preds)).unwrap();
        let c = r.comparison.unwrap();
        assert_eq!((c.uniquely_correct, c.comparison_uniquely_correct), (0, 0));
        assert_eq!(c.mean_gold_context_tokens_uniquely_correct, None);
        assert_eq!(c.comparison_mean_gold_context_tokens_uniquely_correct, None);
    }

    #[test]
    fn unique_sets_and_csv() {
        let golds = vec![gold("a", &["x"], 10), gold("b", &["y"], 30)];
        let mine = vec![pred("a", "x", None), pred("b", "", None)];
        let theirs = vec![pred("a", "", None), pred("b", "y", None)];
        let r = analyze(&mine, &golds, Some(&theirs)).unwrap();
        let c = r.comparison.as_ref().unwrap();
        assert_eq!(c.mean_gold_context_tokens_uniquely_correct, Some(10.0));
        assert_eq!(
            c.comparison_mean_gold_context_tokens_uniquely_correct,
            Some(30.0)
        );
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("uniquely_correct,1\n"));
    }

    #[test]
    fn all_no_answer() {
        let golds = vec![gold("a", &[], 1), gold("b", &[], 2)];
        let preds = vec![pred("a", "", None), pred("b", "", None)];
        let r = analyze(&preds, &golds, None).unwrap();
        assert_eq!(r.no_answer_accuracy, Some(1.0));
        assert_eq!(r.has_answer_accuracy, None);
        assert_eq!(r.second_best_correct_rate, None);
    }

    #[test]
    fn misaligned_is_error() {
        let golds = vec![gold("a", &[], 1)];
        assert!(analyze(&[], &golds, None).is_err());
    }
}
