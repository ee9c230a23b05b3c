//! Span decoding, answer scoring and error analysis.

mod analysis;
mod decode;
mod metrics;

use thiserror::Error;

pub use analysis::{analyze, AnalysisReport, ComparisonStats};
pub use decode::{
    aggregate_windows, decode_probs, decode_window, Alternative, ExamplePrediction, SpanCandidate,
    WindowPrediction, DEFAULT_MAX_ANSWER_LEN,
};
pub use metrics::{
    align, em_f1, evaluate, evaluate_class, normalize_answer, CategoryCounts, ClassPrediction,
    Gold, MetricsReport, ScoredExample,
};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
