//! Training, evaluation and the command entry points.

mod commands;
mod config;
mod model;
mod optim;
mod predict;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{
    cmd_analyze, cmd_curve, cmd_ensemble, cmd_eval, cmd_synth, cmd_train, curve_csv, detokenizer,
    evaluate_model, read_predictions, CurveRow, EnsembleReport, EvalRequest, RunRecord,
    SynthRequest, METRICS_JSON, PREDICTIONS_JSONL, PROBS_CACHE, RUNS_JSONL,
};
pub use config::{DataConfig, EvalConfig, HeadConfig, OptimizerConfig, RunConfig};
pub use model::{
    load_model, param_blob, save_model, ModelFile, ParamEntry, MODEL_BLOB, MODEL_JSON,
};
pub use optim::Adam;
pub use predict::{
    class_golds, class_predictions, decode_examples, ensemble_examples, forward_records,
    golds_from_examples, manifest_windowing, read_prob_dump, span_probabilities, thread_pool,
    write_prob_dump, ProbRecord, RecordOutput, THREADS_ENV,
};
pub use train::{train, TrainOutcome};

use crate::datapipe::DataError;
use crate::eval::EvalError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, e: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
