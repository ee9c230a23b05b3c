//! Example windowing, label assignment, the on-disk activation cache and
//! seeded batch iteration.

mod batch;
mod cache;
mod example;
mod window;

use std::path::PathBuf;

use thiserror::Error;

pub use batch::{Batch, BatchIter};
pub use cache::{
    manifest_path, read_cache, write_cache, CacheManifest, CacheReader, CacheWriter, Label,
    LabelSchema, Record, RecordKey, WindowingMeta, CACHE_MAGIC, CACHE_VERSION, HEADER_LEN,
};
pub use example::{
    read_jsonl, write_jsonl, Detokenizer, QAExample, SpecialTokens, SyntheticVocab, Vocab,
};
pub use window::{assign_labels, window_example, Window, WindowConfig};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
