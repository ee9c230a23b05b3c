use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::datapipe::CacheManifest;
use crate::eval::DEFAULT_MAX_ANSWER_LEN;
use crate::heads::{Activation, ConvSpec, HeadKind, HeadSpec, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub adapter_size: usize,
    pub shared: bool,
    pub use_skip: bool,
    pub activation: Activation,
    pub conv: ConvSpec,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Lp,
            adapter_size: 0,
            shared: true,
            use_skip: false,
            activation: Activation::Gelu,
            conv: ConvSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 16,
            epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training cache.
    pub cache: Option<PathBuf>,
    /// Held-out cache evaluated after training.
    pub eval_cache: Option<PathBuf>,
    /// JSONL examples behind `eval_cache`; required for span evaluation.
    pub eval_examples: Option<PathBuf>,
    /// One token per line; synthetic `w{id}` words when absent.
    pub vocab: Option<PathBuf>,
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cache: None,
            eval_cache: None,
            eval_examples: None,
            vocab: None,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_answer_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

/// Everything a training run needs; one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Span,
            head: HeadConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", o.lr));
        }
        if o.batch == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return bad(format!("fraction {} outside (0, 1]", self.data.fraction));
        }
        if self.eval.max_answer_len == 0 {
            return bad("max_answer_len must be >= 1".into());
        }
        if self.data.cache.is_none() {
            return bad("no training cache given".into());
        }
        if self.head.kind == HeadKind::Adapter && self.head.adapter_size == 0 {
            return bad("adapter head needs adapter_size >= 1".into());
        }
        if self.task == Task::Span
            && self.data.eval_cache.is_some()
            && self.data.eval_examples.is_none()
        {
            return bad("span evaluation needs eval_examples".into());
        }
        Ok(())
    }

    /// Head description for stacks shaped like `manifest`.
    pub fn head_spec(&self, manifest: &CacheManifest) -> Result<HeadSpec> {
        let h = &self.head;
        let spec = HeadSpec {
            adapter_size: h.adapter_size,
            shared: h.shared,
            use_skip: h.use_skip,
            activation: h.activation,
            conv: h.conv,
            ..HeadSpec::new(
                self.task,
                h.kind,
                manifest.tokens,
                manifest.hidden,
                manifest.channels,
            )
        };
        spec.validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(spec)
    }
}
