use std::sync::Arc;

use super::{Adam, PipelineError, Result, RunConfig};
use crate::autodiff::{Graph, ParamSet};
use crate::datapipe::{BatchIter, CacheReader, Label, LabelSchema};
use crate::heads::{head_loss, HeadSpec, Target, Task};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: HeadSpec,
    pub params: ParamSet<f32>,
    /// Mean per-record loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

pub(crate) fn check_schema(task: Task, schema: LabelSchema) -> Result<()> {
    let ok = matches!(
        (task, schema),
        (Task::Span, LabelSchema::Span) | (Task::Class, LabelSchema::Class)
    );
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "{task:?} head cannot use a cache with {schema:?} labels"
        )))
    }
}

fn target(label: &Label) -> Target {
    match *label {
        Label::Span { start, end } => Target::Span {
            start: start as usize,
            end: end as usize,
        },
        Label::Class(y) => Target::Class(y == 1),
    }
}

/// Optimizes a freshly initialized head on `reader` per `cfg`.
pub fn train(cfg: &RunConfig, reader: Arc<CacheReader>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = reader.manifest().clone();
    check_schema(cfg.task, manifest.label_schema)?;
    let spec = cfg.head_spec(&manifest)?;
    let o = &cfg.optimizer;
    let mut params = spec.init_params(o.seed)?;
    let mut adam = Adam::new(o.lr, &params);
    let batches = BatchIter::new(reader, o.batch, o.seed, cfg.data.fraction)?;

    let mut epoch_losses = Vec::with_capacity(o.epochs);
    for epoch in 0..o.epochs {
        let (mut total, mut seen) = (0f64, 0usize);
        for batch in batches.epoch_prefetched(epoch as u64, 2) {
            let batch = batch?;
            let targets: Vec<Target> = batch.labels.iter().map(target).collect();
            let mut g = Graph::with_params(&params);
            let x = g.constant(batch.stacks);
            let out = spec.forward(&mut g, x)?;
            let loss = head_loss(&mut g, out, &targets)?;
            let report = g.backward(loss)?;
            adam.step(&mut params, &report.grads)?;
            total += report.loss as f64 * targets.len() as f64;
            seen += targets.len();
        }
        epoch_losses.push(if seen == 0 { 0.0 } else { total / seen as f64 });
    }
    Ok(TrainOutcome {
        spec,
        params,
        epoch_losses,
        steps: adam.steps(),
    })
}
