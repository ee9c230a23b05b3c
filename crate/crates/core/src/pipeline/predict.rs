use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::{PipelineError, Result};
use crate::autodiff::{Graph, ParamSet};
use crate::datapipe::{
    window_example, CacheManifest, CacheReader, CacheWriter, Detokenizer, Label, LabelSchema,
    QAExample, RecordKey, Window, WindowConfig,
};
use crate::ensemble::ensemble_decode;
use crate::eval::{
    aggregate_windows, decode_probs, ClassPrediction, EvalError, ExamplePrediction, Gold,
};
use crate::heads::{HeadOutput, HeadSpec, LayerStack};
use crate::tensor::{softmax, Tensor};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "LAYERVISION_THREADS";

/// Worker pool sized by `LAYERVISION_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

/// Raw head outputs for one record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordOutput {
    Span { start: Vec<f32>, end: Vec<f32> },
    Class { logit: f32 },
}

fn forward_chunk(
    spec: &HeadSpec,
    params: &ParamSet<f32>,
    reader: &CacheReader,
    idx: &[usize],
) -> Result<Vec<RecordOutput>> {
    let m = reader.manifest();
    let per = m.tokens * m.hidden * m.channels;
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(reader.read(i)?.stack.tensor().data());
    }
    let mut g = Graph::with_params(params);
    let x = g.constant(Tensor::new(
        vec![idx.len(), m.tokens, m.hidden, m.channels],
        data,
    )?);
    Ok(match spec.forward(&mut g, x)? {
        HeadOutput::Span { start, end } => {
            let (s, e) = (g.value(start).data(), g.value(end).data());
            let t = m.tokens;
            (0..idx.len())
                .map(|b| RecordOutput::Span {
                    start: s[b * t..(b + 1) * t].to_vec(),
                    end: e[b * t..(b + 1) * t].to_vec(),
                })
                .collect()
        }
        HeadOutput::Class { logit } => g
            .value(logit)
            .data()
            .iter()
            .map(|&l| RecordOutput::Class { logit: l })
            .collect(),
    })
}

/// Forward pass over every record, in record order.
pub fn forward_records(
    spec: &HeadSpec,
    params: &ParamSet<f32>,
    reader: &CacheReader,
    batch: usize,
) -> Result<Vec<RecordOutput>> {
    let m = reader.manifest();
    if [m.tokens, m.hidden, m.channels] != [spec.tokens, spec.hidden, spec.channels] {
        return Err(PipelineError::Config(format!(
            "model expects stacks ({}, {}, {}) but {} holds ({}, {}, {})",
            spec.tokens,
            spec.hidden,
            spec.channels,
            reader.path().display(),
            m.tokens,
            m.hidden,
            m.channels
        )));
    }
    let indices: Vec<usize> = (0..reader.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch.max(1)).collect();
    let pool = thread_pool()?;
    let parts = pool.install(|| {
        chunks
            .par_iter()
            .map(|c| forward_chunk(spec, params, reader, c))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Start and end probabilities of one window record.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRecord {
    pub key: RecordKey,
    pub start: Vec<f32>,
    pub end: Vec<f32>,
}

/// Softmaxed span outputs keyed by the cache's record keys.
pub fn span_probabilities(
    spec: &HeadSpec,
    params: &ParamSet<f32>,
    reader: &CacheReader,
    batch: usize,
) -> Result<Vec<ProbRecord>> {
    let outputs = forward_records(spec, params, reader, batch)?;
    outputs
        .into_iter()
        .enumerate()
        .map(|(i, o)| {
            let key = record_key(reader, i)?;
            match o {
                RecordOutput::Span { start, end } => {
                    let sm = |v: Vec<f32>| -> Result<Vec<f32>> {
                        Ok(softmax(&Tensor::from_vec(v)?, 0)?.into_data())
                    };
                    Ok(ProbRecord {
                        key,
                        start: sm(start)?,
                        end: sm(end)?,
                    })
                }
                RecordOutput::Class { .. } => Err(PipelineError::Config(
                    "span probabilities from a class head".into(),
                )),
            }
        })
        .collect()
}

fn record_key(reader: &CacheReader, i: usize) -> Result<RecordKey> {
    reader.key(i).cloned().ok_or_else(|| {
        PipelineError::Config(format!(
            "{}: record {i} has no key in the manifest",
            reader.path().display()
        ))
    })
}

/// Class logits keyed by example id.
pub fn class_predictions(
    spec: &HeadSpec,
    params: &ParamSet<f32>,
    reader: &CacheReader,
    batch: usize,
) -> Result<Vec<ClassPrediction>> {
    forward_records(spec, params, reader, batch)?
        .into_iter()
        .enumerate()
        .map(|(i, o)| match o {
            RecordOutput::Class { logit } => Ok(ClassPrediction::from_logit(
                record_key(reader, i)?.example_id,
                logit,
            )),
            RecordOutput::Span { .. } => Err(PipelineError::Config(
                "class predictions from a span head".into(),
            )),
        })
        .collect()
}

/// Gold labels of a class cache, one per record.
pub fn class_golds(reader: &CacheReader) -> Result<Vec<Gold>> {
    (0..reader.len())
        .map(|i| {
            let has = match reader.read(i)?.label {
                Label::Class(y) => y == 1,
                Label::Span { .. } => {
                    return Err(PipelineError::Config("span label in a class cache".into()))
                }
            };
            Ok(Gold {
                example_id: record_key(reader, i)?.example_id,
                texts: if has {
                    vec!["answerable".into()]
                } else {
                    Vec::new()
                },
                context_tokens: 0,
            })
        })
        .collect()
}

/// Writes probabilities as a cache of `[T, 1, 2]` stacks (channel 0 start,
/// channel 1 end), keeping the source labels, keys and windowing.
pub fn write_prob_dump(
    path: &Path,
    probs: &[ProbRecord],
    source: &CacheReader,
) -> Result<CacheManifest> {
    let sm = source.manifest();
    let mut template = CacheManifest::new(sm.tokens, 1, 2, LabelSchema::Span)
        .with_split(sm.split.clone())
        .with_source(
            format!("probabilities:{}", source.path().display()),
            sm.seed,
        );
    template.windowing = sm.windowing;
    if probs.len() != source.len() {
        return Err(EvalError::Alignment(format!(
            "{} probability records for {} cache records",
            probs.len(),
            source.len()
        ))
        .into());
    }
    let mut w = CacheWriter::create(path, template)?;
    for (i, p) in probs.iter().enumerate() {
        let data = p
            .start
            .iter()
            .zip(&p.end)
            .flat_map(|(&s, &e)| [s, e])
            .collect();
        let stack = LayerStack::from_data(sm.tokens, 1, 2, data)?;
        w.push(&stack, source.read(i)?.label, p.key.clone())?;
    }
    Ok(w.finish()?)
}

pub fn read_prob_dump(path: &Path) -> Result<(CacheManifest, Vec<ProbRecord>)> {
    let r = CacheReader::open(path)?;
    let m = r.manifest().clone();
    if m.hidden != 1 || m.channels != 2 {
        return Err(PipelineError::Config(format!(
            "{}: not a probability dump (H = {}, C = {})",
            path.display(),
            m.hidden,
            m.channels
        )));
    }
    let recs = (0..r.len())
        .map(|i| {
            let d = r.read(i)?.stack.into_tensor().into_data();
            Ok(ProbRecord {
                key: record_key(&r, i)?,
                start: d.iter().step_by(2).copied().collect(),
                end: d.iter().skip(1).step_by(2).copied().collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((m, recs))
}

/// Windowing recorded in a span cache manifest.
pub fn manifest_windowing(m: &CacheManifest) -> Result<WindowConfig> {
    m.windowing
        .map(|w| WindowConfig::new(w.max_len, w.overlap))
        .ok_or_else(|| PipelineError::Config("cache manifest records no windowing".into()))
}

fn index_keys(probs: &[ProbRecord]) -> Result<HashMap<&RecordKey, usize>> {
    let mut map = HashMap::with_capacity(probs.len());
    for (i, p) in probs.iter().enumerate() {
        if map.insert(&p.key, i).is_some() {
            return Err(EvalError::Alignment(format!(
                "duplicate record {}#{}",
                p.key.example_id, p.key.window_index
            ))
            .into());
        }
    }
    Ok(map)
}

fn example_windows(
    ex: &QAExample,
    wc: &WindowConfig,
    index: &HashMap<&RecordKey, usize>,
) -> Result<(Vec<Window>, Vec<usize>)> {
    let windows = window_example(ex, wc)?;
    let rows = windows
        .iter()
        .map(|w| {
            index
                .get(&RecordKey::new(&w.example_id, w.window_index))
                .copied()
                .ok_or_else(|| {
                    EvalError::Alignment(format!(
                        "no record for {}#{}",
                        w.example_id, w.window_index
                    ))
                    .into()
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((windows, rows))
}

fn check_all_used(n_windows: usize, n_records: usize) -> Result<()> {
    if n_windows != n_records {
        return Err(EvalError::Alignment(format!(
            "{n_records} records but the examples produce {n_windows} windows"
        ))
        .into());
    }
    Ok(())
}

/// Decodes every example from its window probabilities.
pub fn decode_examples(
    probs: &[ProbRecord],
    examples: &[QAExample],
    wc: &WindowConfig,
    max_answer_len: usize,
    detok: &dyn Detokenizer,
) -> Result<Vec<ExamplePrediction>> {
    let index = index_keys(probs)?;
    let pool = thread_pool()?;
    let out: Vec<(usize, ExamplePrediction)> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let (windows, rows) = example_windows(ex, wc, &index)?;
                let preds = windows
                    .iter()
                    .zip(&rows)
                    .map(|(w, &r)| {
                        decode_probs(
                            probs[r].start.clone(),
                            probs[r].end.clone(),
                            w.context_range(),
                            max_answer_len,
                        )
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok((windows.len(), aggregate_windows(&windows, &preds, detok)?))
            })
            .collect::<Result<_>>()
    })?;
    check_all_used(out.iter().map(|(n, _)| n).sum(), probs.len())?;
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

/// Element-wise-max ensemble of several aligned probability dumps.
pub fn ensemble_examples(
    members: &[Vec<ProbRecord>],
    examples: &[QAExample],
    wc: &WindowConfig,
    max_answer_len: usize,
    detok: &dyn Detokenizer,
) -> Result<Vec<ExamplePrediction>> {
    let first = members
        .first()
        .ok_or_else(|| EvalError::Contract("ensemble needs at least 2 members".into()))?;
    for (k, m) in members.iter().enumerate().skip(1) {
        if m.len() != first.len() || m.iter().zip(first).any(|(a, b)| a.key != b.key) {
            return Err(EvalError::Alignment(format!(
                "member {k} covers different windows than member 0"
            ))
            .into());
        }
    }
    let index = index_keys(first)?;
    let pool = thread_pool()?;
    let out: Vec<(usize, ExamplePrediction)> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let (windows, rows) = example_windows(ex, wc, &index)?;
                let per_member = members
                    .iter()
                    .map(|m| {
                        windows
                            .iter()
                            .zip(&rows)
                            .map(|(w, &r)| {
                                decode_probs(
                                    m[r].start.clone(),
                                    m[r].end.clone(),
                                    w.context_range(),
                                    max_answer_len,
                                )
                            })
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let refs: Vec<&[_]> = per_member.iter().map(Vec::as_slice).collect();
                Ok((
                    windows.len(),
                    ensemble_decode(&windows, &refs, max_answer_len, detok)?,
                ))
            })
            .collect::<Result<_>>()
    })?;
    check_all_used(out.iter().map(|(n, _)| n).sum(), first.len())?;
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

pub fn golds_from_examples(examples: &[QAExample], detok: &dyn Detokenizer) -> Vec<Gold> {
    examples
        .iter()
        .map(|e| Gold::from_example(e, detok))
        .collect()
}
