use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::predict::{
    class_golds, class_predictions, decode_examples, ensemble_examples, golds_from_examples,
    manifest_windowing, read_prob_dump, span_probabilities, write_prob_dump,
};
use super::{load_model, save_model, train, PipelineError, Result, RunConfig};
use crate::autodiff::ParamSet;
use crate::datapipe::{
    read_jsonl, write_jsonl, CacheManifest, CacheReader, Detokenizer, SyntheticVocab, Vocab,
};
use crate::eval::{
    analyze, evaluate, evaluate_class, AnalysisReport, ExamplePrediction, MetricsReport,
};
use crate::heads::{HeadSpec, Task};
use crate::toy::{generate_synthetic_dataset, ToyConfig};

pub const METRICS_JSON: &str = "metrics.json";
pub const PREDICTIONS_JSONL: &str = "predictions.jsonl";
pub const PROBS_CACHE: &str = "probs.bve";
pub const RUNS_JSONL: &str = "runs.jsonl";

/// Frozen-parameter forward batch size.
const EVAL_BATCH: usize = 64;

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        let line = serde_json::to_string(it).expect("value serializes");
        writeln!(w, "{line}").map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ExamplePrediction>> {
    let f = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::json(path, e))?);
    }
    Ok(out)
}

pub fn detokenizer(vocab: Option<&Path>) -> Result<Box<dyn Detokenizer>> {
    Ok(match vocab {
        Some(p) => Box::new(Vocab::load(p)?),
        None => Box::new(SyntheticVocab),
    })
}

/// Inputs for scoring a trained head on a cache.
#[derive(Debug, Clone)]
pub struct EvalRequest<'a> {
    pub cache: &'a Path,
    pub examples: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub max_answer_len: usize,
    pub out: &'a Path,
}

/// Forward, decode and score; writes predictions, metrics and (for span
/// heads) the probability dump into `req.out`.
pub fn evaluate_model(
    spec: &HeadSpec,
    params: &ParamSet<f32>,
    req: &EvalRequest,
) -> Result<MetricsReport> {
    let reader = CacheReader::open(req.cache)?;
    super::train::check_schema(spec.task, reader.manifest().label_schema)?;
    fs::create_dir_all(req.out).map_err(|e| PipelineError::io(req.out, e))?;
    let report = match spec.task {
        Task::Span => {
            let examples_path = req.examples.ok_or_else(|| {
                PipelineError::Config("span evaluation needs the examples JSONL".into())
            })?;
            let examples = read_jsonl(examples_path)?;
            let detok = detokenizer(req.vocab)?;
            let wc = manifest_windowing(reader.manifest())?;
            let probs = span_probabilities(spec, params, &reader, EVAL_BATCH)?;
            write_prob_dump(&req.out.join(PROBS_CACHE), &probs, &reader)?;
            let preds =
                decode_examples(&probs, &examples, &wc, req.max_answer_len, detok.as_ref())?;
            write_lines(&req.out.join(PREDICTIONS_JSONL), &preds)?;
            evaluate(&preds, &golds_from_examples(&examples, detok.as_ref()))?
        }
        Task::Class => {
            let preds = class_predictions(spec, params, &reader, EVAL_BATCH)?;
            write_lines(&req.out.join(PREDICTIONS_JSONL), &preds)?;
            evaluate_class(&preds, &class_golds(&reader)?)?
        }
    };
    write_json(&req.out.join(METRICS_JSON), &report)?;
    Ok(report)
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub spec: HeadSpec,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub metrics: Option<MetricsReport>,
    pub param_count: u64,
    pub param_percent: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

fn append_record(out: &Path, rec: &RunRecord) -> Result<()> {
    let path = out.join(RUNS_JSONL);
    let mut line = serde_json::to_string(rec).expect("record serializes");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| PipelineError::io(&path, e))?;
    f.write_all(line.as_bytes())
        .map_err(|e| PipelineError::io(&path, e))
}

/// Trains, saves the model, evaluates on `eval_cache` when given and appends a run record.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    let cache = cfg.data.cache.as_deref().expect("validated");
    let reader = Arc::new(CacheReader::open(cache)?);
    let outcome = train(cfg, reader)?;
    save_model(&cfg.out, &outcome.spec, &outcome.params)?;
    let metrics = match &cfg.data.eval_cache {
        Some(eval_cache) => Some(evaluate_model(
            &outcome.spec,
            &outcome.params,
            &EvalRequest {
                cache: eval_cache,
                examples: cfg.data.eval_examples.as_deref(),
                vocab: cfg.data.vocab.as_deref(),
                max_answer_len: cfg.eval.max_answer_len,
                out: &cfg.out,
            },
        )?),
        None => None,
    };
    let count = outcome.spec.count_params();
    let rec = RunRecord {
        config: cfg.clone(),
        spec: outcome.spec,
        epoch_losses: outcome.epoch_losses,
        steps: outcome.steps,
        metrics,
        param_count: count.count,
        param_percent: count.percent_label(),
        seed: cfg.optimizer.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    append_record(&cfg.out, &rec)?;
    Ok(rec)
}

/// Scores a saved model directory on a cache.
pub fn cmd_eval(model_dir: &Path, req: &EvalRequest) -> Result<MetricsReport> {
    let (spec, params) = load_model(model_dir)?;
    evaluate_model(&spec, &params, req)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub em: f64,
    pub f1: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("fraction,em,f1\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.fraction, r.em, r.f1));
    }
    s
}

/// One train+eval run per fraction into `out/fraction-<f>`, plus `out/curve.csv`.
pub fn cmd_curve(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<CurveRow>> {
    if fractions.is_empty() {
        return Err(PipelineError::Config(
            "curve needs at least one fraction".into(),
        ));
    }
    if cfg.data.eval_cache.is_none() {
        return Err(PipelineError::Config("curve needs an eval cache".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(PipelineError::Config(format!(
                "fraction {f} outside (0, 1]"
            )));
        }
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut run = cfg.clone();
        run.data.fraction = f;
        run.out = cfg.out.join(format!("fraction-{f}"));
        let rec = cmd_train(&run)?;
        let m = rec.metrics.expect("eval cache set");
        rows.push(CurveRow {
            fraction: f,
            em: m.em,
            f1: m.f1,
        });
    }
    fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let path = cfg.out.join("curve.csv");
    fs::write(&path, curve_csv(&rows)).map_err(|e| PipelineError::io(&path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<MetricsReport>,
    pub ensemble: MetricsReport,
}

/// Ensembles two or more probability dumps over the same windows.
pub fn cmd_ensemble(
    dumps: &[PathBuf],
    examples: &Path,
    vocab: Option<&Path>,
    max_answer_len: usize,
    out: &Path,
) -> Result<EnsembleReport> {
    if dumps.len() < 2 {
        return Err(PipelineError::Config(format!(
            "ensemble needs >= 2 dumps, got {}",
            dumps.len()
        )));
    }
    let examples = read_jsonl(examples)?;
    let detok = detokenizer(vocab)?;
    let golds = golds_from_examples(&examples, detok.as_ref());
    let mut wc = None;
    let mut members = Vec::with_capacity(dumps.len());
    let mut member_reports = Vec::with_capacity(dumps.len());
    for d in dumps {
        let (m, recs) = read_prob_dump(d)?;
        let this = manifest_windowing(&m)?;
        if wc.is_some_and(|w| w != this) {
            return Err(PipelineError::Config(format!(
                "{} uses different windowing",
                d.display()
            )));
        }
        wc = Some(this);
        let preds = decode_examples(&recs, &examples, &this, max_answer_len, detok.as_ref())?;
        member_reports.push(evaluate(&preds, &golds)?);
        members.push(recs);
    }
    let wc = wc.expect("at least two dumps");
    let preds = ensemble_examples(&members, &examples, &wc, max_answer_len, detok.as_ref())?;
    let report = EnsembleReport {
        members: member_reports,
        ensemble: evaluate(&preds, &golds)?,
    };
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    write_lines(&out.join(PREDICTIONS_JSONL), &preds)?;
    write_json(&out.join("ensemble.json"), &report)?;
    Ok(report)
}

/// Writes `analysis.json` and `analysis.csv` into `out`.
pub fn cmd_analyze(
    preds: &Path,
    compare: Option<&Path>,
    examples: &Path,
    vocab: Option<&Path>,
    out: &Path,
) -> Result<AnalysisReport> {
    let examples = read_jsonl(examples)?;
    let detok = detokenizer(vocab)?;
    let golds = golds_from_examples(&examples, detok.as_ref());
    let mine = read_predictions(preds)?;
    let theirs = compare.map(read_predictions).transpose()?;
    let report = analyze(&mine, &golds, theirs.as_deref())?;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    write_json(&out.join("analysis.json"), &report)?;
    let csv = out.join("analysis.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| PipelineError::io(&csv, e))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SynthRequest<'a> {
    pub toy: &'a ToyConfig,
    pub n: usize,
    pub answerable_fraction: f64,
    pub sample_seed: u64,
    pub task: Task,
    pub out: &'a Path,
    pub name: &'a str,
}

/// Writes `out/<name>.bve` (+ manifest) and `out/<name>.jsonl`.
pub fn cmd_synth(req: &SynthRequest) -> Result<CacheManifest> {
    fs::create_dir_all(req.out).map_err(|e| PipelineError::io(req.out, e))?;
    let cache = req.out.join(format!("{}.bve", req.name));
    let ds = generate_synthetic_dataset(
        req.n,
        req.toy,
        req.answerable_fraction,
        req.sample_seed,
        req.task,
        &cache,
    )?;
    write_jsonl(&req.out.join(format!("{}.jsonl", req.name)), &ds.examples)?;
    Ok(ds.manifest)
}
