//! Deterministic synthetic activations with a planted answer signal.
//!
//! Base activations are a pure hash of `(seed, token id, position, channel,
//! hidden index)`, so any record can be regenerated on its own. On channel
//! `plant_layer` a fixed start direction is added at the gold start token and
//! a second, orthogonal direction at the gold end token.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    window_example, CacheManifest, CacheWriter, DataError, Detokenizer, Label, LabelSchema,
    QAExample, RecordKey, Result, SyntheticVocab, Window, WindowConfig,
};
use crate::heads::{LayerStack, Task};

const HASH_KEY: u64 = 0x243f_6a88_85a3_08d3;
const PAD_TOKEN: u32 = 0;
const FIRST_WORD: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub tokens: usize,
    pub hidden: usize,
    pub channels: usize,
    pub seed: u64,
    pub plant_layer: usize,
    pub plant_strength: f32,
    pub noise_std: f32,
    /// Inclusive question length range in tokens.
    pub question_len: (usize, usize),
    /// Inclusive context length range in tokens.
    pub context_len: (usize, usize),
    /// Longest planted answer in tokens.
    pub max_answer_len: usize,
    pub vocab_size: u32,
    pub overlap: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            tokens: 48,
            hidden: 32,
            channels: 9,
            seed: 0,
            plant_layer: 6,
            plant_strength: 6.0,
            noise_std: 1.0,
            question_len: (3, 8),
            context_len: (10, 37),
            max_answer_len: 4,
            vocab_size: 2000,
            overlap: 8,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.tokens == 0 || self.hidden < 2 || self.channels < 2 {
            return bad(format!(
                "toy dims must be T >= 1, H >= 2, C >= 2 (got {}, {}, {})",
                self.tokens, self.hidden, self.channels
            ));
        }
        if self.plant_layer >= self.channels {
            return bad(format!(
                "plant_layer {} outside 0..{}",
                self.plant_layer, self.channels
            ));
        }
        if !(self.plant_strength > 0.0 && self.noise_std >= 0.0) {
            return bad("plant_strength must be > 0 and noise_std >= 0".into());
        }
        if self.question_len.0 > self.question_len.1
            || self.context_len.0 > self.context_len.1
            || self.context_len.0 == 0
            || self.max_answer_len == 0
            || self.vocab_size == 0
        {
            return bad("empty question/context/answer/vocab range".into());
        }
        self.window_config().capacity(self.question_len.1)?;
        Ok(())
    }

    /// Windowing that fills exactly `tokens` positions.
    pub fn window_config(&self) -> WindowConfig {
        WindowConfig::new(self.tokens, self.overlap)
    }

    /// Uniform pooling weight `1 / C`.
    pub fn uniform_weight(&self) -> f64 {
        1.0 / self.channels as f64
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(HASH_KEY, |h, &p| mix(h ^ p))
}

/// Standard normal draw from a 64-bit key (Box-Muller).
fn gaussian(key: u64) -> f64 {
    let a = mix(key);
    let b = mix(a ^ HASH_KEY);
    let u1 = ((a >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Orthonormal start and end directions of length `hidden`.
pub fn plant_directions(cfg: &ToyConfig) -> (Vec<f32>, Vec<f32>) {
    let draw = |tag: u64| -> Vec<f64> {
        (0..cfg.hidden as u64)
            .map(|h| gaussian(hash(&[cfg.seed, tag, h])))
            .collect()
    };
    let s = unit(draw(1));
    let raw = draw(2);
    let dot: f64 = s.iter().zip(&raw).map(|(a, b)| a * b).sum();
    let e = unit(raw.iter().zip(&s).map(|(r, a)| r - dot * a).collect());
    let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    (f(s), f(e))
}

fn base_value(cfg: &ToyConfig, token: u32, position: usize, channel: usize, h: usize) -> f32 {
    let key = hash(&[
        cfg.seed,
        token as u64,
        position as u64,
        channel as u64,
        h as u64,
    ]);
    (gaussian(key) * cfg.noise_std as f64) as f32
}

fn add_direction(data: &mut [f32], cfg: &ToyConfig, position: usize, dir: &[f32]) {
    let (h_n, c_n) = (cfg.hidden, cfg.channels);
    for (h, d) in dir.iter().enumerate() {
        data[(position * h_n + h) * c_n + cfg.plant_layer] += cfg.plant_strength * d;
    }
}

/// Activations `[T, H, C]` for one window; positions past the window hold padding.
pub fn encode_window(window: &Window, cfg: &ToyConfig) -> Result<LayerStack> {
    let (t_n, h_n, c_n) = (cfg.tokens, cfg.hidden, cfg.channels);
    if window.token_ids.len() > t_n {
        return Err(DataError::Config(format!(
            "window of {} tokens exceeds T = {t_n}",
            window.token_ids.len()
        )));
    }
    let mut data = Vec::with_capacity(t_n * h_n * c_n);
    for t in 0..t_n {
        let token = window.token_ids.get(t).copied().unwrap_or(PAD_TOKEN);
        for h in 0..h_n {
            for c in 0..c_n {
                data.push(base_value(cfg, token, t, c, h));
            }
        }
    }
    if !window.is_no_answer() {
        let (ds, de) = plant_directions(cfg);
        add_direction(&mut data, cfg, window.start_label, &ds);
        add_direction(&mut data, cfg, window.end_label, &de);
    }
    Ok(LayerStack::from_data(t_n, h_n, c_n, data)?)
}

/// Activations for an example that fits in a single window.
pub fn generate_activations(ex: &QAExample, cfg: &ToyConfig) -> Result<LayerStack> {
    let windows = window_example(ex, &cfg.window_config())?;
    match windows.as_slice() {
        [w] => encode_window(w, cfg),
        ws => Err(DataError::Config(format!(
            "example {} needs {} windows; use encode_window per window",
            ex.id,
            ws.len()
        ))),
    }
}

/// Sequence-level stack `[1, H, C]` for the classification variant; the start
/// direction is planted when the example is answerable.
pub fn encode_class(ex: &QAExample, cfg: &ToyConfig) -> Result<LayerStack> {
    let ex_key = ex
        .question_tokens
        .iter()
        .chain(&ex.context_tokens)
        .fold(HASH_KEY, |h, &t| mix(h ^ t as u64));
    let (h_n, c_n) = (cfg.hidden, cfg.channels);
    let mut data = Vec::with_capacity(h_n * c_n);
    for h in 0..h_n {
        for c in 0..c_n {
            let key = hash(&[cfg.seed, ex_key, c as u64, h as u64]);
            data.push((gaussian(key) * cfg.noise_std as f64) as f32);
        }
    }
    if ex.has_answer() {
        let (ds, _) = plant_directions(cfg);
        add_direction(&mut data, cfg, 0, &ds);
    }
    Ok(LayerStack::from_data(1, h_n, c_n, data)?)
}

fn sample_example(cfg: &ToyConfig, sample_seed: u64, index: usize, answerable: bool) -> QAExample {
    let mut rng = ChaCha8Rng::seed_from_u64(hash(&[sample_seed, index as u64]));
    let word = |rng: &mut ChaCha8Rng| FIRST_WORD + rng.random_range(0..cfg.vocab_size);
    let q = rng.random_range(cfg.question_len.0..=cfg.question_len.1);
    let n = rng.random_range(cfg.context_len.0..=cfg.context_len.1);
    let question_tokens = (0..q).map(|_| word(&mut rng)).collect();
    let context_tokens: Vec<u32> = (0..n).map(|_| word(&mut rng)).collect();
    let (answers, gold_texts) = if answerable {
        let len = rng.random_range(1..=cfg.max_answer_len.min(n));
        let s = rng.random_range(0..=n - len);
        let e = s + len - 1;
        (
            vec![(s, e)],
            vec![SyntheticVocab.render(&context_tokens[s..=e])],
        )
    } else {
        (Vec::new(), Vec::new())
    };
    QAExample {
        id: format!("toy-{sample_seed}-{index:06}"),
        question_tokens,
        context_tokens,
        answers,
        gold_texts,
    }
}

/// `n` examples of which exactly `round(fraction * n)` are answerable.
pub fn generate_examples(
    n: usize,
    cfg: &ToyConfig,
    fraction: f64,
    sample_seed: u64,
) -> Result<Vec<QAExample>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::Config(format!(
            "answerable fraction {fraction} outside [0, 1]"
        )));
    }
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(sample_seed));
    let mut answerable = vec![false; n];
    for &i in &order[..k] {
        answerable[i] = true;
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| sample_example(cfg, sample_seed, i, answerable[i]))
        .collect())
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub examples: Vec<QAExample>,
    pub manifest: CacheManifest,
}

const CHUNK: usize = 256;

/// Windows every example, encodes each window (or each example, for the
/// classification task) and streams the records to a cache at `path`.
pub fn write_examples_cache(
    examples: &[QAExample],
    cfg: &ToyConfig,
    task: Task,
    path: &Path,
    split: &str,
) -> Result<CacheManifest> {
    cfg.validate()?;
    let wc = cfg.window_config();
    let template = match task {
        Task::Span => CacheManifest::new(cfg.tokens, cfg.hidden, cfg.channels, LabelSchema::Span)
            .with_windowing(wc.max_len, wc.overlap),
        Task::Class => CacheManifest::new(1, cfg.hidden, cfg.channels, LabelSchema::Class),
    }
    .with_split(split)
    .with_source("toy-encoder", Some(cfg.seed));
    let mut writer = CacheWriter::create(path, template)?;
    for chunk in examples.chunks(CHUNK) {
        let records: Vec<Vec<(LayerStack, Label, RecordKey)>> = chunk
            .par_iter()
            .map(|ex| -> Result<_> {
                ex.validate()?;
                match task {
                    Task::Span => window_example(ex, &wc)?
                        .iter()
                        .map(|w| {
                            let label = Label::Span {
                                start: w.start_label as u32,
                                end: w.end_label as u32,
                            };
                            Ok((
                                encode_window(w, cfg)?,
                                label,
                                RecordKey::new(&ex.id, w.window_index),
                            ))
                        })
                        .collect(),
                    Task::Class => Ok(vec![(
                        encode_class(ex, cfg)?,
                        Label::Class(ex.has_answer() as u32),
                        RecordKey::new(&ex.id, 0),
                    )]),
                }
            })
            .collect::<Result<_>>()?;
        for (stack, label, key) in records.into_iter().flatten() {
            writer.push(&stack, label, key)?;
        }
    }
    writer.finish()
}

/// Samples examples with `sample_seed` and writes their cache.
pub fn generate_synthetic_dataset(
    n: usize,
    cfg: &ToyConfig,
    fraction: f64,
    sample_seed: u64,
    task: Task,
    path: &Path,
) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(DataError::Config("synthetic dataset needs n >= 1".into()));
    }
    let examples = generate_examples(n, cfg, fraction, sample_seed)?;
    let manifest = write_examples_cache(
        &examples,
        cfg,
        task,
        path,
        &format!("synthetic-{sample_seed}"),
    )?;
    Ok(SyntheticDataset { examples, manifest })
}
