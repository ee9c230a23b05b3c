//! Element-wise-max ensembling of per-position probability vectors.

use crate::datapipe::{Detokenizer, Window};
use crate::eval::{
    aggregate_windows, decode_probs, EvalError, ExamplePrediction, Result, WindowPrediction,
};

/// Tolerance on the sum of a member probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

fn check_probability(v: &[f32], member: usize) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(EvalError::Contract(format!(
            "member {member} has invalid probability {x}"
        )));
    }
    let sum: f64 = v.iter().map(|&x| x as f64).sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(EvalError::Contract(format!(
            "member {member} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

fn check_members(members: &[&[f32]]) -> Result<usize> {
    if members.len() < 2 {
        return Err(EvalError::Contract(format!(
            "need at least 2 members, got {}",
            members.len()
        )));
    }
    let t = members[0].len();
    for (k, m) in members.iter().enumerate() {
        if m.len() != t {
            return Err(EvalError::Contract(format!(
                "member {k} has length {}, expected {t}",
                m.len()
            )));
        }
        check_probability(m, k)?;
    }
    Ok(t)
}

/// Position-wise maximum over the members; not renormalized.
pub fn ensemble_max(members: &[&[f32]]) -> Result<Vec<f32>> {
    let t = check_members(members)?;
    Ok((0..t)
        .map(|i| {
            members
                .iter()
                .map(|m| m[i])
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

/// Index of the largest position-wise maximum; the smallest index wins ties.
pub fn ensemble_argmax(members: &[&[f32]]) -> Result<usize> {
    let combined = ensemble_max(members)?;
    let mut best = 0;
    for (i, &v) in combined.iter().enumerate().skip(1) {
        if v > combined[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Combines aligned window predictions from several models position by
/// position, then decodes and aggregates the combined vectors.
pub fn ensemble_decode(
    windows: &[Window],
    members: &[&[WindowPrediction]],
    max_answer_len: usize,
    detok: &dyn Detokenizer,
) -> Result<ExamplePrediction> {
    if members.len() < 2 {
        return Err(EvalError::Contract(format!(
            "need at least 2 members, got {}",
            members.len()
        )));
    }
    if let Some((k, m)) = members
        .iter()
        .enumerate()
        .find(|(_, m)| m.len() != windows.len())
    {
        return Err(EvalError::Alignment(format!(
            "member {k} has {} windows, expected {}",
            m.len(),
            windows.len()
        )));
    }
    let mut combined = Vec::with_capacity(windows.len());
    for (wi, w) in windows.iter().enumerate() {
        let starts: Vec<&[f32]> = members
            .iter()
            .map(|m| m[wi].start_probs.as_slice())
            .collect();
        let ends: Vec<&[f32]> = members.iter().map(|m| m[wi].end_probs.as_slice()).collect();
        if starts
            .iter()
            .chain(&ends)
            .any(|v| v.len() != starts[0].len())
        {
            return Err(EvalError::Alignment(format!(
                "window {} of {} has differing lengths across members",
                w.window_index, w.example_id
            )));
        }
        let start = ensemble_max(&starts)?;
        let end = ensemble_max(&ends)?;
        combined.push(decode_probs(start, end, w.context_range(), max_answer_len)?);
    }
    aggregate_windows(windows, &combined, detok)
}
