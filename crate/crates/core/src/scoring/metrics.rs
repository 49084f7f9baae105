use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub point_adjust: bool,
}

/// Confusion counts and F1 of binary decisions against labels. With
/// `point_adjust`, one hit inside a contiguous labeled segment credits the
/// whole segment.
pub fn evaluate(decisions: &[u8], labels: &[u8], point_adjust: bool) -> Result<EvalReport> {
    if decisions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} decisions vs {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if decisions.iter().chain(labels).any(|&v| v > 1) {
        return Err(Error::Contract("decisions and labels must be 0 or 1".into()));
    }
    let adjusted;
    let decisions = if point_adjust {
        adjusted = adjust_points(decisions, labels);
        &adjusted[..]
    } else {
        decisions
    };
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        point_adjust,
    })
}

fn adjust_points(decisions: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = decisions.to_vec();
    let mut t = 0;
    while t < labels.len() {
        if labels[t] == 0 {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && labels[t] == 1 {
            t += 1;
        }
        if decisions[start..t].contains(&1) {
            out[start..t].fill(1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EacsWeights {
    pub accuracy: f64,
    pub time: f64,
    pub params: f64,
}

impl Default for EacsWeights {
    fn default() -> Self {
        EacsWeights {
            accuracy: 0.4,
            time: 0.4,
            params: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EacsInput {
    pub f1: f64,
    pub training_time_seconds: f64,
    pub parameter_count: f64,
    pub max_f1: f64,
    pub max_training_time_seconds: f64,
    pub max_parameter_count: f64,
}

/// Efficiency-accuracy-complexity score: F1 relative to the cohort best,
/// plus inverted relative training time and parameter count.
pub fn eacs(input: &EacsInput, weights: &EacsWeights) -> Result<f64> {
    let maxima = [
        input.max_f1,
        input.max_training_time_seconds,
        input.max_parameter_count,
    ];
    if maxima.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::Contract(format!("EACS cohort maxima must be positive, got {maxima:?}")));
    }
    let own = [input.f1, input.training_time_seconds, input.parameter_count];
    if own.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("EACS inputs must be nonnegative, got {own:?}")));
    }
    Ok(weights.accuracy * (input.f1 / input.max_f1)
        + weights.time * (1.0 - input.training_time_seconds / input.max_training_time_seconds)
        + weights.params * (1.0 - input.parameter_count / input.max_parameter_count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EacsRow {
    pub name: String,
    pub f1: f64,
    pub training_time_seconds: f64,
    pub parameter_count: f64,
}

/// EACS for each row with cohort maxima taken from the rows themselves.
pub fn eacs_cohort(rows: &[EacsRow], weights: &EacsWeights) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Contract("EACS needs a nonempty cohort".into()));
    }
    let max = |f: fn(&EacsRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (mf, mt, mp) = (
        max(|r| r.f1),
        max(|r| r.training_time_seconds),
        max(|r| r.parameter_count),
    );
    rows.iter()
        .map(|r| {
            eacs(
                &EacsInput {
                    f1: r.f1,
                    training_time_seconds: r.training_time_seconds,
                    parameter_count: r.parameter_count,
                    max_f1: mf,
                    max_training_time_seconds: mt,
                    max_parameter_count: mp,
                },
                weights,
            )
        })
        .collect()
}
