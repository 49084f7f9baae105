//! Inference: reconstructions of stacked windows and per-timestamp anomaly
//! scores.

use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{AnomalyModel, Context, PhaseType};
use crate::tensor::Tensor;
use crate::training::ConvergenceMonitor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Windows per forward pass.
    pub batch_windows: usize,
    /// Refinement passes of the iterative pathway.
    pub max_iters: usize,
    /// Loss change below which iterative refinement stops.
    pub convergence_eps: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            batch_windows: 256,
            max_iters: 5,
            convergence_eps: 1e-5,
        }
    }
}

/// The two reconstructions entering the anomaly score for stacked windows
/// `x` (`n*K x m`). The iterative pathway refines until the batch loss
/// settles and keeps, per window, its lowest-error iteration.
pub fn reconstruct(model: &AnomalyModel, x: &Tensor, cfg: &InferenceConfig) -> Result<(Tensor, Tensor)> {
    let windows = model.windows_in(x.shape())?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    if model.genome().phase_type != PhaseType::Iterative {
        let out = model.forward(&mut g, &p, xv, None, &mut Context::eval())?;
        let (a, b) = out.score_pair();
        return Ok((g.value(a).clone(), g.value(b).clone()));
    }
    let k = model.window_size();
    let rows_per = k * x.cols();
    let mut monitor = ConvergenceMonitor::new(cfg.convergence_eps, cfg.max_iters)?;
    let mut best = Tensor::zeros(x.rows(), x.cols());
    let mut best_err = vec![f64::INFINITY; windows];
    let mut cond = None;
    loop {
        let out = model.forward(&mut g, &p, xv, cond, &mut Context::eval())?;
        let o = out.score_pair().0;
        let (ov, xvv) = (g.value(o), g.value(xv));
        let mut total = 0.0;
        for w in 0..windows {
            let span = w * rows_per..(w + 1) * rows_per;
            let err: f64 = ov.data()[span.clone()]
                .iter()
                .zip(&xvv.data()[span.clone()])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / rows_per as f64;
            total += err;
            if err < best_err[w] {
                best_err[w] = err;
                best.data_mut()[span.clone()].copy_from_slice(&ov.data()[span]);
            }
        }
        if monitor.record(total / windows as f64) {
            break;
        }
        cond = Some(AnomalyModel::focus(&mut g, o, xv)?);
    }
    Ok((best.clone(), best))
}

/// Per-dimension anomaly scores `1/2 (R1 - W)^2 + 1/2 (R2 - W)^2` at the
/// last row of every window, one row per timestamp (`T x m`).
pub fn dimension_scores(model: &AnomalyModel, windows: &WindowSet, cfg: &InferenceConfig) -> Result<Tensor> {
    if windows.feature_count() != model.feature_count() || windows.window_size() != model.window_size() {
        return Err(Error::dim(
            "dimension_scores",
            &[windows.window_size(), windows.feature_count()],
            &[model.window_size(), model.feature_count()],
        ));
    }
    if cfg.batch_windows == 0 {
        return Err(Error::Contract("batch_windows must be at least 1".into()));
    }
    let (k, m, t) = (model.window_size(), model.feature_count(), windows.len());
    let mut out = Tensor::zeros(t, m);
    let all: Vec<usize> = (0..t).collect();
    for chunk in all.chunks(cfg.batch_windows) {
        let x = windows.stack(chunk);
        let (r1, r2) = reconstruct(model, &x, cfg)?;
        for (i, &ts) in chunk.iter().enumerate() {
            let last = i * k + k - 1;
            for c in 0..m {
                let w = x.get(last, c);
                let (a, b) = (r1.get(last, c) - w, r2.get(last, c) - w);
                out.set(ts, c, 0.5 * a * a + 0.5 * b * b);
            }
        }
    }
    Ok(out)
}
