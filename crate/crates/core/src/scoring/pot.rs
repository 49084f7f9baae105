//! Peaks-over-threshold: a generalized Pareto tail fitted to the exceedances
//! above an empirical anchor quantile, extrapolated to a small risk level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many exceedances the tail is not fitted.
pub const MIN_EXCEEDANCES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotFit {
    pub threshold: f64,
    /// Initial threshold `u`, the empirical `q`-quantile.
    pub anchor: f64,
    /// Tail shape.
    pub gamma: f64,
    /// Tail scale.
    pub sigma: f64,
    pub exceedances: usize,
    /// True when too few exceedances forced the empirical quantile fallback.
    pub fallback: bool,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    sorted_quantile(&v, q)
}

fn sorted_quantile(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn pot_threshold(train_scores: &[f64], q: f64, coeff: f64) -> Result<PotFit> {
    if train_scores.is_empty() {
        return Err(Error::Contract("POT needs at least one training score".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Contract(format!("POT quantile {q} must lie in (0, 1)")));
    }
    if !(coeff > 0.0 && coeff < 1.0) {
        return Err(Error::Contract(format!("POT coefficient {coeff} must lie in (0, 1)")));
    }
    if let Some(bad) = train_scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite training score {bad}")));
    }
    let mut sorted = train_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let anchor = sorted_quantile(&sorted, q);
    let peaks: Vec<f64> = sorted.iter().filter(|&&s| s > anchor).map(|s| s - anchor).collect();
    let n = sorted.len() as f64;
    if peaks.len() < MIN_EXCEEDANCES {
        let threshold = sorted_quantile(&sorted, 1.0 - coeff).max(anchor);
        return Ok(PotFit {
            threshold,
            anchor,
            gamma: 0.0,
            sigma: 0.0,
            exceedances: peaks.len(),
            fallback: true,
        });
    }
    let (gamma, sigma) = grimshaw(&peaks);
    let ratio = coeff * n / peaks.len() as f64;
    let extrapolated = if gamma.abs() < 1e-12 {
        anchor - sigma * ratio.ln()
    } else {
        anchor + sigma / gamma * (ratio.powf(-gamma) - 1.0)
    };
    Ok(PotFit {
        // A risk level more frequent than the anchor's own would sit below it.
        threshold: extrapolated.max(anchor),
        anchor,
        gamma,
        sigma,
        exceedances: peaks.len(),
        fallback: false,
    })
}

fn log_likelihood(y: &[f64], gamma: f64, sigma: f64) -> f64 {
    let n = y.len() as f64;
    if sigma <= 0.0 || !sigma.is_finite() {
        return f64::NEG_INFINITY;
    }
    if gamma.abs() < 1e-12 {
        return -n * sigma.ln() - y.iter().sum::<f64>() / sigma;
    }
    let tau = gamma / sigma;
    let mut acc = 0.0;
    for &v in y {
        let z = 1.0 + tau * v;
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += z.ln();
    }
    -n * sigma.ln() - (1.0 + 1.0 / gamma) * acc
}

/// Maximum-likelihood generalized Pareto fit through Grimshaw's reduction to
/// a one-dimensional root search in `x = gamma / sigma`.
fn grimshaw(y: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-8;
    let n = y.len() as f64;
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymean = y.iter().sum::<f64>() / n;

    let uv = |x: f64| -> (f64, f64) {
        let mut u = 0.0;
        let mut v = 0.0;
        for &yi in y {
            let s = 1.0 + x * yi;
            u += 1.0 / s;
            v += s.ln();
        }
        (u / n, 1.0 + v / n)
    };
    let w = |x: f64| {
        let (u, v) = uv(x);
        u * v - 1.0
    };

    let mut candidates = vec![(0.0, ymean)];
    let mut push_root = |x: f64| {
        let (_, v) = uv(x);
        let gamma = v - 1.0;
        candidates.push((gamma, gamma / x));
    };

    // Roots of w for negative x lie in (-1/ymax, 0); positive roots are
    // bounded above by 2(mean - min)/min^2. Both sides are scanned on a
    // geometric grid in |x| so that roots near zero are resolved.
    let scale = 1.0 / ymax;
    let neg_hi = scale * (1.0 - EPS);
    let pos_hi = if ymin > 0.0 {
        (2.0 * (ymean - ymin) / (ymin * ymin)).max(scale)
    } else {
        1e6 * scale
    };
    for (sign, hi) in [(-1.0, neg_hi), (1.0, pos_hi)] {
        let lo = scale * 1e-6;
        if !(hi > lo) {
            continue;
        }
        for mag in bracketed_roots(&|t: f64| w(sign * t.exp()), lo.ln(), hi.ln(), 400) {
            push_root(sign * mag.exp());
        }
    }

    let (gamma, sigma, _) = candidates
        .into_iter()
        .filter(|(g, s)| g.is_finite() && s.is_finite() && *s > 0.0)
        .map(|(g, s)| (g, s, log_likelihood(y, g, s)))
        .fold((0.0, ymean, f64::NEG_INFINITY), |best, c| if c.2 > best.2 { c } else { best });
    (gamma, sigma)
}

/// Roots of `f` on `[lo, hi]` located by sign changes on a uniform grid and
/// refined by bisection.
fn bracketed_roots(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / points as f64;
    let mut roots = Vec::new();
    let mut xa = lo;
    let mut fa = f(xa);
    for i in 1..=points {
        let xb = if i == points { hi } else { lo + step * i as f64 };
        let fb = f(xb);
        if fa.is_finite() && fb.is_finite() {
            if fa == 0.0 {
                roots.push(xa);
            } else if fa.signum() != fb.signum() {
                let (mut a, mut b, mut fa_) = (xa, xb, fa);
                for _ in 0..100 {
                    let mid = 0.5 * (a + b);
                    let fm = f(mid);
                    if fm == 0.0 {
                        a = mid;
                        b = mid;
                        break;
                    }
                    if fm.signum() == fa_.signum() {
                        a = mid;
                        fa_ = fm;
                    } else {
                        b = mid;
                    }
                }
                roots.push(0.5 * (a + b));
            }
        }
        xa = xb;
        fa = fb;
    }
    roots
}
