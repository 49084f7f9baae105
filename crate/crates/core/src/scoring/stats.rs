use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `0.5 * |r1 - w|^2 + 0.5 * |r2 - w|^2` over all elements. Pathways with a
/// single reconstruction pass the same tensor as `r1` and `r2`.
pub fn anomaly_score(r1: &Tensor, r2: &Tensor, w: &Tensor) -> Result<f64> {
    if r1.shape() != w.shape() {
        return Err(Error::dim("anomaly_score", &r1.shape(), &w.shape()));
    }
    if r2.shape() != w.shape() {
        return Err(Error::dim("anomaly_score", &r2.shape(), &w.shape()));
    }
    let mut a = 0.0;
    let mut b = 0.0;
    for ((x, y), t) in r1.data().iter().zip(r2.data()).zip(w.data()) {
        a += (x - t) * (x - t);
        b += (y - t) * (y - t);
    }
    Ok(0.5 * a + 0.5 * b)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_absolute_deviation(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

/// Base POT threshold raised by `alpha` times the median absolute deviation
/// of the recent scores.
pub fn mpot_threshold(base_pot: f64, recent_scores: &[f64], alpha: f64) -> Result<f64> {
    if recent_scores.is_empty() {
        return Err(Error::Contract("mPOT needs at least one recent score".into()));
    }
    if alpha < 0.0 {
        return Err(Error::Contract(format!("alpha must be nonnegative, got {alpha}")));
    }
    Ok(base_pot + alpha * median_absolute_deviation(recent_scores))
}

/// Trailing mean over the last `n` scores (fewer at the start).
pub fn mat_threshold(scores: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Contract("moving-average window must be at least 1".into()));
    }
    Ok((0..scores.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(n);
            let w = &scores[lo..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}

/// Trailing mean and population standard deviation over windows of `w`.
pub fn rolling_stats(series: &[f64], w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if w == 0 {
        return Err(Error::Contract("rolling window must be at least 1".into()));
    }
    let mut mu = Vec::with_capacity(series.len());
    let mut sigma = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let lo = (t + 1).saturating_sub(w);
        let win = &series[lo..=t];
        let n = win.len() as f64;
        let mean = win.iter().sum::<f64>() / n;
        let var = win.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        mu.push(mean);
        sigma.push(var.sqrt());
    }
    Ok((mu, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let w = Tensor::zeros(1, 2);
        assert_eq!(anomaly_score(&w, &w, &w).unwrap(), 0.0);
        assert_eq!(anomaly_score(&Tensor::ones(1, 2), &w, &w).unwrap(), 1.0);
        assert!(anomaly_score(&Tensor::ones(2, 2), &w, &w).is_err());
    }

    #[test]
    fn mpot_examples() {
        assert_eq!(mpot_threshold(2.0, &[1.0, 5.0, 9.0], 0.0).unwrap(), 2.0);
        assert_eq!(mpot_threshold(2.0, &[4.0; 6], 3.0).unwrap(), 2.0);
        assert_eq!(mpot_threshold(2.0, &[1.0, 2.0, 3.0, 4.0, 100.0], 1.0).unwrap(), 3.0);
        assert!(mpot_threshold(2.0, &[], 1.0).is_err());
    }

    #[test]
    fn mat_examples() {
        assert_eq!(mat_threshold(&[2.5; 7], 3).unwrap(), vec![2.5; 7]);
        assert_eq!(mat_threshold(&[1.0, 2.0, 3.0, 4.0], 3).unwrap(), vec![1.0, 1.5, 2.0, 3.0]);
        assert!(mat_threshold(&[1.0], 0).is_err());
    }

    #[test]
    fn rolling_examples() {
        let (_, s) = rolling_stats(&[3.0; 5], 2).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        let (m, s) = rolling_stats(&[0.0, 2.0], 2).unwrap();
        assert_eq!((m[1], s[1]), (1.0, 1.0));
    }
}
