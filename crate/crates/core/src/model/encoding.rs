use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::genome::PosEncoding;
use crate::tensor::Tensor;

/// Fixed `K x d` position table added to the embedded window.
///
/// Sinusoidal: `sin(t / 10000^(2i/d))` in even columns and the matching
/// cosine in odd columns. Fourier: sine and cosine of `t * f_j` with
/// frequencies drawn log-uniformly from `[1/K, 1]` by a generator seeded
/// with `seed`.
pub fn positional_encoding(kind: PosEncoding, k: usize, d: usize, seed: u64) -> Tensor {
    let pairs = d.div_ceil(2);
    let freqs: Vec<f64> = match kind {
        PosEncoding::Sinusoidal => (0..pairs)
            .map(|i| 1.0 / 10000f64.powf((2 * i) as f64 / d as f64))
            .collect(),
        PosEncoding::Fourier => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lo = (1.0 / k.max(1) as f64).ln();
            (0..pairs)
                .map(|_| {
                    if lo < 0.0 {
                        rng.random_range(lo..=0.0).exp()
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    };
    let mut pe = Tensor::zeros(k, d);
    for t in 0..k {
        for c in 0..d {
            let angle = t as f64 * freqs[c / 2];
            pe.set(t, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
