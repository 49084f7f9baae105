use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transnas_core::dataset::{augment, make_windows, normalize, AugmentConfig, TimeSeriesDataset};
use transnas_core::model::{checkpoint, parameter_count_formula, AnomalyModel, Genome};
use transnas_core::nas::{crowding_distance, dominates, non_dominated_sort, Direction};
use transnas_core::scoring::{eacs, evaluate, pot_threshold, threshold_scores, EacsInput, EacsWeights, ThresholdMode, ThresholdSettings};
use transnas_core::Tensor;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::from_vec(r, c, d).unwrap())
    })
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((0u8..12).prop_map(f64::from), 2), 1..60)
}

const DIRS: [Direction; 2] = [Direction::Maximize, Direction::Minimize];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(train in matrix(2..40, 1..4)) {
        let eps = 1e-8;
        // columns with a tiny but nonzero spread amplify eps by 1/spread
        for c in 0..train.cols() {
            let col: Vec<f64> = (0..train.rows()).map(|r| train.get(r, c)).collect();
            let spread = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) - col.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assume!(spread == 0.0 || spread > 1.0);
        }
        let ds = TimeSeriesDataset::new(train.clone(), train.clone(), vec![0; train.rows()]).unwrap();
        let once = normalize(&ds, eps).unwrap();
        let twice = normalize(&once, eps).unwrap();
        for (a, b) in once.train.data().iter().zip(twice.train.data()) {
            prop_assert!((a - b).abs() < 10.0 * eps, "{a} vs {b}");
        }
    }

    #[test]
    fn last_window_row_is_the_timestamp(series in matrix(10..60, 1..4), k in 1usize..10) {
        let ds = TimeSeriesDataset::new(series.clone(), series.clone(), vec![0; series.rows()]).unwrap();
        let (train, _) = make_windows(&ds, k).unwrap();
        prop_assert_eq!(train.len(), series.rows());
        for t in 0..series.rows() {
            let window = train.get(t);
            prop_assert_eq!(window.row(k - 1), series.row(t));
        }
    }

    #[test]
    fn augmentation_keeps_shape(batch in matrix(30..31, 1..4), seed in any::<u64>(), warp: bool, mask: bool) {
        let cfg = AugmentConfig {
            noise_std: 0.01,
            time_warping: warp,
            time_masking: mask,
            ..AugmentConfig::disabled()
        };
        let out = augment(&batch, 10, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.shape(), batch.shape());
    }

    #[test]
    fn fronts_partition_and_layer(pts in points()) {
        let fronts = non_dominated_sort(&pts, &DIRS).unwrap();
        let mut seen: Vec<usize> = fronts.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pts.len()).collect::<Vec<_>>());
        for (k, f) in fronts.iter().enumerate() {
            for &a in f {
                for &b in f {
                    prop_assert!(!dominates(&pts[a], &pts[b], &DIRS));
                }
                if k > 0 {
                    prop_assert!(fronts[k - 1].iter().any(|&p| dominates(&pts[p], &pts[a], &DIRS)));
                }
            }
        }
    }

    #[test]
    fn crowding_is_invariant_to_positive_affine_maps(pts in points(), s0 in 0.1f64..10.0, s1 in 0.1f64..10.0, o0 in -5.0f64..5.0, o1 in -5.0f64..5.0) {
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![s0 * p[0] + o0, s1 * p[1] + o1]).collect();
        let (a, b) = (crowding_distance(&pts), crowding_distance(&moved));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.is_infinite() && y.is_infinite()) || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn eacs_moves_strictly_with_each_input(f1 in 0.0f64..0.9, t in 0.1f64..0.9, p in 0.1f64..0.9, d in 0.01f64..0.09) {
        let w = EacsWeights::default();
        let base = EacsInput {
            f1,
            training_time_seconds: t * 100.0,
            parameter_count: p * 1000.0,
            max_f1: 1.0,
            max_training_time_seconds: 100.0,
            max_parameter_count: 1000.0,
        };
        let e = eacs(&base, &w).unwrap();
        let better = EacsInput { f1: f1 + d, ..base };
        let faster = EacsInput { training_time_seconds: (t - d) * 100.0, ..base };
        let smaller = EacsInput { parameter_count: (p - d) * 1000.0, ..base };
        for input in [better, faster, smaller] {
            prop_assert!(eacs(&input, &w).unwrap() > e);
        }
    }

    #[test]
    fn f1_ignores_joint_permutation(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..80), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (d, l): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (d2, l2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
        prop_assert_eq!(evaluate(&d, &l, false).unwrap(), evaluate(&d2, &l2, false).unwrap());
    }

    #[test]
    fn pot_anchor_is_monotone_in_q(scores in prop::collection::vec(0.0f64..10.0, 20..200), q1 in 0.5f64..0.99, q2 in 0.5f64..0.99) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = pot_threshold(&scores, lo, 1e-3).unwrap();
        let b = pot_threshold(&scores, hi, 1e-3).unwrap();
        prop_assert!(b.anchor >= a.anchor);
        prop_assert!(a.threshold >= a.anchor && b.threshold >= b.anchor);
    }

    #[test]
    fn decisions_flip_only_where_scores_cross(train in matrix(50..80, 1..3), test in matrix(20..40, 1..3), idx in any::<prop::sample::Index>()) {
        prop_assume!(train.cols() == test.cols());
        let s = ThresholdSettings { mode: ThresholdMode::Pot, ..ThresholdSettings::default() };
        let before = threshold_scores(&train, &test, &s).unwrap();
        let t = idx.index(test.rows());
        let thr = before.pot[0].threshold;
        let target = if before.decisions[t] == 1 { thr - 1.0 } else { thr + 1.0 };
        let mut moved = test.clone();
        let shift = (target - before.scores[t]) / test.cols() as f64;
        for c in 0..test.cols() {
            moved.set(t, c, test.get(t, c) + shift);
        }
        let after = threshold_scores(&train, &moved, &s).unwrap();
        for r in 0..test.rows() {
            prop_assert_eq!(after.decisions[r] != before.decisions[r], r == t);
        }
    }

    #[test]
    fn sampled_genomes_round_trip_and_count(seed in any::<u64>(), m in 1usize..5) {
        let g = Genome::sample(&mut ChaCha8Rng::seed_from_u64(seed), m);
        g.validate_for(m).unwrap();
        prop_assert_eq!(&Genome::from_json(&g.to_json()).unwrap(), &g);
        let model = AnomalyModel::build(&g, m, seed).unwrap();
        prop_assert_eq!(model.parameter_count(), parameter_count_formula(&g, m));
        let back = checkpoint::decode(&checkpoint::encode(&model)).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), checkpoint::encode(&model));
    }
}
