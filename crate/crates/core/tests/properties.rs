use std::collections::BTreeMap;

use attnreg_core::metrics::{composite_score, dominance_index, BoundingBox, Detection, FixtureBackend, GrayImage, HeadMaxStats};
use attnreg_core::scaler::{gamma_for, scale_dominant, ScalerParams};
use attnreg_core::*;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn block_from(values: Vec<f64>, h: usize, w: usize, n: usize) -> LogitBlock {
    LogitBlock::new(Array3::from_shape_vec((h, w * w, n), values).unwrap(), 4, LayerId(0), w).unwrap()
}

fn logits(h: usize, w: usize, n: usize, scale: f64) -> impl Strategy<Value = LogitBlock> {
    prop::collection::vec(-scale..scale, h * w * w * n).prop_map(move |v| block_from(v, h, w, n))
}

fn row_sums_ok(a: &AttentionMap, tol: f64) -> bool {
    a.values.iter().all(|&v| v >= 0.0) && a.check_row_stochastic(tol).is_ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(block in logits(2, 4, 5, 60.0)) {
        prop_assert!(row_sums_ok(&compute_attention(&block).unwrap(), 1e-9));
    }

    #[test]
    fn softmax_is_shift_invariant(block in logits(1, 2, 4, 10.0), shift in -50.0f64..50.0, row in 0usize..4) {
        let base = compute_attention(&block).unwrap();
        let mut moved = block.clone();
        moved.logits.slice_mut(ndarray::s![0, row, ..]).mapv_inplace(|v| v + shift);
        let out = compute_attention(&moved).unwrap();
        for (a, b) in base.values.iter().zip(out.values.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_is_monotone(block in logits(1, 2, 4, 5.0), col in 0usize..4, bump in 0.01f64..5.0) {
        let base = compute_attention(&block).unwrap();
        let mut up = block.clone();
        up.logits[[0, 0, col]] += bump;
        let out = compute_attention(&up).unwrap();
        prop_assert!(out.values[[0, 0, col]] > base.values[[0, 0, col]]);
        for k in (0..4).filter(|&k| k != col) {
            prop_assert!(out.values[[0, 0, k]] <= base.values[[0, 0, k]]);
        }
    }

    #[test]
    fn edits_keep_rows_stochastic(block in logits(2, 8, 4, 4.0), theta in prop::collection::vec(-20.0f64..20.0, 16)) {
        let basis = GaussianBasis::new(8, 1).unwrap();
        let mut p = EditParams::zeros(&basis, block.layer, 1);
        p.theta = Array2::from_shape_vec((4, 4), theta).unwrap();
        let a = apply_params(&block, &[p], &basis).unwrap();
        prop_assert!(row_sums_ok(&a, 1e-9));
    }

    #[test]
    fn perturbation_is_linear(t1 in prop::collection::vec(-3.0f64..3.0, 4), t2 in prop::collection::vec(-3.0f64..3.0, 4)) {
        let basis = GaussianBasis::new(8, 2).unwrap();
        let mk = |t: &[f64]| {
            let mut p = EditParams::zeros(&basis, LayerId(0), 0);
            p.theta = Array2::from_shape_vec((2, 2), t.to_vec()).unwrap();
            p
        };
        let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
        let lhs = build_perturbation(&mk(&sum), &basis).unwrap();
        let rhs = build_perturbation(&mk(&t1), &basis).unwrap() + build_perturbation(&mk(&t2), &basis).unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_edit_is_identity(block in logits(2, 4, 3, 8.0)) {
        let basis = GaussianBasis::new(4, 1).unwrap();
        let p = EditParams::zeros(&basis, block.layer, 2);
        prop_assert_eq!(apply_params(&block, &[p], &basis).unwrap().values, compute_attention(&block).unwrap().values);
    }

    #[test]
    fn error_is_non_negative(block in logits(2, 4, 4, 6.0), mu in 0.05f64..0.95) {
        let a = compute_attention(&block).unwrap();
        let cfg = RegulationConfig { targets: vec![0, 2], mu, ..Default::default() };
        prop_assert!(error_e(a.head_mean().view(), &cfg).unwrap().value >= 0.0);
    }

    #[test]
    fn loss_at_zero_deviation(block in logits(1, 4, 3, 6.0), beta in 0.0f64..2.0) {
        let a = compute_attention(&block).unwrap();
        let cfg = RegulationConfig { targets: vec![1], beta, ..Default::default() };
        let e = error_e(a.head_mean().view(), &cfg).unwrap().value;
        let l = total_loss(&a, &a, &cfg).unwrap();
        prop_assert!((l - (e + beta * 1e-6)).abs() <= 1e-12);
    }

    #[test]
    fn schedule_blend_is_bounded(
        orig in logits(1, 4, 3, 4.0),
        ema in logits(1, 4, 3, 4.0),
        lambda in 0.5f64..1.0,
        t in 0usize..30,
    ) {
        let a = compute_attention(&orig).unwrap();
        let e = compute_attention(&ema).unwrap();
        let frob = |x: &AttentionMap| (&x.values - &a.values).mapv(|v| v * v).sum().sqrt();
        let out = apply_schedule(a.clone(), Some(&e), lambda, t, 25).unwrap();
        prop_assert!(row_sums_ok(&out, 1e-9));
        let next = apply_schedule(a.clone(), Some(&e), lambda, t + 1, 25).unwrap();
        prop_assert!(frob(&next) <= frob(&out) + 1e-15);
        if t < 25 {
            prop_assert!(frob(&out) <= lambda.powi(t as i32) * frob(&e) + 1e-12);
        } else {
            prop_assert_eq!(&out.values, &a.values);
        }
    }

    #[test]
    fn scaled_max_equals_leave_one_out_mean(maxima in prop::collection::vec(0.01f64..1.0, 2..8), w in 1usize..5) {
        let params = ScalerParams::from_maxima(maxima.clone(), 1.1, 0.5, 0.0, 0.0).unwrap();
        let d = params.dominant_index;
        let grid = Array2::from_shape_fn((w, w), |(i, j)| maxima[d] * (1.0 - 0.5 * ((i * w + j) as f64 / (w * w) as f64)));
        let map = TokenMap2D { grid, token: d };
        let gamma = gamma_for(maxima[d], params.i_avg).unwrap();
        let scaled = scale_dominant(&map, gamma).unwrap();
        prop_assert!((scaled.max() - params.i_avg).abs() <= 1e-12);
        let argmax = |g: &Array2<f64>| g.iter().enumerate().fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
        if gamma < 1.0 {
            prop_assert_eq!(argmax(&scaled.grid), argmax(&map.grid));
        }
    }

    #[test]
    fn dominance_index_at_least_one(vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 2..6)) {
        let stats = HeadMaxStats { layer: LayerId(0), step: 0, per_token: vals.clone() };
        let targets: Vec<usize> = (0..vals.len()).collect();
        let idx = dominance_index(&stats, &targets).unwrap();
        prop_assert!(idx >= 1.0);
        let means: Vec<f64> = vals.iter().map(|h| (h[0] + h[1]) / 2.0).collect();
        let all_equal = means.iter().all(|&m| m == means[0]);
        if all_equal {
            prop_assert_eq!(idx, 1.0);
        } else {
            prop_assert!(idx > 1.0);
        }
    }

    #[test]
    fn composite_is_min_composition(sims in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        let bbox = BoundingBox { x0: 0, y0: 0, x1: 1, y1: 1 };
        let labels: Vec<String> = (0..sims.len()).map(|k| format!("obj{k}")).collect();
        let detections: BTreeMap<String, Vec<Detection>> = labels
            .iter()
            .zip(&sims)
            .map(|(l, &s)| (l.clone(), vec![Detection { bbox, similarity: s }]))
            .collect();
        let backend = FixtureBackend { detections, failing: vec![] };
        let img = GrayImage { width: 1, height: 1, pixels: vec![0] };
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let mut prev = f64::INFINITY;
        for k in 1..=refs.len() {
            let score = composite_score(&img, &refs[..k], &backend).unwrap();
            prop_assert!(score <= prev);
            prev = score;
        }
        prop_assert_eq!(prev, sims.iter().copied().fold(f64::INFINITY, f64::min));
    }
}
