use proptest::prelude::*;

use otprune::baselines::{Metric, StrategySpec};
use otprune::bench::spearman;
use otprune::kernel::covariance;
use otprune::objectives::{kernel_logdet, wasserstein2_gaussian, ObjectiveSpec, SubsetEvaluator};
use otprune::oracle::exhaustive_eval;
use otprune::selector::{otprune_select, select_with_trace};
use otprune::tokenio::{
    decode_otp1, encode_otp1, normalize_unit_variance, parse_csv, synth_gaussian, to_csv, TokenMatrix,
    DEFAULT_EPSILON,
};

fn matrix(max_m: usize, max_d: usize) -> impl Strategy<Value = TokenMatrix> {
    (1..=max_m, 1..=max_d).prop_flat_map(|(m, d)| {
        prop::collection::vec(-1e3f64..1e3, m * d).prop_map(move |data| TokenMatrix::new(m, d, data).unwrap())
    })
}

fn gaussian(min_m: usize, max_m: usize, max_d: usize) -> impl Strategy<Value = TokenMatrix> {
    (min_m..=max_m, 1..=max_d, any::<u64>())
        .prop_map(|(m, d, seed)| normalize_unit_variance(&synth_gaussian(m, d, seed), DEFAULT_EPSILON).0)
}

fn column_mean_sq(v: &TokenMatrix, j: usize) -> f64 {
    v.iter_rows().map(|r| r[j] * r[j]).sum::<f64>() / v.rows() as f64
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 256,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn normalization_is_idempotent(v in matrix(12, 6)) {
        let (once, _) = normalize_unit_variance(&v, DEFAULT_EPSILON);
        let (twice, _) = normalize_unit_variance(&once, DEFAULT_EPSILON);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        for j in 0..v.cols() {
            let s = column_mean_sq(&once, j);
            let rms = column_mean_sq(&v, j).sqrt();
            prop_assert!(s <= 1.0 + 1e-9);
            if rms > DEFAULT_EPSILON {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn normalized_trace_counts_columns(v in gaussian(2, 30, 8)) {
        let t = covariance(&v).trace();
        prop_assert!((t - v.cols() as f64).abs() <= 1e-9 * v.cols() as f64);
    }

    #[test]
    fn binary_round_trip_is_exact(v in matrix(10, 6)) {
        // The payload is f32, so start from f32-representable values.
        let narrowed: Vec<f64> = v.data().iter().map(|&x| x as f32 as f64).collect();
        let v = TokenMatrix::new(v.rows(), v.cols(), narrowed).unwrap();
        let back = decode_otp1(&encode_otp1(&v)).unwrap();
        prop_assert_eq!(back.rows(), v.rows());
        for (a, b) in v.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_round_trip(v in matrix(10, 6)) {
        let back = parse_csv(&to_csv(&v)).unwrap();
        prop_assert_eq!((back.rows(), back.cols()), (v.rows(), v.cols()));
        for (a, b) in v.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn wasserstein_is_symmetric(v in gaussian(2, 20, 6), split in 1usize..20) {
        let k = split.min(v.rows());
        let a = covariance(&v);
        let b = covariance(&v.select_rows(&(0..k).collect::<Vec<_>>()));
        let ab = wasserstein2_gaussian(&a, &b).unwrap();
        let ba = wasserstein2_gaussian(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn kernel_logdet_is_monotone_submodular(
        v in gaussian(3, 9, 5),
        mask_s in any::<u16>(),
        mask_extra in any::<u16>(),
        pick in any::<usize>(),
        scale in 0.0f64..3.0,
    ) {
        let m = v.rows();
        let gt = 1e-3 * 10f64.powf(scale) / m as f64;
        let i = pick % m;
        let s: Vec<usize> = (0..m).filter(|&j| j != i && mask_s >> j & 1 == 1).collect();
        let t: Vec<usize> = (0..m).filter(|&j| j != i && (mask_s | mask_extra) >> j & 1 == 1).collect();
        let f = |c: &[usize]| kernel_logdet(&v, c, gt).unwrap();
        let with = |c: &[usize]| {
            let mut x = c.to_vec();
            x.push(i);
            x.sort_unstable();
            x
        };
        let gain_s = f(&with(&s)) - f(&s);
        let gain_t = f(&with(&t)) - f(&t);
        prop_assert!(gain_s >= -1e-8);
        prop_assert!(gain_s >= gain_t - 1e-8);
    }

    #[test]
    fn greedy_gains_are_nonnegative(v in gaussian(1, 40, 8), k_frac in 0.0f64..1.0, gamma in 1e-3f64..1.0) {
        let k = 1 + ((v.rows() - 1) as f64 * k_frac) as usize;
        let (sel, trace) = select_with_trace(&v, k, gamma).unwrap();
        for (g, step) in sel.gains.iter().zip(&trace) {
            prop_assert!(*g >= -1e-8);
            prop_assert!(step.d_sq[step.chosen] >= 1.0 - 1e-6);
        }
        let direct = kernel_logdet(&v, &sel.sorted_indices(), sel.gamma_tilde.unwrap()).unwrap();
        prop_assert!((sel.objective - direct).abs() <= 1e-6);
    }

    #[test]
    fn selection_is_permutation_equivariant(v in gaussian(2, 25, 6), k_frac in 0.0f64..1.0, shift in any::<u64>()) {
        let m = v.rows();
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let (sel, trace) = select_with_trace(&v, k, 0.01).unwrap();
        // Require a clear winner at every step; ties are broken by index.
        for step in &trace {
            let mut scores: Vec<f64> = step.d_sq.iter().copied().filter(|x| x.is_finite()).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(scores.len() < 2 || scores[0] - scores[1] > 1e-9 * scores[0]);
        }
        // perm[new] = old
        let mut perm: Vec<usize> = (0..m).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(shift));
        let pv = v.permute_rows(&perm);
        let psel = otprune_select(&pv, k, 0.01).unwrap();
        let mut mapped: Vec<usize> = psel.indices.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, sel.sorted_indices());

        let eval = SubsetEvaluator::new(&v, ObjectiveSpec::trace_f()).unwrap();
        let peval = SubsetEvaluator::new(&pv, ObjectiveSpec::trace_f()).unwrap();
        let value = eval.eval(&sel.sorted_indices());
        let pvalue = peval.eval(&psel.sorted_indices());
        prop_assert!((value - pvalue).abs() <= 1e-9 * (1.0 + value.abs()));
    }

    #[test]
    fn every_strategy_returns_k_distinct(v in gaussian(1, 30, 5), k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((v.rows() - 1) as f64 * k_frac) as usize;
        let strategies = [
            StrategySpec::Otprune { gamma: None },
            StrategySpec::Divprune { metric: Metric::Euclidean },
            StrategySpec::Divprune { metric: Metric::Cosine },
            StrategySpec::Dpp,
            StrategySpec::Random { seed: Some(seed) },
            StrategySpec::FirstK,
            StrategySpec::LastK,
            StrategySpec::UniformIndex,
        ];
        for s in strategies {
            let mut idx = s.select(&v, k, None, None).unwrap().sorted_indices();
            prop_assert_eq!(idx.len(), k);
            idx.dedup();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.iter().all(|&i| i < v.rows()));
        }
    }

    #[test]
    fn greedy_within_bound_of_exhaustive(v in gaussian(2, 9, 5), k_frac in 0.0f64..1.0, gamma in 1e-3f64..1.0) {
        let m = v.rows();
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let sel = otprune_select(&v, k, gamma).unwrap();
        let report = exhaustive_eval(&v, k, ObjectiveSpec::kernel_logdet(gamma), &sel.sorted_indices(), 1 << 20).unwrap();
        prop_assert!(report.best_value >= sel.objective - 1e-9);
        prop_assert!(sel.objective >= (1.0 - (-1f64).exp()) * report.best_value - 1e-12);
        prop_assert!((0.0..=1.0).contains(&report.win_rate));
    }

    #[test]
    fn spearman_bounded_and_symmetric(pairs in prop::collection::vec((-5i32..5, -5i32..5), 2..20)) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let r = spearman(&xs, &ys).unwrap();
        let back = spearman(&ys, &xs).unwrap();
        if r.is_finite() {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - back).abs() <= 1e-12);
        } else {
            prop_assert!(back.is_nan());
        }
    }
}
