use m3esr_core::gradcheck::{check_op, check_toy_model, OPS};
use m3esr_core::model::Routing;
use m3esr_core::numerics::{softmax_rows, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100 * OPS.len() as u32))]

    #[test]
    fn op_gradients_match_central_differences(op in 0..OPS.len(), seed in any::<u64>()) {
        let err = check_op(OPS[op], seed).unwrap();
        prop_assert!(err < 1e-6, "{} seed {}: {}", OPS[op], seed, err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one_and_commute_with_permutations(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        tau in 0.05f64..20.0,
        rot in 0usize..12,
    ) {
        let k = row.len();
        let out = softmax_rows(&Tensor::new(vec![1, k], row.clone()).unwrap(), tau).unwrap();
        prop_assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.data().iter().all(|&v| v >= 0.0));
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let shuffled: Vec<f64> = perm.iter().map(|&j| row[j]).collect();
        let out2 = softmax_rows(&Tensor::new(vec![1, k], shuffled).unwrap(), tau).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            // the normalizer is summed in a different order
            prop_assert!((out2.data()[i] - out.data()[j]).abs() <= 1e-15);
        }
    }

    #[test]
    fn raising_temperature_lowers_the_peak(
        row in prop::collection::vec(-3.0f64..3.0, 2..8),
        tau in 0.1f64..5.0,
        factor in 1.01f64..3.0,
    ) {
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
        let t = Tensor::new(vec![1, row.len()], row).unwrap();
        let peak = |tau: f64| softmax_rows(&t, tau).unwrap().data().iter().cloned().fold(0.0, f64::max);
        prop_assert!(peak(tau * factor) < peak(tau));
    }
}

#[test]
fn fused_model_gradients_over_seeds() {
    for seed in 0..100 {
        for routing in [Routing::Dynamic, Routing::Static] {
            let err = check_toy_model(routing, seed).unwrap();
            assert!(err < 1e-5, "{routing:?} seed {seed}: {err}");
        }
    }
}
