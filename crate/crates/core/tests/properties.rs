use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use valueflow::flow::{confidence_weight, jacobian_sensitivity, sample_distribution, QuantileDistribution};
use valueflow::gae::{w1_sorted, FunctionalMdp, GaeConfig};
use valueflow::losses::pool_quantiles;
use valueflow::net::DenseLayer;
use valueflow::policy::{normalize_advantages, ppo_surrogate};
use valueflow::verify::{backup_distance, tiny_flow_net};

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_layers_have_unit_bounded_operator_norm(
        seed in any::<u64>(),
        rows in 1usize..9,
        cols in 1usize..9,
        gain in 0.1f64..6.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DenseLayer::new(cols, rows, false, &mut rng);
        let w: Vec<f64> = base.weight().iter().map(|x| x * gain).collect();
        let mut layer = DenseLayer::from_parts(w.clone(), vec![0.0; rows], cols, Some(vec![1.0; cols])).unwrap();
        layer.power_iterate(1000);
        let eff = DMatrix::from_row_slice(rows, cols, &layer.effective_weight());
        let sigma_eff = eff.singular_values().max();
        let sigma_raw = DMatrix::from_row_slice(rows, cols, &w).singular_values().max();
        prop_assert!(sigma_eff <= 1.0 + 1e-6, "effective norm {sigma_eff}");
        if sigma_raw <= 1.0 {
            // Already contractive layers pass through unscaled.
            prop_assert!((sigma_eff - sigma_raw).abs() <= 1e-9);
        }
    }

    #[test]
    fn gae_backup_contracts_by_gamma(
        seed in any::<u64>(),
        gamma in 0.5f64..0.995,
        lam in 0.0f64..0.99,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let n = 4;
        let mdp = FunctionalMdp::new(
            (0..n).map(|_| rng.random_range(0..n)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ).unwrap();
        let dist = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| sorted((0..10).map(|_| rng.random_range(-5.0..5.0)).collect())).collect()
        };
        let (z1, z2) = (dist(&mut rng), dist(&mut rng));
        let cfg = GaeConfig::new(gamma, lam).unwrap();
        let (before, after) = backup_distance(&mdp, &z1, &z2, &cfg).unwrap();
        prop_assert!(after <= cfg.contraction_factor() * before + 1e-9);
    }

    #[test]
    fn w1_is_a_metric_on_sorted_vectors(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        c in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let (a, b, c) = (sorted(a), sorted(b), sorted(c));
        let ab = w1_sorted(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(w1_sorted(&a, &a).unwrap(), 0.0);
        prop_assert!((ab - w1_sorted(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= w1_sorted(&a, &c).unwrap() + w1_sorted(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn predicted_quantiles_are_sorted_and_finite(seed in any::<u64>(), steps in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = tiny_flow_net(&mut rng, seed % 2 == 0).unwrap();
        let h = net.encode(&[0.3, -0.2, 0.5]);
        let d = sample_distribution(&net, &h, 30, steps, &mut rng).unwrap();
        prop_assert_eq!(d.len(), 30);
        prop_assert!(d.supports().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(d.supports().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn confidence_weight_stays_in_range(seed in any::<u64>(), z0 in -3.0f64..3.0, temp in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = tiny_flow_net(&mut rng, true).unwrap();
        let h = net.encode(&[1.0, 0.0, -1.0]);
        let trace = jacobian_sensitivity(&net, z0, &h, 10).unwrap();
        let w = confidence_weight(&trace, temp).unwrap();
        prop_assert!((1.0..1.5).contains(&w) || w == 1.5);
    }

    #[test]
    fn clipped_surrogate_is_pessimistic(ratio in 0.01f64..5.0, adv in -5.0f64..5.0, eps in 0.01f64..0.9) {
        let s = ppo_surrogate(ratio, adv, eps).unwrap();
        prop_assert!(s <= ratio * adv + 1e-12);
        let clipped = ratio.max(1.0 - eps).min(1.0 + eps) * adv;
        prop_assert!(s <= clipped + 1e-12);
        prop_assert!(s == ratio * adv || s == clipped);
    }

    #[test]
    fn normalized_advantages_have_zero_mean(adv in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let n = normalize_advantages(&adv);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn pooling_identical_sets_is_identity(v in prop::collection::vec(-10.0f64..10.0, 10)) {
        let v = sorted(v);
        let pooled = pool_quantiles(&[&v, &v, &v], 10).unwrap();
        for (a, b) in pooled.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_lookup_is_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let d = QuantileDistribution::from_unsorted(v);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(d.quantile(lo) <= d.quantile(hi));
    }
}
