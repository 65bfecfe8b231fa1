mod common;

use proptest::prelude::*;

use common::random_env;
use privalign::env::{phi, phi_inverse, Policy};
use privalign::noise::{apply_channel, c_eps, generate_offline_dataset, sigma_eps, Adversary, Label, NoiseConfig};
use privalign::objectives::{private_log_term, sigmoid};
use privalign::offline::{argmax_first, argmin_first};
use privalign::rng::RandomSource;
use privalign::uclemmas::{generate_stream, least_squares_under_corruption, mle_under_ldp, ConditionalModel, RegressionModel};

fn adversary() -> impl Strategy<Value = Adversary> {
    prop_oneof![
        Just(Adversary::AlwaysFlip),
        Just(Adversary::ConstantPlus),
        Just(Adversary::ConstantMinus),
        (0.0..=1.0f64).prop_map(Adversary::BernoulliPlus),
    ]
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Plus), Just(Label::Minus)]
}

proptest! {
    #[test]
    fn sigmoid_is_symmetric_and_bounded(x in -1e3..1e3f64) {
        let (a, b) = (sigmoid(x), sigmoid(-x));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_inverse_inverts_phi(v in -30.0..60.0f64) {
        let u = phi_inverse(v).unwrap();
        prop_assert!(u > 0.0);
        prop_assert!((phi(u).unwrap() - v).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn privacy_factor_is_consistent(eps in 1e-3..20.0f64) {
        let s = sigma_eps(eps).unwrap();
        let c = c_eps(eps).unwrap();
        prop_assert!(s > 0.5 && s < 1.0);
        prop_assert!(c > 1.0);
        prop_assert!((c * (2.0 * s - 1.0) - 1.0).abs() < 1e-9 * c);
        prop_assert!(c_eps(eps * 1.5).unwrap() <= c);
    }

    #[test]
    fn private_log_term_is_a_log_probability(p in 0.0..=1.0f64, eps in 0.01..10.0f64) {
        let v = private_log_term(p, eps).unwrap();
        prop_assert!(v.is_finite() && v <= 0.0);
        let s = sigma_eps(eps).unwrap();
        prop_assert!(v >= (1.0 - s).ln() - 1e-12);
    }

    #[test]
    fn normalized_weights_sum_to_one(rows in prop::collection::vec(prop::collection::vec(1e-6..10.0f64, 1..6), 1..4)) {
        let policy = Policy::from_weights(rows).unwrap();
        for row in policy.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arg_optima_pick_the_first_extremum(values in prop::collection::vec(-5i32..5, 1..20)) {
        let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(argmax_first(&xs), xs.iter().position(|&v| v == max));
        prop_assert_eq!(argmin_first(&xs), xs.iter().position(|&v| v == min));
    }

    /// Inactive stages consume no randomness, so reduced channels agree draw for draw.
    #[test]
    fn degenerate_channels_reduce_exactly(seed in any::<u64>(), y in label(), eps in 0.05..5.0f64, alpha in 0.0..1.0f64, adv in adversary()) {
        let rng = RandomSource::from_seed(seed);
        let run = |cfg: NoiseConfig| apply_channel(y, &cfg, &mut rng.clone());
        let privacy = run(NoiseConfig::privacy(eps));
        prop_assert_eq!(run(NoiseConfig::ctl(eps, 0.0, adv)), privacy);
        prop_assert_eq!(run(NoiseConfig::ltc(eps, 0.0, adv)), privacy);
        let corrupt = run(NoiseConfig::corruption(alpha, adv));
        prop_assert_eq!(run(NoiseConfig::ctl(f64::INFINITY, alpha, adv)), corrupt);
        prop_assert_eq!(run(NoiseConfig::ltc(f64::INFINITY, alpha, adv)), corrupt);
        prop_assert_eq!(run(NoiseConfig::ctl(f64::INFINITY, 0.0, adv)), y);
    }

    #[test]
    fn datasets_are_seeded_and_prefix_stable(seed in any::<u64>(), n in 1usize..200) {
        let mut r = RandomSource::from_seed(seed);
        let env = random_env(3, 4, 1.0, &mut r);
        let noise = NoiseConfig::ltc(1.0, 0.2, Adversary::AlwaysFlip);
        let rng = RandomSource::from_seed(seed ^ 0x5eed);
        let a = generate_offline_dataset(&env, n, &noise, &rng).unwrap();
        let b = generate_offline_dataset(&env, n + 7, &noise, &rng).unwrap();
        prop_assert_eq!(&a.samples[..], &b.samples[..n]);
        for s in &b.samples {
            prop_assert!(s.first < 4 && s.second < 4 && s.prompt < 3);
        }
    }

    #[test]
    fn estimators_ignore_channel_metadata(seed in any::<u64>(), eps in 0.3..3.0f64, alpha in 0.0..0.4f64) {
        let log_models: Vec<ConditionalModel> = [0.2, 0.5, 0.7].iter().map(|&p| ConditionalModel::new(vec![p, 1.0 - p]).unwrap()).collect();
        let sq_models: Vec<RegressionModel> = [-0.4, 0.1, 0.4].iter().map(|&h| RegressionModel::new(vec![h, -h]).unwrap()).collect();
        let weights = [0.4, 0.6];
        let rng = RandomSource::from_seed(seed);
        let private = generate_stream(&weights, &log_models[2], &NoiseConfig::privacy(eps), 300, &rng).unwrap();
        prop_assert_eq!(mle_under_ldp(&log_models, &private, eps).unwrap(), mle_under_ldp(&log_models, &private.without_channel(), eps).unwrap());
        let truth = sq_models[2].as_conditional();
        let corrupted = generate_stream(&weights, &truth, &NoiseConfig::ltc(eps, alpha, Adversary::AlwaysFlip), 300, &rng).unwrap();
        prop_assert_eq!(
            least_squares_under_corruption(&sq_models, &corrupted, eps).unwrap(),
            least_squares_under_corruption(&sq_models, &corrupted.without_channel(), eps).unwrap()
        );
    }

    #[test]
    fn regularized_optima_are_distributions(seed in any::<u64>(), beta in 0.05..5.0f64) {
        let mut r = RandomSource::from_seed(seed);
        let env = random_env(3, 5, 2.0, &mut r);
        for pi in [env.optimal_kl_policy(beta).unwrap(), env.optimal_chi_mix_policy(beta).unwrap()] {
            for row in pi.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }
}
