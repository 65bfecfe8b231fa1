mod common;

use common::{bisect, random_env, random_policy, random_row};
use privalign::env::{
    build_policy_class, phi, phi_inverse, sample_response, Environment, Policy, PolicyClass, Regularizer,
    Trajectory,
};
use privalign::noise::{
    apply_channel, c_eps, generate_offline_dataset, huber_corrupt, randomized_response, sample_bt_label,
    Adversary, Label, NoiseConfig, PreferenceDataset, PreferenceSample,
};
use privalign::objectives::{
    h_chipo, h_xpo, log_loss_dataset, p_chipo, private_log_term, sigmoid, Flavor, LossContext,
};
use privalign::offline::{solve_offline, OfflineSolver};
use privalign::online::{kappa, run_online, OnlineConfig, OnlineLoss};
use privalign::rng::RandomSource;
use privalign::uclemmas::{
    least_squares_under_corruption, generate_stream, mle_under_ldp, sum_squared_tv, ConditionalModel,
    RegressionModel,
};

const LN3: f64 = 1.0986122886681098;

fn single_prompt_env(reward: Vec<f64>, pi_ref: Vec<f64>, r_max: f64) -> Environment {
    Environment::new(vec![1.0], vec![reward], r_max, Policy::new(vec![pi_ref]).unwrap()).unwrap()
}

#[test]
fn prompt_and_response_frequencies() {
    let env = single_prompt_env(vec![0.0, 1.0], vec![0.5, 0.5], 1.0);
    let two = Environment::new(
        vec![0.5, 0.5],
        vec![vec![0.0], vec![0.0]],
        1.0,
        Policy::uniform(&[1, 1]).unwrap(),
    )
    .unwrap();
    let mut rng = RandomSource::from_seed(11);
    let n = 100_000;
    let zeros = (0..n).filter(|_| two.sample_prompt(&mut rng) == 0).count();
    assert!((zeros as f64 / n as f64 - 0.5).abs() <= 0.01);
    assert!((0..100).all(|_| env.sample_prompt(&mut rng) == 0));

    let uniform = Policy::uniform(&[4]).unwrap();
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_response(&uniform, 0, &mut rng)] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() <= 0.01, "{counts:?}");
    }
}

/// Every quantity summed over all (prompt, response) cells by hand.
#[test]
fn values_and_divergences_match_enumeration() {
    let mut rng = RandomSource::from_seed(3);
    for _ in 0..20 {
        let env = random_env(3, 5, 2.0, &mut rng);
        let pi = random_policy(3, 5, &mut rng);
        let (mut j, mut kl, mut chi) = (0.0, 0.0, 0.0);
        for s in 0..3 {
            for a in 0..5 {
                let t = Trajectory::new(s, a);
                let (p, q, w) = (pi.prob(t), env.pi_ref().prob(t), env.rho()[s]);
                j += w * p * env.reward(t);
                kl += w * p * (p / q).ln();
                chi += w * 0.5 * q * (p / q - 1.0).powi(2);
            }
        }
        assert!((env.value(&pi) - j).abs() < 1e-12);
        assert!((env.kl_divergence(&pi) - kl).abs() < 1e-12);
        assert!((env.chi_square_divergence(&pi) - chi).abs() < 1e-12);
        assert!((env.kl_value(&pi, 0.7) - (j - 0.7 * kl)).abs() < 1e-12);
        assert!((env.chi_mix_value(&pi, 0.7) - (j - 0.7 * (kl + chi))).abs() < 1e-12);
        assert!((env.concentrability(&pi) - (2.0 * chi + 1.0)).abs() < 1e-10);
    }
}

#[test]
fn phi_inverse_agrees_with_bisection() {
    let oracle = bisect(|u| u + u.ln() - 3.0, 1e-6, 10.0, 1e-13);
    assert!((oracle - 2.20794).abs() < 1e-5);
    assert!((phi_inverse(3.0).unwrap() - oracle).abs() < 1e-10);
    for v in [-20.0, -2.0, 0.0, 1.0, 7.5, 40.0] {
        let u = phi_inverse(v).unwrap();
        let o = bisect(|x: f64| x.ln() + x - v, 1e-12, 1e3, 1e-14);
        assert!((u - o).abs() <= 1e-9 * o.max(1.0), "v={v}: {u} vs {o}");
    }
}

#[test]
fn kl_optimum_is_a_softmax_and_beats_random_policies() {
    let env = single_prompt_env(vec![1.0, 0.0], vec![0.5, 0.5], 1.0);
    let opt = env.optimal_kl_policy(1.0).unwrap();
    let e = 1f64.exp();
    assert!((opt.row(0)[0] - e / (1.0 + e)).abs() < 1e-12);
    assert!((opt.row(0)[1] - 1.0 / (1.0 + e)).abs() < 1e-12);

    let mut rng = RandomSource::from_seed(5);
    let env = random_env(4, 6, 2.0, &mut rng);
    let opt = env.optimal_kl_policy(0.5).unwrap();
    let best = env.kl_value(&opt, 0.5);
    for _ in 0..50 {
        let pi = random_policy(4, 6, &mut rng);
        assert!(best >= env.kl_value(&pi, 0.5) - 1e-12);
    }
}

#[test]
fn chi_mix_optimum_by_random_search_and_residual() {
    let mut rng = RandomSource::from_seed(8);
    let env = random_env(1, 3, 1.0, &mut rng);
    let sol = env.optimal_chi_mix_solution(0.3).unwrap();
    let best = env.chi_mix_value(&sol.policy, 0.3);
    for _ in 0..10_000 {
        let pi = random_policy(1, 3, &mut rng);
        assert!(best >= env.chi_mix_value(&pi, 0.3) - 1e-12);
    }
    for seed in 0..20 {
        let mut rng = RandomSource::from_seed(100 + seed);
        let env = random_env(4, 6, 2.0, &mut rng);
        let beta = 0.2 + rng.uniform();
        let sol = env.optimal_chi_mix_solution(beta).unwrap();
        for s in 0..4 {
            for a in 0..6 {
                let t = Trajectory::new(s, a);
                let u = sol.policy.prob(t) / env.pi_ref().prob(t);
                if u > 0.0 {
                    let residual = env.reward(t) - beta * phi(u).unwrap() - sol.normalizers[s];
                    assert!(residual.abs() <= 1e-8, "seed {seed} cell ({s},{a}): {residual}");
                }
            }
        }
    }
}

#[test]
fn concentrability_and_coverability_of_point_masses() {
    let env = single_prompt_env(vec![0.0; 4], vec![0.25; 4], 1.0);
    let a = Policy::deterministic(&[4], &[0]).unwrap();
    let b = Policy::deterministic(&[4], &[1]).unwrap();
    assert!((env.concentrability(&a) - 4.0).abs() < 1e-12);
    let class = PolicyClass::new(vec![a, b]).unwrap();
    assert!((env.coverability(&class) - 2.0).abs() < 1e-12);
}

#[test]
fn generated_classes_have_finite_ratios() {
    let mut rng = RandomSource::from_seed(21);
    for _ in 0..10 {
        let env = random_env(4, 6, 2.0, &mut rng);
        for reg in [Regularizer::Kl, Regularizer::ChiMix] {
            let class = build_policy_class(&env, 1.0, 32, reg, &mut rng).unwrap();
            for pi in class.members() {
                for s in 0..4 {
                    for (p, q) in pi.row(s).iter().zip(env.pi_ref().row(s)) {
                        assert!((p / q).is_finite());
                    }
                }
            }
        }
    }
}

#[test]
fn implicit_reward_arithmetic() {
    let pi_ref = Policy::new(vec![vec![0.25, 0.25, 0.5]]).unwrap();
    let pi = Policy::new(vec![vec![0.5, 0.125, 0.375]]).unwrap();
    let (a, b) = (Trajectory::new(0, 0), Trajectory::new(0, 1));
    let hand = (2.0 + 2f64.ln()) - (0.5 + 0.5f64.ln());
    assert!((hand - 2.8863).abs() < 1e-4);
    assert!((h_chipo(&pi, &pi_ref, a, b, 1.0).unwrap() - hand).abs() < 1e-12);
    assert!((h_xpo(&pi, &pi_ref, a, b, 1.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((p_chipo(1e9, 1.0) - 0.880797).abs() < 1e-6);
    assert!((sigmoid(1.0) - 0.731059).abs() < 1e-6);

    let s = PreferenceSample {
        prompt: 0,
        first: 0,
        second: 1,
        label: Label::Plus,
        clean_label: Label::Plus,
    };
    let dataset = PreferenceDataset {
        samples: vec![s],
        channel: NoiseConfig::clean(),
        seed: 0,
    };
    let ctx = LossContext::new(1.0, f64::INFINITY, 2.0, Flavor::Chipo).unwrap();
    let expected = (1.0 / (1.0 + (-hand).exp())).ln();
    assert!((expected + 0.05428).abs() < 1e-4);
    assert!((log_loss_dataset(&pi, &dataset, &ctx, &pi_ref).unwrap() - expected).abs() < 1e-12);
    assert!((private_log_term(1.0, LN3).unwrap() - 0.75f64.ln()).abs() < 1e-12);
}

#[test]
fn bradley_terry_labels() {
    let env = single_prompt_env(vec![10.0, 0.0], vec![0.5, 0.5], 10.0);
    let (a, b) = (Trajectory::new(0, 0), Trajectory::new(0, 1));
    let mut rng = RandomSource::from_seed(1);
    let plus = (0..10_000)
        .filter(|_| sample_bt_label(&env, a, b, &mut rng).unwrap() == Label::Plus)
        .count();
    assert!(plus >= 9990);

    let env = single_prompt_env(vec![1.3, 0.4], vec![0.5, 0.5], 2.0);
    let p = env.bt_prob(a, b).unwrap();
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            let y = sample_bt_label(&env, a, b, &mut rng).unwrap();
            apply_channel(y, &NoiseConfig::clean(), &mut rng) == Label::Plus
        })
        .count();
    assert!((hits as f64 / n as f64 - p).abs() <= 0.01);
}

#[test]
fn randomized_response_and_huber_rates() {
    let mut rng = RandomSource::from_seed(2);
    let n = 100_000;
    let kept = (0..n)
        .filter(|_| randomized_response(Label::Plus, LN3, &mut rng) == Label::Plus)
        .count();
    assert!((kept as f64 / n as f64 - 0.75).abs() <= 0.01);
    let flipped = (0..n)
        .filter(|_| huber_corrupt(Label::Plus, 0.4, &Adversary::AlwaysFlip, &mut rng) == Label::Minus)
        .count();
    assert!((flipped as f64 / n as f64 - 0.4).abs() <= 0.01);
    let raised = (0..n)
        .filter(|_| huber_corrupt(Label::Minus, 0.4, &Adversary::ConstantPlus, &mut rng) == Label::Plus)
        .count();
    assert!((raised as f64 / n as f64 - 0.4).abs() <= 0.01);
}

#[test]
fn ctl_output_mean_matches_analytic_shrinkage() {
    let (eps, alpha): (f64, f64) = (1.0, 0.2);
    let cfg = NoiseConfig::ctl(eps, alpha, Adversary::AlwaysFlip);
    let s = 1.0 / (1.0 + (-eps).exp());
    let n = 1_000_000;
    for y in [Label::Plus, Label::Minus] {
        let expected = (2.0 * s - 1.0) * (1.0 - 2.0 * alpha) * y.sign();
        let rng = RandomSource::from_seed(if y == Label::Plus { 31 } else { 32 });
        let mut r = rng.clone();
        let sum: f64 = (0..n).map(|_| apply_channel(y, &cfg, &mut r).sign()).sum();
        let mean = sum / n as f64;
        let se = ((1.0 - expected * expected) / n as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "{mean} vs {expected}");
    }
}

/// Small enough that the regularized optimum is near-greedy in J.
const SMALL_BETA: f64 = 0.01;

fn two_by_three_instance(seed: u64) -> (Environment, PolicyClass) {
    let mut rng = RandomSource::from_seed(seed);
    let env = random_env(2, 3, 1.0, &mut rng);
    let opt = env.optimal_chi_mix_policy(SMALL_BETA).unwrap();
    let mut members = vec![opt];
    members.extend((0..9).map(|_| random_policy(2, 3, &mut rng)));
    (env, PolicyClass::new(members).unwrap().with_optimal(0).unwrap())
}

#[test]
fn priv_chipo_chooses_a_top_two_policy() {
    let mut good = 0;
    for seed in 0..100 {
        let (env, class) = two_by_three_instance(seed);
        let data = generate_offline_dataset(&env, 5000, &NoiseConfig::clean(), &RandomSource::from_seed(1000 + seed))
            .unwrap();
        let ctx = LossContext::new(SMALL_BETA, f64::INFINITY, env.r_max(), Flavor::Chipo).unwrap();
        let report = solve_offline(OfflineSolver::PrivChipo, &data, &class, &ctx, env.pi_ref()).unwrap();
        let chosen = env.value(class.get(report.chosen_index));
        let better = class.members().iter().filter(|p| env.value(p) > chosen).count();
        good += usize::from(better < 2);
    }
    assert!(good >= 95, "{good}/100");
}

#[test]
fn square_chipo_tracks_priv_chipo_on_clean_data() {
    for seed in 0..20 {
        let (env, class) = two_by_three_instance(seed);
        let data = generate_offline_dataset(&env, 20_000, &NoiseConfig::clean(), &RandomSource::from_seed(seed))
            .unwrap();
        let ctx = LossContext::new(SMALL_BETA, f64::INFINITY, env.r_max(), Flavor::Chipo).unwrap();
        let a = solve_offline(OfflineSolver::PrivChipo, &data, &class, &ctx, env.pi_ref()).unwrap();
        let b = solve_offline(OfflineSolver::SquareChipo, &data, &class, &ctx, env.pi_ref()).unwrap();
        let gap = (env.value(&a.chosen_policy) - env.value(&b.chosen_policy)).abs();
        assert!(gap <= 0.02, "seed {seed}: {gap}");
    }
}

#[test]
fn square_xpo_never_ends_behind_the_reference() {
    let mut good = 0;
    for seed in 0..100 {
        let mut rng = RandomSource::from_seed(500 + seed);
        let env = random_env(4, 6, 1.0, &mut rng);
        let opt = env.optimal_kl_policy(1.0).unwrap();
        let mut members = vec![opt, env.pi_ref().clone()];
        members.extend((0..14).map(|_| random_policy(4, 6, &mut rng)));
        let class = PolicyClass::new(members).unwrap();
        let cfg = OnlineConfig {
            rounds: 2000,
            beta: 1.0,
            gamma: 0.0,
            noise: NoiseConfig::clean(),
            loss: OnlineLoss::DebiasedSquare,
        };
        let trace = run_online(&env, &class, &cfg, &rng.child(0)).unwrap();
        let best = env.kl_value(class.get(0), 1.0);
        let gap = best - env.kl_value(class.get(trace.final_index), 1.0);
        let reference_gap = best - env.kl_value(env.pi_ref(), 1.0);
        good += usize::from(gap <= reference_gap);
    }
    assert!(good >= 90, "{good}/100");
}

#[test]
fn kappa_at_unit_scales() {
    let expected = (16.0 * 1f64.exp().powi(2)).powi(-2);
    assert!((kappa(1.0, 1.0) - expected).abs() < 1e-18);
    assert!((expected - 7.1546e-5).abs() < 1e-8);
}

fn plain_mle(models: &[ConditionalModel], records: &[(usize, Label)]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, m) in models.iter().enumerate() {
        let nll: f64 = records
            .iter()
            .map(|&(x, y)| {
                let p = if y == Label::Plus { m.p_plus[x] } else { 1.0 - m.p_plus[x] };
                -p.ln()
            })
            .sum();
        if nll < best.1 {
            best = (i, nll);
        }
    }
    best.0
}

#[test]
fn private_mle_recovers_truth_and_reduces_to_plain_mle() {
    let models = vec![
        ConditionalModel::new(vec![0.2]).unwrap(),
        ConditionalModel::new(vec![0.8]).unwrap(),
    ];
    let hits = (0..100)
        .filter(|&s| {
            let stream = generate_stream(&[1.0], &models[1], &NoiseConfig::privacy(1.0), 2000, &RandomSource::from_seed(s))
                .unwrap();
            mle_under_ldp(&models, &stream, 1.0).unwrap() == 1
        })
        .count();
    assert!(hits >= 99, "{hits}");

    let mut rng = RandomSource::from_seed(77);
    for s in 0..100 {
        let contexts = 3;
        let models: Vec<ConditionalModel> = (0..6)
            .map(|_| ConditionalModel::new((0..contexts).map(|_| 0.05 + 0.9 * rng.uniform()).collect()).unwrap())
            .collect();
        let weights = random_row(contexts, &mut rng);
        let stream =
            generate_stream(&weights, &models[s as usize % 6], &NoiseConfig::clean(), 300, &RandomSource::from_seed(s))
                .unwrap();
        let records: Vec<(usize, Label)> = stream.records.iter().map(|r| (r.context, r.observed)).collect();
        assert_eq!(mle_under_ldp(&models, &stream, f64::INFINITY).unwrap(), plain_mle(&models, &records));
    }
}

#[test]
fn squared_tv_matches_two_outcome_enumeration() {
    let mut rng = RandomSource::from_seed(4);
    for _ in 0..50 {
        let a = ConditionalModel::new((0..3).map(|_| rng.uniform()).collect()).unwrap();
        let b = ConditionalModel::new((0..3).map(|_| rng.uniform()).collect()).unwrap();
        let seen: Vec<usize> = (0..20).map(|_| rng.categorical(&[0.2, 0.3, 0.5])).collect();
        let brute: f64 = seen
            .iter()
            .map(|&x| {
                let tv = 0.5 * ((a.p_plus[x] - b.p_plus[x]).abs() + ((1.0 - a.p_plus[x]) - (1.0 - b.p_plus[x])).abs());
                tv * tv
            })
            .sum();
        assert!((sum_squared_tv(&a, &b, &seen) - brute).abs() < 1e-12);
    }
}

#[test]
fn debiased_least_squares_keeps_the_sign() {
    let models = vec![
        RegressionModel::constant(0.6, 1).unwrap(),
        RegressionModel::constant(-0.6, 1).unwrap(),
    ];
    let truth = models[0].as_conditional();
    let count = |noise: NoiseConfig, n: usize, eps: f64| {
        (0..100)
            .filter(|&s| {
                let stream = generate_stream(&[1.0], &truth, &noise, n, &RandomSource::from_seed(s)).unwrap();
                least_squares_under_corruption(&models, &stream, eps).unwrap() == 0
            })
            .count()
    };
    assert!(count(NoiseConfig::clean(), 2000, f64::INFINITY) >= 99);
    assert!(count(NoiseConfig::ctl(1.0, 0.3, Adversary::AlwaysFlip), 5000, 1.0) >= 95);
}

#[test]
fn privacy_factor_at_ln3_is_two() {
    assert_eq!(c_eps(LN3).unwrap(), 2.0);
}
