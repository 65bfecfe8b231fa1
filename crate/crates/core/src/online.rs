//! Online loop shared by Priv-XPO and Square-XPO.
//!
//! Each round draws a prompt, a response from the current iterate and one
//! from pi_ref, labels the pair through the channel, and moves to the class
//! member minimizing `gamma * sum_i ln pi(tau~_i) + loss(pi)`. Both terms are
//! sums over rounds, so per-member running totals make a round O(|class|).
//!
//! The loss is `-c(eps)^2 * private log-likelihood` (pairs ranked by the
//! observed label) for [`OnlineLoss::PrivateLog`], and the debiased square
//! loss on the unranked `(tau, tau~)` pair for [`OnlineLoss::DebiasedSquare`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{sample_response, Environment, PolicyClass, Trajectory};
use crate::error::{Error, Result};
use crate::noise::{apply_channel, c_eps, sample_bt_label, ChannelOrder, Label, NoiseConfig};
use crate::objectives::{private_log_term, sigmoid, Flavor, ImplicitRewards};
use crate::offline::{argmax_first, argmin_first};
use crate::rng::RandomSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineLoss {
    PrivateLog,
    DebiasedSquare,
}

impl OnlineLoss {
    pub fn name(self) -> &'static str {
        match self {
            OnlineLoss::PrivateLog => "priv_xpo",
            OnlineLoss::DebiasedSquare => "square_xpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnlineConfig {
    pub rounds: usize,
    pub beta: f64,
    pub gamma: f64,
    pub noise: NoiseConfig,
    pub loss: OnlineLoss,
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::DomainError("need at least one round".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::DomainError(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::DomainError(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        self.noise.validate()?;
        if self.loss == OnlineLoss::PrivateLog
            && !matches!(self.noise.ordering, ChannelOrder::Clean | ChannelOrder::PrivacyOnly)
        {
            return Err(Error::InvalidNoise(format!(
                "the private log loss handles privacy only, not {}",
                self.noise.ordering.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub t: usize,
    pub prompt: usize,
    pub tau: usize,
    pub tau_tilde: usize,
    pub label: Label,
    pub clean_label: Label,
    /// Member chosen after this round, i.e. the next iterate.
    pub chosen_index: usize,
    pub objective_of_chosen: f64,
}

#[derive(Clone, Debug)]
pub struct OnlineTrace {
    /// Class indices of pi^(1), ..., pi^(T+1).
    pub iterates: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
    /// Class index of the best iterate by exact J_beta.
    pub final_index: usize,
    /// Position of that iterate in `iterates`.
    pub final_position: usize,
    /// Composite objective of every member after the last round.
    pub final_objectives: Vec<f64>,
}

impl OnlineTrace {
    /// Trace CSV: `t,prompt,tau,tau_tilde,z,chosen_index,objective_of_chosen,exact_gap_of_chosen`.
    pub fn write_csv<W: Write>(&self, env: &Environment, class: &PolicyClass, beta: f64, out: W) -> Result<()> {
        let optimum = env.kl_value(&env.optimal_kl_policy(beta)?, beta);
        let values: Vec<f64> = class.members().iter().map(|p| env.kl_value(p, beta)).collect();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "prompt",
            "tau",
            "tau_tilde",
            "z",
            "chosen_index",
            "objective_of_chosen",
            "exact_gap_of_chosen",
        ])?;
        for r in &self.rounds {
            w.write_record([
                r.t.to_string(),
                r.prompt.to_string(),
                r.tau.to_string(),
                r.tau_tilde.to_string(),
                r.label.value().to_string(),
                r.chosen_index.to_string(),
                r.objective_of_chosen.to_string(),
                (optimum - values[r.chosen_index]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn flip_rate(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        let flips = self.rounds.iter().filter(|r| r.label != r.clean_label).count();
        flips as f64 / self.rounds.len() as f64
    }
}

/// What the learner is told: everything in [`OnlineConfig`] except the
/// channel, of which it knows only the privacy level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Learner {
    pub rounds: usize,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub loss: OnlineLoss,
}

impl OnlineConfig {
    pub fn learner(&self) -> Learner {
        Learner {
            rounds: self.rounds,
            beta: self.beta,
            gamma: self.gamma,
            epsilon: self.noise.effective_epsilon(),
            loss: self.loss,
        }
    }
}

/// Runs `cfg.rounds` rounds starting from pi_ref. Round `t` draws from child
/// stream `t` of `rng`.
pub fn run_online(env: &Environment, class: &PolicyClass, cfg: &OnlineConfig, rng: &RandomSource) -> Result<OnlineTrace> {
    cfg.validate()?;
    let noise = cfg.noise;
    run_online_with(env, class, &cfg.learner(), rng, |y, r| apply_channel(y, &noise, r))
}

/// Same loop with the label channel supplied by the caller. `channel` maps
/// the clean label to the observed one and draws from the round's stream
/// after the clean label.
pub fn run_online_with<F>(
    env: &Environment,
    class: &PolicyClass,
    cfg: &Learner,
    rng: &RandomSource,
    mut channel: F,
) -> Result<OnlineTrace>
where
    F: FnMut(Label, &mut RandomSource) -> Label,
{
    if cfg.rounds == 0 {
        return Err(Error::DomainError("need at least one round".into()));
    }
    if !(cfg.beta.is_finite() && cfg.beta > 0.0) {
        return Err(Error::DomainError(format!("beta must be positive, got {}", cfg.beta)));
    }
    if !(cfg.gamma.is_finite() && cfg.gamma >= 0.0) {
        return Err(Error::DomainError(format!("gamma must be nonnegative, got {}", cfg.gamma)));
    }
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    let start = class
        .find_reference(env)
        .ok_or_else(|| Error::InvalidPolicy("class does not contain pi_ref".into()))?;

    let mut log_probs = Vec::with_capacity(class.len());
    let mut rewards = Vec::with_capacity(class.len());
    for (m, pi) in class.members().iter().enumerate() {
        env.check_policy(pi)?;
        let mut table = Vec::with_capacity(env.num_prompts());
        for s in 0..env.num_prompts() {
            let mut row = Vec::with_capacity(env.num_responses(s));
            for (j, &p) in pi.row(s).iter().enumerate() {
                if p <= 0.0 {
                    return Err(Error::UnboundedRatio { policy: m, prompt: s, response: j });
                }
                row.push(p.ln());
            }
            table.push(row);
        }
        log_probs.push(table);
        rewards.push(ImplicitRewards::new(pi, env.pi_ref(), cfg.beta, Flavor::Xpo).for_member(m));
    }

    let epsilon = cfg.epsilon;
    let c = c_eps(epsilon)?;
    let n = class.len();
    let mut optimism = vec![0.0; n];
    let mut fit = vec![0.0; n];
    let mut objective = vec![0.0; n];
    let mut current = start;
    let mut iterates = Vec::with_capacity(cfg.rounds + 1);
    iterates.push(current);
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let mut r = rng.child(t as u64);
        let prompt = env.sample_prompt(&mut r);
        let tau = Trajectory::new(prompt, sample_response(class.get(current), prompt, &mut r));
        let tau_tilde = Trajectory::new(prompt, sample_response(env.pi_ref(), prompt, &mut r));
        let clean_label = sample_bt_label(env, tau, tau_tilde, &mut r)?;
        let label = channel(clean_label, &mut r);

        for m in 0..n {
            optimism[m] += log_probs[m][prompt][tau_tilde.response];
            match cfg.loss {
                OnlineLoss::PrivateLog => {
                    let (plus, minus) = match label {
                        Label::Plus => (tau, tau_tilde),
                        Label::Minus => (tau_tilde, tau),
                    };
                    let p = sigmoid(rewards[m].diff(plus, minus)?);
                    fit[m] += private_log_term(p, epsilon)?;
                    objective[m] = cfg.gamma * optimism[m] - c * c * fit[m];
                }
                OnlineLoss::DebiasedSquare => {
                    let p = sigmoid(rewards[m].diff(tau, tau_tilde)?);
                    let d = 2.0 * p - 1.0 - c * label.sign();
                    fit[m] += d * d;
                    objective[m] = cfg.gamma * optimism[m] + fit[m];
                }
            }
        }
        current = argmin_first(&objective).ok_or(Error::EmptyClass)?;
        iterates.push(current);
        rounds.push(RoundRecord {
            t: t + 1,
            prompt,
            tau: tau.response,
            tau_tilde: tau_tilde.response,
            label,
            clean_label,
            chosen_index: current,
            objective_of_chosen: objective[current],
        });
    }

    let final_position = best_iterate(env, class, &iterates, cfg.beta)?;
    Ok(OnlineTrace {
        final_index: iterates[final_position],
        final_position,
        iterates,
        rounds,
        final_objectives: objective,
    })
}

/// Position in `iterates` of the member with the largest exact J_beta;
/// earliest position wins ties.
pub fn best_iterate(env: &Environment, class: &PolicyClass, iterates: &[usize], beta: f64) -> Result<usize> {
    if iterates.is_empty() {
        return Err(Error::DomainError("no iterates".into()));
    }
    let mut cache: Vec<Option<f64>> = vec![None; class.len()];
    let mut values = Vec::with_capacity(iterates.len());
    for &i in iterates {
        if i >= class.len() {
            return Err(Error::DomainError(format!("iterate {i} is not a class member")));
        }
        let v = *cache[i].get_or_insert_with(|| env.kl_value(class.get(i), beta));
        values.push(v);
    }
    argmax_first(&values).ok_or(Error::EmptyClass)
}

/// `(8 (R_max + V_max) e^{2 R_max})^{-2}`.
pub fn kappa(r_max: f64, v_max: f64) -> f64 {
    let k = 8.0 * (r_max + v_max) * (2.0 * r_max).exp();
    1.0 / (k * k)
}

/// Which optimism-weight formula to use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaLoss {
    PrivateLog,
    SquareCtl { alpha: f64 },
    SquareLtc { alpha: f64 },
}

/// Theory-driven optimism weight. `log_card_term` is `ln(|class| T / delta)`.
pub fn theoretical_gamma(
    c_eps: f64,
    beta: f64,
    kappa: f64,
    log_card_term: f64,
    rounds: usize,
    c_cov: f64,
    loss: GammaLoss,
) -> Result<f64> {
    for (name, x) in [
        ("c_eps", c_eps),
        ("beta", beta),
        ("kappa", kappa),
        ("log_card_term", log_card_term),
        ("c_cov", c_cov),
    ] {
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::DomainError(format!("{name} must be positive, got {x}")));
        }
    }
    if rounds == 0 {
        return Err(Error::DomainError("rounds must be positive".into()));
    }
    let t = rounds as f64;
    let scale = beta * kappa * beta / (t * c_cov);
    let err = match loss {
        GammaLoss::PrivateLog => return Ok(c_eps * (scale * log_card_term).sqrt()),
        GammaLoss::SquareCtl { alpha } => c_eps * c_eps * log_card_term + t * alpha * alpha,
        GammaLoss::SquareLtc { alpha } => c_eps * c_eps * (log_card_term + t * alpha * alpha),
    };
    if let GammaLoss::SquareCtl { alpha } | GammaLoss::SquareLtc { alpha } = loss {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::DomainError(format!("alpha must be nonnegative, got {alpha}")));
        }
    }
    Ok((scale * err).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Policy, Regularizer};
    use crate::env::build_policy_class;

    fn small_env() -> Environment {
        Environment::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 1.0, 2.0], vec![2.0, 0.5, 0.0]],
            2.0,
            Policy::uniform(&[3, 3]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gamma_formula() {
        let g = theoretical_gamma(1.0, 1.0, 1.0, 1.0, 1, 1.0, GammaLoss::PrivateLog).unwrap();
        assert_eq!(g, 1.0);
        let c = 2.5;
        let g = theoretical_gamma(c, 1.0, 1.0, 1.0, 1, 1.0, GammaLoss::PrivateLog).unwrap();
        assert_eq!(g, c);
        let g1 = theoretical_gamma(1.3, 0.4, 0.01, 5.0, 100, 2.0, GammaLoss::PrivateLog).unwrap();
        let g2 = theoretical_gamma(1.3, 0.4, 0.01, 5.0, 200, 2.0, GammaLoss::PrivateLog).unwrap();
        assert!((g1 / g2 - 2f64.sqrt()).abs() < 1e-12);
        assert!(theoretical_gamma(0.0, 1.0, 1.0, 1.0, 1, 1.0, GammaLoss::PrivateLog).is_err());
        let ctl = theoretical_gamma(1.0, 1.0, 1.0, 1.0, 1, 1.0, GammaLoss::SquareCtl { alpha: 1.0 }).unwrap();
        assert!((ctl - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn best_iterate_contract() {
        let env = small_env();
        let star = env.optimal_kl_policy(0.5).unwrap();
        let class = PolicyClass::new(vec![env.pi_ref().clone(), star.clone(), star]).unwrap();
        assert_eq!(best_iterate(&env, &class, &[0], 0.5).unwrap(), 0);
        assert_eq!(best_iterate(&env, &class, &[0, 1], 0.5).unwrap(), 1);
        assert_eq!(best_iterate(&env, &class, &[0, 1, 1, 2], 0.5).unwrap(), 1);
        assert!(best_iterate(&env, &class, &[], 0.5).is_err());
    }

    #[test]
    fn private_log_rejects_corruption() {
        let cfg = OnlineConfig {
            rounds: 10,
            beta: 1.0,
            gamma: 0.0,
            noise: NoiseConfig::ctl(1.0, 0.1, crate::noise::Adversary::AlwaysFlip),
            loss: OnlineLoss::PrivateLog,
        };
        assert!(cfg.validate().is_err());
        let ok = OnlineConfig { loss: OnlineLoss::DebiasedSquare, ..cfg };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn smoke_single_round() {
        let env = small_env();
        let mut rng = RandomSource::from_seed(2);
        let class = build_policy_class(&env, 0.5, 8, Regularizer::Kl, &mut rng).unwrap();
        let cfg = OnlineConfig {
            rounds: 1,
            beta: 0.5,
            gamma: 0.0,
            noise: NoiseConfig::clean(),
            loss: OnlineLoss::PrivateLog,
        };
        let trace = run_online(&env, &class, &cfg, &rng).unwrap();
        assert_eq!(trace.iterates.len(), 2);
        assert_eq!(trace.iterates[0], class.reference_index().unwrap());
        assert!(trace.final_objectives.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_mass_member_is_rejected() {
        let env = small_env();
        let point = Policy::deterministic(&[3, 3], &[2, 0]).unwrap();
        let class = PolicyClass::new(vec![env.pi_ref().clone(), point]).unwrap();
        let cfg = OnlineConfig {
            rounds: 3,
            beta: 0.5,
            gamma: 0.0,
            noise: NoiseConfig::clean(),
            loss: OnlineLoss::DebiasedSquare,
        };
        let err = run_online(&env, &class, &cfg, &RandomSource::from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::UnboundedRatio { policy: 1, .. }));
    }
}
