//! Reparameterizations and empirical losses.
//!
//! Log losses are returned in maximize orientation (sums of log
//! probabilities); the square loss is returned as a sum to be minimized.

use serde::{Deserialize, Serialize};

use crate::env::{Policy, Trajectory};
use crate::error::{Error, Result};
use crate::noise::{c_eps, sigma_eps, Label, PreferenceDataset};

/// Floor applied to the density ratio before phi, for zero-mass responses.
pub const PHI_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// phi(u) = u + ln u link, clipped at 2 R_max.
    Chipo,
    /// ln u link, unclipped.
    Xpo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossContext {
    pub beta: f64,
    pub epsilon: f64,
    pub r_max: f64,
    pub flavor: Flavor,
}

impl LossContext {
    pub fn new(beta: f64, epsilon: f64, r_max: f64, flavor: Flavor) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::DomainError(format!("beta must be positive, got {beta}")));
        }
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(Error::DomainError(format!("r_max must be positive, got {r_max}")));
        }
        sigma_eps(epsilon)?;
        Ok(LossContext {
            beta,
            epsilon,
            r_max,
            flavor,
        })
    }
}

pub fn clip(x: f64, bound: f64) -> f64 {
    x.max(-bound).min(bound)
}

/// Logistic function; evaluated on the side that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn floored_phi(u: f64) -> f64 {
    let u = u.max(PHI_FLOOR);
    u + u.ln()
}

/// `beta phi(pi/pi_ref)(plus) - beta phi(pi/pi_ref)(minus)`.
pub fn h_chipo(policy: &Policy, pi_ref: &Policy, plus: Trajectory, minus: Trajectory, beta: f64) -> Result<f64> {
    same_prompt(plus, minus)?;
    let link = |t: Trajectory| beta * floored_phi(policy.prob(t) / pi_ref.prob(t));
    Ok(link(plus) - link(minus))
}

/// `sigma(clip_{2 R_max}(h))`.
pub fn p_chipo(h: f64, r_max: f64) -> f64 {
    sigmoid(clip(h, 2.0 * r_max))
}

/// `beta ln(pi/pi_ref)(a) - beta ln(pi/pi_ref)(b)`.
pub fn h_xpo(policy: &Policy, pi_ref: &Policy, a: Trajectory, b: Trajectory, beta: f64) -> Result<f64> {
    same_prompt(a, b)?;
    let link = |t: Trajectory| -> Result<f64> {
        let p = policy.prob(t);
        if p <= 0.0 {
            return Err(Error::UnboundedRatio {
                policy: 0,
                prompt: t.prompt,
                response: t.response,
            });
        }
        Ok(beta * (p / pi_ref.prob(t)).ln())
    };
    Ok(link(a)? - link(b)?)
}

/// `ln[(2 sigma(eps) - 1) p + (1 - sigma(eps))]`, the log of the privatized
/// probability of the observed label.
pub fn private_log_term(p: f64, epsilon: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::DomainError(format!("probability {p} outside [0, 1]")));
    }
    if epsilon.is_infinite() {
        if p == 0.0 {
            return Err(Error::DomainError("log of zero probability".into()));
        }
        return Ok(p.ln());
    }
    let s = sigma_eps(epsilon)?;
    Ok(((2.0 * s - 1.0) * p + (1.0 - s)).ln())
}

/// Per-response implicit rewards of one policy: `beta phi(ratio)` for chiPO,
/// `beta ln(ratio)` for XPO (`None` where the policy has zero mass).
#[derive(Clone, Debug)]
pub struct ImplicitRewards {
    table: Vec<Vec<Option<f64>>>,
    member: usize,
}

impl ImplicitRewards {
    pub fn new(policy: &Policy, pi_ref: &Policy, beta: f64, flavor: Flavor) -> Self {
        let table = policy
            .rows()
            .iter()
            .zip(pi_ref.rows())
            .map(|(row, reference)| {
                row.iter()
                    .zip(reference)
                    .map(|(p, q)| match flavor {
                        Flavor::Chipo => Some(beta * floored_phi(p / q)),
                        Flavor::Xpo if *p > 0.0 => Some(beta * (p / q).ln()),
                        Flavor::Xpo => None,
                    })
                    .collect()
            })
            .collect();
        ImplicitRewards { table, member: 0 }
    }

    pub(crate) fn for_member(mut self, member: usize) -> Self {
        self.member = member;
        self
    }

    pub fn get(&self, t: Trajectory) -> Result<f64> {
        self.table[t.prompt][t.response].ok_or(Error::UnboundedRatio {
            policy: self.member,
            prompt: t.prompt,
            response: t.response,
        })
    }

    /// Implicit reward difference `h(a, b)`.
    pub fn diff(&self, a: Trajectory, b: Trajectory) -> Result<f64> {
        Ok(self.get(a)? - self.get(b)?)
    }

    /// Modelled probability that `a` beats `b` under the given flavor.
    pub fn pref_prob(&self, a: Trajectory, b: Trajectory, ctx: &LossContext) -> Result<f64> {
        let h = self.diff(a, b)?;
        Ok(match ctx.flavor {
            Flavor::Chipo => p_chipo(h, ctx.r_max),
            Flavor::Xpo => sigmoid(h),
        })
    }
}

/// Private log-likelihood term of one sample, pair oriented by its label.
pub(crate) fn log_term(rewards: &ImplicitRewards, sample_ranked: (Trajectory, Trajectory), ctx: &LossContext) -> Result<f64> {
    let (plus, minus) = sample_ranked;
    private_log_term(rewards.pref_prob(plus, minus, ctx)?, ctx.epsilon)
}

/// `(2 P(first beats second) - 1 - c(eps) z)^2`, with slots kept in order.
pub(crate) fn square_term(rewards: &ImplicitRewards, first: Trajectory, second: Trajectory, label: Label, ctx: &LossContext, c: f64) -> Result<f64> {
    let p = rewards.pref_prob(first, second, ctx)?;
    let d = 2.0 * p - 1.0 - c * label.sign();
    Ok(d * d)
}

pub(crate) fn log_loss_with(rewards: &ImplicitRewards, dataset: &PreferenceDataset, ctx: &LossContext) -> Result<f64> {
    let mut total = 0.0;
    for s in &dataset.samples {
        total += log_term(rewards, s.ranked(), ctx)?;
    }
    Ok(total)
}

pub(crate) fn square_loss_with(rewards: &ImplicitRewards, dataset: &PreferenceDataset, ctx: &LossContext) -> Result<f64> {
    let c = c_eps(ctx.epsilon)?;
    let mut total = 0.0;
    for s in &dataset.samples {
        total += square_term(rewards, s.first_trajectory(), s.second_trajectory(), s.label, ctx, c)?;
    }
    Ok(total)
}

/// Sum over samples of the private log term; pairs are ranked by the
/// observed label. Higher is better.
pub fn log_loss_dataset(policy: &Policy, dataset: &PreferenceDataset, ctx: &LossContext, pi_ref: &Policy) -> Result<f64> {
    let rewards = ImplicitRewards::new(policy, pi_ref, ctx.beta, ctx.flavor);
    log_loss_with(&rewards, dataset, ctx)
}

/// Sum over samples of the debiased square loss on unranked pairs. Lower
/// is better.
pub fn square_loss_dataset(policy: &Policy, dataset: &PreferenceDataset, ctx: &LossContext, pi_ref: &Policy) -> Result<f64> {
    let rewards = ImplicitRewards::new(policy, pi_ref, ctx.beta, ctx.flavor);
    square_loss_with(&rewards, dataset, ctx)
}

fn same_prompt(a: Trajectory, b: Trajectory) -> Result<()> {
    if a.prompt == b.prompt {
        Ok(())
    } else {
        Err(Error::PromptMismatch(a.prompt, b.prompt))
    }
}
