//! Tabular ground truth: prompts, responses, rewards, policies and the exact
//! quantities computed from them (values, regularized optima, coverage).
//!
//! A trajectory is a single (prompt, response) pair. Prompts are indexed
//! `0..num_prompts()`, and responses of prompt `s` are indexed
//! `0..num_responses(s)`.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{floored_phi, Flavor};
use crate::rng::RandomSource;

/// Tolerance on per-prompt probability sums.
pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: usize,
    pub response: usize,
}

impl Trajectory {
    pub fn new(prompt: usize, response: usize) -> Self {
        Trajectory { prompt, response }
    }
}

/// Per-prompt response distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(probs: Vec<Vec<f64>>) -> Result<Self> {
        Policy::new(probs)
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(p: Policy) -> Self {
        p.probs
    }
}

impl Policy {
    /// Takes already-normalized probability vectors.
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("no prompts".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidPolicy(format!("prompt {s} has no responses")));
            }
            if let Some(p) = row.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                return Err(Error::InvalidPolicy(format!(
                    "prompt {s} has invalid probability {p}"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidPolicy(format!(
                    "prompt {s} sums to {total}, not 1"
                )));
            }
        }
        Ok(Policy { probs })
    }

    /// Normalizes nonnegative weights per prompt.
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self> {
        let mut probs = weights;
        for (s, row) in probs.iter_mut().enumerate() {
            let total: f64 = row.iter().sum();
            if !(total.is_finite() && total > 0.0) || row.iter().any(|w| *w < 0.0) {
                return Err(Error::InvalidPolicy(format!(
                    "prompt {s} has unusable weights"
                )));
            }
            row.iter_mut().for_each(|w| *w /= total);
        }
        Policy::new(probs)
    }

    /// Uniform distribution over each prompt's responses.
    pub fn uniform(responses_per_prompt: &[usize]) -> Result<Self> {
        Policy::from_weights(
            responses_per_prompt
                .iter()
                .map(|&k| vec![1.0; k])
                .collect(),
        )
    }

    /// Point mass on `choice[s]` for every prompt `s`.
    pub fn deterministic(responses_per_prompt: &[usize], choice: &[usize]) -> Result<Self> {
        if responses_per_prompt.len() != choice.len() {
            return Err(Error::InvalidPolicy("choice length mismatch".into()));
        }
        let probs = responses_per_prompt
            .iter()
            .zip(choice)
            .map(|(&k, &c)| {
                let mut row = vec![0.0; k];
                if c < k {
                    row[c] = 1.0;
                }
                row
            })
            .collect();
        Policy::new(probs)
    }

    pub fn num_prompts(&self) -> usize {
        self.probs.len()
    }

    pub fn row(&self, prompt: usize) -> &[f64] {
        &self.probs[prompt]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn prob(&self, t: Trajectory) -> f64 {
        self.probs[t.prompt][t.response]
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// `(1 - lambda) * self + lambda * other`.
    pub fn mix(&self, other: &Policy, lambda: f64) -> Result<Policy> {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
                    .collect()
            })
            .collect();
        Policy::from_weights(probs)
    }

    fn shape(&self) -> Vec<usize> {
        self.probs.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawEnvironment {
    rho: Vec<f64>,
    reward: Vec<Vec<f64>>,
    r_max: f64,
    pi_ref: Policy,
}

/// Prompt distribution, bounded reward table and a strictly positive
/// reference policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEnvironment", into = "RawEnvironment")]
pub struct Environment {
    rho: Vec<f64>,
    reward: Vec<Vec<f64>>,
    r_max: f64,
    pi_ref: Policy,
}

impl TryFrom<RawEnvironment> for Environment {
    type Error = Error;

    fn try_from(raw: RawEnvironment) -> Result<Self> {
        Environment::new(raw.rho, raw.reward, raw.r_max, raw.pi_ref)
    }
}

impl From<Environment> for RawEnvironment {
    fn from(e: Environment) -> Self {
        RawEnvironment {
            rho: e.rho,
            reward: e.reward,
            r_max: e.r_max,
            pi_ref: e.pi_ref,
        }
    }
}

impl Environment {
    pub fn new(rho: Vec<f64>, reward: Vec<Vec<f64>>, r_max: f64, pi_ref: Policy) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidEnvironment(m));
        if rho.is_empty() {
            return bad("no prompts".into());
        }
        if rho.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("rho has a negative or non-finite entry".into());
        }
        let total: f64 = rho.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return bad(format!("rho sums to {total}"));
        }
        if !(r_max.is_finite() && r_max > 0.0) {
            return bad(format!("r_max must be positive, got {r_max}"));
        }
        if reward.len() != rho.len() || pi_ref.num_prompts() != rho.len() {
            return bad("rho, reward and pi_ref disagree on the number of prompts".into());
        }
        for (s, row) in reward.iter().enumerate() {
            if row.len() != pi_ref.row(s).len() || row.is_empty() {
                return bad(format!("prompt {s}: reward and pi_ref disagree on responses"));
            }
            if let Some(r) = row.iter().find(|r| !(**r >= 0.0 && **r <= r_max)) {
                return bad(format!("prompt {s}: reward {r} outside [0, {r_max}]"));
            }
            if pi_ref.row(s).iter().any(|p| *p <= 0.0) {
                return bad(format!("pi_ref is not strictly positive on prompt {s}"));
            }
        }
        Ok(Environment {
            rho,
            reward,
            r_max,
            pi_ref,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.rho.len()
    }

    pub fn num_responses(&self, prompt: usize) -> usize {
        self.reward[prompt].len()
    }

    pub fn responses_per_prompt(&self) -> Vec<usize> {
        self.reward.iter().map(Vec::len).collect()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn reward(&self, t: Trajectory) -> f64 {
        self.reward[t.prompt][t.response]
    }

    pub fn reward_row(&self, prompt: usize) -> &[f64] {
        &self.reward[prompt]
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn pi_ref(&self) -> &Policy {
        &self.pi_ref
    }

    /// Checks that `policy` is defined on this environment's response sets.
    pub fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.shape() != self.responses_per_prompt() {
            return Err(Error::InvalidPolicy(
                "policy shape does not match the environment".into(),
            ));
        }
        Ok(())
    }

    pub fn check_trajectory(&self, t: Trajectory) -> Result<()> {
        if t.prompt >= self.num_prompts() || t.response >= self.num_responses(t.prompt) {
            return Err(Error::DomainError(format!("unknown trajectory {t:?}")));
        }
        Ok(())
    }

    pub fn sample_prompt(&self, rng: &mut RandomSource) -> usize {
        rng.categorical(&self.rho)
    }

    /// Bradley-Terry probability that `a` is preferred to `b`.
    pub fn bt_prob(&self, a: Trajectory, b: Trajectory) -> Result<f64> {
        if a.prompt != b.prompt {
            return Err(Error::PromptMismatch(a.prompt, b.prompt));
        }
        self.check_trajectory(a)?;
        self.check_trajectory(b)?;
        Ok(crate::objectives::sigmoid(self.reward(a) - self.reward(b)))
    }

    /// Exact J(pi) = E_pi[r].
    pub fn value(&self, policy: &Policy) -> f64 {
        self.state_average(|s| dot(policy.row(s), &self.reward[s]))
    }

    /// rho-averaged KL(pi || pi_ref), with 0 log 0 = 0.
    pub fn kl_divergence(&self, policy: &Policy) -> f64 {
        self.state_average(|s| {
            policy
                .row(s)
                .iter()
                .zip(self.pi_ref.row(s))
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum()
        })
    }

    /// rho-averaged chi-square divergence, `1/2 E_ref[(pi/pi_ref - 1)^2]`.
    pub fn chi_square_divergence(&self, policy: &Policy) -> f64 {
        self.state_average(|s| {
            0.5 * policy
                .row(s)
                .iter()
                .zip(self.pi_ref.row(s))
                .map(|(p, q)| {
                    let d = p / q - 1.0;
                    q * d * d
                })
                .sum::<f64>()
        })
    }

    /// Exact J_beta(pi) = E_pi[r - beta log(pi / pi_ref)].
    pub fn kl_value(&self, policy: &Policy, beta: f64) -> f64 {
        if beta == 0.0 {
            return self.value(policy);
        }
        self.value(policy) - beta * self.kl_divergence(policy)
    }

    /// Exact mixed chi-square + KL regularized value.
    pub fn chi_mix_value(&self, policy: &Policy, beta: f64) -> f64 {
        if beta == 0.0 {
            return self.value(policy);
        }
        self.value(policy)
            - beta * (self.chi_square_divergence(policy) + self.kl_divergence(policy))
    }

    /// Single-policy concentrability E_pi[pi / pi_ref].
    pub fn concentrability(&self, policy: &Policy) -> f64 {
        self.state_average(|s| {
            policy
                .row(s)
                .iter()
                .zip(self.pi_ref.row(s))
                .map(|(p, q)| p * p / q)
                .sum()
        })
    }

    /// Trajectory-level coverability of a class: the mass of the pointwise
    /// maximum of the members' occupancies.
    pub fn coverability(&self, class: &PolicyClass) -> f64 {
        let mut total = 0.0;
        for (s, &w) in self.rho.iter().enumerate() {
            for j in 0..self.num_responses(s) {
                let best = class
                    .members()
                    .iter()
                    .map(|pi| w * pi.row(s)[j])
                    .fold(0.0, f64::max);
                total += best;
            }
        }
        total
    }

    /// Maximizer of `kl_value`: pi*(t) ∝ pi_ref(t) exp(r(t) / beta).
    pub fn optimal_kl_policy(&self, beta: f64) -> Result<Policy> {
        positive("beta", beta)?;
        let probs = (0..self.num_prompts())
            .map(|s| {
                let logits: Vec<f64> = self.reward[s]
                    .iter()
                    .zip(self.pi_ref.row(s))
                    .map(|(r, q)| q.ln() + r / beta)
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter().map(|l| (l - top).exp()).collect()
            })
            .collect();
        Policy::from_weights(probs)
    }

    /// Maximizer of `chi_mix_value`, with its per-prompt normalizers Z(s).
    pub fn optimal_chi_mix_solution(&self, beta: f64) -> Result<ChiMixSolution> {
        positive("beta", beta)?;
        let mut probs = Vec::with_capacity(self.num_prompts());
        let mut normalizers = Vec::with_capacity(self.num_prompts());
        for s in 0..self.num_prompts() {
            let (row, z) = chi_mix_row(&self.reward[s], self.pi_ref.row(s), beta)?;
            probs.push(row);
            normalizers.push(z);
        }
        Ok(ChiMixSolution {
            policy: Policy::from_weights(probs)?,
            normalizers,
        })
    }

    pub fn optimal_chi_mix_policy(&self, beta: f64) -> Result<Policy> {
        Ok(self.optimal_chi_mix_solution(beta)?.policy)
    }

    pub fn optimal_policy(&self, beta: f64, regularizer: Regularizer) -> Result<Policy> {
        match regularizer {
            Regularizer::Kl => self.optimal_kl_policy(beta),
            Regularizer::ChiMix => self.optimal_chi_mix_policy(beta),
        }
    }

    pub fn regularized_value(&self, policy: &Policy, beta: f64, regularizer: Regularizer) -> f64 {
        match regularizer {
            Regularizer::Kl => self.kl_value(policy, beta),
            Regularizer::ChiMix => self.chi_mix_value(policy, beta),
        }
    }

    fn state_average(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.rho
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, w)| w * f(s))
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::DomainError(format!("{name} must be positive, got {x}")))
    }
}

pub fn sample_response(policy: &Policy, prompt: usize, rng: &mut RandomSource) -> usize {
    rng.categorical(policy.row(prompt))
}

/// `u + ln u`.
pub fn phi(u: f64) -> Result<f64> {
    if u > 0.0 {
        Ok(u + u.ln())
    } else {
        Err(Error::DomainError(format!("phi needs u > 0, got {u}")))
    }
}

const PHI_INVERSE_MAX_ITER: usize = 200;

/// The unique `u > 0` with `u + ln u = v`.
pub fn phi_inverse(v: f64) -> Result<f64> {
    let u = phi_inverse_or_zero(v)?;
    if u > 0.0 {
        Ok(u)
    } else {
        Err(Error::DomainError(format!("phi_inverse({v}) underflows")))
    }
}

/// Like [`phi_inverse`] but returns 0 when the root is below the smallest
/// representable positive double.
pub(crate) fn phi_inverse_or_zero(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::DomainError(format!("phi_inverse of {v}")));
    }
    // Solve e^w + w = v for w = ln u; the map is strictly increasing.
    let f = |w: f64| w.exp() + w - v;
    let mut lo = v.min(1.0) - 1.0;
    let mut hi = if v > 1.0 { v.ln() } else { v.max(0.0) };
    let tol = f64::max(1e-10, 8.0 * f64::EPSILON * v.abs());
    let mut w = if v > 1.0 { (v - v.ln()).ln() } else { v.min(0.0) };
    w = w.clamp(lo, hi);
    for _ in 0..PHI_INVERSE_MAX_ITER {
        let fw = f(w);
        if fw.abs() <= tol {
            return Ok(w.exp());
        }
        if fw > 0.0 {
            hi = w;
        } else {
            lo = w;
        }
        let step = fw / (w.exp() + 1.0);
        if step.abs() <= 4.0 * f64::EPSILON * w.abs().max(1.0) {
            return Ok((w - step).exp());
        }
        let newton = w - step;
        w = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            return Ok(w.exp());
        }
    }
    Err(Error::NoConvergence(format!("phi_inverse({v})")))
}

const NORMALIZER_MAX_ITER: usize = 400;

fn chi_mix_row(reward: &[f64], pi_ref: &[f64], beta: f64) -> Result<(Vec<f64>, f64)> {
    let mass = |z: f64| -> Result<f64> {
        let mut total = 0.0;
        for (r, q) in reward.iter().zip(pi_ref) {
            total += q * phi_inverse_or_zero((r - z) / beta)?;
        }
        Ok(total)
    };
    let r_min = reward.iter().cloned().fold(f64::INFINITY, f64::min);
    let r_max = reward.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let q_min = pi_ref.iter().cloned().fold(f64::INFINITY, f64::min);
    // mass is decreasing in z
    let mut lo = r_min - beta * phi(1.0 / q_min)?;
    let mut hi = r_max - beta * phi(1.0)?;
    let mut width = (hi - lo).abs().max(1.0);
    let mut widen = 0;
    while mass(lo)? < 1.0 || mass(hi)? > 1.0 {
        if widen > 64 {
            return Err(Error::NoConvergence("normalizer bracket".into()));
        }
        width *= 2.0;
        lo -= width;
        hi += width;
        widen += 1;
    }
    let mut converged = false;
    for _ in 0..NORMALIZER_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            converged = true;
            break;
        }
        if mass(mid)? > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("normalizer bisection".into()));
    }
    let z = if (mass(lo)? - 1.0).abs() <= (mass(hi)? - 1.0).abs() {
        lo
    } else {
        hi
    };
    let mut row = Vec::with_capacity(reward.len());
    for (r, q) in reward.iter().zip(pi_ref) {
        row.push(q * phi_inverse_or_zero((r - z) / beta)?);
    }
    Ok((row, z))
}

#[derive(Clone, Debug)]
pub struct ChiMixSolution {
    pub policy: Policy,
    /// Z(s) in r = beta * phi(pi* / pi_ref) + Z(s).
    pub normalizers: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Kl,
    ChiMix,
}

/// Finite search class. `optimal_index` marks the planted regularized optimum
/// and `reference_index` the copy of pi_ref, when present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyClass {
    members: Vec<Policy>,
    optimal_index: Option<usize>,
    reference_index: Option<usize>,
}

impl PolicyClass {
    pub fn new(members: Vec<Policy>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyClass);
        }
        let shape = members[0].shape();
        if members.iter().any(|m| m.shape() != shape) {
            return Err(Error::InvalidPolicy("class members differ in shape".into()));
        }
        Ok(PolicyClass {
            members,
            optimal_index: None,
            reference_index: None,
        })
    }

    pub fn with_optimal(mut self, index: usize) -> Result<Self> {
        if index >= self.members.len() {
            return Err(Error::InvalidPolicy(format!("optimal index {index} out of range")));
        }
        self.optimal_index = Some(index);
        Ok(self)
    }

    pub fn with_reference(mut self, index: usize) -> Result<Self> {
        if index >= self.members.len() {
            return Err(Error::InvalidPolicy(format!("reference index {index} out of range")));
        }
        self.reference_index = Some(index);
        Ok(self)
    }

    pub fn members(&self) -> &[Policy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, index: usize) -> &Policy {
        &self.members[index]
    }

    pub fn optimal_index(&self) -> Option<usize> {
        self.optimal_index
    }

    pub fn reference_index(&self) -> Option<usize> {
        self.reference_index
    }

    /// Index of pi_ref: the recorded one, else the first member equal to it.
    pub fn find_reference(&self, env: &Environment) -> Option<usize> {
        self.reference_index.or_else(|| {
            self.members
                .iter()
                .position(|m| m.max_abs_diff(env.pi_ref()) <= 1e-12)
        })
    }

    /// Checks every member against `env` and, when an optimal member is
    /// recorded, that it matches the exact optimum to 1e-9.
    pub fn validate(&self, env: &Environment, beta: f64, regularizer: Regularizer) -> Result<()> {
        for m in &self.members {
            env.check_policy(m)?;
        }
        if let Some(i) = self.optimal_index {
            let exact = env.optimal_policy(beta, regularizer)?;
            let diff = self.members[i].max_abs_diff(&exact);
            if diff > 1e-9 {
                return Err(Error::InvalidPolicy(format!(
                    "planted member {i} differs from the optimum by {diff}"
                )));
            }
        }
        Ok(())
    }
}

/// How the random members of a generated class are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Gamma shape of the multiplicative jitter applied to pi_ref.
    pub concentration: f64,
    /// Smallest mixing weight toward the jittered policy; weights are
    /// log-uniform on [min_mix, 1].
    pub min_mix: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            concentration: 2.0,
            min_mix: 1e-3,
        }
    }
}

const JITTER_ATTEMPTS: usize = 64;

pub fn build_policy_class(
    env: &Environment,
    beta: f64,
    size: usize,
    regularizer: Regularizer,
    rng: &mut RandomSource,
) -> Result<PolicyClass> {
    build_policy_class_with(env, beta, size, regularizer, &PerturbationSpec::default(), rng)
}

/// A realizable class: the exact optimum, pi_ref, and `size - 2` mixtures
/// `(1 - lambda) pi* + lambda q` with `q` a jittered pi_ref whose
/// unregularized value does not exceed the optimum's. Positions are shuffled.
pub fn build_policy_class_with(
    env: &Environment,
    beta: f64,
    size: usize,
    regularizer: Regularizer,
    spec: &PerturbationSpec,
    rng: &mut RandomSource,
) -> Result<PolicyClass> {
    if size == 0 {
        return Err(Error::EmptyClass);
    }
    positive("concentration", spec.concentration)?;
    if !(spec.min_mix > 0.0 && spec.min_mix <= 1.0) {
        return Err(Error::DomainError(format!(
            "min_mix must lie in (0, 1], got {}",
            spec.min_mix
        )));
    }
    let optimum = env.optimal_policy(beta, regularizer)?;
    let optimum_value = env.value(&optimum);
    let gamma = Gamma::new(spec.concentration, 1.0)
        .map_err(|e| Error::DomainError(format!("jitter distribution: {e}")))?;

    let mut members = vec![optimum.clone()];
    if size >= 2 {
        members.push(env.pi_ref().clone());
    }
    while members.len() < size {
        let mut jittered = env.pi_ref().clone();
        for _ in 0..JITTER_ATTEMPTS {
            let weights = (0..env.num_prompts())
                .map(|s| {
                    env.pi_ref()
                        .row(s)
                        .iter()
                        .map(|q| q * gamma.sample(rng).max(1e-300))
                        .collect()
                })
                .collect();
            let candidate = Policy::from_weights(weights)?;
            if env.value(&candidate) <= optimum_value {
                jittered = candidate;
                break;
            }
        }
        let lambda = ((1.0 - rng.uniform()) * spec.min_mix.ln()).exp();
        members.push(optimum.mix(&jittered, lambda)?);
    }

    // Fisher-Yates, tracking where the planted members land.
    let mut order: Vec<usize> = (0..size).collect();
    for i in (1..size).rev() {
        let j = (rng.uniform() * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    let shuffled: Vec<Policy> = order.iter().map(|&k| members[k].clone()).collect();
    let optimal_index = order.iter().position(|&k| k == 0).unwrap_or(0);
    let mut class = PolicyClass::new(shuffled)?.with_optimal(optimal_index)?;
    if size >= 2 {
        let reference = order.iter().position(|&k| k == 1).unwrap_or(1);
        class = class.with_reference(reference)?;
    }
    Ok(class)
}

/// Bound on implicit-reward differences over the class (chiPO flavor) or on
/// `|beta log(pi/pi_ref)|` (XPO flavor), by exhaustive enumeration.
pub fn compute_vmax(env: &Environment, class: &PolicyClass, beta: f64, flavor: Flavor) -> Result<f64> {
    let mut vmax: f64 = 0.0;
    for (m, pi) in class.members().iter().enumerate() {
        for s in 0..env.num_prompts() {
            let row = pi.row(s);
            let reference = env.pi_ref().row(s);
            match flavor {
                Flavor::Chipo => {
                    let values: Vec<f64> = row
                        .iter()
                        .zip(reference)
                        .map(|(p, q)| beta * floored_phi(p / q))
                        .collect();
                    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                    vmax = vmax.max(hi - lo);
                }
                Flavor::Xpo => {
                    for (j, (p, q)) in row.iter().zip(reference).enumerate() {
                        if *p <= 0.0 {
                            return Err(Error::UnboundedRatio {
                                policy: m,
                                prompt: s,
                                response: j,
                            });
                        }
                        vmax = vmax.max((beta * (p / q).ln()).abs());
                    }
                }
            }
        }
    }
    Ok(vmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_prompt(reward: Vec<f64>, pi_ref: Vec<f64>, r_max: f64) -> Environment {
        Environment::new(vec![1.0], vec![reward], r_max, Policy::new(vec![pi_ref]).unwrap())
            .unwrap()
    }

    #[test]
    fn rejects_bad_environments() {
        let pi = Policy::new(vec![vec![0.5, 0.5]]).unwrap();
        assert!(Environment::new(vec![0.9], vec![vec![0.0, 1.0]], 1.0, pi.clone()).is_err());
        assert!(Environment::new(vec![1.0], vec![vec![0.0, 1.5]], 1.0, pi.clone()).is_err());
        let zero = Policy::new(vec![vec![1.0, 0.0]]).unwrap();
        assert!(Environment::new(vec![1.0], vec![vec![0.0, 1.0]], 1.0, zero).is_err());
    }

    #[test]
    fn policy_rejects_unnormalized_rows() {
        assert!(Policy::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(Policy::new(vec![vec![-0.1, 1.1]]).is_err());
        assert!(Policy::new(vec![vec![]]).is_err());
    }

    #[test]
    fn bt_prob_values() {
        let env = single_prompt(vec![1.0, 0.0, 1.0], vec![1.0 / 3.0; 3], 1.0);
        let (a, b, c) = (Trajectory::new(0, 0), Trajectory::new(0, 1), Trajectory::new(0, 2));
        assert_eq!(env.bt_prob(a, c).unwrap(), 0.5);
        let e = std::f64::consts::E;
        assert!((env.bt_prob(a, b).unwrap() - e / (1.0 + e)).abs() < 1e-15);
        assert!((env.bt_prob(a, b).unwrap() - 0.731059).abs() < 1e-6);
        let two = Environment::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            1.0,
            Policy::uniform(&[2, 2]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            two.bt_prob(Trajectory::new(0, 0), Trajectory::new(1, 0)),
            Err(Error::PromptMismatch(0, 1))
        ));
    }

    #[test]
    fn phi_and_inverse() {
        assert_eq!(phi(1.0).unwrap(), 1.0);
        assert!(phi(0.0).is_err());
        assert!(phi(-1.0).is_err());
        assert!((phi_inverse(1.0).unwrap() - 1.0).abs() < 1e-10);
        for v in [-700.0, -60.0, -27.0, -3.0, 0.0, 0.5, 3.0, 40.0, 1e6] {
            let u = phi_inverse(v).unwrap();
            assert!(u > 0.0);
            let tol = f64::max(1e-10, 8.0 * f64::EPSILON * v.abs());
            assert!((phi(u).unwrap() - v).abs() <= tol, "v = {v}");
        }
    }

    #[test]
    fn uniform_policy_value() {
        let env = single_prompt(vec![0.0, 1.0], vec![0.5, 0.5], 1.0);
        assert_eq!(env.value(env.pi_ref()), 0.5);
        assert_eq!(env.kl_value(env.pi_ref(), 0.7), 0.5);
        assert_eq!(env.chi_mix_value(env.pi_ref(), 0.7), 0.5);
    }

    #[test]
    fn point_mass_concentrability() {
        let env = single_prompt(vec![0.0, 0.5, 1.0], vec![0.25, 0.25, 0.5], 1.0);
        let point = Policy::deterministic(&[3], &[0]).unwrap();
        assert!((env.concentrability(&point) - 4.0).abs() < 1e-12);
        assert!((env.concentrability(env.pi_ref()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_example() {
        let env = single_prompt(vec![1.0, 0.0], vec![0.5, 0.5], 1.0);
        let pi = env.optimal_kl_policy(1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((pi.row(0)[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((pi.row(0)[1] - 1.0 / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_optima_are_reference() {
        let env = single_prompt(vec![0.7; 3], vec![0.2, 0.3, 0.5], 1.0);
        let kl = env.optimal_kl_policy(0.5).unwrap();
        assert!(kl.max_abs_diff(env.pi_ref()) < 1e-12);
        let sol = env.optimal_chi_mix_solution(0.5).unwrap();
        assert!(sol.policy.max_abs_diff(env.pi_ref()) < 1e-9);
        assert!((sol.normalizers[0] - (0.7 - 0.5)).abs() < 1e-9);
    }

    #[test]
    fn coverability_of_point_masses() {
        let env = single_prompt(vec![0.0, 1.0], vec![0.5, 0.5], 1.0);
        let a = Policy::deterministic(&[2], &[0]).unwrap();
        let b = Policy::deterministic(&[2], &[1]).unwrap();
        let class = PolicyClass::new(vec![a, b]).unwrap();
        assert!((env.coverability(&class) - 2.0).abs() < 1e-15);
        let single = PolicyClass::new(vec![env.pi_ref().clone()]).unwrap();
        assert!((env.coverability(&single) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vmax_examples() {
        let env = single_prompt(vec![0.0, 1.0], vec![0.5, 0.5], 1.0);
        let reference = PolicyClass::new(vec![env.pi_ref().clone()]).unwrap();
        assert_eq!(compute_vmax(&env, &reference, 1.0, Flavor::Chipo).unwrap(), 0.0);
        assert_eq!(compute_vmax(&env, &reference, 1.0, Flavor::Xpo).unwrap(), 0.0);

        // ratios (2, 0.5) on a 4-response prompt
        let env = single_prompt(vec![0.0; 4], vec![0.25; 4], 1.0);
        let pi = Policy::new(vec![vec![0.5, 0.125, 0.25, 0.125]]).unwrap();
        let class = PolicyClass::new(vec![pi]).unwrap();
        let v = compute_vmax(&env, &class, 1.0, Flavor::Chipo).unwrap();
        assert!((v - 2.886294361119891).abs() < 1e-12);

        let point = PolicyClass::new(vec![Policy::deterministic(&[4], &[1]).unwrap()]).unwrap();
        assert!(matches!(
            compute_vmax(&env, &point, 1.0, Flavor::Xpo),
            Err(Error::UnboundedRatio { policy: 0, prompt: 0, response: 0 })
        ));
    }

    #[test]
    fn class_construction_contract() {
        let env = single_prompt(vec![0.0, 0.4, 1.0], vec![0.2, 0.3, 0.5], 1.0);
        let mut rng = RandomSource::from_seed(3);
        let one = build_policy_class(&env, 0.5, 1, Regularizer::Kl, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.optimal_index(), Some(0));
        let big = build_policy_class(&env, 0.5, 32, Regularizer::ChiMix, &mut rng).unwrap();
        assert_eq!(big.len(), 32);
        big.validate(&env, 0.5, Regularizer::ChiMix).unwrap();
        let r = big.reference_index().unwrap();
        assert!(big.get(r).max_abs_diff(env.pi_ref()) == 0.0);
        assert_eq!(big.find_reference(&env), Some(r));
        assert!(matches!(
            build_policy_class(&env, 0.5, 0, Regularizer::Kl, &mut rng),
            Err(Error::EmptyClass)
        ));
    }
}
