//! Finite-class estimators for binary labels observed through the channel,
//! with the exact error functionals and bound checks that go with them.
//!
//! Contexts are indices `0..k` drawn i.i.d. from a weight vector, so the
//! conditional expectations on the error side have closed forms:
//! `n * sum_x w(x) * gap(x)^2`.
//!
//! The bounds hide their constants. A verification run therefore computes
//! raw ratios `lhs / rhs`; a clean run (no privacy, no corruption) fixes
//! `K` as its largest ratio and noisy runs are checked against that same
//! `K`. What is tested is the scaling in `c(eps)` and `alpha`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fit::fit_line;
use crate::noise::{apply_channel, c_eps, sigma_eps, ChannelOrder, Label, NoiseConfig};
use crate::offline::argmin_first;
use crate::rng::RandomSource;

/// Confidence level used in the bound right-hand sides.
pub const DEFAULT_DELTA: f64 = 0.05;

/// `P(y = +1 | x)` for each context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub p_plus: Vec<f64>,
}

impl ConditionalModel {
    pub fn new(p_plus: Vec<f64>) -> Result<Self> {
        if p_plus.is_empty() {
            return Err(Error::DomainError("model has no contexts".into()));
        }
        if p_plus.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::DomainError("probabilities must lie in [0, 1]".into()));
        }
        Ok(ConditionalModel { p_plus })
    }

    fn prob(&self, x: usize, label: Label) -> f64 {
        match label {
            Label::Plus => self.p_plus[x],
            Label::Minus => 1.0 - self.p_plus[x],
        }
    }
}

/// Regression function `h(x) in [-1, 1]`, the predicted mean label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub values: Vec<f64>,
}

impl RegressionModel {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DomainError("model has no contexts".into()));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::DomainError("regression values must lie in [-1, 1]".into()));
        }
        Ok(RegressionModel { values })
    }

    pub fn constant(value: f64, contexts: usize) -> Result<Self> {
        RegressionModel::new(vec![value; contexts])
    }

    /// Label distribution with mean `h(x)`.
    pub fn as_conditional(&self) -> ConditionalModel {
        ConditionalModel {
            p_plus: self.values.iter().map(|h| 0.5 * (1.0 + h)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub context: usize,
    pub clean: Label,
    pub observed: Label,
}

/// Observed stream; `channel` is metadata only and estimators never read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledStream {
    pub records: Vec<StreamRecord>,
    pub channel: Option<NoiseConfig>,
}

impl LabeledStream {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn without_channel(&self) -> LabeledStream {
        LabeledStream {
            records: self.records.clone(),
            channel: None,
        }
    }
}

/// `n` records with contexts i.i.d. from `weights`; record `i` uses child
/// stream `i`.
pub fn generate_stream(
    weights: &[f64],
    truth: &ConditionalModel,
    noise: &NoiseConfig,
    n: usize,
    rng: &RandomSource,
) -> Result<LabeledStream> {
    noise.validate()?;
    check_weights(weights, truth.p_plus.len())?;
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.child(i as u64);
            let context = r.categorical(weights);
            let clean = if r.bernoulli(truth.p_plus[context]) {
                Label::Plus
            } else {
                Label::Minus
            };
            let observed = apply_channel(clean, noise, &mut r);
            StreamRecord { context, clean, observed }
        })
        .collect();
    Ok(LabeledStream {
        records,
        channel: Some(*noise),
    })
}

fn check_weights(weights: &[f64], contexts: usize) -> Result<()> {
    if weights.len() != contexts {
        return Err(Error::DomainError("context weights do not match the models".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::DomainError("context weights must be a distribution".into()));
    }
    Ok(())
}

/// Privatized negative log-likelihood `sum_t -ln P~(z_t | x_t)`.
pub fn private_nll(model: &ConditionalModel, stream: &LabeledStream, epsilon: f64) -> Result<f64> {
    let s = sigma_eps(epsilon)?;
    let mut total = 0.0;
    for r in &stream.records {
        let p = (2.0 * s - 1.0) * model.prob(r.context, r.observed) + (1.0 - s);
        total -= if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    }
    Ok(total)
}

/// Argmin of the privatized negative log-likelihood; lowest index on ties.
pub fn mle_under_ldp(models: &[ConditionalModel], stream: &LabeledStream, epsilon: f64) -> Result<usize> {
    let losses = models
        .iter()
        .map(|m| private_nll(m, stream, epsilon))
        .collect::<Result<Vec<_>>>()?;
    argmin_first(&losses).ok_or(Error::EmptyClass)
}

/// Debiased square loss `sum_t (h(x_t) - c(eps) z_t)^2`.
pub fn debiased_square_loss(model: &RegressionModel, stream: &LabeledStream, epsilon: f64) -> Result<f64> {
    let c = c_eps(epsilon)?;
    Ok(stream
        .records
        .iter()
        .map(|r| {
            let d = model.values[r.context] - c * r.observed.sign();
            d * d
        })
        .sum())
}

/// Argmin of the debiased square loss. Uses only the observed labels.
pub fn least_squares_under_corruption(models: &[RegressionModel], stream: &LabeledStream, epsilon: f64) -> Result<usize> {
    let losses = models
        .iter()
        .map(|m| debiased_square_loss(m, stream, epsilon))
        .collect::<Result<Vec<_>>>()?;
    argmin_first(&losses).ok_or(Error::EmptyClass)
}

/// `sum_t |p_model(x_t) - p_truth(x_t)|^2`: binary TV is the gap in the
/// plus-probability.
pub fn sum_squared_tv(model: &ConditionalModel, truth: &ConditionalModel, contexts_seen: &[usize]) -> f64 {
    contexts_seen
        .iter()
        .map(|&x| {
            let d = model.p_plus[x] - truth.p_plus[x];
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub trial: usize,
    pub model_index: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub entries: Vec<BoundEntry>,
    pub max_ratio: f64,
    /// Constant the entries were checked against, once set.
    pub constant: Option<f64>,
    pub violations: usize,
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= 0.0 {
        0.0
    } else if rhs <= 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

impl BoundReport {
    fn from_entries(entries: Vec<BoundEntry>) -> Self {
        let max_ratio = entries.iter().map(|e| e.ratio).fold(0.0, f64::max);
        BoundReport {
            entries,
            max_ratio,
            constant: None,
            violations: 0,
        }
    }

    /// Counts entries with `lhs > k * rhs`.
    pub fn check(mut self, k: f64) -> Self {
        self.violations = self.entries.iter().filter(|e| e.lhs > k * e.rhs).count();
        self.constant = Some(k);
        self
    }

    /// The calibrated constant: largest observed ratio.
    pub fn calibrated_constant(&self) -> f64 {
        self.max_ratio
    }

    /// CSV with columns `trial,model_index,lhs,rhs,ratio`, then one row
    /// `summary,<pairs>,<violations>,<constant>,<max_ratio>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "model_index", "lhs", "rhs", "ratio"])?;
        for e in &self.entries {
            w.write_record([
                e.trial.to_string(),
                e.model_index.to_string(),
                e.lhs.to_string(),
                e.rhs.to_string(),
                e.ratio.to_string(),
            ])?;
        }
        w.write_record([
            "summary".to_string(),
            self.entries.len().to_string(),
            self.violations.to_string(),
            self.constant.map_or_else(|| "nan".to_string(), |k| k.to_string()),
            self.max_ratio.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Raw ratios for the log-loss bound:
/// `lhs = n sum_x w(x) (p_theta - p*)^2`,
/// `rhs = c(eps)^2 (L(theta) - L(theta*) + ln(|models| / delta))`.
/// Trial `i` uses child stream `i` of `rng`.
#[allow(clippy::too_many_arguments)]
pub fn verify_lemma_log(
    models: &[ConditionalModel],
    truth_index: usize,
    weights: &[f64],
    epsilon: f64,
    n: usize,
    trials: usize,
    delta: f64,
    rng: &RandomSource,
) -> Result<BoundReport> {
    if models.is_empty() {
        return Err(Error::EmptyClass);
    }
    let truth = models
        .get(truth_index)
        .ok_or_else(|| Error::DomainError("truth index out of range".into()))?;
    let c = c_eps(epsilon)?;
    let noise = if epsilon.is_infinite() {
        NoiseConfig::clean()
    } else {
        NoiseConfig::privacy(epsilon)
    };
    let log_term = (models.len() as f64 / delta).ln();
    let population: Vec<f64> = models
        .iter()
        .map(|m| {
            n as f64
                * weights
                    .iter()
                    .enumerate()
                    .map(|(x, w)| w * (m.p_plus[x] - truth.p_plus[x]).powi(2))
                    .sum::<f64>()
        })
        .collect();
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<BoundEntry>> {
            let stream = generate_stream(weights, truth, &noise, n, &rng.child(trial as u64))?;
            let losses = models
                .iter()
                .map(|m| private_nll(m, &stream, epsilon))
                .collect::<Result<Vec<_>>>()?;
            Ok(models
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let lhs = population[i];
                    let rhs = c * c * (losses[i] - losses[truth_index] + log_term);
                    BoundEntry { trial, model_index: i, lhs, rhs, ratio: ratio(lhs, rhs) }
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::from_entries(per_trial.into_iter().flatten().collect()))
}

/// Corruption term of the square-loss bound: `n alpha^2` when corruption
/// precedes privatization, `n c^2 alpha^2` when it follows.
pub fn corruption_term(noise: &NoiseConfig, n: usize) -> Result<f64> {
    let alpha = noise.effective_alpha();
    let c = c_eps(noise.effective_epsilon())?;
    Ok(match noise.ordering {
        ChannelOrder::Ltc => n as f64 * c * c * alpha * alpha,
        _ => n as f64 * alpha * alpha,
    })
}

/// Raw ratios for the square-loss bound:
/// `lhs = n sum_x w(x) (h - h*)^2`,
/// `rhs = L_sq(h) - L_sq(h*) + c(eps)^2 ln(|models| / delta) + corruption_term`.
#[allow(clippy::too_many_arguments)]
pub fn verify_lemma_square(
    models: &[RegressionModel],
    truth_index: usize,
    weights: &[f64],
    noise: &NoiseConfig,
    n: usize,
    trials: usize,
    delta: f64,
    rng: &RandomSource,
) -> Result<BoundReport> {
    if models.is_empty() {
        return Err(Error::EmptyClass);
    }
    let truth = models
        .get(truth_index)
        .ok_or_else(|| Error::DomainError("truth index out of range".into()))?;
    let epsilon = noise.effective_epsilon();
    let c = c_eps(epsilon)?;
    let extra = c * c * (models.len() as f64 / delta).ln() + corruption_term(noise, n)?;
    let population: Vec<f64> = models
        .iter()
        .map(|m| {
            n as f64
                * weights
                    .iter()
                    .enumerate()
                    .map(|(x, w)| w * (m.values[x] - truth.values[x]).powi(2))
                    .sum::<f64>()
        })
        .collect();
    let truth_labels = truth.as_conditional();
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<BoundEntry>> {
            let stream = generate_stream(weights, &truth_labels, noise, n, &rng.child(trial as u64))?;
            let losses = models
                .iter()
                .map(|m| debiased_square_loss(m, &stream, epsilon))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..models.len())
                .map(|i| {
                    let lhs = population[i];
                    let rhs = losses[i] - losses[truth_index] + extra;
                    BoundEntry { trial, model_index: i, lhs, rhs, ratio: ratio(lhs, rhs) }
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::from_entries(per_trial.into_iter().flatten().collect()))
}

/// Per-sample excess `sum_x w(x) (h_hat(x) - h*(x))^2` of the unconstrained
/// least-squares fit, `h_hat(x)` = mean of `c(eps) z` over records at `x`
/// (0 where no record landed).
pub fn greedy_excess(truth: &RegressionModel, weights: &[f64], noise: &NoiseConfig, n: usize, rng: &RandomSource) -> Result<f64> {
    let stream = generate_stream(weights, &truth.as_conditional(), noise, n, rng)?;
    let c = c_eps(noise.effective_epsilon())?;
    let k = truth.values.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for r in &stream.records {
        sums[r.context] += c * r.observed.sign();
        counts[r.context] += 1;
    }
    Ok((0..k)
        .map(|x| {
            let fit = if counts[x] > 0 { sums[x] / counts[x] as f64 } else { 0.0 };
            weights[x] * (fit - truth.values[x]).powi(2)
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPlateau {
    pub alphas: Vec<f64>,
    /// Mean greedy excess over trials, per alpha.
    pub excess: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Log-log slope of the greedy per-sample excess against `alpha`, for a
/// corrupted channel template (its alpha is overridden). Trial `i` of every
/// alpha shares child stream `i`.
pub fn bias_plateau(
    truth: &RegressionModel,
    weights: &[f64],
    template: &NoiseConfig,
    alphas: &[f64],
    n: usize,
    trials: usize,
    rng: &RandomSource,
) -> Result<BiasPlateau> {
    if alphas.iter().any(|a| *a <= 0.0) {
        return Err(Error::DomainError("plateau alphas must be positive".into()));
    }
    let mut excess = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let noise = NoiseConfig { alpha, ..*template };
        let values = (0..trials)
            .into_par_iter()
            .map(|i| greedy_excess(truth, weights, &noise, n, &rng.child(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        excess.push(values.iter().sum::<f64>() / trials.max(1) as f64);
    }
    let xs: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
    let ys: Vec<f64> = excess.iter().map(|e| e.ln()).collect();
    let (slope, intercept, r2) = fit_line(&xs, &ys)?;
    Ok(BiasPlateau {
        alphas: alphas.to_vec(),
        excess,
        slope,
        intercept,
        r2,
    })
}
