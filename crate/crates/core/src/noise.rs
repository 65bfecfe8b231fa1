//! Preference labels and the observation channel: Bradley-Terry sampling,
//! randomized response, Huber corruption and their two compositions.
//!
//! Degenerate stages (`alpha == 0`, `epsilon == inf`) are exact identities
//! and draw nothing from the random source, so runs that differ only in a
//! degenerate stage consume identical random streams.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{sample_response, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// A preference label in {-1, +1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Minus,
    Plus,
}

impl Label {
    pub fn value(self) -> i8 {
        match self {
            Label::Plus => 1,
            Label::Minus => -1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.value())
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Plus => Label::Minus,
            Label::Minus => Label::Plus,
        }
    }

    pub fn from_value(v: i64) -> Result<Label> {
        match v {
            1 => Ok(Label::Plus),
            -1 => Ok(Label::Minus),
            _ => Err(Error::DomainError(format!("label must be -1 or +1, got {v}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Serde helper for privacy parameters: a positive number, or `"inf"` for
/// no privatization.
pub mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn parse(text: &str) -> Option<f64> {
        match text.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
            other => other.parse().ok(),
        }
    }

    pub fn serialize<S: Serializer>(eps: &f64, s: S) -> Result<S::Ok, S::Error> {
        if eps.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*eps)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => {
                parse(&t).ok_or_else(|| serde::de::Error::custom(format!("bad epsilon {t:?}")))
            }
        }
    }

    pub mod vec {
        use super::Repr;
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for eps in v {
                if eps.is_infinite() {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element(eps)?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(|r| match r {
                    Repr::Num(x) => Ok(x),
                    Repr::Text(t) => super::parse(&t)
                        .ok_or_else(|| serde::de::Error::custom(format!("bad epsilon {t:?}"))),
                })
                .collect()
        }
    }
}

/// Which stages the channel applies, and in what order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    Clean,
    PrivacyOnly,
    CorruptionOnly,
    /// Corruption, then privatization.
    #[serde(rename = "ctl")]
    Ctl,
    /// Privatization, then corruption.
    #[serde(rename = "ltc")]
    Ltc,
}

impl ChannelOrder {
    pub fn name(self) -> &'static str {
        match self {
            ChannelOrder::Clean => "clean",
            ChannelOrder::PrivacyOnly => "privacy_only",
            ChannelOrder::CorruptionOnly => "corruption_only",
            ChannelOrder::Ctl => "ctl",
            ChannelOrder::Ltc => "ltc",
        }
    }
}

/// Distribution of the "bad" label drawn with probability alpha. Oblivious:
/// it sees only the label entering the corruption stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    AlwaysFlip,
    ConstantPlus,
    ConstantMinus,
    BernoulliPlus(f64),
}

impl Adversary {
    pub fn name(&self) -> String {
        match self {
            Adversary::AlwaysFlip => "always_flip".into(),
            Adversary::ConstantPlus => "constant_plus".into(),
            Adversary::ConstantMinus => "constant_minus".into(),
            Adversary::BernoulliPlus(p) => format!("bernoulli_plus({p})"),
        }
    }

    /// Mean of the bad label given the mean of the label it replaces.
    pub fn mean(&self, input_mean: f64) -> f64 {
        match self {
            Adversary::AlwaysFlip => -input_mean,
            Adversary::ConstantPlus => 1.0,
            Adversary::ConstantMinus => -1.0,
            Adversary::BernoulliPlus(p) => 2.0 * p - 1.0,
        }
    }

    fn draw(&self, label: Label, rng: &mut RandomSource) -> Label {
        match self {
            Adversary::AlwaysFlip => label.flipped(),
            Adversary::ConstantPlus => Label::Plus,
            Adversary::ConstantMinus => Label::Minus,
            Adversary::BernoulliPlus(p) => {
                if rng.bernoulli(*p) {
                    Label::Plus
                } else {
                    Label::Minus
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub alpha: f64,
    pub ordering: ChannelOrder,
    pub adversary: Adversary,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig {
            epsilon: f64::INFINITY,
            alpha: 0.0,
            ordering: ChannelOrder::Clean,
            adversary: Adversary::AlwaysFlip,
        }
    }

    pub fn privacy(epsilon: f64) -> Self {
        NoiseConfig {
            epsilon,
            ordering: ChannelOrder::PrivacyOnly,
            ..NoiseConfig::clean()
        }
    }

    pub fn corruption(alpha: f64, adversary: Adversary) -> Self {
        NoiseConfig {
            alpha,
            adversary,
            ordering: ChannelOrder::CorruptionOnly,
            ..NoiseConfig::clean()
        }
    }

    pub fn ctl(epsilon: f64, alpha: f64, adversary: Adversary) -> Self {
        NoiseConfig {
            epsilon,
            alpha,
            ordering: ChannelOrder::Ctl,
            adversary,
        }
    }

    pub fn ltc(epsilon: f64, alpha: f64, adversary: Adversary) -> Self {
        NoiseConfig {
            epsilon,
            alpha,
            ordering: ChannelOrder::Ltc,
            adversary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidNoise(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::InvalidNoise(format!(
                "alpha must lie in [0, 0.5), got {}",
                self.alpha
            )));
        }
        if let Adversary::BernoulliPlus(p) = self.adversary {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidNoise(format!("adversary p = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Privacy level actually applied (inf when the ordering has no RR stage).
    pub fn effective_epsilon(&self) -> f64 {
        match self.ordering {
            ChannelOrder::PrivacyOnly | ChannelOrder::Ctl | ChannelOrder::Ltc => self.epsilon,
            ChannelOrder::Clean | ChannelOrder::CorruptionOnly => f64::INFINITY,
        }
    }

    /// Corruption level actually applied.
    pub fn effective_alpha(&self) -> f64 {
        match self.ordering {
            ChannelOrder::CorruptionOnly | ChannelOrder::Ctl | ChannelOrder::Ltc => self.alpha,
            ChannelOrder::Clean | ChannelOrder::PrivacyOnly => 0.0,
        }
    }

    /// Expected observed label given the expected clean label.
    pub fn observed_mean(&self, clean_mean: f64) -> f64 {
        let keep = 2.0 * sigma_eps_unchecked(self.effective_epsilon()) - 1.0;
        let alpha = self.effective_alpha();
        let corrupt = |m: f64| (1.0 - alpha) * m + alpha * self.adversary.mean(m);
        match self.ordering {
            ChannelOrder::Clean => clean_mean,
            ChannelOrder::PrivacyOnly => keep * clean_mean,
            ChannelOrder::CorruptionOnly => corrupt(clean_mean),
            ChannelOrder::Ctl => keep * corrupt(clean_mean),
            ChannelOrder::Ltc => corrupt(keep * clean_mean),
        }
    }
}

fn sigma_eps_unchecked(epsilon: f64) -> f64 {
    if epsilon.is_infinite() {
        1.0
    } else {
        1.0 / (1.0 + (-epsilon).exp())
    }
}

/// `e^eps / (e^eps + 1)`, the randomized-response keep probability.
pub fn sigma_eps(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::DomainError(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(sigma_eps_unchecked(epsilon))
}

/// `(e^eps + 1) / (e^eps - 1)`, the privacy inflation factor.
pub fn c_eps(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::DomainError(format!("epsilon must be positive, got {epsilon}")));
    }
    if epsilon.is_infinite() {
        return Ok(1.0);
    }
    // 1 / tanh(eps / 2), without cancellation for small eps
    let em1 = epsilon.exp_m1();
    Ok((em1 + 2.0) / em1)
}

pub fn sample_bt_label(
    env: &Environment,
    a: Trajectory,
    b: Trajectory,
    rng: &mut RandomSource,
) -> Result<Label> {
    let p = env.bt_prob(a, b)?;
    Ok(if rng.bernoulli(p) { Label::Plus } else { Label::Minus })
}

pub fn randomized_response(label: Label, epsilon: f64, rng: &mut RandomSource) -> Label {
    if epsilon.is_infinite() {
        return label;
    }
    if rng.bernoulli(sigma_eps_unchecked(epsilon)) {
        label
    } else {
        label.flipped()
    }
}

pub fn huber_corrupt(label: Label, alpha: f64, adversary: &Adversary, rng: &mut RandomSource) -> Label {
    if alpha == 0.0 {
        return label;
    }
    if rng.bernoulli(alpha) {
        adversary.draw(label, rng)
    } else {
        label
    }
}

pub fn apply_channel(label: Label, config: &NoiseConfig, rng: &mut RandomSource) -> Label {
    let rr = |l: Label, rng: &mut RandomSource| randomized_response(l, config.epsilon, rng);
    let huber = |l: Label, rng: &mut RandomSource| huber_corrupt(l, config.alpha, &config.adversary, rng);
    match config.ordering {
        ChannelOrder::Clean => label,
        ChannelOrder::PrivacyOnly => rr(label, rng),
        ChannelOrder::CorruptionOnly => huber(label, rng),
        ChannelOrder::Ctl => {
            let corrupted = huber(label, rng);
            rr(corrupted, rng)
        }
        ChannelOrder::Ltc => {
            let private = rr(label, rng);
            huber(private, rng)
        }
    }
}

/// One pair with its observed label. `first` fills the tau_1 slot and
/// `second` the tau_{-1} slot; `label = +1` means the first was reported
/// preferred. `clean_label` is ground truth kept for evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub prompt: usize,
    pub first: usize,
    pub second: usize,
    pub label: Label,
    pub clean_label: Label,
}

impl PreferenceSample {
    pub fn first_trajectory(&self) -> Trajectory {
        Trajectory::new(self.prompt, self.first)
    }

    pub fn second_trajectory(&self) -> Trajectory {
        Trajectory::new(self.prompt, self.second)
    }

    /// (preferred, dispreferred) according to the observed label.
    pub fn ranked(&self) -> (Trajectory, Trajectory) {
        match self.label {
            Label::Plus => (self.first_trajectory(), self.second_trajectory()),
            Label::Minus => (self.second_trajectory(), self.first_trajectory()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub samples: Vec<PreferenceSample>,
    pub channel: NoiseConfig,
    pub seed: u64,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples whose observed label differs from the clean one.
    pub fn flip_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let flips = self.samples.iter().filter(|s| s.label != s.clean_label).count();
        flips as f64 / self.samples.len() as f64
    }

    /// CSV dump: `index,prompt,response_pos_slot,response_neg_slot,observed_label,clean_label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "index",
            "prompt",
            "response_pos_slot",
            "response_neg_slot",
            "observed_label",
            "clean_label",
        ])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.prompt.to_string(),
                s.first.to_string(),
                s.second.to_string(),
                s.label.value().to_string(),
                s.clean_label.value().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws one offline sample from its own stream: prompt from rho, two
/// responses i.i.d. from pi_ref, clean BT label, then the channel.
pub fn sample_offline(env: &Environment, config: &NoiseConfig, rng: &mut RandomSource) -> PreferenceSample {
    let prompt = env.sample_prompt(rng);
    let first = sample_response(env.pi_ref(), prompt, rng);
    let second = sample_response(env.pi_ref(), prompt, rng);
    let a = Trajectory::new(prompt, first);
    let b = Trajectory::new(prompt, second);
    let clean_label = sample_bt_label(env, a, b, rng).expect("same prompt");
    let label = apply_channel(clean_label, config, rng);
    PreferenceSample {
        prompt,
        first,
        second,
        label,
        clean_label,
    }
}

/// `n` samples, sample `i` drawn from child stream `i` of `rng`, so the
/// result does not depend on the thread count.
pub fn generate_offline_dataset(
    env: &Environment,
    n: usize,
    config: &NoiseConfig,
    rng: &RandomSource,
) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::DomainError("dataset size must be at least 1".into()));
    }
    config.validate()?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut child = rng.child(i as u64);
            sample_offline(env, config, &mut child)
        })
        .collect();
    Ok(PreferenceDataset {
        samples,
        channel: *config,
        seed: rng.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_and_c_at_ln3() {
        let eps = 3f64.ln();
        assert!((sigma_eps(eps).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(c_eps(eps).unwrap(), 2.0);
        assert_eq!(sigma_eps(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(c_eps(f64::INFINITY).unwrap(), 1.0);
        assert!(c_eps(0.0).is_err());
        assert!(sigma_eps(-1.0).is_err());
    }

    #[test]
    fn c_eps_identity() {
        for eps in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let c = c_eps(eps).unwrap();
            let s = sigma_eps(eps).unwrap();
            assert!((c * (2.0 * s - 1.0) - 1.0).abs() < 1e-12, "eps = {eps}");
        }
    }

    #[test]
    fn degenerate_stages_draw_nothing() {
        let mut rng = RandomSource::from_seed(1);
        for label in [Label::Plus, Label::Minus] {
            assert_eq!(randomized_response(label, f64::INFINITY, &mut rng), label);
            assert_eq!(huber_corrupt(label, 0.0, &Adversary::ConstantPlus, &mut rng), label);
            assert_eq!(apply_channel(label, &NoiseConfig::clean(), &mut rng), label);
            let ctl = NoiseConfig::ctl(f64::INFINITY, 0.0, Adversary::AlwaysFlip);
            assert_eq!(apply_channel(label, &ctl, &mut rng), label);
        }
        assert_eq!(rng.draws(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(NoiseConfig::ctl(1.0, 0.49, Adversary::AlwaysFlip).validate().is_ok());
        assert!(NoiseConfig::ctl(1.0, 0.5, Adversary::AlwaysFlip).validate().is_err());
        assert!(NoiseConfig::ctl(0.0, 0.1, Adversary::AlwaysFlip).validate().is_err());
        assert!(NoiseConfig::ctl(1.0, -0.1, Adversary::AlwaysFlip).validate().is_err());
        assert!(NoiseConfig::ltc(1.0, 0.1, Adversary::BernoulliPlus(1.5)).validate().is_err());
    }

    #[test]
    fn effective_parameters() {
        let p = NoiseConfig { alpha: 0.3, ..NoiseConfig::privacy(1.0) };
        assert_eq!(p.effective_alpha(), 0.0);
        let c = NoiseConfig { epsilon: 0.5, ..NoiseConfig::corruption(0.2, Adversary::AlwaysFlip) };
        assert!(c.effective_epsilon().is_infinite());
    }

    #[test]
    fn epsilon_json_roundtrip() {
        let cfg = NoiseConfig::ltc(f64::INFINITY, 0.1, Adversary::BernoulliPlus(0.25));
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"inf\""));
        let back: NoiseConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn label_values() {
        assert_eq!(Label::from_value(1).unwrap(), Label::Plus);
        assert_eq!(Label::from_value(-1).unwrap(), Label::Minus);
        assert!(Label::from_value(0).is_err());
        assert_eq!(Label::Plus.flipped().value(), -1);
    }
}
