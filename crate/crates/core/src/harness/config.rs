//! Experiment configuration (JSON) and its validation.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::env::{build_policy_class_with, Environment, PerturbationSpec, Policy, PolicyClass, Regularizer};
use crate::error::{Error, Result};
use crate::harness::plot::PlotSpec;
use crate::noise::{epsilon_serde, Adversary, ChannelOrder, NoiseConfig};
use crate::rng::RandomSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardRule {
    /// I.i.d. uniform on `[0, r_max]`.
    Uniform,
    Table { values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferenceRule {
    Uniform,
    /// Symmetric Dirichlet rows, floored at `min_mass` and renormalized.
    Dirichlet { concentration: f64, min_mass: f64 },
    Table { values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub prompts: usize,
    pub responses: usize,
    pub r_max: f64,
    pub reward: RewardRule,
    pub pi_ref: ReferenceRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    /// Fixes the instance across replicates; otherwise each replicate draws
    /// its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_seed: Option<u64>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            prompts: 4,
            responses: 6,
            r_max: 2.0,
            reward: RewardRule::Uniform,
            pi_ref: ReferenceRule::Dirichlet {
                concentration: 2.0,
                min_mass: 1e-3,
            },
            rho: None,
            instance_seed: None,
        }
    }
}

impl EnvSpec {
    pub fn build(&self, rng: &mut RandomSource) -> Result<Environment> {
        let (k, m) = (self.prompts, self.responses);
        let rho = self.rho.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let reward = match &self.reward {
            RewardRule::Uniform => (0..k)
                .map(|_| (0..m).map(|_| self.r_max * rng.uniform()).collect())
                .collect(),
            RewardRule::Table { values } => values.clone(),
        };
        let pi_ref = match &self.pi_ref {
            ReferenceRule::Uniform => Policy::uniform(&vec![m; k])?,
            ReferenceRule::Dirichlet {
                concentration,
                min_mass,
            } => {
                let gamma = Gamma::new(*concentration, 1.0)
                    .map_err(|e| Error::config("env.pi_ref.concentration", e.to_string()))?;
                let rows = (0..k)
                    .map(|_| {
                        let raw: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
                        let total: f64 = raw.iter().sum();
                        let floored: Vec<f64> = raw.iter().map(|g| (g / total).max(*min_mass)).collect();
                        let z: f64 = floored.iter().sum();
                        floored.into_iter().map(|p| p / z).collect()
                    })
                    .collect();
                Policy::new(rows)?
            }
            ReferenceRule::Table { values } => Policy::new(values.clone())?,
        };
        Environment::new(rho, reward, self.r_max, pi_ref)
    }

    fn validate(&self) -> Result<()> {
        if self.prompts == 0 {
            return Err(Error::config("env.prompts", "must be at least 1"));
        }
        if self.responses < 2 {
            return Err(Error::config("env.responses", "must be at least 2"));
        }
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return Err(Error::config("env.r_max", "must be positive"));
        }
        if let ReferenceRule::Dirichlet {
            concentration,
            min_mass,
        } = self.pi_ref
        {
            if !(concentration.is_finite() && concentration > 0.0) {
                return Err(Error::config("env.pi_ref.concentration", "must be positive"));
            }
            if !(min_mass > 0.0 && min_mass * (self.responses as f64) < 1.0) {
                return Err(Error::config("env.pi_ref.min_mass", "must lie in (0, 1/responses)"));
            }
        }
        // A trial build catches table shape and range problems up front.
        self.build(&mut RandomSource::from_seed(0))
            .map(|_| ())
            .map_err(|e| Error::config("env", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassSpec {
    pub size: usize,
    pub beta: f64,
    /// Regularizer of the planted optimum for offline solvers. Online
    /// solvers always plant the KL optimum.
    #[serde(default = "default_offline_regularizer")]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

fn default_offline_regularizer() -> Regularizer {
    Regularizer::ChiMix
}

impl Default for ClassSpec {
    fn default() -> Self {
        ClassSpec {
            size: 32,
            beta: 1.0,
            regularizer: Regularizer::ChiMix,
            perturbation: PerturbationSpec::default(),
        }
    }
}

impl ClassSpec {
    pub fn build(&self, env: &Environment, regularizer: Regularizer, rng: &mut RandomSource) -> Result<PolicyClass> {
        build_policy_class_with(env, self.beta, self.size, regularizer, &self.perturbation, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseGrid {
    #[serde(with = "epsilon_serde::vec")]
    pub epsilons: Vec<f64>,
    pub alphas: Vec<f64>,
    pub orderings: Vec<ChannelOrder>,
    pub adversaries: Vec<Adversary>,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid {
            epsilons: vec![f64::INFINITY],
            alphas: vec![0.0],
            orderings: vec![ChannelOrder::Clean],
            adversaries: vec![Adversary::AlwaysFlip],
        }
    }
}

impl NoiseGrid {
    /// Channel settings in grid order: ordering, then epsilon, then alpha,
    /// then adversary.
    pub fn points(&self) -> Vec<NoiseConfig> {
        let mut out = Vec::new();
        for &ordering in &self.orderings {
            for &epsilon in &self.epsilons {
                for &alpha in &self.alphas {
                    for &adversary in &self.adversaries {
                        out.push(NoiseConfig {
                            epsilon,
                            alpha,
                            ordering,
                            adversary,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    PrivChipo,
    SquareChipo,
    PrivXpo,
    SquareXpo,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::PrivChipo => "priv_chipo",
            SolverKind::SquareChipo => "square_chipo",
            SolverKind::PrivXpo => "priv_xpo",
            SolverKind::SquareXpo => "square_xpo",
        }
    }

    pub fn is_online(self) -> bool {
        matches!(self, SolverKind::PrivXpo | SolverKind::SquareXpo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSpec {
    pub base: u64,
    pub replicates: usize,
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec { base: 0, replicates: 1 }
    }
}

/// Settings for the two bound-verification commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSpec {
    pub contexts: usize,
    /// Context distribution; uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Candidate models. For the log lemma these are `P(y = +1 | x)` rows,
    /// for the square lemma regression values. Drawn at random when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<Vec<f64>>>,
    pub model_count: usize,
    pub layout: ModelLayout,
    pub truth_index: usize,
    pub n: usize,
    pub trials: usize,
    /// Trials of the clean calibration run; defaults to `trials` times the
    /// number of grid cells so both phases see the same number of pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_trials: Option<usize>,
    pub delta: f64,
    #[serde(with = "epsilon_serde::vec")]
    pub epsilons: Vec<f64>,
    pub alphas: Vec<f64>,
    pub orderings: Vec<ChannelOrder>,
    pub adversary: Adversary,
    /// Fixed constant; otherwise calibrated on a clean run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau: Option<PlateauSpec>,
}

impl Default for LemmaSpec {
    fn default() -> Self {
        LemmaSpec {
            contexts: 4,
            weights: None,
            models: None,
            model_count: 16,
            layout: ModelLayout::default(),
            truth_index: 0,
            n: 2000,
            trials: 50,
            calibration_trials: None,
            delta: crate::uclemmas::DEFAULT_DELTA,
            epsilons: vec![0.5, 1.0, 2.0],
            alphas: vec![0.0, 0.1, 0.3],
            orderings: vec![ChannelOrder::Ctl, ChannelOrder::Ltc],
            adversary: Adversary::AlwaysFlip,
            constant: None,
            plateau: None,
        }
    }
}

/// Bias-versus-alpha fit for the square lemma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauSpec {
    pub alphas: Vec<f64>,
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub ordering: ChannelOrder,
    pub n: usize,
    pub trials: usize,
    /// Accepted slope band for `--assert`.
    pub slope_band: [f64; 2],
}

impl Default for PlateauSpec {
    fn default() -> Self {
        PlateauSpec {
            alphas: vec![0.05, 0.1, 0.2, 0.4],
            epsilon: 1.0,
            ordering: ChannelOrder::Ctl,
            n: 100_000,
            trials: 20,
            slope_band: [1.6, 2.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub class: ClassSpec,
    pub noise: NoiseGrid,
    pub solvers: Vec<SolverKind>,
    /// Sample counts (offline) or round counts (online).
    pub sizes: Vec<usize>,
    /// Optimism weight for the online solvers.
    pub gamma: f64,
    pub seeds: SeedSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub dump_datasets: bool,
    pub write_traces: bool,
    /// Accepted log-log slope band of median gap against size, checked per
    /// series under `--assert`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect_slope: Option<[f64; 2]>,
    pub lemma: LemmaSpec,
    pub plot: PlotSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::default(),
            class: ClassSpec::default(),
            noise: NoiseGrid::default(),
            solvers: vec![SolverKind::PrivChipo],
            sizes: vec![500],
            gamma: 0.0,
            seeds: SeedSpec::default(),
            output_dir: None,
            workers: None,
            dump_datasets: false,
            write_traces: false,
            expect_slope: None,
            lemma: LemmaSpec::default(),
            plot: PlotSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.class.size == 0 {
            return Err(Error::config("class.size", "must be at least 1"));
        }
        if !(self.class.beta.is_finite() && self.class.beta > 0.0) {
            return Err(Error::config("class.beta", "must be positive"));
        }
        let p = &self.class.perturbation;
        if !(p.concentration.is_finite() && p.concentration > 0.0) {
            return Err(Error::config("class.perturbation.concentration", "must be positive"));
        }
        if !(p.min_mix > 0.0 && p.min_mix <= 1.0) {
            return Err(Error::config("class.perturbation.min_mix", "must lie in (0, 1]"));
        }
        for (name, empty) in [
            ("noise.epsilons", self.noise.epsilons.is_empty()),
            ("noise.alphas", self.noise.alphas.is_empty()),
            ("noise.orderings", self.noise.orderings.is_empty()),
            ("noise.adversaries", self.noise.adversaries.is_empty()),
            ("solvers", self.solvers.is_empty()),
            ("sizes", self.sizes.is_empty()),
        ] {
            if empty {
                return Err(Error::config(name, "must not be empty"));
            }
        }
        if let Some(i) = self.sizes.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("sizes[{i}]"), "must be at least 1"));
        }
        if self.seeds.replicates == 0 {
            return Err(Error::config("seeds.replicates", "must be at least 1"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be nonnegative"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        for (i, point) in self.noise.points().iter().enumerate() {
            point
                .validate()
                .map_err(|e| Error::config(format!("noise[{i}]"), e.to_string()))?;
            let privacy_only = matches!(point.ordering, ChannelOrder::Clean | ChannelOrder::PrivacyOnly);
            if self.solvers.contains(&SolverKind::PrivXpo) && !privacy_only {
                return Err(Error::config(
                    "solvers",
                    format!("priv_xpo cannot run under the {} channel", point.ordering.name()),
                ));
            }
        }
        if let Some([lo, hi]) = self.expect_slope {
            if !(lo <= hi) {
                return Err(Error::config("expect_slope", "lower bound exceeds upper bound"));
            }
        }
        self.lemma.validate()
    }

    pub fn with_solvers(mut self, keep: impl Fn(SolverKind) -> bool) -> Result<Self> {
        self.solvers.retain(|s| keep(*s));
        if self.solvers.is_empty() {
            return Err(Error::config("solvers", "no solver of the requested kind"));
        }
        Ok(self)
    }
}

impl LemmaSpec {
    fn validate(&self) -> Result<()> {
        let count = self.models.as_ref().map_or(self.model_count, |m| m.len());
        if self.contexts == 0 {
            return Err(Error::config("lemma.contexts", "must be at least 1"));
        }
        if count == 0 {
            return Err(Error::config("lemma.models", "need at least one model"));
        }
        if self.truth_index >= count {
            return Err(Error::config("lemma.truth_index", "out of range"));
        }
        if let Some(w) = &self.weights {
            let total: f64 = w.iter().sum();
            if w.len() != self.contexts || w.iter().any(|x| *x < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::config("lemma.weights", "must be a distribution over the contexts"));
            }
        }
        if let Some(models) = &self.models {
            if let Some(i) = models.iter().position(|m| m.len() != self.contexts) {
                return Err(Error::config(format!("lemma.models[{i}]"), "wrong number of contexts"));
            }
        }
        if let ModelLayout::Shells { r_min, r_max } = self.layout {
            if !(r_min > 0.0 && r_min <= r_max && r_max.is_finite()) {
                return Err(Error::config("lemma.layout", "need 0 < r_min <= r_max"));
            }
        }
        if self.n == 0 || self.trials == 0 || self.calibration_trials == Some(0) {
            return Err(Error::config("lemma", "n and trials must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("lemma.delta", "must lie in (0, 1)"));
        }
        if self.epsilons.is_empty() || self.alphas.is_empty() || self.orderings.is_empty() {
            return Err(Error::config("lemma", "grids must not be empty"));
        }
        if let Some(i) = self.epsilons.iter().position(|e| !(*e > 0.0)) {
            return Err(Error::config(format!("lemma.epsilons[{i}]"), "must be positive"));
        }
        if let Some(i) = self.alphas.iter().position(|a| !(0.0..1.0).contains(a)) {
            return Err(Error::config(format!("lemma.alphas[{i}]"), "must lie in [0, 1)"));
        }
        if let Some(p) = &self.plateau {
            if p.alphas.len() < 2 || p.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                return Err(Error::config("lemma.plateau.alphas", "need two or more values in (0, 1)"));
            }
            if p.n == 0 || p.trials == 0 {
                return Err(Error::config("lemma.plateau", "n and trials must be positive"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.contexts as f64; self.contexts])
    }

    /// Models as given, or `model_count` rows laid out per `layout`. The
    /// truth row is drawn uniformly from `truth_range`; every row is clamped
    /// to `bounds`.
    pub fn model_rows(&self, truth_range: (f64, f64), bounds: (f64, f64), rng: &mut RandomSource) -> Vec<Vec<f64>> {
        if let Some(m) = &self.models {
            return m.clone();
        }
        let (lo, hi) = truth_range;
        let draw = |rng: &mut RandomSource| -> Vec<f64> { (0..self.contexts).map(|_| lo + (hi - lo) * rng.uniform()).collect() };
        match self.layout {
            ModelLayout::Uniform => (0..self.model_count).map(|_| draw(rng)).collect(),
            ModelLayout::Shells { r_min, r_max } => {
                let truth = draw(rng);
                let others = self.model_count.saturating_sub(1);
                let mut out = Vec::with_capacity(self.model_count);
                let mut k = 0;
                for j in 0..self.model_count {
                    if j == self.truth_index {
                        out.push(truth.clone());
                        continue;
                    }
                    let frac = if others > 1 { k as f64 / (others - 1) as f64 } else { 0.0 };
                    let r = r_min * (r_max / r_min).powf(frac);
                    k += 1;
                    out.push(
                        truth
                            .iter()
                            .map(|t| {
                                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                                (t + sign * r).clamp(bounds.0, bounds.1)
                            })
                            .collect(),
                    );
                }
                out
            }
        }
    }

    /// Number of channel cells the square-loss check visits.
    pub fn square_cells(&self) -> usize {
        self.orderings.len() * self.epsilons.len() * self.alphas.len()
    }
}

/// How candidate models are placed when none are given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelLayout {
    /// Every row i.i.d. uniform on the truth range.
    #[default]
    Uniform,
    /// Non-truth rows at geometrically spaced sup-distances from the truth,
    /// from `r_min` to `r_max`, with random signs per context.
    Shells { r_min: f64, r_max: f64 },
}

/// Output directory: command line, then config, then `PRIVALIGN_OUT`, then
/// `./out`.
pub fn resolve_output_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("PRIVALIGN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}
