//! Drivers for the two bound-verification commands: calibrate a constant on
//! a clean run, then count violations across the channel grid.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::LemmaSpec;
use crate::noise::{epsilon_serde, ChannelOrder, NoiseConfig};
use crate::rng::RandomSource;
use crate::uclemmas::{
    bias_plateau, verify_lemma_log, verify_lemma_square, BiasPlateau, BoundReport, ConditionalModel,
    RegressionModel,
};

const MODEL_STREAM: u64 = 0;
/// Calibration and every grid cell share trial streams: trial `i` of each
/// cell sees the contexts and clean labels of calibration trial `i`.
const TRIAL_STREAM: u64 = 1;
const PLATEAU_STREAM: u64 = 3;

/// Log-lemma truth rows draw `P(y = +1 | x)` from this range; models are
/// clamped to `LOG_MODEL_BOUNDS`.
pub const LOG_MODEL_RANGE: (f64, f64) = (0.2, 0.8);
pub const LOG_MODEL_BOUNDS: (f64, f64) = (0.02, 0.98);
/// Square-lemma truth rows draw regression values from this range; models
/// are clamped to `SQUARE_MODEL_BOUNDS`.
pub const SQUARE_MODEL_RANGE: (f64, f64) = (-0.3, 0.3);
pub const SQUARE_MODEL_BOUNDS: (f64, f64) = (-0.95, 0.95);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub alpha: f64,
    pub ordering: ChannelOrder,
    pub pairs: usize,
    pub violations: usize,
    pub constant: f64,
    pub max_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct LemmaOutcome {
    pub constant: f64,
    pub calibration: BoundReport,
    pub grid: Vec<(LemmaRow, BoundReport)>,
    pub plateau: Option<BiasPlateau>,
    pub plateau_band: Option<[f64; 2]>,
}

impl LemmaOutcome {
    pub fn total_pairs(&self) -> usize {
        self.grid.iter().map(|(r, _)| r.pairs).sum()
    }

    pub fn total_violations(&self) -> usize {
        self.grid.iter().map(|(r, _)| r.violations).sum()
    }

    /// Human-readable reasons the run would fail `--assert`.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .grid
            .iter()
            .filter(|(r, _)| r.violations > 0)
            .map(|(r, _)| {
                format!(
                    "eps={} alpha={} {}: {} of {} pairs exceed K={}",
                    r.epsilon,
                    r.alpha,
                    r.ordering.name(),
                    r.violations,
                    r.pairs,
                    r.constant
                )
            })
            .collect();
        if let (Some(p), Some([lo, hi])) = (&self.plateau, self.plateau_band) {
            if !(p.slope >= lo && p.slope <= hi) {
                out.push(format!("bias plateau slope {:.3} outside [{lo}, {hi}]", p.slope));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.calibration
            .write_csv(BufWriter::new(File::create(dir.join("bounds_calibration.csv"))?))?;
        let mut w = csv::Writer::from_path(dir.join("lemma_summary.csv"))?;
        for (i, (row, report)) in self.grid.iter().enumerate() {
            w.serialize(row)?;
            report.write_csv(BufWriter::new(File::create(dir.join(format!("bounds_{i:03}.csv")))?))?;
        }
        w.flush()?;
        if let Some(p) = &self.plateau {
            fs::write(dir.join("plateau.json"), serde_json::to_string_pretty(p)? + "\n")?;
        }
        Ok(())
    }
}

fn resolve_constant(spec: &LemmaSpec, calibration: &BoundReport) -> Result<f64> {
    let k = spec.constant.unwrap_or_else(|| calibration.calibrated_constant());
    if !k.is_finite() {
        return Err(Error::DomainError(
            "calibration produced an unbounded ratio; the clean right-hand side was not positive".into(),
        ));
    }
    Ok(k)
}

pub fn run_lemma_log(spec: &LemmaSpec, seed: u64) -> Result<LemmaOutcome> {
    let root = RandomSource::from_seed(seed);
    let weights = spec.weights();
    let models = spec
        .model_rows(LOG_MODEL_RANGE, LOG_MODEL_BOUNDS, &mut root.child(MODEL_STREAM))
        .into_iter()
        .map(ConditionalModel::new)
        .collect::<Result<Vec<_>>>()?;
    let verify = |epsilon: f64, trials: usize| {
        verify_lemma_log(
            &models,
            spec.truth_index,
            &weights,
            epsilon,
            spec.n,
            trials,
            spec.delta,
            &root.child(TRIAL_STREAM),
        )
    };
    let calibration_trials = spec.calibration_trials.unwrap_or(spec.trials * spec.epsilons.len());
    let calibration = verify(f64::INFINITY, calibration_trials)?;
    let constant = resolve_constant(spec, &calibration)?;
    let calibration = calibration.check(constant);
    let mut grid = Vec::new();
    for &epsilon in &spec.epsilons {
        let report = verify(epsilon, spec.trials)?.check(constant);
        grid.push((
            LemmaRow {
                epsilon,
                alpha: 0.0,
                ordering: ChannelOrder::PrivacyOnly,
                pairs: report.entries.len(),
                violations: report.violations,
                constant,
                max_ratio: report.max_ratio,
            },
            report,
        ));
    }
    Ok(LemmaOutcome {
        constant,
        calibration,
        grid,
        plateau: None,
        plateau_band: None,
    })
}

pub fn run_lemma_square(spec: &LemmaSpec, seed: u64) -> Result<LemmaOutcome> {
    let root = RandomSource::from_seed(seed);
    let weights = spec.weights();
    let models = spec
        .model_rows(SQUARE_MODEL_RANGE, SQUARE_MODEL_BOUNDS, &mut root.child(MODEL_STREAM))
        .into_iter()
        .map(RegressionModel::new)
        .collect::<Result<Vec<_>>>()?;
    let verify = |noise: &NoiseConfig, trials: usize| {
        verify_lemma_square(
            &models,
            spec.truth_index,
            &weights,
            noise,
            spec.n,
            trials,
            spec.delta,
            &root.child(TRIAL_STREAM),
        )
    };
    let calibration_trials = spec.calibration_trials.unwrap_or(spec.trials * spec.square_cells());
    let calibration = verify(&NoiseConfig::clean(), calibration_trials)?;
    let constant = resolve_constant(spec, &calibration)?;
    let calibration = calibration.check(constant);
    let mut grid = Vec::new();
    for &ordering in &spec.orderings {
        for &epsilon in &spec.epsilons {
            for &alpha in &spec.alphas {
                let noise = NoiseConfig {
                    epsilon,
                    alpha,
                    ordering,
                    adversary: spec.adversary,
                };
                let report = verify(&noise, spec.trials)?.check(constant);
                grid.push((
                    LemmaRow {
                        epsilon,
                        alpha,
                        ordering,
                        pairs: report.entries.len(),
                        violations: report.violations,
                        constant,
                        max_ratio: report.max_ratio,
                    },
                    report,
                ));
            }
        }
    }
    let plateau = match &spec.plateau {
        Some(p) => {
            let template = NoiseConfig {
                epsilon: p.epsilon,
                alpha: p.alphas[0],
                ordering: p.ordering,
                adversary: spec.adversary,
            };
            Some(bias_plateau(
                &models[spec.truth_index],
                &weights,
                &template,
                &p.alphas,
                p.n,
                p.trials,
                &root.child(PLATEAU_STREAM),
            )?)
        }
        None => None,
    };
    Ok(LemmaOutcome {
        constant,
        calibration,
        grid,
        plateau,
        plateau_band: spec.plateau.as_ref().map(|p| p.slope_band),
    })
}
