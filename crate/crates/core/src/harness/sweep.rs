//! Sweep runner: grid expansion, per-run execution and ordered persistence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use rayon::prelude::*;

use crate::env::{Environment, PolicyClass, Regularizer};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, SolverKind};
use crate::harness::fit::{fit_scaling, quantile};
use crate::harness::records::{RecordWriter, RunRecord};
use crate::noise::{generate_offline_dataset, NoiseConfig};
use crate::objectives::{Flavor, LossContext};
use crate::offline::{argmax_first, solve_offline, OfflineSolver};
use crate::online::{run_online, OnlineConfig, OnlineLoss};
use crate::rng::{derive_seed, RandomSource};

/// Gaps below this are reported as assertion failures.
pub const GAP_TOLERANCE: f64 = -1e-9;

const ENV_STREAM: u64 = 0;
const OFFLINE_CLASS_STREAM: u64 = 1;
const ONLINE_CLASS_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

/// One cell of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub run_id: usize,
    pub solver: SolverKind,
    pub size: usize,
    pub noise: NoiseConfig,
    pub replicate: usize,
}

/// Grid points in a fixed order: solver, channel, size, replicate.
pub fn plan(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &solver in &cfg.solvers {
        for noise in cfg.noise.points() {
            for &size in &cfg.sizes {
                for replicate in 0..cfg.seeds.replicates {
                    out.push(RunSpec {
                        run_id: out.len(),
                        solver,
                        size,
                        noise,
                        replicate,
                    });
                }
            }
        }
    }
    out
}

/// Environment and classes shared by every run of one replicate.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub env: Environment,
    pub offline_class: Option<PolicyClass>,
    pub online_class: Option<PolicyClass>,
}

pub fn replicate_seed(cfg: &ExperimentConfig, replicate: usize) -> u64 {
    derive_seed(cfg.seeds.base, replicate as u64)
}

pub fn build_instance(cfg: &ExperimentConfig, replicate: usize) -> Result<Instance> {
    let seed = replicate_seed(cfg, replicate);
    let root = RandomSource::from_seed(seed);
    let mut env_rng = match cfg.env.instance_seed {
        Some(s) => RandomSource::from_seed(s).child(ENV_STREAM),
        None => root.child(ENV_STREAM),
    };
    let env = cfg.env.build(&mut env_rng)?;
    let offline_class = if cfg.solvers.iter().any(|s| !s.is_online()) {
        Some(cfg.class.build(&env, cfg.class.regularizer, &mut root.child(OFFLINE_CLASS_STREAM))?)
    } else {
        None
    };
    let online_class = if cfg.solvers.iter().any(|s| s.is_online()) {
        Some(cfg.class.build(&env, Regularizer::Kl, &mut root.child(ONLINE_CLASS_STREAM))?)
    } else {
        None
    };
    Ok(Instance {
        seed,
        env,
        offline_class,
        online_class,
    })
}

/// Executes one run. When `artifacts` is given, datasets and traces are
/// written there as the config requests.
pub fn run_one(cfg: &ExperimentConfig, inst: &Instance, spec: &RunSpec, artifacts: Option<&Path>) -> Result<RunRecord> {
    let env = &inst.env;
    let beta = cfg.class.beta;
    let data_rng = RandomSource::from_seed(inst.seed).child(DATA_STREAM);
    let mut record = RunRecord {
        run_id: spec.run_id,
        solver: spec.solver.name().to_string(),
        size: spec.size,
        epsilon: spec.noise.epsilon,
        alpha: spec.noise.alpha,
        ordering: spec.noise.ordering,
        adversary: spec.noise.adversary.name(),
        beta,
        gamma: if spec.solver.is_online() { cfg.gamma } else { 0.0 },
        replicate: spec.replicate,
        seed: inst.seed,
        class_size: cfg.class.size,
        chosen_index: 0,
        comparator_index: 0,
        gap: 0.0,
        unregularized_gap: 0.0,
        regularized_gap: 0.0,
        flip_rate: 0.0,
        wall_time: 0.0,
    };
    let start = std::time::Instant::now();
    if spec.solver.is_online() {
        let class = inst.online_class.as_ref().ok_or(Error::EmptyClass)?;
        let loss = match spec.solver {
            SolverKind::PrivXpo => OnlineLoss::PrivateLog,
            _ => OnlineLoss::DebiasedSquare,
        };
        let online = OnlineConfig {
            rounds: spec.size,
            beta,
            gamma: cfg.gamma,
            noise: spec.noise,
            loss,
        };
        let trace = run_online(env, class, &online, &data_rng)?;
        let optimum = env.optimal_kl_policy(beta)?;
        let chosen = class.get(trace.final_index);
        let (comparator, best_value) = best_member(env, class);
        record.chosen_index = trace.final_index;
        record.comparator_index = class.optimal_index().unwrap_or(comparator);
        record.regularized_gap = env.kl_value(&optimum, beta) - env.kl_value(chosen, beta);
        record.unregularized_gap = best_value - env.value(chosen);
        record.gap = record.regularized_gap;
        record.flip_rate = trace.flip_rate();
        if let Some(dir) = artifacts.filter(|_| cfg.write_traces) {
            let file = BufWriter::new(File::create(dir.join(format!("trace_{:05}.csv", spec.run_id)))?);
            trace.write_csv(env, class, beta, file)?;
        }
    } else {
        let class = inst.offline_class.as_ref().ok_or(Error::EmptyClass)?;
        let solver = match spec.solver {
            SolverKind::PrivChipo => OfflineSolver::PrivChipo,
            _ => OfflineSolver::SquareChipo,
        };
        let dataset = generate_offline_dataset(env, spec.size, &spec.noise, &data_rng)?;
        let ctx = LossContext::new(beta, spec.noise.effective_epsilon(), env.r_max(), Flavor::Chipo)?;
        let report = solve_offline(solver, &dataset, class, &ctx, env.pi_ref())?;
        let chosen = class.get(report.chosen_index);
        let (comparator, best_value) = best_member(env, class);
        let reg = cfg.class.regularizer;
        let optimum = env.optimal_policy(beta, reg)?;
        record.chosen_index = report.chosen_index;
        record.comparator_index = comparator;
        record.unregularized_gap = best_value - env.value(chosen);
        record.regularized_gap = env.regularized_value(&optimum, beta, reg) - env.regularized_value(chosen, beta, reg);
        record.gap = record.unregularized_gap;
        record.flip_rate = dataset.flip_rate();
        if let Some(dir) = artifacts.filter(|_| cfg.dump_datasets) {
            let file = BufWriter::new(File::create(dir.join(format!("dataset_{:05}.csv", spec.run_id)))?);
            dataset.write_csv(file)?;
        }
    }
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Member with the largest unregularized value; lowest index on ties.
fn best_member(env: &Environment, class: &PolicyClass) -> (usize, f64) {
    let values: Vec<f64> = class.members().iter().map(|p| env.value(p)).collect();
    let i = argmax_first(&values).unwrap_or(0);
    (i, values[i])
}

pub(crate) fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Error::DomainError(format!("thread pool: {e}")))
}

/// Runs the whole grid. With an output directory, `config.resolved.json`
/// (without the runtime-only `output_dir` and `workers`) is written first,
/// `records.csv` and `timings.csv` are appended line by line in run order as
/// runs finish, and `summary.csv` comes last.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let specs = plan(cfg);
    let pool = pool(cfg.workers)?;
    let instances: Vec<Instance> =
        pool.install(|| (0..cfg.seeds.replicates).into_par_iter().map(|r| build_instance(cfg, r)).collect::<Result<_>>())?;

    let mut writers = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let resolved = ExperimentConfig {
                output_dir: None,
                workers: None,
                ..cfg.clone()
            };
            fs::write(dir.join("config.resolved.json"), resolved.to_json()? + "\n")?;
            let timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
            Some((RecordWriter::create(&dir.join("records.csv"))?, timings))
        }
        None => None,
    };
    if let Some((_, t)) = writers.as_mut() {
        writeln!(t, "run_id,wall_time")?;
    }

    let failed = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    let mut records: Vec<RunRecord> = Vec::with_capacity(specs.len());
    let mut first_error: Option<Error> = None;
    std::thread::scope(|scope| -> Result<()> {
        let specs = &specs;
        let instances = &instances;
        let failed = &failed;
        scope.spawn(move || {
            pool.install(|| {
                specs.par_iter().for_each_with(tx, |tx, spec| {
                    let result = if failed.load(Ordering::Relaxed) {
                        Err(Error::DomainError("sweep aborted".into()))
                    } else {
                        run_one(cfg, &instances[spec.replicate], spec, out)
                    };
                    if result.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    let _ = tx.send((spec.run_id, result));
                });
            });
        });
        let mut pending: BTreeMap<usize, Result<RunRecord>> = BTreeMap::new();
        let mut next = 0;
        for (id, result) in rx {
            pending.insert(id, result);
            while let Some(result) = pending.remove(&next) {
                next += 1;
                match result {
                    Ok(record) if first_error.is_none() => {
                        if let Some((w, t)) = writers.as_mut() {
                            w.append(&record)?;
                            writeln!(t, "{},{}", record.run_id, record.wall_time)?;
                            t.flush()?;
                        }
                        records.push(record);
                    }
                    Ok(_) => {}
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            }
        }
        Ok(())
    })?;
    if let Some(e) = first_error {
        return Err(e);
    }
    if let Some(dir) = out {
        write_summary(&records, &dir.join("summary.csv"))?;
    }
    Ok(records)
}

/// One summary row per grid point, in plan order.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub solver: String,
    pub size: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub ordering: String,
    pub adversary: String,
    pub count: usize,
    pub median_gap: f64,
    pub q25_gap: f64,
    pub q75_gap: f64,
    pub mean_gap: f64,
    pub mean_flip_rate: f64,
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = format!(
            "{}|{}|{:e}|{:e}|{}|{}",
            r.solver,
            r.size,
            r.epsilon,
            r.alpha,
            r.ordering.name(),
            r.adversary
        );
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    keys.iter()
        .map(|k| {
            let g = &groups[k];
            let gaps: Vec<f64> = g.iter().map(|r| r.gap).collect();
            let n = g.len() as f64;
            SummaryRow {
                solver: g[0].solver.clone(),
                size: g[0].size,
                epsilon: g[0].epsilon,
                alpha: g[0].alpha,
                ordering: g[0].ordering.name().to_string(),
                adversary: g[0].adversary.clone(),
                count: g.len(),
                median_gap: quantile(&gaps, 0.5).unwrap_or(f64::NAN),
                q25_gap: quantile(&gaps, 0.25).unwrap_or(f64::NAN),
                q75_gap: quantile(&gaps, 0.75).unwrap_or(f64::NAN),
                mean_gap: gaps.iter().sum::<f64>() / n,
                mean_flip_rate: g.iter().map(|r| r.flip_rate).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_summary(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "solver",
        "size",
        "epsilon",
        "alpha",
        "ordering",
        "adversary",
        "count",
        "median_gap",
        "q25_gap",
        "q75_gap",
        "mean_gap",
        "mean_flip_rate",
    ])?;
    for s in summarize(records) {
        w.write_record([
            s.solver,
            s.size.to_string(),
            s.epsilon.to_string(),
            s.alpha.to_string(),
            s.ordering,
            s.adversary,
            s.count.to_string(),
            s.median_gap.to_string(),
            s.q25_gap.to_string(),
            s.q75_gap.to_string(),
            s.mean_gap.to_string(),
            s.mean_flip_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Assertion failures: negative gaps, and slopes outside `expect_slope` for
/// series with at least three sizes.
pub fn check_records(cfg: &ExperimentConfig, records: &[RunRecord]) -> Vec<String> {
    let mut failures: Vec<String> = records
        .iter()
        .filter(|r| r.gap < GAP_TOLERANCE)
        .map(|r| format!("run {} has negative gap {}", r.run_id, r.gap))
        .collect();
    if let Some([lo, hi]) = cfg.expect_slope {
        let mut series: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
        for r in records {
            let key = format!(
                "{} eps={} alpha={} {} {}",
                r.solver,
                r.epsilon,
                r.alpha,
                r.ordering.name(),
                r.adversary
            );
            series.entry(key).or_default().push(r.clone());
        }
        for (key, rs) in series {
            match fit_scaling(&rs, "size", "gap") {
                Ok(fit) if fit.slope >= lo && fit.slope <= hi => {}
                Ok(fit) => failures.push(format!("{key}: slope {:.3} outside [{lo}, {hi}]", fit.slope)),
                Err(e) => failures.push(format!("{key}: {e}")),
            }
        }
    }
    failures
}
