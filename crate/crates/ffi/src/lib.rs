//! C ABI over the simulation core.
//!
//! Every fallible function returns a [`PaStatus`]; on failure the message is
//! kept per thread and read back with [`pa_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use privalign::env::{build_policy_class, Environment, PolicyClass, Regularizer};
use privalign::harness::config::{EnvSpec, ExperimentConfig};
use privalign::harness::sweep::run_sweep;
use privalign::noise::{c_eps, generate_offline_dataset, sigma_eps, Adversary, ChannelOrder, NoiseConfig, PreferenceDataset};
use privalign::objectives::{Flavor, LossContext};
use privalign::offline::{solve_offline, OfflineSolver};
use privalign::rng::RandomSource;
use privalign::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DomainError = 3,
    NoConvergence = 4,
    EmptyClass = 5,
    ConfigError = 6,
    IoError = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaRegularizer {
    Kl = 0,
    ChiMix = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaOrdering {
    Clean = 0,
    PrivacyOnly = 1,
    CorruptionOnly = 2,
    Ctl = 3,
    Ltc = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaAdversary {
    AlwaysFlip = 0,
    ConstantPlus = 1,
    ConstantMinus = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaOfflineSolver {
    PrivChipo = 0,
    SquareChipo = 1,
}

/// Opaque environment handle.
pub struct PaEnvironment(Environment);
/// Opaque policy class handle.
pub struct PaPolicyClass(PolicyClass);
/// Opaque preference dataset handle.
pub struct PaDataset(PreferenceDataset);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(err: &Error) -> PaStatus {
    match err {
        Error::DomainError(_) | Error::PromptMismatch(..) | Error::UnboundedRatio { .. } => PaStatus::DomainError,
        Error::NoConvergence(_) => PaStatus::NoConvergence,
        Error::EmptyClass => PaStatus::EmptyClass,
        Error::Config { .. } | Error::Json(_) => PaStatus::ConfigError,
        Error::Io(_) | Error::Csv(_) => PaStatus::IoError,
        _ => PaStatus::InvalidArgument,
    }
}

fn guard<F>(f: F) -> PaStatus
where
    F: FnOnce() -> Result<(), (PaStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PaStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PaStatus::Panic
        }
    }
}

fn lift<T>(r: privalign::Result<T>) -> Result<T, (PaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (PaStatus, String) {
    (PaStatus::NullPointer, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (PaStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PaStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (PaStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// (excluding the terminator). `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Keep probability of randomized response. Pass `INFINITY` for no privacy.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_sigma_eps(epsilon: f64, out: *mut f64) -> PaStatus {
    guard(|| {
        *out_arg(out, "out")? = lift(sigma_eps(epsilon))?;
        Ok(())
    })
}

/// Privacy inflation factor.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_c_eps(epsilon: f64, out: *mut f64) -> PaStatus {
    guard(|| {
        *out_arg(out, "out")? = lift(c_eps(epsilon))?;
        Ok(())
    })
}

/// Parses an environment from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_from_json(json: *const c_char, out: *mut *mut PaEnvironment) -> PaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = str_arg(json, "json")?;
        let env: Environment = lift(serde_json::from_str(text).map_err(Error::from))?;
        *out = Box::into_raw(Box::new(PaEnvironment(env)));
        Ok(())
    })
}

/// Draws a random instance: uniform rewards on `[0, r_max]`, Dirichlet(2)
/// reference rows floored at 1e-3, uniform prompt distribution.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_generate(
    prompts: usize,
    responses: usize,
    r_max: f64,
    seed: u64,
    out: *mut *mut PaEnvironment,
) -> PaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = EnvSpec {
            prompts,
            responses,
            r_max,
            ..EnvSpec::default()
        };
        let env = lift(spec.build(&mut RandomSource::from_seed(seed)))?;
        *out = Box::into_raw(Box::new(PaEnvironment(env)));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_free(env: *mut PaEnvironment) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_num_prompts(env: *const PaEnvironment, out: *mut usize) -> PaStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        *out_arg(out, "out")? = env.0.num_prompts();
        Ok(())
    })
}

/// Total number of (prompt, response) cells, the length of a flattened
/// policy.
///
/// # Safety
/// `env` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_num_cells(env: *const PaEnvironment, out: *mut usize) -> PaStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        *out_arg(out, "out")? = env.0.responses_per_prompt().iter().sum();
        Ok(())
    })
}

fn regularizer(r: PaRegularizer) -> Regularizer {
    match r {
        PaRegularizer::Kl => Regularizer::Kl,
        PaRegularizer::ChiMix => Regularizer::ChiMix,
    }
}

/// Writes the regularized optimal policy, prompt-major, into `probs`
/// (`len` must equal the cell count).
///
/// # Safety
/// `env` must be a live handle; `probs` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pa_environment_optimal_policy(
    env: *const PaEnvironment,
    beta: f64,
    reg: PaRegularizer,
    probs: *mut f64,
    len: usize,
) -> PaStatus {
    guard(|| {
        let env = &env.as_ref().ok_or_else(|| null("env"))?.0;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let policy = lift(env.optimal_policy(beta, regularizer(reg)))?;
        let flat: Vec<f64> = policy.rows().iter().flatten().copied().collect();
        if flat.len() != len {
            return Err((PaStatus::InvalidArgument, format!("expected {} cells, got {len}", flat.len())));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), probs, len);
        Ok(())
    })
}

/// Builds a realizable class of `size` members around the optimum.
///
/// # Safety
/// `env` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_policy_class_build(
    env: *const PaEnvironment,
    beta: f64,
    size: usize,
    reg: PaRegularizer,
    seed: u64,
    out: *mut *mut PaPolicyClass,
) -> PaStatus {
    guard(|| {
        let env = &env.as_ref().ok_or_else(|| null("env"))?.0;
        let out = out_arg(out, "out")?;
        let class = lift(build_policy_class(env, beta, size, regularizer(reg), &mut RandomSource::from_seed(seed)))?;
        *out = Box::into_raw(Box::new(PaPolicyClass(class)));
        Ok(())
    })
}

/// # Safety
/// `class` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_policy_class_free(class: *mut PaPolicyClass) {
    if !class.is_null() {
        drop(Box::from_raw(class));
    }
}

/// # Safety
/// `class` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_policy_class_len(class: *const PaPolicyClass, out: *mut usize) -> PaStatus {
    guard(|| {
        let class = class.as_ref().ok_or_else(|| null("class"))?;
        *out_arg(out, "out")? = class.0.len();
        Ok(())
    })
}

/// Index of the planted optimum.
///
/// # Safety
/// `class` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_policy_class_optimal_index(class: *const PaPolicyClass, out: *mut usize) -> PaStatus {
    guard(|| {
        let class = class.as_ref().ok_or_else(|| null("class"))?;
        let i = class
            .0
            .optimal_index()
            .ok_or_else(|| (PaStatus::InvalidArgument, "class has no planted optimum".to_string()))?;
        *out_arg(out, "out")? = i;
        Ok(())
    })
}

/// Unregularized value J of a member.
///
/// # Safety
/// Handles must be live; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_policy_class_value(
    env: *const PaEnvironment,
    class: *const PaPolicyClass,
    index: usize,
    out: *mut f64,
) -> PaStatus {
    guard(|| {
        let env = &env.as_ref().ok_or_else(|| null("env"))?.0;
        let class = &class.as_ref().ok_or_else(|| null("class"))?.0;
        if index >= class.len() {
            return Err((PaStatus::InvalidArgument, format!("index {index} out of range")));
        }
        *out_arg(out, "out")? = env.value(class.get(index));
        Ok(())
    })
}

/// Offline preference data through the given channel. Pass `INFINITY` as
/// `epsilon` for no privatization.
///
/// # Safety
/// `env` must be a live handle; `out` must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pa_dataset_generate(
    env: *const PaEnvironment,
    n: usize,
    epsilon: f64,
    alpha: f64,
    ordering: PaOrdering,
    adversary: PaAdversary,
    seed: u64,
    out: *mut *mut PaDataset,
) -> PaStatus {
    guard(|| {
        let env = &env.as_ref().ok_or_else(|| null("env"))?.0;
        let out = out_arg(out, "out")?;
        let noise = NoiseConfig {
            epsilon,
            alpha,
            ordering: match ordering {
                PaOrdering::Clean => ChannelOrder::Clean,
                PaOrdering::PrivacyOnly => ChannelOrder::PrivacyOnly,
                PaOrdering::CorruptionOnly => ChannelOrder::CorruptionOnly,
                PaOrdering::Ctl => ChannelOrder::Ctl,
                PaOrdering::Ltc => ChannelOrder::Ltc,
            },
            adversary: match adversary {
                PaAdversary::AlwaysFlip => Adversary::AlwaysFlip,
                PaAdversary::ConstantPlus => Adversary::ConstantPlus,
                PaAdversary::ConstantMinus => Adversary::ConstantMinus,
            },
        };
        let data = lift(generate_offline_dataset(env, n, &noise, &RandomSource::from_seed(seed)))?;
        *out = Box::into_raw(Box::new(PaDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_free(data: *mut PaDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// # Safety
/// `data` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_len(data: *const PaDataset, out: *mut usize) -> PaStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        *out_arg(out, "out")? = data.0.len();
        Ok(())
    })
}

/// Fraction of observed labels that differ from the clean ones.
///
/// # Safety
/// `data` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_flip_rate(data: *const PaDataset, out: *mut f64) -> PaStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        *out_arg(out, "out")? = data.0.flip_rate();
        Ok(())
    })
}

/// Runs an offline solver and reports the chosen member.
///
/// # Safety
/// Handles must be live; `out_index` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pa_solve_offline(
    env: *const PaEnvironment,
    class: *const PaPolicyClass,
    data: *const PaDataset,
    solver: PaOfflineSolver,
    beta: f64,
    out_index: *mut usize,
) -> PaStatus {
    guard(|| {
        let env = &env.as_ref().ok_or_else(|| null("env"))?.0;
        let class = &class.as_ref().ok_or_else(|| null("class"))?.0;
        let data = &data.as_ref().ok_or_else(|| null("data"))?.0;
        let out = out_arg(out_index, "out_index")?;
        let ctx = lift(LossContext::new(
            beta,
            data.channel.effective_epsilon(),
            env.r_max(),
            Flavor::Chipo,
        ))?;
        let solver = match solver {
            PaOfflineSolver::PrivChipo => OfflineSolver::PrivChipo,
            PaOfflineSolver::SquareChipo => OfflineSolver::SquareChipo,
        };
        *out = lift(solve_offline(solver, data, class, &ctx, env.pi_ref()))?.chosen_index;
        Ok(())
    })
}

/// Runs a full sweep from a JSON config and writes its outputs to
/// `out_dir`. `out_records` receives the number of runs.
///
/// # Safety
/// Strings must be NUL-terminated; `out_records` may be null.
#[no_mangle]
pub unsafe extern "C" fn pa_run_sweep_json(config_json: *const c_char, out_dir: *const c_char, out_records: *mut usize) -> PaStatus {
    guard(|| {
        let cfg = lift(ExperimentConfig::from_json(str_arg(config_json, "config_json")?))?;
        let dir = str_arg(out_dir, "out_dir")?;
        let records = lift(run_sweep(&cfg, Some(Path::new(dir))))?;
        if let Some(out) = out_records.as_mut() {
            *out = records.len();
        }
        Ok(())
    })
}
