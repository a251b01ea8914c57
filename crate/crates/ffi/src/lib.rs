//! C ABI over the `ibrolab` trainer, checkpoint evaluation and the exact
//! oracle.
//!
//! Every entry point returns an [`IbroStatus`]. On failure the message is kept
//! in thread-local storage and can be read with [`ibro_last_error`]. Handles
//! are opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they surface as `IBRO_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use ibrolab::harness::{datasets, evaluate, gradcheck_suite, ExperimentConfig, HarnessError, OracleEnvFile, OraclePolicy, Trainer};
use ibrolab::model::{load_checkpoint, ModelError, PolicyParams};
use ibrolab::rlcore::group_normalized_advantages;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IbroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    NonFinite = 5,
    Finished = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque training session.
pub struct IbroTrainer {
    inner: Option<Trainer>,
}

/// Opaque policy loaded from a checkpoint.
pub struct IbroPolicy {
    params: PolicyParams<f32>,
}

/// Scalars logged for one training step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IbroStepMetrics {
    pub step: usize,
    pub mean_token_entropy: f64,
    pub mean_response_length: f64,
    pub train_reward_mean: f64,
    /// Set only when `has_eval` is nonzero.
    pub eval_avg_at_k: f64,
    pub has_eval: i32,
    pub pg_loss: f64,
    pub entropy_reg_value: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub param_l2_from_init: f64,
    pub groups_dropped: usize,
    pub done: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IbroRunSummary {
    pub steps: usize,
    pub initial_avg_at_k: f64,
    pub final_avg_at_k: f64,
    pub best_avg_at_k: f64,
    pub final_entropy: f64,
    pub final_response_length: f64,
    pub num_evals: usize,
}

/// Exact entropies (nats) and bound terms for a policy on an enumerable
/// environment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IbroOracleReport {
    pub beta: f64,
    pub h_r: f64,
    pub h_r_given_q: f64,
    pub h_r_given_a: f64,
    pub h_r_given_qa: f64,
    pub h_q_given_a: f64,
    pub i_q_r: f64,
    pub i_r_a: f64,
    pub ibro_value: f64,
    pub surrogate_value: f64,
    pub bound_residual: f64,
    pub chain_rule_gap_q: f64,
    pub chain_rule_gap_qa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(IbroStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Self(IbroStatus::NullPointer, format!("{what} is null"))
    }
    fn arg(msg: impl Into<String>) -> Self {
        Self(IbroStatus::InvalidArgument, msg.into())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) => IbroStatus::Config,
            HarnessError::NonFinite { .. } => IbroStatus::NonFinite,
            HarnessError::Io(_) | HarnessError::Model(ModelError::Io(_)) => IbroStatus::Io,
            _ => IbroStatus::Internal,
        };
        Self(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        HarnessError::from(e).into()
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IbroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IbroStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            IbroStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::arg(format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

fn config_from(toml: &str) -> Result<ExperimentConfig, Failure> {
    let c = ExperimentConfig::from_toml_str(toml)?;
    c.validate()?;
    Ok(c)
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ibro_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ibro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a trainer from TOML config text. `run_dir` may be null for an
/// in-memory run; otherwise artifacts are written there.
///
/// # Safety
/// `config_toml` and a non-null `run_dir` must be NUL-terminated strings;
/// `out_trainer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibro_trainer_new(
    config_toml: *const c_char,
    run_dir: *const c_char,
    out_trainer: *mut *mut IbroTrainer,
) -> IbroStatus {
    guard(|| {
        let slot = out(out_trainer, "out_trainer")?;
        *slot = std::ptr::null_mut();
        let config = config_from(text(config_toml, "config_toml")?)?;
        let dir = if run_dir.is_null() { None } else { Some(PathBuf::from(text(run_dir, "run_dir")?)) };
        let trainer = Trainer::new(&config, dir.as_deref())?;
        *slot = Box::into_raw(Box::new(IbroTrainer { inner: Some(trainer) }));
        Ok(())
    })
}

/// Runs one optimizer step. Returns `IBRO_STATUS_FINISHED` once the
/// configured step budget or stop target has been reached.
///
/// # Safety
/// `trainer` must come from [`ibro_trainer_new`]; `out_metrics` may be null.
#[no_mangle]
pub unsafe extern "C" fn ibro_trainer_step(trainer: *mut IbroTrainer, out_metrics: *mut IbroStepMetrics) -> IbroStatus {
    guard(|| {
        let t = out(trainer, "trainer")?;
        let inner = t.inner.as_mut().ok_or_else(|| Failure(IbroStatus::Finished, "trainer already finished".into()))?;
        if inner.is_done() {
            return Err(Failure(IbroStatus::Finished, "step budget exhausted".into()));
        }
        let step = inner.step()?;
        if let Some(m) = out_metrics.as_mut() {
            let r = &step.record;
            *m = IbroStepMetrics {
                step: r.step,
                mean_token_entropy: r.mean_token_entropy,
                mean_response_length: r.mean_response_length,
                train_reward_mean: r.train_reward_mean,
                eval_avg_at_k: r.eval_avg_at_k.unwrap_or(f64::NAN),
                has_eval: r.eval_avg_at_k.is_some() as i32,
                pg_loss: r.pg_loss,
                entropy_reg_value: r.entropy_reg_value,
                value_loss: r.value_loss,
                clip_fraction: r.clip_fraction,
                param_l2_from_init: r.param_l2_from_init,
                groups_dropped: r.groups_dropped,
                done: step.done as i32,
            };
        }
        Ok(())
    })
}

/// Writes 1 to `out_done` when no further steps will run.
///
/// # Safety
/// `trainer` must come from [`ibro_trainer_new`].
#[no_mangle]
pub unsafe extern "C" fn ibro_trainer_is_done(trainer: *const IbroTrainer, out_done: *mut i32) -> IbroStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| Failure::null("trainer"))?;
        *out(out_done, "out_done")? = t.inner.as_ref().is_none_or(|i| i.is_done()) as i32;
        Ok(())
    })
}

/// Final evaluation, final checkpoint and summary. The handle stays valid
/// but accepts no more steps.
///
/// # Safety
/// `trainer` must come from [`ibro_trainer_new`]; `out_summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn ibro_trainer_finish(trainer: *mut IbroTrainer, out_summary: *mut IbroRunSummary) -> IbroStatus {
    guard(|| {
        let t = out(trainer, "trainer")?;
        let inner = t.inner.take().ok_or_else(|| Failure(IbroStatus::Finished, "trainer already finished".into()))?;
        let s = inner.finish()?;
        if let Some(o) = out_summary.as_mut() {
            *o = IbroRunSummary {
                steps: s.steps,
                initial_avg_at_k: s.initial_avg_at_k,
                final_avg_at_k: s.final_avg_at_k,
                best_avg_at_k: s.best_avg_at_k,
                final_entropy: s.final_entropy,
                final_response_length: s.final_response_length,
                num_evals: s.evals.len(),
            };
        }
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or come from [`ibro_trainer_new`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibro_trainer_free(trainer: *mut IbroTrainer) {
    if !trainer.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(trainer))));
    }
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_policy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibro_policy_load(path: *const c_char, out_policy: *mut *mut IbroPolicy) -> IbroStatus {
    guard(|| {
        let slot = out(out_policy, "out_policy")?;
        *slot = std::ptr::null_mut();
        let params = load_checkpoint(Path::new(text(path, "path")?), None)?;
        *slot = Box::into_raw(Box::new(IbroPolicy { params }));
        Ok(())
    })
}

/// Number of scalar parameters in the policy.
///
/// # Safety
/// `policy` must come from [`ibro_policy_load`].
#[no_mangle]
pub unsafe extern "C" fn ibro_policy_num_params(policy: *const IbroPolicy, out_count: *mut usize) -> IbroStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| Failure::null("policy"))?;
        *out(out_count, "out_count")? = p.params.param_count();
        Ok(())
    })
}

/// avg@k on the evaluation set and sampler described by `config_toml`,
/// with the same seeds the trainer uses.
///
/// # Safety
/// `policy` must come from [`ibro_policy_load`]; `config_toml` must be a
/// NUL-terminated string; `out_avg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibro_policy_eval(policy: *const IbroPolicy, config_toml: *const c_char, out_avg: *mut f64) -> IbroStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| Failure::null("policy"))?;
        let config = config_from(text(config_toml, "config_toml")?)?;
        if config.model != *p.params.config() {
            return Err(Failure(IbroStatus::Config, "checkpoint does not match the config's model section".into()));
        }
        let (_, eval_set) = datasets(&config)?;
        *out(out_avg, "out_avg")? = evaluate(&p.params, &eval_set, &config)?;
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or come from [`ibro_policy_load`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibro_policy_free(policy: *mut IbroPolicy) {
    if !policy.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(policy))));
    }
}

/// Exact report for a policy on the enumerable environment in `env_toml`.
/// A null `checkpoint` selects the environment's seeded random policy.
///
/// # Safety
/// `env_toml` and a non-null `checkpoint` must be NUL-terminated strings;
/// `out_report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibro_oracle_report(
    env_toml: *const c_char,
    checkpoint: *const c_char,
    beta: f64,
    out_report: *mut IbroOracleReport,
) -> IbroStatus {
    guard(|| {
        let o = out(out_report, "out_report")?;
        let env = OracleEnvFile::from_toml_str(text(env_toml, "env_toml")?)?;
        let policy = if checkpoint.is_null() {
            OraclePolicy::Random
        } else {
            OraclePolicy::Checkpoint(PathBuf::from(text(checkpoint, "checkpoint")?))
        };
        if !(beta.is_finite() && beta >= 1.0) {
            return Err(Failure::arg(format!("beta must be finite and >= 1, got {beta}")));
        }
        let r = policy.report(&env, beta)?;
        *o = IbroOracleReport {
            beta: r.beta,
            h_r: r.h_r,
            h_r_given_q: r.h_r_given_q,
            h_r_given_a: r.h_r_given_a,
            h_r_given_qa: r.h_r_given_qa,
            h_q_given_a: r.h_q_given_a,
            i_q_r: r.i_q_r,
            i_r_a: r.i_r_a,
            ibro_value: r.ibro_value,
            surrogate_value: r.surrogate_value,
            bound_residual: r.bound_residual,
            chain_rule_gap_q: r.chain_rule_gap_q,
            chain_rule_gap_qa: r.chain_rule_gap_qa,
        };
        Ok(())
    })
}

/// Group-normalized advantages with the population standard deviation.
/// `out_advantages` must hold `n` values. `out_zero_variance` may be null.
///
/// # Safety
/// `rewards` must point to `n` readable values and `out_advantages` to `n`
/// writable ones.
#[no_mangle]
pub unsafe extern "C" fn ibro_group_advantages(
    rewards: *const f64,
    n: usize,
    out_advantages: *mut f64,
    out_zero_variance: *mut i32,
) -> IbroStatus {
    guard(|| {
        if rewards.is_null() {
            return Err(Failure::null("rewards"));
        }
        if out_advantages.is_null() {
            return Err(Failure::null("out_advantages"));
        }
        let r = std::slice::from_raw_parts(rewards, n);
        let g = group_normalized_advantages(r).map_err(|e| Failure::arg(e.to_string()))?;
        std::slice::from_raw_parts_mut(out_advantages, n).copy_from_slice(&g.advantages);
        if let Some(z) = out_zero_variance.as_mut() {
            *z = g.zero_variance as i32;
        }
        Ok(())
    })
}

/// Runs the 64-bit finite-difference suite and writes the worst relative
/// error and the number of checks.
///
/// # Safety
/// The output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibro_gradcheck(seed: u64, out_max_relative_error: *mut f64, out_checks: *mut usize) -> IbroStatus {
    guard(|| {
        let worst = out(out_max_relative_error, "out_max_relative_error")?;
        let count = out(out_checks, "out_checks")?;
        let entries = gradcheck_suite(seed)?;
        *worst = entries.iter().map(|e| e.report.max_relative_error).fold(0.0, f64::max);
        *count = entries.len();
        Ok(())
    })
}
