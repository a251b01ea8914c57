use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use ibrolab_ffi::*;

const TINY: &str = r#"
algorithm = "grpo_dapo"
seed = 3
model.d_model = 16
model.n_layers = 1
task.train_size = 20
task.eval_size = 4
train.total_steps = 3
train.batch_prompts = 4
train.mini_batch = 4
train.group_size = 4
train.format_warmup_steps = 2
eval.every = 2
eval.k = 4
"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ibro_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ibro_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn trainer_lifecycle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = c(TINY);
    let dir = c(tmp.path().to_str().unwrap());
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(ibro_trainer_new(cfg.as_ptr(), dir.as_ptr(), &mut t), IbroStatus::Ok);
        let mut m = IbroStepMetrics::default();
        let mut done = 0;
        let mut steps = Vec::new();
        while {
            assert_eq!(ibro_trainer_is_done(t, &mut done), IbroStatus::Ok);
            done == 0
        } {
            assert_eq!(ibro_trainer_step(t, &mut m), IbroStatus::Ok);
            steps.push((m.step, m.has_eval, m.done));
            assert!(m.mean_token_entropy > 0.0);
        }
        assert_eq!(steps, vec![(1, 0, 0), (2, 1, 0), (3, 1, 1)]);
        assert_eq!(ibro_trainer_step(t, &mut m), IbroStatus::Finished);

        let mut s = IbroRunSummary::default();
        assert_eq!(ibro_trainer_finish(t, &mut s), IbroStatus::Ok);
        assert_eq!(s.steps, 3);
        assert!((0.0..=1.0).contains(&s.final_avg_at_k));
        assert_eq!(ibro_trainer_finish(t, &mut s), IbroStatus::Finished);
        assert_eq!(ibro_trainer_is_done(t, &mut done), IbroStatus::Ok);
        assert_eq!(done, 1);
        ibro_trainer_free(t);

        // The checkpoint evaluates to the same score through the policy handle.
        let ckpt = c(tmp.path().join("final.ckpt").to_str().unwrap());
        let mut p = ptr::null_mut();
        assert_eq!(ibro_policy_load(ckpt.as_ptr(), &mut p), IbroStatus::Ok);
        let mut n = 0usize;
        assert_eq!(ibro_policy_num_params(p, &mut n), IbroStatus::Ok);
        assert!(n > 1000);
        let mut avg = -1.0;
        assert_eq!(ibro_policy_eval(p, cfg.as_ptr(), &mut avg), IbroStatus::Ok);
        assert_eq!(avg, s.final_avg_at_k);

        let other = c(&TINY.replace("model.d_model = 16", "model.d_model = 32"));
        assert_eq!(ibro_policy_eval(p, other.as_ptr(), &mut avg), IbroStatus::Config);
        ibro_policy_free(p);
    }
}

#[test]
fn in_memory_runs_repeat_exactly() {
    let cfg = c(TINY);
    let run = || unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(ibro_trainer_new(cfg.as_ptr(), ptr::null(), &mut t), IbroStatus::Ok);
        let mut out = Vec::new();
        let mut m = IbroStepMetrics::default();
        while ibro_trainer_step(t, &mut m) == IbroStatus::Ok {
            out.push((m.mean_token_entropy.to_bits(), m.pg_loss.to_bits(), m.train_reward_mean.to_bits()));
        }
        ibro_trainer_free(t);
        out
    };
    let a = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, run());
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(ibro_trainer_new(ptr::null(), ptr::null(), &mut t), IbroStatus::NullPointer);
        assert!(last_error().contains("config_toml"));
        assert!(t.is_null());

        let bad = c("algorithm = \"grpo_dapo\"\ntrain.nope = 1\n");
        assert_eq!(ibro_trainer_new(bad.as_ptr(), ptr::null(), &mut t), IbroStatus::Config);
        assert!(last_error().contains("nope"));

        let invalid = c("algorithm = \"grpo_dapo\"\ntrain.group_size = 1\n");
        assert_eq!(ibro_trainer_new(invalid.as_ptr(), ptr::null(), &mut t), IbroStatus::Config);

        let good = c(TINY);
        assert_eq!(ibro_trainer_new(good.as_ptr(), ptr::null(), ptr::null_mut()), IbroStatus::NullPointer);
        assert_eq!(ibro_trainer_step(ptr::null_mut(), ptr::null_mut()), IbroStatus::NullPointer);

        let missing = c("/nonexistent/final.ckpt");
        let mut p = ptr::null_mut();
        assert_eq!(ibro_policy_load(missing.as_ptr(), &mut p), IbroStatus::Io);
        assert!(p.is_null());

        ibro_trainer_free(ptr::null_mut());
        ibro_policy_free(ptr::null_mut());
    }
}

#[test]
fn non_finite_training_is_reported() {
    let text = format!("{TINY}train.actor_lr = 1e30\ntrain.epochs = 2\ntrain.dynamic_sampling = false\ntrain.max_grad_norm = 1e300\n");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = c(&text);
    let dir = c(tmp.path().to_str().unwrap());
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(ibro_trainer_new(cfg.as_ptr(), dir.as_ptr(), &mut t), IbroStatus::Ok);
        let status = (0..3).map(|_| ibro_trainer_step(t, ptr::null_mut())).find(|s| *s != IbroStatus::Ok);
        assert_eq!(status, Some(IbroStatus::NonFinite));
        assert!(last_error().contains("non-finite"));
        ibro_trainer_free(t);
    }
}

#[test]
fn oracle_report_matches_identities() {
    let env = c(&std::fs::read_to_string(repo_file("configs/oracle_env.toml")).unwrap());
    let mut r = IbroOracleReport::default();
    unsafe {
        assert_eq!(ibro_oracle_report(env.as_ptr(), ptr::null(), 2.0, &mut r), IbroStatus::Ok);
        assert_eq!(r.beta, 2.0);
        assert!(r.bound_residual >= -1e-9);
        assert!((r.i_q_r - (r.h_r - r.h_r_given_q)).abs() < 1e-9);
        assert!(r.chain_rule_gap_q < 1e-9 && r.chain_rule_gap_qa < 1e-9);
        assert_eq!(ibro_oracle_report(env.as_ptr(), ptr::null(), 0.5, &mut r), IbroStatus::InvalidArgument);
        let junk = c("vocab_size = \"x\"");
        assert_ne!(ibro_oracle_report(junk.as_ptr(), ptr::null(), 2.0, &mut r), IbroStatus::Ok);
    }
}

#[test]
fn group_advantages_through_the_abi() {
    let mut out = [0.0; 2];
    let mut zero = -1;
    unsafe {
        assert_eq!(ibro_group_advantages([1.0, 0.0].as_ptr(), 2, out.as_mut_ptr(), &mut zero), IbroStatus::Ok);
        assert_eq!(out, [1.0, -1.0]);
        assert_eq!(zero, 0);
        assert_eq!(ibro_group_advantages([0.5, 0.5].as_ptr(), 2, out.as_mut_ptr(), &mut zero), IbroStatus::Ok);
        assert_eq!((out, zero), ([0.0, 0.0], 1));
        assert_eq!(ibro_group_advantages([1.0].as_ptr(), 1, out.as_mut_ptr(), ptr::null_mut()), IbroStatus::InvalidArgument);
        assert_eq!(ibro_group_advantages(ptr::null(), 2, out.as_mut_ptr(), ptr::null_mut()), IbroStatus::NullPointer);
    }
}

#[test]
fn gradcheck_through_the_abi() {
    let (mut worst, mut n) = (1.0, 0usize);
    unsafe {
        assert_eq!(ibro_gradcheck(0, &mut worst, &mut n), IbroStatus::Ok);
        assert_eq!(ibro_gradcheck(0, ptr::null_mut(), &mut n), IbroStatus::NullPointer);
    }
    assert!(n > 10);
    assert!(worst < 1e-4);
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| std::process::Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "ibrolab.h"
int run(const char *cfg) {
    IbroTrainer *t = NULL;
    IbroStepMetrics m;
    IbroRunSummary s;
    if (ibro_trainer_new(cfg, NULL, &t) != IBRO_STATUS_OK) return 1;
    while (ibro_trainer_step(t, &m) == IBRO_STATUS_OK) {}
    ibro_trainer_finish(t, &s);
    ibro_trainer_free(t);
    return ibro_last_error() == NULL ? 0 : 2;
}
"#,
    )
    .unwrap();
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
