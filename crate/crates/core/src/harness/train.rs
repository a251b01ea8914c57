use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ExperimentConfig, HarnessError, MetricsRecord, Result, CURVES_HEADER};
use crate::model::{forward_with, param_leaves, save_checkpoint, ModelConfig, PolicyParams};
use crate::numerics::{Graph, NumericsError, Scalar};
use crate::rlcore::{
    batch_gradients, gae_advantages, group_normalized_advantages, whiten, Adam, AdamConfig, LossReport, LossSettings,
    MiniBatch, RlError,
};
use crate::rollout::{derive_seed, eval_avg_at_k, group_rollout, rollout, substream, write_trajectories, RolloutGroup, Trajectory};
use crate::tasks::{generate_dataset, render_answer, write_dataset, PromptInstance, Verifier};

const TAG_INIT: u64 = 1;
const TAG_WARMUP: u64 = 2;
const TAG_PROMPTS: u64 = 3;
const TAG_ROLLOUT: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_DATA: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub avg_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: Option<PathBuf>,
    pub steps: usize,
    /// Evaluation after the format warmup, before any policy update.
    pub initial_avg_at_k: f64,
    pub evals: Vec<EvalPoint>,
    pub final_avg_at_k: f64,
    pub best_avg_at_k: f64,
    pub final_entropy: f64,
    pub final_response_length: f64,
    pub format_warmup_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: MetricsRecord,
    /// The run is over: the step budget is used up or the target was reached.
    pub done: bool,
}

/// Train and evaluation prompt sets. The evaluation set is drawn
/// independently and may share prompts with the training set.
pub fn datasets(config: &ExperimentConfig) -> Result<(Vec<PromptInstance>, Vec<PromptInstance>)> {
    let spec = config.task_spec();
    let train = generate_dataset(&spec, config.task.train_size)?;
    let mut eval_spec = spec.clone();
    eval_spec.seed = derive_seed(spec.seed, &[TAG_DATA]);
    let eval = generate_dataset(&eval_spec, config.task.eval_size)?;
    Ok((train, eval))
}

/// Fixed-seed avg@k of `params` on `dataset` under the evaluation sampler.
pub fn evaluate(params: &PolicyParams<f32>, dataset: &[PromptInstance], config: &ExperimentConfig) -> Result<f64> {
    let verifier = Verifier::exact(config.task_spec().vocab);
    Ok(eval_avg_at_k(
        params,
        dataset,
        config.eval.k,
        &config.eval_sampling(),
        &verifier,
        derive_seed(config.seed, &[TAG_EVAL]),
    )?)
}

fn init_params(config: &ExperimentConfig) -> Result<PolicyParams<f32>> {
    let model = ModelConfig {
        seed: derive_seed(config.seed, &[TAG_INIT, config.model.seed]),
        ..config.model.clone()
    };
    let drawn = PolicyParams::<f32>::init_with_std(&model, config.train.init_std)?;
    // Keep the configured seed in the stored config so checkpoints match it.
    Ok(PolicyParams::from_flat(&config.model, &drawn.flat_values())?)
}

/// Supervised steps on `prompt SEP random-answer EOS`. The answers ignore
/// the prompt, so the policy learns the response grammar and nothing about
/// the task. Returns the last cross-entropy.
pub fn format_warmup(params: &mut PolicyParams<f32>, config: &ExperimentConfig, train_set: &[PromptInstance]) -> Result<Option<f64>> {
    let t = &config.train;
    if t.format_warmup_steps == 0 {
        return Ok(None);
    }
    let spec = config.task_spec();
    let mut opt = Adam::new(
        AdamConfig {
            lr: t.format_warmup_lr,
            max_grad_norm: t.max_grad_norm,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let active = vec![true; params.tensors().len()];
    let mut last = None;
    for step in 0..t.format_warmup_steps {
        let mut rng = substream(derive_seed(config.seed, &[TAG_WARMUP, step as u64]), 0);
        let mut g = Graph::new();
        let leaves = param_leaves(params, &mut g);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..t.format_warmup_batch {
            let inst = &train_set[rng.gen_range(0..train_set.len())];
            let response = render_answer(&spec.random_answer(inst, &mut rng), &spec.vocab);
            let mut seq = inst.prompt_tokens.clone();
            seq.extend_from_slice(&response[..response.len() - 1]);
            let out = forward_with(params, &mut g, leaves.clone(), &seq)?;
            let start = inst.prompt_tokens.len() - 1;
            let positions: Vec<usize> = (start..start + response.len()).collect();
            rows.push(g.rows(out.logits, &positions)?);
            targets.extend(response.iter().map(|&x| x as usize));
        }
        let logits = g.concat_rows(&rows)?;
        let logp = g.log_softmax(logits)?;
        let picked = g.gather(logp, &targets)?;
        let mean = g.masked_mean(picked, &vec![true; targets.len()])?;
        let loss = g.scale(mean.value, -1.0);
        let value = g.scalar(loss).f64();
        if !value.is_finite() {
            return Err(HarnessError::NonFinite {
                step: 0,
                dump: "format warmup".into(),
            });
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = leaves
            .iter()
            .map(|&v| grads.get(v).map(|d| d.iter().map(|x| x.f64()).collect()))
            .collect();
        opt.step(params.tensors_mut(), &grads, &active);
        last = Some(value);
    }
    Ok(last)
}

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    curves: BufWriter<File>,
}

/// A training run advanced one step at a time.
pub struct Trainer {
    config: ExperimentConfig,
    params: PolicyParams<f32>,
    train_set: Vec<PromptInstance>,
    eval_set: Vec<PromptInstance>,
    verifier: Verifier,
    actor_opt: Adam,
    critic_opt: Adam,
    actor_mask: Vec<bool>,
    critic_mask: Vec<bool>,
    step: usize,
    sinks: Option<Sinks>,
    initial_avg_at_k: f64,
    evals: Vec<EvalPoint>,
    last: Option<MetricsRecord>,
    warmup_loss: Option<f64>,
    done: bool,
}

impl Trainer {
    /// Validates the config, builds data and model, runs the format warmup
    /// and the initial evaluation. With `run_dir`, artifacts are written there.
    pub fn new(config: &ExperimentConfig, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let config = config.clone();
        let (train_set, eval_set) = datasets(&config)?;
        let mut params = init_params(&config)?;
        let warmup_loss = format_warmup(&mut params, &config, &train_set)?;
        params.reset_reference();

        let is_value: Vec<bool> = params.names().iter().map(|n| n.starts_with("value.")).collect();
        let actor_mask: Vec<bool> = is_value.iter().map(|v| !v).collect();
        let adam = |lr: f64| AdamConfig {
            lr,
            warmup_steps: config.train.warmup_steps,
            max_grad_norm: config.train.max_grad_norm,
            ..AdamConfig::default()
        };
        let actor_opt = Adam::new(adam(config.train.actor_lr), params.tensors());
        let critic_opt = Adam::new(adam(config.train.critic_lr), params.tensors());

        let verifier = Verifier {
            vocab: config.task_spec().vocab,
            max_len: config.train.max_new_tokens,
            overlong: config.overlong(),
        };

        let sinks = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.toml"), config.to_toml_string())?;
                write_dataset(&train_set, File::create(dir.join("train.tsv"))?)?;
                write_dataset(&eval_set, File::create(dir.join("eval.tsv"))?)?;
                let metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
                let mut curves = BufWriter::new(File::create(dir.join("curves.csv"))?);
                writeln!(curves, "{CURVES_HEADER}")?;
                curves.flush()?;
                Some(Sinks {
                    dir: dir.to_path_buf(),
                    metrics,
                    curves,
                })
            }
            None => None,
        };

        let initial_avg_at_k = evaluate(&params, &eval_set, &config)?;
        log::info!("initial avg@{} = {initial_avg_at_k:.4}", config.eval.k);
        let trainer = Self {
            config,
            params,
            train_set,
            eval_set,
            verifier,
            actor_opt,
            critic_opt,
            actor_mask,
            critic_mask: is_value,
            step: 0,
            sinks,
            initial_avg_at_k,
            evals: Vec::new(),
            last: None,
            warmup_loss,
            done: false,
        };
        trainer.checkpoint(0)?;
        Ok(trainer)
    }

    pub fn params(&self) -> &PolicyParams<f32> {
        &self.params
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn eval_set(&self) -> &[PromptInstance] {
        &self.eval_set
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn checkpoint(&self, step: usize) -> Result<()> {
        if let Some(s) = &self.sinks {
            save_checkpoint(&self.params, &s.dir.join(format!("step_{step:05}.ckpt")))?;
        }
        Ok(())
    }

    fn sample_prompts(&self, step: usize, round: usize) -> Vec<PromptInstance> {
        let mut rng = substream(derive_seed(self.config.seed, &[TAG_PROMPTS, step as u64, round as u64]), 0);
        let n = self.train_set.len();
        let b = self.config.train.batch_prompts;
        if n >= b {
            sample(&mut rng, n, b).into_iter().map(|i| self.train_set[i].clone()).collect()
        } else {
            (0..b).map(|_| self.train_set[rng.gen_range(0..n)].clone()).collect()
        }
    }

    fn dump_batch(&self, trajs: &[&Trajectory]) -> Result<HarnessError> {
        let dir = self.sinks.as_ref().map(|s| s.dir.clone()).unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite_step{:05}.jsonl", self.step));
        let owned: Vec<Trajectory> = trajs.iter().map(|t| (*t).clone()).collect();
        write_trajectories(&owned, File::create(&path)?)?;
        Ok(HarnessError::NonFinite {
            step: self.step,
            dump: path.display().to_string(),
        })
    }

    /// Runs one mini-batch update. A non-finite loss, gradient or updated
    /// parameter writes the batch to disk and returns [`HarnessError::NonFinite`].
    fn update(&mut self, batch: &MiniBatch<'_>, settings: &LossSettings) -> Result<LossReport> {
        let (report, grads) = match batch_gradients(&self.params, batch, settings) {
            Ok(x) => x,
            Err(RlError::Numerics(NumericsError::NonFinite(_))) => return Err(self.dump_batch(batch.trajectories)?),
            Err(e) => return Err(e.into()),
        };
        let finite = report.total_loss.is_finite()
            && grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(self.dump_batch(batch.trajectories)?);
        }
        if settings.actor {
            self.actor_opt.step(self.params.tensors_mut(), &grads, &self.actor_mask);
        }
        if settings.value_coeff != 0.0 {
            self.critic_opt.step(self.params.tensors_mut(), &grads, &self.critic_mask);
        }
        if !self.params.tensors().iter().all(|t| t.all_finite()) {
            return Err(self.dump_batch(batch.trajectories)?);
        }
        Ok(report)
    }

    fn settings(&self, actor: bool, critic: bool) -> LossSettings {
        LossSettings {
            clip: self.config.clip,
            regularizer: self.config.reg.mode(),
            temperature: self.config.train_sampling().scoring_temperature(),
            actor,
            value_coeff: if critic { self.config.train.value_coeff } else { 0.0 },
            value_clip: self.config.train.value_clip,
        }
    }

    fn grpo_step(&mut self, stats: &mut RolloutStats) -> Result<(Vec<LossReport>, usize)> {
        let t = self.config.train.clone();
        let sampling = self.config.train_sampling();
        let rounds = if t.dynamic_sampling { 1 + t.oversample_rounds } else { 1 };
        let mut kept: Vec<RolloutGroup> = Vec::new();
        let mut dropped = 0;
        'rounds: for round in 0..rounds {
            let prompts = self.sample_prompts(self.step, round);
            let seed = derive_seed(self.config.seed, &[TAG_ROLLOUT, self.step as u64, round as u64]);
            for (i, inst) in prompts.iter().enumerate() {
                if kept.len() >= t.batch_prompts {
                    break 'rounds;
                }
                let group = group_rollout(&self.params, inst, t.group_size, &sampling, &self.verifier, derive_seed(seed, &[i as u64]))?;
                stats.add(&group.trajectories);
                if t.dynamic_sampling && group.group_rewards.iter().all(|&r| r == group.group_rewards[0]) {
                    dropped += 1;
                    continue;
                }
                kept.push(group);
            }
        }

        let mut trajs: Vec<&Trajectory> = Vec::new();
        let mut advs: Vec<Vec<f64>> = Vec::new();
        for group in &kept {
            let a = group_normalized_advantages(&group.group_rewards)?;
            for (traj, &ai) in group.trajectories.iter().zip(&a.advantages) {
                trajs.push(traj);
                advs.push(vec![ai; traj.response_tokens.len()]);
            }
        }
        let settings = self.settings(true, false);
        let per_mb = t.mini_batch * t.group_size;
        let mut reports = Vec::new();
        for _ in 0..t.epochs {
            for (tc, ac) in trajs.chunks(per_mb).zip(advs.chunks(per_mb)) {
                let batch = MiniBatch {
                    trajectories: tc,
                    advantages: ac,
                    returns: None,
                };
                reports.push(self.update(&batch, &settings)?);
            }
        }
        Ok((reports, dropped))
    }

    fn ppo_step(&mut self, stats: &mut RolloutStats) -> Result<Vec<LossReport>> {
        let t = self.config.train.clone();
        let prompts = self.sample_prompts(self.step, 0);
        let seed = derive_seed(self.config.seed, &[TAG_ROLLOUT, self.step as u64, 0]);
        let mut trajs = rollout(&self.params, &prompts, &self.config.train_sampling(), self.verifier.vocab.eos, seed)?;
        for (traj, inst) in trajs.iter_mut().zip(&prompts) {
            traj.outcome = Some(self.verifier.score(&traj.response_tokens, inst));
        }
        stats.add(&trajs);

        let mut advs = Vec::with_capacity(trajs.len());
        let mut rets = Vec::with_capacity(trajs.len());
        for traj in &trajs {
            let n = traj.response_tokens.len();
            let mut rewards = vec![0.0; n];
            rewards[n - 1] = traj.reward().expect("verified");
            let values = traj
                .old_values
                .as_ref()
                .ok_or_else(|| HarnessError::Config("ppo rollouts carry no values".into()))?;
            let (a, r) = gae_advantages(&rewards, values, t.gamma, t.lam)?;
            advs.push(a.values);
            rets.push(r);
        }
        if t.whiten_advantages {
            let mut flat: Vec<f64> = advs.iter().flatten().copied().collect();
            whiten(&mut flat);
            let mut it = flat.into_iter();
            for a in advs.iter_mut() {
                a.iter_mut().for_each(|x| *x = it.next().expect("same length"));
            }
        }

        let critic_only = self.step <= t.critic_warmup_steps;
        let settings = self.settings(!critic_only, true);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let mut reports = Vec::new();
        for _ in 0..t.epochs {
            for ((tc, ac), rc) in refs.chunks(t.mini_batch).zip(advs.chunks(t.mini_batch)).zip(rets.chunks(t.mini_batch)) {
                let batch = MiniBatch {
                    trajectories: tc,
                    advantages: ac,
                    returns: Some(rc),
                };
                reports.push(self.update(&batch, &settings)?);
            }
        }
        Ok(reports)
    }

    /// One rollout-and-update step, followed by evaluation and a checkpoint
    /// at evaluation points.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.done {
            return Err(HarnessError::Config("training already finished".into()));
        }
        self.step += 1;
        let mut stats = RolloutStats::default();
        let (reports, dropped) = match self.config.algorithm {
            Algorithm::GrpoDapo => self.grpo_step(&mut stats)?,
            Algorithm::Ppo => (self.ppo_step(&mut stats)?, 0),
        };
        let mean = |f: fn(&LossReport) -> f64| {
            if reports.is_empty() {
                0.0
            } else {
                reports.iter().map(f).sum::<f64>() / reports.len() as f64
            }
        };

        let last_step = self.step == self.config.train.total_steps;
        let eval_avg_at_k = if self.step % self.config.eval.every == 0 || last_step {
            let v = evaluate(&self.params, &self.eval_set, &self.config)?;
            self.evals.push(EvalPoint {
                step: self.step,
                avg_at_k: v,
            });
            self.checkpoint(self.step)?;
            log::info!("step {} avg@{} = {v:.4}", self.step, self.config.eval.k);
            Some(v)
        } else {
            None
        };

        let record = MetricsRecord {
            step: self.step,
            mean_token_entropy: stats.mean_entropy(),
            mean_response_length: stats.mean_length(),
            train_reward_mean: stats.mean_reward(),
            eval_avg_at_k,
            pg_loss: mean(|r| r.pg_loss),
            entropy_reg_value: mean(|r| r.entropy_reg_value),
            value_loss: mean(|r| r.value_loss),
            clip_fraction: mean(|r| r.clip_fraction),
            param_l2_from_init: self.params.param_l2_from_init(),
            groups_dropped: dropped,
        };
        if let Some(s) = self.sinks.as_mut() {
            serde_json::to_writer(&mut s.metrics, &record)?;
            s.metrics.write_all(b"\n")?;
            s.metrics.flush()?;
            writeln!(s.curves, "{}", record.curves_row())?;
            s.curves.flush()?;
        }
        let target_hit = matches!((self.config.train.stop_at_avg_at_k, eval_avg_at_k), (Some(t), Some(v)) if v >= t);
        self.done = last_step || target_hit;
        self.last = Some(record.clone());
        Ok(StepOutcome {
            record,
            done: self.done,
        })
    }

    /// Writes the final checkpoint and summary.
    pub fn finish(self) -> Result<RunSummary> {
        let final_avg_at_k = match self.evals.last() {
            Some(e) if e.step == self.step => e.avg_at_k,
            _ => evaluate(&self.params, &self.eval_set, &self.config)?,
        };
        let best = self
            .evals
            .iter()
            .map(|e| e.avg_at_k)
            .fold(self.initial_avg_at_k.max(final_avg_at_k), f64::max);
        let summary = RunSummary {
            run_dir: self.sinks.as_ref().map(|s| s.dir.clone()),
            steps: self.step,
            initial_avg_at_k: self.initial_avg_at_k,
            evals: self.evals.clone(),
            final_avg_at_k,
            best_avg_at_k: best,
            final_entropy: self.last.as_ref().map_or(0.0, |r| r.mean_token_entropy),
            final_response_length: self.last.as_ref().map_or(0.0, |r| r.mean_response_length),
            format_warmup_loss: self.warmup_loss,
        };
        if let Some(s) = &self.sinks {
            save_checkpoint(&self.params, &s.dir.join("final.ckpt"))?;
            std::fs::write(s.dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        }
        Ok(summary)
    }
}

#[derive(Default)]
struct RolloutStats {
    trajectories: usize,
    tokens: usize,
    entropy: f64,
    reward: f64,
}

impl RolloutStats {
    fn add(&mut self, trajs: &[Trajectory]) {
        for t in trajs {
            self.trajectories += 1;
            self.tokens += t.response_tokens.len();
            self.entropy += t.token_entropies.iter().sum::<f64>();
            self.reward += t.reward().unwrap_or(0.0);
        }
    }

    fn mean_entropy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.entropy / self.tokens as f64
        }
    }

    fn mean_length(&self) -> f64 {
        if self.trajectories == 0 {
            0.0
        } else {
            self.tokens as f64 / self.trajectories as f64
        }
    }

    fn mean_reward(&self) -> f64 {
        if self.trajectories == 0 {
            0.0
        } else {
            self.reward / self.trajectories as f64
        }
    }
}

/// Runs a full training job.
pub fn train(config: &ExperimentConfig, run_dir: Option<&Path>) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config, run_dir)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    trainer.finish()
}
