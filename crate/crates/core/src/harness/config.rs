use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::ModelConfig;
use crate::rlcore::{ClipConfig, RegularizerKind, RegularizerMode};
use crate::rollout::SamplingConfig;
use crate::tasks::{OverlongConfig, TaskKind, TaskSpec, VocabMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    GrpoDapo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::ModularSum,
            min_len: 2,
            max_len: 2,
            train_size: 100,
            eval_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    pub kind: RegularizerKind,
    /// Defaults to 0.001 for `naive` and 0.005 for the weighted kinds.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub clip_advantage_to_unit: bool,
}

impl Default for RegSection {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            alpha: None,
            eta: 0.0,
            clip_advantage_to_unit: false,
        }
    }
}

impl RegSection {
    pub fn mode(&self) -> RegularizerMode {
        let mut m = RegularizerMode::with_default_alpha(self.kind);
        if let Some(a) = self.alpha {
            m.alpha = a;
        }
        m.eta = self.eta;
        m.clip_advantage_to_unit = self.clip_advantage_to_unit;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlongSection {
    pub enabled: bool,
    pub buffer: usize,
    pub penalty: f64,
}

impl Default for OverlongSection {
    fn default() -> Self {
        Self {
            enabled: true,
            buffer: 4,
            penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_steps: usize,
    /// Prompts per step. Critic-free runs sample `group_size` responses each.
    pub batch_prompts: usize,
    /// Prompts per optimizer update.
    pub mini_batch: usize,
    pub epochs: usize,
    pub group_size: usize,
    /// Drop groups whose rewards are all equal and refill the batch.
    /// Without it such groups stay in with zero advantages.
    pub dynamic_sampling: bool,
    /// Extra sampling rounds allowed to refill a batch after dropping groups.
    pub oversample_rounds: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub warmup_steps: usize,
    pub critic_warmup_steps: usize,
    pub max_grad_norm: Option<f64>,
    pub gamma: f64,
    pub lam: f64,
    pub whiten_advantages: bool,
    pub value_coeff: f64,
    pub value_clip: Option<f64>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Supervised steps on answer-independent, well-formed responses run
    /// before reinforcement learning.
    /// Weight scale of the initial policy.
    pub init_std: f64,
    pub format_warmup_steps: usize,
    pub format_warmup_lr: f64,
    pub format_warmup_batch: usize,
    /// Stop once an evaluation reaches this avg@k.
    pub stop_at_avg_at_k: Option<f64>,
    pub overlong: OverlongSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_prompts: 16,
            mini_batch: 16,
            epochs: 1,
            group_size: 8,
            dynamic_sampling: true,
            oversample_rounds: 3,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            warmup_steps: 0,
            critic_warmup_steps: 5,
            max_grad_norm: Some(1.0),
            gamma: 1.0,
            lam: 1.0,
            whiten_advantages: false,
            value_coeff: 0.5,
            value_clip: None,
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 8,
            init_std: 0.1,
            format_warmup_steps: 100,
            format_warmup_lr: 1e-3,
            format_warmup_batch: 32,
            stop_at_avg_at_k: None,
            overlong: OverlongSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub every: usize,
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 100,
            k: 32,
            temperature: 1.0,
            top_p: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub reg: RegSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_model() -> ModelConfig {
    ModelConfig {
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        let mut c = Self {
            algorithm,
            seed: 0,
            model: default_model(),
            task: TaskSection::default(),
            clip: ClipConfig::default(),
            reg: RegSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        };
        if algorithm == Algorithm::Ppo {
            c.model.has_value_head = true;
            c.train.batch_prompts = 64;
        }
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            prompt_length_range: (self.task.min_len, self.task.max_len),
            vocab: VocabMap::standard(),
            seed: self.task.seed,
        }
    }

    pub fn train_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.train.temperature,
            top_p: self.train.top_p,
            max_new_tokens: self.train.max_new_tokens,
        }
    }

    pub fn eval_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.eval.temperature,
            top_p: self.eval.top_p,
            max_new_tokens: self.train.max_new_tokens,
        }
    }

    pub fn overlong(&self) -> Option<OverlongConfig> {
        self.train.overlong.enabled.then_some(OverlongConfig {
            buffer: self.train.overlong.buffer,
            penalty: self.train.overlong.penalty,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.task_spec()
            .validate(self.model.vocab_size, self.model.max_seq_len, self.train.max_new_tokens)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.clip.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reg.mode().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = &self.train;
        if t.batch_prompts == 0 || t.mini_batch == 0 || t.batch_prompts % t.mini_batch != 0 {
            return bad(format!(
                "mini_batch ({}) must divide batch_prompts ({})",
                t.mini_batch, t.batch_prompts
            ));
        }
        if t.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if t.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.algorithm == Algorithm::GrpoDapo && t.group_size < 2 {
            return bad("group_size must be >= 2".into());
        }
        if self.algorithm == Algorithm::Ppo && !self.model.has_value_head {
            return bad("ppo needs model.has_value_head = true".into());
        }
        if self.eval.k == 0 || self.eval.every == 0 {
            return bad("eval.k and eval.every must be >= 1".into());
        }
        if self.task.train_size == 0 || self.task.eval_size == 0 {
            return bad("task.train_size and task.eval_size must be >= 1".into());
        }
        if t.overlong.enabled && (t.overlong.buffer == 0 || t.overlong.buffer > t.max_new_tokens || t.overlong.penalty < 0.0) {
            return bad("overlong buffer must lie in 1..=max_new_tokens with a non-negative penalty".into());
        }
        if !(t.init_std > 0.0 && t.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        if !(t.actor_lr > 0.0 && t.critic_lr > 0.0 && t.format_warmup_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.gamma) || !(0.0..=1.0).contains(&t.lam) {
            return bad("gamma and lam must lie in [0, 1]".into());
        }
        if !(t.temperature > 0.0) || !(t.top_p > 0.0 && t.top_p <= 1.0) || !(self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return bad("bad sampling settings".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_sections() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            algorithm = "grpo_dapo"
            seed = 3
            model.d_model = 32
            task.kind = "modular_sum"
            reg.kind = "ib"
            train.total_steps = 10
            eval.k = 4
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.reg.mode().alpha, 0.005);
        assert_eq!(c.train.total_steps, 10);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("algorithm = \"ppo\"\nmodel.has_value_head = true\ntrain.bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("algorithm = \"grpo_dapo\"\ntrain.mini_batch = 5").is_err());
        assert!(ExperimentConfig::from_toml_str("algorithm = \"ppo\"").is_err());
        assert!(ExperimentConfig::from_toml_str("algorithm = \"grpo_dapo\"\nmodel.vocab_size = 12").is_err());
        assert!(ExperimentConfig::from_toml_str("algorithm = \"grpo_dapo\"\neval.k = 0").is_err());
    }
}
