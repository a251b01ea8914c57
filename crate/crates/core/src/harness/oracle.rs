use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{HarnessError, Result};
use crate::infotheory::{ibro_report, EnumerableEnv, IbroReport};
use crate::model::{load_checkpoint, ModelConfig, PolicyParams};
use crate::tasks::PromptInstance;
use crate::TokenId;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclePrompt {
    pub tokens: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Settings for a randomly initialized policy.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomModel {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for RandomModel {
    fn default() -> Self {
        Self {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            init_std: 1.0,
            seed: 0,
        }
    }
}

/// An enumerable environment as a TOML file. Without `answers` and
/// `answer_given_prompt`, each prompt's own answer is used with certainty
/// and the prior defaults to uniform.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleEnvFile {
    pub vocab_size: usize,
    pub max_response_len: usize,
    pub eos: TokenId,
    pub prompts: Vec<OraclePrompt>,
    #[serde(default)]
    pub prompt_prior: Option<Vec<f64>>,
    #[serde(default)]
    pub answers: Option<Vec<Vec<TokenId>>>,
    #[serde(default)]
    pub answer_given_prompt: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub model: RandomModel,
}

impl OracleEnvFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn env(&self) -> Result<EnumerableEnv> {
        let prompts: Vec<PromptInstance> = self
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| PromptInstance {
                instance_id: i as u64,
                prompt_tokens: p.tokens.clone(),
                answer_tokens: p.answer.clone(),
            })
            .collect();
        let mut env = EnumerableEnv::deterministic(prompts, self.vocab_size, self.max_response_len, self.eos)?;
        match (&self.answers, &self.answer_given_prompt) {
            (Some(a), Some(m)) => {
                env.answers = a.clone();
                env.answer_given_prompt = m.clone();
            }
            (None, None) => {}
            _ => {
                return Err(HarnessError::Config(
                    "answers and answer_given_prompt must be given together".into(),
                ))
            }
        }
        if let Some(p) = &self.prompt_prior {
            env.prompt_prior = p.clone();
        }
        env.validate()?;
        Ok(env)
    }

    /// Smallest sequence budget a policy needs for this environment.
    pub fn max_seq_len(&self) -> usize {
        self.prompts.iter().map(|p| p.tokens.len()).max().unwrap_or(1) + self.max_response_len
    }

    pub fn random_policy(&self) -> Result<PolicyParams<f64>> {
        let m = &self.model;
        let config = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_seq_len: self.max_seq_len(),
            has_value_head: false,
            seed: m.seed,
        };
        Ok(PolicyParams::init_with_std(&config, m.init_std)?)
    }
}

/// Where the oracle's policy comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum OraclePolicy {
    Random,
    Checkpoint(PathBuf),
}

impl OraclePolicy {
    pub fn parse(s: &str) -> Self {
        if s == "random" {
            Self::Random
        } else {
            Self::Checkpoint(PathBuf::from(s))
        }
    }

    pub fn params(&self, env: &OracleEnvFile) -> Result<PolicyParams<f64>> {
        match self {
            Self::Random => env.random_policy(),
            Self::Checkpoint(p) => Ok(load_checkpoint(p, None)?.cast()),
        }
    }

    /// Exact report for this policy on the environment.
    pub fn report(&self, env: &OracleEnvFile, beta: f64) -> Result<IbroReport> {
        let params = self.params(env)?;
        Ok(ibro_report(&params, &env.env()?, beta)?)
    }
}
