//! Exact information-theoretic quantities on tiny environments, computed by
//! enumerating every response sequence.
//!
//! Sequences are prefix-free: `EOS` is absorbing and anything else stops at
//! `max_response_len`. That makes the chain rule
//! `sum_t H(o_t | o_<t, q) = H(r | q)` exact.

mod joint;
mod sweep;

pub use joint::{mutual_information, IbroReport, JointTable, Marginals, TokenEntropy};
pub use sweep::{answer_decides_first_token, answer_independent_tokens, seeded_env, SeededEnv};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{nucleus_distribution, ModelError, Policy};
use crate::tasks::PromptInstance;
use crate::TokenId;

/// Upper bound on the number of complete sequences per prompt.
pub const MAX_SEQUENCES: u128 = 10_000_000;
pub const MAX_VOCAB: usize = 64;
pub const MAX_RESPONSE_LEN: usize = 8;
/// Absolute tolerance used by every identity check.
pub const TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum InfoError {
    #[error("invalid environment: {0}")]
    Env(String),
    #[error("sequence space of {0} exceeds the enumeration limit")]
    TooLarge(u128),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InfoError>;

/// Which variables a sequence distribution is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    None,
    Q,
    A,
    QA,
}

/// A distribution over complete response sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    pub probs: BTreeMap<Vec<TokenId>, f64>,
    pub context: Context,
}

impl SequenceDistribution {
    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn entropy(&self) -> f64 {
        entropy(self.probs.values().copied())
    }

    pub fn get(&self, seq: &[TokenId]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy<I: IntoIterator<Item = f64>>(probs: I) -> f64 {
    let h: f64 = probs.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.max(0.0)
}

/// Prompts with a prior, a stochastic answer map over labelled answers, and
/// the response-space limits.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerableEnv {
    pub prompts: Vec<PromptInstance>,
    pub prompt_prior: Vec<f64>,
    /// Distinct answers; `answer_given_prompt[q][a]` is `p(a | q)`.
    pub answers: Vec<Vec<TokenId>>,
    pub answer_given_prompt: Vec<Vec<f64>>,
    pub vocab_size: usize,
    pub max_response_len: usize,
    pub eos: TokenId,
}

impl EnumerableEnv {
    /// Uniform prior; each prompt's answer is its `answer_tokens`.
    pub fn deterministic(prompts: Vec<PromptInstance>, vocab_size: usize, max_response_len: usize, eos: TokenId) -> Result<Self> {
        let mut answers: Vec<Vec<TokenId>> = Vec::new();
        let mut rows = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let idx = match answers.iter().position(|a| *a == p.answer_tokens) {
                Some(i) => i,
                None => {
                    answers.push(p.answer_tokens.clone());
                    answers.len() - 1
                }
            };
            rows.push(idx);
        }
        let answer_given_prompt = rows
            .iter()
            .map(|&i| (0..answers.len()).map(|j| if j == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let n = prompts.len().max(1);
        let env = Self {
            prompt_prior: vec![1.0 / n as f64; prompts.len()],
            prompts,
            answers,
            answer_given_prompt,
            vocab_size,
            max_response_len,
            eos,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.prompts.len();
        if q == 0 {
            return Err(InfoError::Env("no prompts".into()));
        }
        if self.prompt_prior.len() != q || self.answer_given_prompt.len() != q {
            return Err(InfoError::Env("prior and answer map must have one row per prompt".into()));
        }
        if !(2..=MAX_VOCAB).contains(&self.vocab_size) {
            return Err(InfoError::Env(format!("vocab_size {} outside 2..={MAX_VOCAB}", self.vocab_size)));
        }
        if !(1..=MAX_RESPONSE_LEN).contains(&self.max_response_len) {
            return Err(InfoError::Env(format!(
                "max_response_len {} outside 1..={MAX_RESPONSE_LEN}",
                self.max_response_len
            )));
        }
        if self.eos as usize >= self.vocab_size {
            return Err(InfoError::Env("eos outside the vocabulary".into()));
        }
        check_simplex(&self.prompt_prior, "prompt prior")?;
        for (i, row) in self.answer_given_prompt.iter().enumerate() {
            if row.len() != self.answers.len() {
                return Err(InfoError::Env(format!("answer row {i} has the wrong width")));
            }
            check_simplex(row, "answer map row")?;
        }
        let space = self.sequence_space();
        if space > MAX_SEQUENCES {
            return Err(InfoError::TooLarge(space));
        }
        Ok(())
    }

    /// Number of complete sequences: those ending in EOS before the limit,
    /// plus every sequence of full length without an earlier EOS.
    pub fn sequence_space(&self) -> u128 {
        let v = self.vocab_size as u128;
        let l = self.max_response_len as u32;
        let mut total: u128 = 0;
        for t in 1..l {
            total = total.saturating_add((v - 1).saturating_pow(t - 1));
        }
        total.saturating_add((v - 1).saturating_pow(l - 1).saturating_mul(v))
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(InfoError::Distribution(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > TOL {
        return Err(InfoError::Distribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Sampling transform applied while enumerating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumerationSampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for EnumerationSampling {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

/// `pi(r | q)` for every prompt under plain softmax sampling.
pub fn enumerate_policy<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv) -> Result<Vec<SequenceDistribution>> {
    enumerate_policy_with(policy, env, EnumerationSampling::default())
}

/// Depth-first expansion of the sampling tree under the given sampling
/// transform. Zero-probability branches are not expanded.
pub fn enumerate_policy_with<P: Policy + ?Sized>(
    policy: &P,
    env: &EnumerableEnv,
    sampling: EnumerationSampling,
) -> Result<Vec<SequenceDistribution>> {
    env.validate()?;
    if policy.vocab_size() != env.vocab_size {
        return Err(InfoError::Env(format!(
            "policy vocabulary {} differs from env vocabulary {}",
            policy.vocab_size(),
            env.vocab_size
        )));
    }
    let mut out = Vec::with_capacity(env.prompts.len());
    for inst in &env.prompts {
        if inst.prompt_tokens.len() + env.max_response_len - 1 > policy.max_seq_len() {
            return Err(InfoError::Env("prompt plus responses exceed the policy context".into()));
        }
        let mut probs = BTreeMap::new();
        let mut prefix = Vec::with_capacity(env.max_response_len);
        expand(policy, env, sampling, &inst.prompt_tokens, &mut prefix, 1.0, &mut probs)?;
        out.push(SequenceDistribution {
            probs,
            context: Context::Q,
        });
    }
    Ok(out)
}

fn expand<P: Policy + ?Sized>(
    policy: &P,
    env: &EnumerableEnv,
    sampling: EnumerationSampling,
    prompt: &[TokenId],
    prefix: &mut Vec<TokenId>,
    mass: f64,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) -> Result<()> {
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(prefix);
    let logits = policy.start(&ctx)?.next_logits();
    let dist = nucleus_distribution(&logits, sampling.temperature, sampling.top_p)?;
    for (tok, p) in dist {
        if p == 0.0 {
            continue;
        }
        let m = mass * p;
        prefix.push(tok);
        if tok == env.eos || prefix.len() == env.max_response_len {
            *out.entry(prefix.clone()).or_insert(0.0) += m;
        } else {
            expand(policy, env, sampling, prompt, prefix, m, out)?;
        }
        prefix.pop();
    }
    Ok(())
}

/// Joint table under the chain `a <-> q <-> r`: the response depends on the
/// prompt only.
pub fn markov_joint(env: &EnumerableEnv, policy_dists: &[SequenceDistribution]) -> Result<JointTable> {
    if policy_dists.len() != env.prompts.len() {
        return Err(InfoError::Env("one distribution per prompt required".into()));
    }
    let given_qa = env
        .answer_given_prompt
        .iter()
        .zip(policy_dists)
        .map(|(row, d)| row.iter().map(|_| d.probs.clone()).collect())
        .collect();
    JointTable::new(env.prompt_prior.clone(), env.answer_given_prompt.clone(), given_qa)
}

/// Enumerates `policy` on `env` and measures every quantity at `beta`.
pub fn ibro_report<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv, beta: f64) -> Result<IbroReport> {
    let dists = enumerate_policy(policy, env)?;
    let mut report = markov_joint(env, &dists)?.report(beta)?;
    let deterministic = env
        .answer_given_prompt
        .iter()
        .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0));
    if deterministic {
        report.notes.push(format!(
            "answers are a function of the prompt, so conditioning on a adds nothing beyond q; every per-token weight is beta - 1 = {}",
            beta - 1.0
        ));
    }
    Ok(report)
}

/// Exact `I(q;r) - beta I(r;a)`.
pub fn ibro_objective<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv, beta: f64) -> Result<f64> {
    Ok(ibro_report(policy, env, beta)?.ibro_value)
}

/// Token-level surrogate value and its per-token table.
pub fn surrogate_objective<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv, beta: f64) -> Result<(f64, Vec<TokenEntropy>)> {
    let r = ibro_report(policy, env, beta)?;
    Ok((r.surrogate_value, r.per_token))
}

/// `[(1 - beta) H(r) + beta H(q|a) + surrogate] - IBRO`; never negative
/// beyond rounding.
pub fn verify_theorem1_bound<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv, beta: f64) -> Result<f64> {
    if beta < 1.0 {
        return Err(InfoError::Env(format!("beta must be >= 1, got {beta}")));
    }
    Ok(ibro_report(policy, env, beta)?.bound_residual)
}

/// `|H(r)_after - H(r)_before|` on the same environment.
pub fn policy_marginal_drift<P: Policy + ?Sized, Q: Policy + ?Sized>(before: &P, after: &Q, env: &EnumerableEnv) -> Result<f64> {
    let h = |dists: Vec<SequenceDistribution>| -> Result<f64> { Ok(markov_joint(env, &dists)?.marginals().h_r) };
    let a = h(enumerate_policy(before, env)?)?;
    let b = h(enumerate_policy(after, env)?)?;
    Ok((b - a).abs())
}

/// Outcome of the `lambda_t` range check at `beta = 2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaEntry {
    pub prompt: usize,
    pub t: usize,
    /// `2 H(o_t | o_<t, q, a) - H(o_t | o_<t, q)`.
    pub ell: f64,
    pub h_q: f64,
    /// `ell / h_q`, or `None` when `h_q` is below threshold.
    pub lambda: Option<f64>,
    pub in_range: bool,
}

/// Evaluates `ell_t` and `lambda_t` for each per-token row of `table`.
pub fn lambda_range(per_token: &[TokenEntropy]) -> Vec<LambdaEntry> {
    per_token
        .iter()
        .map(|row| {
            let ell = 2.0 * row.h_qa - row.h_q;
            let lambda = (row.h_q > TOL).then(|| ell / row.h_q);
            let in_ell = ell >= -row.h_q - TOL && ell <= row.h_q + TOL;
            let in_lambda = lambda.map_or(true, |l| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&l));
            LambdaEntry {
                prompt: row.prompt,
                t: row.t,
                ell,
                h_q: row.h_q,
                lambda,
                in_range: in_ell && in_lambda,
            }
        })
        .collect()
}

/// Range check of the per-token IB weight on an enumerated policy.
pub fn ib_term_range_check<P: Policy + ?Sized>(policy: &P, env: &EnumerableEnv) -> Result<Vec<LambdaEntry>> {
    Ok(lambda_range(&ibro_report(policy, env, 2.0)?.per_token))
}
