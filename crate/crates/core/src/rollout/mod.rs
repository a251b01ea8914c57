//! Autoregressive sampling, grouped rollouts and avg@k evaluation.
//!
//! Every trajectory draws from its own ChaCha8 stream, selected by index
//! from a phase seed, so results do not depend on evaluation order.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{sample_token, ModelError, Policy, GREEDY_TEMPERATURE};
use crate::numerics::kernels;
use crate::tasks::{PromptInstance, RewardOutcome, Verifier};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl SamplingConfig {
    pub fn train(max_new_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens,
        }
    }

    pub fn eval(max_new_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.7,
            max_new_tokens,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens,
        }
    }

    /// Temperature applied to logits when scoring log-probabilities.
    /// Greedy decoding scores under the untempered policy.
    pub fn scoring_temperature(&self) -> f64 {
        if self.temperature < GREEDY_TEMPERATURE {
            1.0
        } else {
            self.temperature
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    /// Log-probability of each sampled token under the sampling-time policy.
    pub old_logprobs: Vec<f64>,
    /// Entropy of the scoring distribution at each response position.
    pub token_entropies: Vec<f64>,
    /// Critic estimates at the positions predicting each response token.
    pub old_values: Option<Vec<f64>>,
    pub response_mask: Vec<bool>,
    pub terminated_by_eos: bool,
    /// Set by verification.
    pub outcome: Option<RewardOutcome>,
}

impl Trajectory {
    pub fn reward(&self) -> Option<f64> {
        self.outcome.as_ref().map(|o| o.reward)
    }

    pub fn is_correct(&self) -> bool {
        self.outcome.as_ref().is_some_and(|o| o.correct)
    }

    /// Prompt followed by every response token except the last; the inputs
    /// whose next-token predictions score the response.
    pub fn scoring_inputs(&self) -> Vec<TokenId> {
        let mut seq = self.prompt_tokens.clone();
        seq.extend_from_slice(&self.response_tokens[..self.response_tokens.len().saturating_sub(1)]);
        seq
    }

    pub fn masked_len(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub instance: PromptInstance,
    pub trajectories: Vec<Trajectory>,
    pub group_rewards: Vec<f64>,
}

impl RolloutGroup {
    /// Population variance of the group rewards.
    pub fn reward_variance(&self) -> f64 {
        let n = self.group_rewards.len() as f64;
        let mean = self.group_rewards.iter().sum::<f64>() / n;
        self.group_rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The random stream for trajectory `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a run seed with tags into an independent phase seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut x = seed;
    for &t in tags {
        x = splitmix64(x ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix64(x)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples one response. Generation stops after `eos` or `max_new_tokens`.
pub fn sample_trajectory<P: Policy + ?Sized>(
    policy: &P,
    instance: &PromptInstance,
    sampling: &SamplingConfig,
    eos: TokenId,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, RolloutError> {
    if sampling.max_new_tokens == 0 {
        return Err(RolloutError::Input("max_new_tokens must be >= 1".into()));
    }
    let needed = instance.prompt_tokens.len() + sampling.max_new_tokens - 1;
    if needed > policy.max_seq_len() {
        return Err(RolloutError::Input(format!(
            "prompt of {} tokens plus {} new tokens exceeds max_seq_len {}",
            instance.prompt_tokens.len(),
            sampling.max_new_tokens,
            policy.max_seq_len()
        )));
    }
    let inv_t = 1.0 / sampling.scoring_temperature();
    let mut state = policy.start(&instance.prompt_tokens)?;
    let mut tokens = Vec::with_capacity(sampling.max_new_tokens);
    let mut logprobs = Vec::with_capacity(sampling.max_new_tokens);
    let mut entropies = Vec::with_capacity(sampling.max_new_tokens);
    let mut scaled = vec![0.0; policy.vocab_size()];
    let mut logp = vec![0.0; policy.vocab_size()];
    let mut values: Option<Vec<f64>> = state.value().map(|_| Vec::new());
    let mut terminated = false;
    loop {
        if let (Some(vs), Some(v)) = (values.as_mut(), state.value()) {
            vs.push(v);
        }
        let logits = state.next_logits();
        let tok = sample_token(&logits, sampling.temperature, sampling.top_p, rng)?;
        for (s, &z) in scaled.iter_mut().zip(&logits) {
            *s = z * inv_t;
        }
        kernels::log_softmax_one(&scaled, &mut logp);
        tokens.push(tok);
        logprobs.push(logp[tok as usize]);
        entropies.push(-logp.iter().map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>());
        if tok == eos {
            terminated = true;
            break;
        }
        if tokens.len() == sampling.max_new_tokens {
            break;
        }
        state.push(tok)?;
    }
    let n = tokens.len();
    Ok(Trajectory {
        instance_id: instance.instance_id,
        prompt_tokens: instance.prompt_tokens.clone(),
        response_tokens: tokens,
        old_logprobs: logprobs,
        token_entropies: entropies,
        old_values: values,
        response_mask: vec![true; n],
        terminated_by_eos: terminated,
        outcome: None,
    })
}

/// One trajectory per instance; instance `i` uses stream `i` of `seed`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    instances: &[PromptInstance],
    sampling: &SamplingConfig,
    eos: TokenId,
    seed: u64,
) -> Result<Vec<Trajectory>, RolloutError> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| sample_trajectory(policy, inst, sampling, eos, &mut substream(seed, i as u64)))
        .collect()
}

/// `g` verified samples for one prompt, using streams `0..g` of `seed`.
pub fn group_rollout<P: Policy + ?Sized>(
    policy: &P,
    instance: &PromptInstance,
    g: usize,
    sampling: &SamplingConfig,
    verifier: &Verifier,
    seed: u64,
) -> Result<RolloutGroup, RolloutError> {
    if g < 2 {
        return Err(RolloutError::Input(format!("group size must be >= 2, got {g}")));
    }
    let mut trajectories = Vec::with_capacity(g);
    for i in 0..g {
        let mut t = sample_trajectory(policy, instance, sampling, verifier.vocab.eos, &mut substream(seed, i as u64))?;
        t.outcome = Some(verifier.score(&t.response_tokens, instance));
        trajectories.push(t);
    }
    let group_rewards = trajectories.iter().map(|t| t.reward().expect("verified")).collect();
    Ok(RolloutGroup {
        instance: instance.clone(),
        trajectories,
        group_rewards,
    })
}

/// Number of correct samples out of `k` for each prompt.
pub fn eval_pass_counts<P: Policy + ?Sized>(
    policy: &P,
    dataset: &[PromptInstance],
    k: usize,
    sampling: &SamplingConfig,
    verifier: &Verifier,
    seed: u64,
) -> Result<Vec<usize>, RolloutError> {
    if k == 0 {
        return Err(RolloutError::Input("k must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(RolloutError::Input("empty evaluation dataset".into()));
    }
    let eos = verifier.vocab.eos;
    let mut counts = Vec::with_capacity(dataset.len());
    for (p, inst) in dataset.iter().enumerate() {
        let mut hits = 0;
        for j in 0..k {
            let idx = (p * k + j) as u64;
            let t = sample_trajectory(policy, inst, sampling, eos, &mut substream(seed, idx))?;
            if verifier.score(&t.response_tokens, inst).correct {
                hits += 1;
            }
        }
        counts.push(hits);
    }
    Ok(counts)
}

/// Mean over prompts of the fraction of `k` samples that pass.
pub fn eval_avg_at_k<P: Policy + ?Sized>(
    policy: &P,
    dataset: &[PromptInstance],
    k: usize,
    sampling: &SamplingConfig,
    verifier: &Verifier,
    seed: u64,
) -> Result<f64, RolloutError> {
    let counts = eval_pass_counts(policy, dataset, k, sampling, verifier, seed)?;
    Ok(counts.iter().map(|&c| c as f64 / k as f64).sum::<f64>() / counts.len() as f64)
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    instance_id: u64,
    prompt: &'a [TokenId],
    response: &'a [TokenId],
    reward: Option<f64>,
}

/// One JSON object per line: instance id, token ids and reward.
pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], mut w: W) -> std::io::Result<()> {
    for t in trajectories {
        let rec = DumpRecord {
            instance_id: t.instance_id,
            prompt: &t.prompt_tokens,
            response: &t.response_tokens,
            reward: t.reward(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
