//! Seeded tiny environments and hand-built joints for identity sweeps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnumerableEnv, JointTable, Result};
use crate::model::{ModelConfig, PolicyParams};
use crate::tasks::PromptInstance;
use crate::TokenId;

/// A random environment together with a random policy that fits it.
#[derive(Debug, Clone)]
pub struct SeededEnv {
    pub env: EnumerableEnv,
    pub params: PolicyParams<f64>,
}

/// Vocabulary 3 to 6, response length 2 to 4, 1 to 4 prompts, a random
/// prior, and an answer map that is deterministic for even seeds and
/// stochastic for odd ones.
pub fn seeded_env(seed: u64) -> Result<SeededEnv> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = rng.gen_range(3..=6usize);
    let max_response_len = rng.gen_range(2..=4usize);
    let eos = (vocab_size - 1) as TokenId;
    let symbols: Vec<TokenId> = (0..eos).collect();

    let mut candidates: Vec<Vec<TokenId>> = Vec::new();
    for &a in &symbols {
        candidates.push(vec![a]);
        for &b in &symbols {
            candidates.push(vec![a, b]);
        }
    }
    candidates.shuffle(&mut rng);
    let n_prompts = rng.gen_range(1..=4usize).min(candidates.len());
    let n_labels = rng.gen_range(1..=3usize);
    let answers: Vec<Vec<TokenId>> = (0..n_labels).map(|i| vec![symbols[i % symbols.len()]]).collect();

    let prompts: Vec<PromptInstance> = candidates[..n_prompts]
        .iter()
        .enumerate()
        .map(|(i, p)| PromptInstance {
            instance_id: i as u64,
            prompt_tokens: p.clone(),
            answer_tokens: answers[rng.gen_range(0..n_labels)].clone(),
        })
        .collect();

    let prompt_prior = normalized(&mut rng, n_prompts);
    let answer_given_prompt = if seed % 2 == 0 {
        prompts
            .iter()
            .map(|p| {
                let idx = answers.iter().position(|a| *a == p.answer_tokens).expect("label exists");
                (0..n_labels).map(|j| if j == idx { 1.0 } else { 0.0 }).collect()
            })
            .collect()
    } else {
        (0..n_prompts).map(|_| normalized(&mut rng, n_labels)).collect()
    };

    let env = EnumerableEnv {
        prompts,
        prompt_prior,
        answers,
        answer_given_prompt,
        vocab_size,
        max_response_len,
        eos,
    };
    env.validate()?;

    let config = ModelConfig {
        vocab_size,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 2 + max_response_len,
        has_value_head: false,
        seed: seed.wrapping_mul(7919).wrapping_add(1),
    };
    let params = PolicyParams::init_with_std(&config, 1.0)?;
    Ok(SeededEnv { env, params })
}

fn normalized(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // Absorb rounding so the entries sum to one as closely as possible.
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

/// One prompt, two equally likely answers, and a first token equal to the
/// answer: `o_1` is uncertain given `q` and fully determined given `(q, a)`.
pub fn answer_decides_first_token() -> JointTable {
    let seq = |a: TokenId| BTreeMap::from([(vec![a, 2], 1.0)]);
    JointTable::new(vec![1.0], vec![vec![0.5, 0.5]], vec![vec![seq(0), seq(1)]]).expect("valid constructed joint")
}

/// One prompt, two equally likely answers, and a response distribution
/// that ignores the answer.
pub fn answer_independent_tokens() -> JointTable {
    let d = BTreeMap::from([(vec![0, 2], 0.5), (vec![1, 2], 0.5)]);
    JointTable::new(vec![1.0], vec![vec![0.5, 0.5]], vec![vec![d.clone(), d]]).expect("valid constructed joint")
}
