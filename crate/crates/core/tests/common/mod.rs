#![allow(dead_code)]

use std::collections::HashMap;

use ibrolab::model::{forward, DecodeState, ModelConfig, ModelError, Policy, PolicyParams};
use ibrolab::numerics::{Graph, Scalar};
use ibrolab::TokenId;

type LogitFn = Box<dyn Fn(&[TokenId]) -> Vec<f64>>;

/// A policy whose next-token logits are an arbitrary function of the full
/// context (prompt followed by the response so far).
pub struct ScriptedPolicy {
    pub vocab: usize,
    pub max_len: usize,
    pub f: LogitFn,
}

impl ScriptedPolicy {
    pub fn new(vocab: usize, max_len: usize, f: impl Fn(&[TokenId]) -> Vec<f64> + 'static) -> Self {
        Self {
            vocab,
            max_len,
            f: Box::new(f),
        }
    }
}

struct ScriptedState<'a> {
    policy: &'a ScriptedPolicy,
    ctx: Vec<TokenId>,
}

impl DecodeState for ScriptedState<'_> {
    fn next_logits(&self) -> Vec<f64> {
        (self.policy.f)(&self.ctx)
    }

    fn push(&mut self, token: TokenId) -> Result<(), ModelError> {
        self.ctx.push(token);
        Ok(())
    }
}

impl Policy for ScriptedPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_seq_len(&self) -> usize {
        self.max_len
    }

    fn start<'s>(&'s self, prompt: &[TokenId]) -> Result<Box<dyn DecodeState + 's>, ModelError> {
        Ok(Box::new(ScriptedState {
            policy: self,
            ctx: prompt.to_vec(),
        }))
    }
}

/// Plain softmax written out directly.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `-sum p ln p` over a collection of probabilities.
pub fn shannon<'a>(ps: impl IntoIterator<Item = &'a f64>) -> f64 {
    ps.into_iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Probability of `response` after `prompt`, from one full (uncached)
/// forward pass and an explicit softmax per position.
pub fn sequence_prob_full_forward<F: Scalar>(params: &PolicyParams<F>, prompt: &[TokenId], response: &[TokenId]) -> f64 {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&response[..response.len() - 1]);
    let mut g = Graph::new();
    let out = forward(params, &mut g, &seq).unwrap();
    let v = params.config().vocab_size;
    let logits: Vec<f64> = g.value(out.logits).iter().map(|x| x.to_f64().unwrap()).collect();
    let mut p = 1.0;
    for (t, &tok) in response.iter().enumerate() {
        let row = &logits[(prompt.len() - 1 + t) * v..(prompt.len() + t) * v];
        p *= softmax(row)[tok as usize];
    }
    p
}

pub fn tiny_config(vocab: usize, max_seq_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len,
        has_value_head: false,
        seed,
    }
}

/// Explicit joint `p(q, a, r)` held as a map, with entropies computed by
/// summing it out directly.
pub struct BruteJoint {
    pub p: HashMap<(usize, usize, Vec<TokenId>), f64>,
}

impl BruteJoint {
    fn marginal<K: std::hash::Hash + Eq>(&self, key: impl Fn(usize, usize, &Vec<TokenId>) -> K) -> HashMap<K, f64> {
        let mut m = HashMap::new();
        for ((q, a, r), &p) in &self.p {
            *m.entry(key(*q, *a, r)).or_insert(0.0) += p;
        }
        m
    }

    fn h<K: std::hash::Hash + Eq>(&self, key: impl Fn(usize, usize, &Vec<TokenId>) -> K) -> f64 {
        shannon(self.marginal(key).values())
    }

    pub fn h_r(&self) -> f64 {
        self.h(|_, _, r| r.clone())
    }

    pub fn h_r_given_q(&self) -> f64 {
        self.h(|q, _, r| (q, r.clone())) - self.h(|q, _, _| q)
    }

    pub fn h_r_given_a(&self) -> f64 {
        self.h(|_, a, r| (a, r.clone())) - self.h(|_, a, _| a)
    }

    pub fn h_r_given_qa(&self) -> f64 {
        self.h(|q, a, r| (q, a, r.clone())) - self.h(|q, a, _| (q, a))
    }

    pub fn h_q_given_a(&self) -> f64 {
        self.h(|q, a, _| (q, a)) - self.h(|_, a, _| a)
    }

    pub fn h_q_given_ra(&self) -> f64 {
        self.h(|q, a, r| (q, a, r.clone())) - self.h(|_, a, r| (a, r.clone()))
    }
}
