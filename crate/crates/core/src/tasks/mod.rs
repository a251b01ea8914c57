//! Synthetic tasks with rule-checkable answers.
//!
//! A prompt is `BOS s_1 .. s_n`. A well-formed response ends with
//! `SEP a_1 .. a_k EOS`; anything may precede the last `SEP`.

mod io;

pub use io::{read_dataset, write_dataset};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Answer is the digit sum modulo 10.
    ModularSum,
    /// Answer is the prompt symbols in reverse order.
    ReverseCopy,
    /// Prompt is bits; answer is `odd` or `even` by the count of ones.
    Parity,
}

impl std::str::FromStr for TaskKind {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modular_sum" => Ok(Self::ModularSum),
            "reverse_copy" => Ok(Self::ReverseCopy),
            "parity" => Ok(Self::Parity),
            other => Err(TaskError::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Token ids of the grammar's named symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    /// `digits[i]` is the token for the symbol with value `i`.
    pub digits: Vec<TokenId>,
    pub even: TokenId,
    pub odd: TokenId,
}

impl Default for VocabMap {
    fn default() -> Self {
        Self::standard()
    }
}

impl VocabMap {
    /// Digits `0..=9` map to ids `0..=9`, followed by BOS, EOS, SEP, EVEN, ODD.
    pub fn standard() -> Self {
        Self {
            digits: (0..10).collect(),
            bos: 10,
            eos: 11,
            sep: 12,
            even: 13,
            odd: 14,
        }
    }

    /// Smallest vocabulary size that holds every mapped token.
    pub fn min_vocab_size(&self) -> usize {
        self.digits
            .iter()
            .chain([&self.bos, &self.eos, &self.sep, &self.even, &self.odd])
            .max()
            .map_or(0, |&m| m as usize + 1)
    }

    fn validate(&self, kind: TaskKind) -> Result<(), TaskError> {
        let need = match kind {
            TaskKind::ModularSum => 10,
            TaskKind::ReverseCopy | TaskKind::Parity => 2,
        };
        if self.digits.len() < need {
            return Err(TaskError::Config(format!(
                "{kind:?} needs {need} symbol tokens, vocab map has {}",
                self.digits.len()
            )));
        }
        let mut ids: Vec<TokenId> = vec![self.bos, self.eos, self.sep];
        ids.extend(&self.digits);
        if kind == TaskKind::Parity {
            ids.extend([self.even, self.odd]);
        }
        let unique: HashSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(TaskError::Config("vocab map reuses a token id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Inclusive range of prompt symbol counts (BOS excluded).
    pub prompt_length_range: (usize, usize),
    pub vocab: VocabMap,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind,
            prompt_length_range: (min_len, max_len),
            vocab: VocabMap::standard(),
            seed,
        }
    }

    fn alphabet(&self) -> &[TokenId] {
        match self.kind {
            TaskKind::ModularSum => &self.vocab.digits[..10],
            TaskKind::ReverseCopy => &self.vocab.digits,
            TaskKind::Parity => &self.vocab.digits[..2],
        }
    }

    /// Longest prompt, BOS included.
    pub fn max_prompt_tokens(&self) -> usize {
        self.prompt_length_range.1 + 1
    }

    /// Length of the answer grammar `SEP answer EOS` for the longest prompt.
    pub fn max_answer_tokens(&self) -> usize {
        let answer = match self.kind {
            TaskKind::ModularSum | TaskKind::Parity => 1,
            TaskKind::ReverseCopy => self.prompt_length_range.1,
        };
        answer + 2
    }

    /// Checks the grammar against a model vocabulary and sequence budget.
    pub fn validate(&self, vocab_size: usize, max_seq_len: usize, response_budget: usize) -> Result<(), TaskError> {
        let (lo, hi) = self.prompt_length_range;
        if lo == 0 || lo > hi {
            return Err(TaskError::Config(format!("bad prompt length range ({lo}, {hi})")));
        }
        self.vocab.validate(self.kind)?;
        if self.vocab.min_vocab_size() > vocab_size {
            return Err(TaskError::Config(format!(
                "grammar needs {} tokens, model vocabulary has {vocab_size}",
                self.vocab.min_vocab_size()
            )));
        }
        if response_budget < self.max_answer_tokens() {
            return Err(TaskError::Config(format!(
                "response budget {response_budget} cannot hold a {}-token answer",
                self.max_answer_tokens()
            )));
        }
        if self.max_prompt_tokens() + response_budget > max_seq_len {
            return Err(TaskError::Config(format!(
                "prompt ({}) plus response budget ({response_budget}) exceeds max_seq_len {max_seq_len}",
                self.max_prompt_tokens()
            )));
        }
        Ok(())
    }

    /// Number of distinct prompts the spec can produce.
    pub fn prompt_space(&self) -> u128 {
        let base = self.alphabet().len() as u128;
        let (lo, hi) = self.prompt_length_range;
        (lo..=hi)
            .map(|l| base.checked_pow(l as u32).unwrap_or(u128::MAX))
            .fold(0u128, |a, b| a.saturating_add(b))
    }

    /// The answer tokens for a list of prompt symbol values.
    pub fn answer_for(&self, symbols: &[usize]) -> Vec<TokenId> {
        let v = &self.vocab;
        match self.kind {
            TaskKind::ModularSum => vec![v.digits[symbols.iter().sum::<usize>() % 10]],
            TaskKind::ReverseCopy => symbols.iter().rev().map(|&s| v.digits[s]).collect(),
            TaskKind::Parity => {
                let ones = symbols.iter().filter(|&&s| s == 1).count();
                vec![if ones % 2 == 1 { v.odd } else { v.even }]
            }
        }
    }

    /// A well-formed answer drawn without looking at the prompt: a random
    /// digit, a random symbol string of the right length, or a random parity.
    pub fn random_answer<R: Rng + ?Sized>(&self, instance: &PromptInstance, rng: &mut R) -> Vec<TokenId> {
        let v = &self.vocab;
        match self.kind {
            TaskKind::ModularSum => vec![*v.digits[..10].choose(rng).expect("ten digits")],
            TaskKind::ReverseCopy => (0..instance.answer_tokens.len())
                .map(|_| *self.alphabet().choose(rng).expect("non-empty alphabet"))
                .collect(),
            TaskKind::Parity => vec![if rng.gen::<bool>() { v.odd } else { v.even }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptInstance {
    pub instance_id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
}

/// Verification result for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    /// Base reward plus the (non-positive) overlong penalty.
    pub reward: f64,
    pub correct: bool,
    pub extracted_answer: Option<Vec<TokenId>>,
    pub overlong_penalty: f64,
}

impl RewardOutcome {
    pub fn base_reward(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }

    pub fn with_overlong_penalty(mut self, penalty: f64) -> Self {
        self.overlong_penalty = penalty;
        self.reward = self.base_reward() + penalty;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("task config error: {0}")]
    Config(String),
    #[error("dataset format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `m` distinct instances, deterministic in `spec.seed`.
pub fn generate_dataset(spec: &TaskSpec, m: usize) -> Result<Vec<PromptInstance>, TaskError> {
    if m == 0 {
        return Err(TaskError::Config("dataset size must be >= 1".into()));
    }
    let (lo, hi) = spec.prompt_length_range;
    if lo == 0 || lo > hi {
        return Err(TaskError::Config(format!("bad prompt length range ({lo}, {hi})")));
    }
    spec.vocab.validate(spec.kind)?;
    if (m as u128) > spec.prompt_space() {
        return Err(TaskError::Config(format!(
            "requested {m} unique prompts but only {} exist",
            spec.prompt_space()
        )));
    }
    let alphabet = spec.alphabet().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let len = rng.gen_range(lo..=hi);
        let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..alphabet.len())).collect();
        let mut prompt = Vec::with_capacity(len + 1);
        prompt.push(spec.vocab.bos);
        prompt.extend(symbols.iter().map(|&s| alphabet[s]));
        if !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(PromptInstance {
            instance_id: out.len() as u64,
            prompt_tokens: prompt,
            answer_tokens: spec.answer_for(&symbols),
        });
    }
    Ok(out)
}

/// `SEP answer EOS`.
pub fn render_answer(answer: &[TokenId], vocab: &VocabMap) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(answer.len() + 2);
    out.push(vocab.sep);
    out.extend_from_slice(answer);
    out.push(vocab.eos);
    out
}

/// Exact-match check. The answer span runs from the last `SEP` before the
/// first `EOS` up to that `EOS`.
pub fn verify(response: &[TokenId], instance: &PromptInstance, vocab: &VocabMap) -> RewardOutcome {
    let extracted = response
        .iter()
        .position(|&t| t == vocab.eos)
        .and_then(|end| {
            response[..end]
                .iter()
                .rposition(|&t| t == vocab.sep)
                .map(|s| response[s + 1..end].to_vec())
        });
    let correct = extracted.as_deref() == Some(&instance.answer_tokens[..]);
    RewardOutcome {
        reward: if correct { 1.0 } else { 0.0 },
        correct,
        extracted_answer: extracted,
        overlong_penalty: 0.0,
    }
}

/// Soft length-penalty settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlongConfig {
    /// Length of the ramp that ends at the response budget.
    pub buffer: usize,
    pub penalty: f64,
}

/// Scores responses: exact match plus an optional overlong penalty measured
/// against `max_len` response tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Verifier {
    pub vocab: VocabMap,
    pub max_len: usize,
    pub overlong: Option<OverlongConfig>,
}

impl Verifier {
    pub fn exact(vocab: VocabMap) -> Self {
        Self {
            vocab,
            max_len: usize::MAX,
            overlong: None,
        }
    }

    pub fn score(&self, response: &[TokenId], instance: &PromptInstance) -> RewardOutcome {
        let out = verify(response, instance, &self.vocab);
        match self.overlong {
            Some(o) => {
                let p = overlong_penalty(response.len(), self.max_len, o.buffer, o.penalty);
                out.with_overlong_penalty(p)
            }
            None => out,
        }
    }
}

/// Soft length penalty: zero up to `max_len - buffer`, then a linear ramp
/// reaching `-max_penalty` at `max_len`.
pub fn overlong_penalty(response_len: usize, max_len: usize, buffer: usize, max_penalty: f64) -> f64 {
    debug_assert!(buffer > 0 && buffer <= max_len && max_penalty >= 0.0);
    let start = max_len.saturating_sub(buffer);
    if response_len <= start {
        return 0.0;
    }
    if response_len >= max_len || buffer == 0 {
        return -max_penalty;
    }
    -max_penalty * (response_len - start) as f64 / buffer as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(spec: &TaskSpec, symbols: &[usize]) -> PromptInstance {
        let mut prompt = vec![spec.vocab.bos];
        prompt.extend(symbols.iter().map(|&s| spec.vocab.digits[s]));
        PromptInstance {
            instance_id: 0,
            prompt_tokens: prompt,
            answer_tokens: spec.answer_for(symbols),
        }
    }

    #[test]
    fn answers_follow_task_definitions() {
        let ms = TaskSpec::new(TaskKind::ModularSum, 3, 6, 0);
        assert_eq!(ms.answer_for(&[3, 4, 5]), vec![2]);
        let rc = TaskSpec::new(TaskKind::ReverseCopy, 3, 6, 0);
        assert_eq!(rc.answer_for(&[7, 8, 9]), vec![9, 8, 7]);
        let par = TaskSpec::new(TaskKind::Parity, 3, 6, 0);
        assert_eq!(par.answer_for(&[1, 1, 0, 1]), vec![par.vocab.odd]);
        assert_eq!(par.answer_for(&[1, 1, 0, 0]), vec![par.vocab.even]);
    }

    #[test]
    fn verify_exact_match_rules() {
        let spec = TaskSpec::new(TaskKind::ModularSum, 3, 6, 0);
        let inst = instance(&spec, &[3, 4, 5]);
        let v = &spec.vocab;
        let ok = verify(&[7, 7, v.sep, 2, v.eos], &inst, v);
        assert!(ok.correct);
        assert_eq!(ok.reward, 1.0);
        assert_eq!(ok.extracted_answer, Some(vec![2]));

        let no_sep = verify(&[2, v.eos], &inst, v);
        assert!(!no_sep.correct);
        assert_eq!(no_sep.reward, 0.0);
        assert_eq!(no_sep.extracted_answer, None);

        let no_eos = verify(&[v.sep, 2], &inst, v);
        assert!(!no_eos.correct);
        assert_eq!(no_eos.extracted_answer, None);

        let extra = verify(&[v.sep, 2, 9, v.eos], &inst, v);
        assert!(!extra.correct);
        assert_eq!(extra.extracted_answer, Some(vec![2, 9]));

        // Tokens after the first EOS are ignored.
        assert!(verify(&[v.sep, 2, v.eos, v.sep, 5, v.eos], &inst, v).correct);
    }

    #[test]
    fn overlong_ramp() {
        assert_eq!(overlong_penalty(48, 64, 16, 1.0), 0.0);
        assert_eq!(overlong_penalty(64, 64, 16, 1.0), -1.0);
        assert_eq!(overlong_penalty(70, 64, 16, 1.0), -1.0);
        assert!((overlong_penalty(56, 64, 16, 1.0) + 0.5).abs() < 1e-15);
        assert_eq!(overlong_penalty(3, 16, 4, 1.0), 0.0);
    }

    #[test]
    fn penalty_feeds_final_reward() {
        let spec = TaskSpec::new(TaskKind::ModularSum, 3, 3, 0);
        let inst = instance(&spec, &[1, 1, 1]);
        let out = verify(&[spec.vocab.sep, 3, spec.vocab.eos], &inst, &spec.vocab).with_overlong_penalty(-0.25);
        assert_eq!(out.reward, 0.75);
        assert_eq!(out.base_reward(), 1.0);
    }

    #[test]
    fn verifier_applies_overlong_ramp() {
        let spec = TaskSpec::new(TaskKind::ModularSum, 3, 3, 0);
        let inst = instance(&spec, &[1, 1, 1]);
        let v = Verifier {
            vocab: spec.vocab.clone(),
            max_len: 8,
            overlong: Some(OverlongConfig { buffer: 4, penalty: 1.0 }),
        };
        let short = [spec.vocab.sep, 3, spec.vocab.eos];
        assert_eq!(v.score(&short, &inst).reward, 1.0);
        let long = [7, 7, 7, spec.vocab.sep, 3, spec.vocab.eos];
        assert_eq!(v.score(&long, &inst).reward, 0.5);
        assert_eq!(Verifier::exact(spec.vocab.clone()).score(&long, &inst).reward, 1.0);
    }

    #[test]
    fn dataset_is_unique_and_deterministic() {
        let spec = TaskSpec::new(TaskKind::ModularSum, 2, 3, 4);
        let a = generate_dataset(&spec, 300).unwrap();
        let b = generate_dataset(&spec, 300).unwrap();
        assert_eq!(a, b);
        let prompts: HashSet<_> = a.iter().map(|i| &i.prompt_tokens).collect();
        assert_eq!(prompts.len(), 300);
        for inst in &a {
            let answer = render_answer(&inst.answer_tokens, &spec.vocab);
            assert!(verify(&answer, inst, &spec.vocab).correct);
        }
    }

    #[test]
    fn dataset_errors() {
        let spec = TaskSpec::new(TaskKind::Parity, 1, 2, 0);
        assert_eq!(spec.prompt_space(), 6);
        assert!(generate_dataset(&spec, 7).is_err());
        assert_eq!(generate_dataset(&spec, 6).unwrap().len(), 6);
        assert!(generate_dataset(&spec, 0).is_err());

        let mut small = TaskSpec::new(TaskKind::ModularSum, 2, 3, 0);
        small.vocab.digits.truncate(5);
        assert!(matches!(generate_dataset(&small, 3), Err(TaskError::Config(_))));
    }

    #[test]
    fn validate_checks_vocab_and_budget() {
        let spec = TaskSpec::new(TaskKind::ModularSum, 3, 6, 0);
        assert!(spec.validate(32, 64, 16).is_ok());
        assert!(spec.validate(12, 64, 16).is_err());
        assert!(spec.validate(32, 20, 16).is_err());
        assert!(spec.validate(32, 64, 2).is_err());
    }
}
