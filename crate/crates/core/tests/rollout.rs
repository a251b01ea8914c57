mod common;

use common::{softmax, tiny_config, ScriptedPolicy};
use ibrolab::model::{forward, PolicyParams};
use ibrolab::numerics::Graph;
use ibrolab::rollout::{
    derive_seed, eval_avg_at_k, eval_pass_counts, group_rollout, rollout, sample_trajectory, substream, SamplingConfig,
};
use ibrolab::tasks::{PromptInstance, Verifier, VocabMap};
use proptest::prelude::*;

const EOS: u32 = 11;

fn params(seed: u64, value_head: bool) -> PolicyParams<f32> {
    let mut cfg = tiny_config(15, 16, seed);
    cfg.has_value_head = value_head;
    PolicyParams::init_with_std(&cfg, 0.5).unwrap()
}

fn inst(id: u64, prompt: &[u32], answer: &[u32]) -> PromptInstance {
    PromptInstance {
        instance_id: id,
        prompt_tokens: prompt.to_vec(),
        answer_tokens: answer.to_vec(),
    }
}

#[test]
fn logprobs_entropies_and_values_match_full_forward() {
    let p = params(3, true);
    let sampling = SamplingConfig {
        temperature: 0.7,
        top_p: 0.9,
        max_new_tokens: 8,
    };
    let trajs = rollout(&p, &[inst(0, &[10, 3, 4], &[7]), inst(1, &[10, 9], &[9])], &sampling, EOS, 17).unwrap();
    for t in &trajs {
        let seq = t.scoring_inputs();
        let mut g = Graph::new();
        let out = forward(&p, &mut g, &seq).unwrap();
        let logits: Vec<f64> = g.value(out.logits).iter().map(|&x| x as f64).collect();
        let values: Vec<f64> = g.value(out.values.unwrap()).iter().map(|&x| x as f64).collect();
        let start = t.prompt_tokens.len() - 1;
        for (i, &tok) in t.response_tokens.iter().enumerate() {
            let row: Vec<f64> = logits[(start + i) * 15..(start + i + 1) * 15].iter().map(|z| z / 0.7).collect();
            let probs = softmax(&row);
            assert!((t.old_logprobs[i] - probs[tok as usize].ln()).abs() < 1e-9);
            assert!((t.token_entropies[i] - common::shannon(&probs)).abs() < 1e-9);
            assert!((t.old_values.as_ref().unwrap()[i] - values[start + i]).abs() < 1e-12);
        }
    }
}

#[test]
fn greedy_scores_under_untempered_policy() {
    let p = params(5, false);
    let t = sample_trajectory(&p, &inst(0, &[10, 1], &[1]), &SamplingConfig::greedy(6), EOS, &mut substream(0, 0)).unwrap();
    let mut prompt = t.prompt_tokens.clone();
    let mut prob = 1.0;
    for &tok in &t.response_tokens {
        let mut g = Graph::new();
        let out = forward(&p, &mut g, &prompt).unwrap();
        let v: Vec<f64> = g.value(out.logits).iter().map(|&x| x as f64).collect();
        let row = &v[(prompt.len() - 1) * 15..];
        let best = (0..15).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(tok as usize, best);
        prob *= softmax(row)[best];
        prompt.push(tok);
    }
    assert!((t.old_logprobs.iter().sum::<f64>() - prob.ln()).abs() < 1e-9);
}

#[test]
fn same_seed_same_rollouts() {
    let p = params(1, false);
    let data: Vec<_> = (0..6).map(|i| inst(i, &[10, i as u32], &[i as u32])).collect();
    let s = SamplingConfig::train(8);
    let a = rollout(&p, &data, &s, EOS, 99).unwrap();
    let b = rollout(&p, &data, &s, EOS, 99).unwrap();
    let c = rollout(&p, &data, &s, EOS, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn rollout_stream_depends_only_on_index() {
    let p = params(1, false);
    let data: Vec<_> = (0..5).map(|i| inst(i, &[10, 2], &[2])).collect();
    let s = SamplingConfig::train(8);
    let all = rollout(&p, &data, &s, EOS, 7).unwrap();
    for (i, t) in all.iter().enumerate() {
        let one = sample_trajectory(&p, &data[i], &s, EOS, &mut substream(7, i as u64)).unwrap();
        assert_eq!(&one, t);
    }
}

#[test]
fn group_matches_individual_streams() {
    let p = params(2, false);
    let i = inst(4, &[10, 5, 5], &[0]);
    let v = Verifier::exact(VocabMap::standard());
    let s = SamplingConfig::train(8);
    let group = group_rollout(&p, &i, 8, &s, &v, 31).unwrap();
    assert_eq!(group.trajectories.len(), 8);
    for (k, t) in group.trajectories.iter().enumerate() {
        let mut one = sample_trajectory(&p, &i, &s, EOS, &mut substream(31, k as u64)).unwrap();
        one.outcome = Some(v.score(&one.response_tokens, &i));
        assert_eq!(&one, t);
        assert_eq!(group.group_rewards[k], t.reward().unwrap());
    }
    assert!(group_rollout(&p, &i, 1, &s, &v, 31).is_err());
}

#[test]
fn scripted_answerer_scores_one() {
    let v = VocabMap::standard();
    // Emits SEP, then the prompt's last digit, then EOS.
    let policy = ScriptedPolicy::new(15, 16, move |ctx| {
        let step = ctx.len() - 2;
        let mut l = vec![-1e9; 15];
        let tok = match step {
            0 => 12,
            1 => ctx[1] as usize,
            _ => 11,
        };
        l[tok] = 0.0;
        l
    });
    let data: Vec<_> = (0..10).map(|d| inst(d, &[10, d as u32], &[d as u32])).collect();
    let score = eval_avg_at_k(&policy, &data, 4, &SamplingConfig::eval(8), &Verifier::exact(v), 0).unwrap();
    assert_eq!(score, 1.0);
}

#[test]
fn coin_flip_answerer_scores_half() {
    let policy = ScriptedPolicy::new(15, 16, |ctx| {
        let mut l = vec![f64::NEG_INFINITY; 15];
        match ctx.len() {
            2 => l[12] = 0.0,
            3 => {
                l[0] = 0.0;
                l[1] = 0.0;
            }
            _ => l[11] = 0.0,
        }
        l
    });
    let data = vec![inst(0, &[10, 3], &[0]); 50];
    let s = SamplingConfig::train(8);
    let v = Verifier::exact(VocabMap::standard());
    let counts = eval_pass_counts(&policy, &data, 40, &s, &v, 8).unwrap();
    assert_eq!(counts.len(), 50);
    let rate = counts.iter().sum::<usize>() as f64 / 2000.0;
    assert!((rate - 0.5).abs() < 4.0 * (0.25f64 / 2000.0).sqrt(), "{rate}");
    // Different prompts get different streams.
    assert!(counts.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn bad_inputs_are_errors() {
    let p = params(0, false);
    let v = Verifier::exact(VocabMap::standard());
    let i = inst(0, &[10, 1, 2], &[3]);
    assert!(sample_trajectory(&p, &i, &SamplingConfig::train(0), EOS, &mut substream(0, 0)).is_err());
    assert!(sample_trajectory(&p, &i, &SamplingConfig::train(15), EOS, &mut substream(0, 0)).is_err());
    assert!(eval_avg_at_k(&p, &[i.clone()], 0, &SamplingConfig::eval(4), &v, 0).is_err());
    assert!(eval_avg_at_k(&p, &[], 4, &SamplingConfig::eval(4), &v, 0).is_err());
}

#[test]
fn derived_seeds_are_distinct() {
    let mut seen = std::collections::HashSet::new();
    for a in 0..20u64 {
        for b in 0..20u64 {
            assert!(seen.insert(derive_seed(1, &[a, b])));
        }
    }
    assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    assert_eq!(derive_seed(5, &[1]), derive_seed(5, &[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trajectory_invariants(seed in any::<u64>(), t in 0.0f64..2.0, top_p in 0.05f64..=1.0, budget in 1usize..10) {
        let p = params(seed % 7, true);
        let s = SamplingConfig { temperature: t, top_p, max_new_tokens: budget };
        let traj = sample_trajectory(&p, &inst(0, &[10, 4, 4], &[8]), &s, EOS, &mut substream(seed, 0)).unwrap();
        let n = traj.response_tokens.len();
        prop_assert!(n >= 1 && n <= budget);
        prop_assert_eq!(traj.old_logprobs.len(), n);
        prop_assert_eq!(traj.token_entropies.len(), n);
        prop_assert_eq!(traj.old_values.as_ref().unwrap().len(), n);
        prop_assert!(traj.response_mask.iter().all(|&m| m));
        prop_assert_eq!(traj.terminated_by_eos, traj.response_tokens.last() == Some(&EOS));
        prop_assert!(traj.response_tokens[..n - 1].iter().all(|&x| x != EOS));
        if !traj.terminated_by_eos {
            prop_assert_eq!(n, budget);
        }
        prop_assert!(traj.old_logprobs.iter().all(|&l| l <= 0.0 && l.is_finite()));
        prop_assert!(traj.token_entropies.iter().all(|&h| h >= -1e-12 && h <= 15f64.ln() + 1e-9));
    }
}
