mod common;

use std::collections::HashSet;

use common::ScriptedPolicy;
use ibrolab::rollout::{eval_avg_at_k, SamplingConfig};
use ibrolab::tasks::{
    generate_dataset, overlong_penalty, read_dataset, render_answer, verify, write_dataset, OverlongConfig, PromptInstance,
    TaskKind, TaskSpec, Verifier, VocabMap,
};
use proptest::prelude::*;

fn vm() -> VocabMap {
    VocabMap::standard()
}

fn instance(kind: TaskKind, symbols: &[usize]) -> PromptInstance {
    let spec = TaskSpec::new(kind, 1, 8, 0);
    let mut prompt = vec![spec.vocab.bos];
    prompt.extend(symbols.iter().map(|&s| spec.vocab.digits[s]));
    PromptInstance {
        instance_id: 0,
        prompt_tokens: prompt,
        answer_tokens: spec.answer_for(symbols),
    }
}

#[test]
fn modular_sum_example() {
    let inst = instance(TaskKind::ModularSum, &[3, 4, 5]);
    assert_eq!(inst.answer_tokens, vec![vm().digits[2]]);
    let v = vm();
    let ok = verify(&[7, 7, v.sep, 2, v.eos], &inst, &v);
    assert!(ok.correct);
    assert_eq!(ok.reward, 1.0);
    assert_eq!(ok.extracted_answer, Some(vec![2]));
}

#[test]
fn reverse_copy_example() {
    let inst = instance(TaskKind::ReverseCopy, &[1, 2, 3]);
    assert_eq!(inst.answer_tokens, vec![3, 2, 1]);
}

#[test]
fn parity_example() {
    let inst = instance(TaskKind::Parity, &[1, 1, 0, 1]);
    assert_eq!(inst.answer_tokens, vec![vm().odd]);
    let inst = instance(TaskKind::Parity, &[1, 1, 0, 0]);
    assert_eq!(inst.answer_tokens, vec![vm().even]);
}

#[test]
fn malformed_responses_are_incorrect() {
    let v = vm();
    let inst = instance(TaskKind::ModularSum, &[3, 4, 5]);
    let no_sep = verify(&[2, v.eos], &inst, &v);
    assert!(!no_sep.correct && no_sep.reward == 0.0 && no_sep.extracted_answer.is_none());
    let no_eos = verify(&[v.sep, 2], &inst, &v);
    assert!(!no_eos.correct && no_eos.extracted_answer.is_none());
    let extra = verify(&[v.sep, 2, 9, v.eos], &inst, &v);
    assert!(!extra.correct);
    assert_eq!(extra.extracted_answer, Some(vec![2, 9]));
    assert!(!verify(&[], &inst, &v).correct);
    // A separator after the first EOS does not count.
    assert!(!verify(&[v.eos, v.sep, 2, v.eos], &inst, &v).correct);
}

#[test]
fn last_separator_before_eos_delimits_the_answer() {
    let v = vm();
    let inst = instance(TaskKind::ModularSum, &[3, 4, 5]);
    assert!(verify(&[v.sep, 7, v.sep, 2, v.eos, 5], &inst, &v).correct);
}

#[test]
fn overlong_examples() {
    assert_eq!(overlong_penalty(48, 64, 16, 1.0), 0.0);
    assert_eq!(overlong_penalty(64, 64, 16, 1.0), -1.0);
    assert_eq!(overlong_penalty(70, 64, 16, 1.0), -1.0);
    assert!((overlong_penalty(56, 64, 16, 1.0) + 0.5).abs() < 1e-15);
    assert!((overlong_penalty(7, 8, 4, 2.0) + 1.5).abs() < 1e-15);
}

#[test]
fn verifier_adds_penalty_to_base_reward() {
    let v = vm();
    let inst = instance(TaskKind::ModularSum, &[3, 4, 5]);
    let verifier = Verifier {
        vocab: v.clone(),
        max_len: 8,
        overlong: Some(OverlongConfig { buffer: 4, penalty: 1.0 }),
    };
    let r = verifier.score(&[0, 0, 0, 0, 0, v.sep, 2, v.eos], &inst);
    assert!(r.correct);
    assert_eq!(r.overlong_penalty, -1.0);
    assert_eq!(r.reward, 0.0);
    let r = verifier.score(&[0, 0, 0, v.sep, 2, v.eos], &inst);
    assert!((r.reward - 0.5).abs() < 1e-15);
    let r = verifier.score(&[v.sep, 2, v.eos], &inst);
    assert_eq!(r.reward, 1.0);
}

#[test]
fn datasets_are_deterministic_and_unique() {
    for kind in [TaskKind::ModularSum, TaskKind::ReverseCopy, TaskKind::Parity] {
        let spec = TaskSpec::new(kind, 3, 6, 42);
        let a = generate_dataset(&spec, 50).unwrap();
        let b = generate_dataset(&spec, 50).unwrap();
        assert_eq!(a, b);
        let prompts: HashSet<_> = a.iter().map(|i| &i.prompt_tokens).collect();
        assert_eq!(prompts.len(), 50);
        for inst in &a {
            let n = inst.prompt_tokens.len() - 1;
            assert!((3..=6).contains(&n));
            assert_eq!(inst.prompt_tokens[0], spec.vocab.bos);
        }
        let c = generate_dataset(&TaskSpec::new(kind, 3, 6, 43), 50).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn dataset_requests_are_validated() {
    let spec = TaskSpec::new(TaskKind::Parity, 2, 2, 0);
    assert_eq!(spec.prompt_space(), 4);
    assert_eq!(generate_dataset(&spec, 4).unwrap().len(), 4);
    assert!(generate_dataset(&spec, 5).is_err());
    assert!(generate_dataset(&spec, 0).is_err());
    assert!(generate_dataset(&TaskSpec::new(TaskKind::ModularSum, 0, 2, 0), 3).is_err());
    assert!(generate_dataset(&TaskSpec::new(TaskKind::ModularSum, 4, 2, 0), 3).is_err());
}

#[test]
fn spec_validation_checks_budget_and_vocab() {
    let spec = TaskSpec::new(TaskKind::ReverseCopy, 3, 6, 0);
    assert!(spec.validate(15, 64, 16).is_ok());
    assert!(spec.validate(12, 64, 16).is_err());
    assert!(spec.validate(15, 64, 7).is_err());
    assert!(spec.validate(15, 20, 16).is_err());
    let mut bad = TaskSpec::new(TaskKind::ModularSum, 2, 2, 0);
    bad.vocab.sep = bad.vocab.eos;
    assert!(bad.validate(15, 64, 8).is_err());
}

#[test]
fn dataset_roundtrips_through_text() {
    let data = generate_dataset(&TaskSpec::new(TaskKind::ReverseCopy, 2, 5, 9), 20).unwrap();
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 3);
    assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
}

#[test]
fn malformed_dataset_lines_are_rejected() {
    assert!(read_dataset("0\t10 1 2\n".as_bytes()).is_err());
    assert!(read_dataset("0\t10 x\t3\n".as_bytes()).is_err());
    assert!(read_dataset("a\t10 1\t3\n".as_bytes()).is_err());
    assert_eq!(read_dataset("0\t10 1 2\t3\n\n".as_bytes()).unwrap().len(), 1);
}

#[test]
fn task_kind_parses() {
    assert_eq!("parity".parse::<TaskKind>().unwrap(), TaskKind::Parity);
    assert!("sort".parse::<TaskKind>().is_err());
}

#[test]
fn uniform_policy_is_near_chance_on_modular_sum() {
    let spec = TaskSpec::new(TaskKind::ModularSum, 3, 6, 1);
    let data = generate_dataset(&spec, 100).unwrap();
    let policy = ScriptedPolicy::new(15, 32, |_| vec![0.0; 15]);
    let sampling = SamplingConfig::train(16);
    let rate = eval_avg_at_k(&policy, &data, 100, &sampling, &Verifier::exact(vm()), 3).unwrap();
    assert!(rate < 0.15, "{rate}");
}

proptest! {
    #[test]
    fn rendered_answers_verify(kind in prop::sample::select(vec![TaskKind::ModularSum, TaskKind::ReverseCopy, TaskKind::Parity]), seed in any::<u64>(), prefix in prop::collection::vec(0u32..10, 0..4)) {
        let spec = TaskSpec::new(kind, 1, 6, seed);
        for inst in generate_dataset(&spec, 5).unwrap() {
            let mut resp = prefix.clone();
            resp.extend(render_answer(&inst.answer_tokens, &spec.vocab));
            let out = verify(&resp, &inst, &spec.vocab);
            prop_assert!(out.correct);
            prop_assert_eq!(out.reward, 1.0);
        }
    }

    #[test]
    fn answers_follow_the_rule(kind in prop::sample::select(vec![TaskKind::ModularSum, TaskKind::ReverseCopy, TaskKind::Parity]), seed in any::<u64>()) {
        let spec = TaskSpec::new(kind, 1, 7, seed);
        for inst in generate_dataset(&spec, 5).unwrap() {
            let syms: Vec<u32> = inst.prompt_tokens[1..].to_vec();
            let want: Vec<u32> = match kind {
                TaskKind::ModularSum => vec![syms.iter().sum::<u32>() % 10],
                TaskKind::ReverseCopy => syms.iter().rev().copied().collect(),
                TaskKind::Parity => {
                    prop_assert!(syms.iter().all(|&s| s < 2));
                    vec![if syms.iter().sum::<u32>() % 2 == 1 { 14 } else { 13 }]
                }
            };
            prop_assert_eq!(&inst.answer_tokens, &want);
        }
    }

    #[test]
    fn overlong_penalty_is_monotone_and_bounded(max_len in 1usize..64, buf_frac in 0.0f64..1.0, pen in 0.0f64..3.0) {
        let buffer = 1 + ((max_len - 1) as f64 * buf_frac) as usize;
        let mut prev = 0.0;
        for len in 0..max_len + 5 {
            let p = overlong_penalty(len, max_len, buffer, pen);
            prop_assert!(p <= prev + 1e-15);
            prop_assert!(p >= -pen - 1e-15 && p <= 0.0);
            if len <= max_len - buffer {
                prop_assert_eq!(p, 0.0);
            }
            prev = p;
        }
        prop_assert_eq!(overlong_penalty(max_len, max_len, buffer, pen), -pen);
    }
}
