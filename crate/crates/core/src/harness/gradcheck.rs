use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::model::{forward_with, ModelConfig, PolicyParams};
use crate::numerics::{grad_check, GradReport, Graph, NumericsError, Tensor, Var};
use crate::rlcore::{build_batch_loss, ClipConfig, LossSettings, MiniBatch, RegularizerMode};
use crate::rollout::Trajectory;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub report: GradReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

/// Contracts any output to a scalar with fixed pseudo-random weights.
fn contract(g: &mut Graph<f64>, x: Var) -> std::result::Result<Var, NumericsError> {
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 17);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.weighted_sum(x, &w)
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, NumericsError>;

fn op_cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, OpFn)> {
    let m = |s: &[usize]| (s.to_vec(), -1.0, 1.0);
    vec![
        ("matmul", vec![m(&[3, 4]), m(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y)
        }),
        ("matmul_nt", vec![m(&[3, 4]), m(&[2, 4])], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            contract(g, y)
        }),
        ("add", vec![m(&[2, 3]), m(&[2, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        ("sub", vec![m(&[2, 3]), m(&[2, 3])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            contract(g, y)
        }),
        ("mul", vec![m(&[2, 3]), m(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            contract(g, y)
        }),
        ("minimum", vec![m(&[2, 3]), m(&[2, 3])], |g, v| {
            let y = g.minimum(v[0], v[1])?;
            contract(g, y)
        }),
        ("maximum", vec![m(&[2, 3]), m(&[2, 3])], |g, v| {
            let y = g.maximum(v[0], v[1])?;
            contract(g, y)
        }),
        ("add_row", vec![m(&[3, 4]), m(&[4])], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            contract(g, y)
        }),
        ("scale", vec![m(&[5])], |g, v| {
            let y = g.scale(v[0], -1.7);
            contract(g, y)
        }),
        ("exp", vec![m(&[5])], |g, v| {
            let y = g.exp(v[0]);
            contract(g, y)
        }),
        ("clamp", vec![m(&[6])], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5);
            contract(g, y)
        }),
        ("gelu", vec![(vec![6], -3.0, 3.0)], |g, v| {
            let y = g.gelu(v[0]);
            contract(g, y)
        }),
        ("rows", vec![m(&[4, 3])], |g, v| {
            let y = g.rows(v[0], &[2, 0, 2])?;
            contract(g, y)
        }),
        ("gather", vec![m(&[3, 4])], |g, v| {
            let y = g.gather(v[0], &[1, 3, 0])?;
            contract(g, y)
        }),
        ("log_softmax", vec![(vec![3, 5], -2.0, 2.0)], |g, v| {
            let y = g.log_softmax(v[0])?;
            contract(g, y)
        }),
        ("entropy", vec![(vec![3, 5], -2.0, 2.0)], |g, v| {
            let y = g.entropy(v[0])?;
            contract(g, y)
        }),
        ("causal_softmax", vec![(vec![4, 4], -2.0, 2.0)], |g, v| {
            let y = g.causal_softmax(v[0])?;
            contract(g, y)
        }),
        ("layer_norm", vec![m(&[3, 5]), m(&[5]), m(&[5])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            contract(g, y)
        }),
        ("slice_cols", vec![m(&[3, 5])], |g, v| {
            let y = g.slice_cols(v[0], 1, 3)?;
            contract(g, y)
        }),
        ("concat_cols", vec![m(&[3, 2]), m(&[3, 4])], |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            contract(g, y)
        }),
        ("concat_rows", vec![m(&[2, 3]), m(&[1, 3])], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            contract(g, y)
        }),
        ("sum", vec![m(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        ("weighted_sum", vec![m(&[4])], |g, v| g.weighted_sum(v[0], &[0.5, -1.0, 2.0, 0.0])),
        ("masked_mean", vec![m(&[5])], |g, v| {
            let y = g.exp(v[0]);
            Ok(g.masked_mean(y, &[true, false, true, true, false])?.value)
        }),
    ]
}

fn tiny_model(seed: u64) -> PolicyParams<f64> {
    let cfg = ModelConfig {
        vocab_size: 6,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        has_value_head: true,
        seed,
    };
    PolicyParams::init_with_std(&cfg, 0.5).expect("valid tiny config")
}

fn fake_trajectories(rng: &mut ChaCha8Rng) -> (Vec<Trajectory>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut trajs = Vec::new();
    let mut advs = Vec::new();
    let mut rets = Vec::new();
    for i in 0..3 {
        let prompt: Vec<u32> = (0..2 + i % 2).map(|_| rng.gen_range(0..6)).collect();
        let n = 2 + i;
        let response: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        trajs.push(Trajectory {
            instance_id: i as u64,
            prompt_tokens: prompt,
            response_tokens: response,
            old_logprobs: (0..n).map(|_| rng.gen_range(-2.3..-1.2)).collect(),
            token_entropies: vec![0.0; n],
            old_values: Some((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            response_mask: (0..n).map(|t| t != 1 || i != 2).collect(),
            terminated_by_eos: false,
            outcome: None,
        });
        advs.push((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect());
        rets.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    (trajs, advs, rets)
}

/// Finite-difference checks of every differentiable graph op, the
/// transformer forward pass, and the full training loss under each
/// regularizer mode, all in 64-bit.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let params: Vec<Tensor<f64>> = shapes.iter().map(|(s, lo, hi)| rand_tensor(&mut rng, s, *lo, *hi)).collect();
        let report = grad_check(f, &params, EPS)?;
        out.push(GradCheckEntry {
            name: name.to_string(),
            report,
        });
    }

    let model = tiny_model(seed);
    let tensors = model.tensors().to_vec();
    let tokens = [1u32, 4, 0, 5, 2];
    let report = grad_check(
        |g, vars| {
            let o = forward_with(&model, g, vars.to_vec(), &tokens).map_err(|e| NumericsError::Invalid(e.to_string()))?;
            let l = contract(g, o.logits)?;
            let v = contract(g, o.values.expect("value head"))?;
            g.add(l, v)
        },
        &tensors,
        EPS,
    )?;
    out.push(GradCheckEntry {
        name: "transformer_forward".into(),
        report,
    });

    let (trajs, advs, rets) = fake_trajectories(&mut rng);
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let modes = [
        ("total_loss_none", RegularizerMode::none()),
        ("total_loss_naive", RegularizerMode::naive(0.1)),
        ("total_loss_ib", RegularizerMode::ib(0.1)),
        ("total_loss_generalized_ib", RegularizerMode::generalized_ib(0.1, 0.3)),
    ];
    for (name, mode) in modes {
        let settings = LossSettings {
            clip: ClipConfig::default(),
            regularizer: mode,
            temperature: 0.8,
            actor: true,
            value_coeff: 0.5,
            value_clip: Some(0.2),
        };
        let batch = MiniBatch {
            trajectories: &refs,
            advantages: &advs,
            returns: Some(&rets),
        };
        let report = grad_check(
            |g, vars| {
                build_batch_loss(&model, g, vars, &batch, &settings)
                    .map(|l| l.total)
                    .map_err(|e| NumericsError::Invalid(e.to_string()))
            },
            &tensors,
            EPS,
        )?;
        out.push(GradCheckEntry {
            name: name.into(),
            report,
        });
    }
    Ok(out)
}
