mod common;

use common::tiny_config;
use ibrolab::model::{
    forward, nucleus_distribution, param_layout, read_checkpoint, sample_token, write_checkpoint, Decoder, ModelConfig,
    ModelError, Policy, PolicyParams,
};
use ibrolab::numerics::Graph;
use ibrolab::TokenId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(value_head: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 12,
        n_layers: 2,
        n_heads: 3,
        max_seq_len: 10,
        has_value_head: value_head,
        seed: 11,
    }
}

/// Straight-line GPT forward pass over nested vectors, read off the named
/// parameter tensors.
fn naive_forward(p: &PolicyParams<f64>, tokens: &[TokenId]) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    let c = p.config().clone();
    let d = c.d_model;
    let dh = d / c.n_heads;
    let w = |name: &str| p.tensor(name).unwrap().values().to_vec();
    let lin = |x: &[f64], wt: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * wt[i * out + j]).sum::<f64>()).collect()
    };
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, v)| (v - m) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

    let tok = w("tok_emb");
    let pos = w("pos_emb");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|i| tok[id as usize * d + i] + pos[t * d + i]).collect())
        .collect();
    for l in 0..c.n_layers {
        let pre = format!("h{l}.");
        let g = |s: &str| w(&format!("{pre}{s}"));
        let qkv: Vec<Vec<f64>> = xs.iter().map(|x| lin(&ln(x, &g("ln1.g"), &g("ln1.b")), &g("attn.w_qkv"), &g("attn.b_qkv"), 3 * d)).collect();
        let mut attn = vec![vec![0.0; d]; xs.len()];
        for h in 0..c.n_heads {
            for t in 0..xs.len() {
                let q = &qkv[t][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| q.iter().zip(&qkv[s][d + h * dh..d + (h + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let probs = common::softmax(&scores);
                for (s, pr) in probs.iter().enumerate() {
                    for i in 0..dh {
                        attn[t][h * dh + i] += pr * qkv[s][2 * d + h * dh + i];
                    }
                }
            }
        }
        for (x, a) in xs.iter_mut().zip(&attn) {
            let o = lin(a, &g("attn.w_o"), &g("attn.b_o"), d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            let f = lin(&ln(x, &g("ln2.g"), &g("ln2.b")), &g("mlp.w_fc"), &g("mlp.b_fc"), 4 * d);
            let f: Vec<f64> = f.into_iter().map(gelu).collect();
            let f = lin(&f, &g("mlp.w_proj"), &g("mlp.b_proj"), d);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
    }
    let hf: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, &w("ln_f.g"), &w("ln_f.b"))).collect();
    let logits = hf.iter().map(|h| lin(h, &w("head.w"), &w("head.b"), c.vocab_size)).collect();
    let values = c.has_value_head.then(|| hf.iter().map(|h| lin(h, &w("value.w"), &w("value.b"), 1)[0]).collect());
    (logits, values)
}

#[test]
fn forward_matches_naive_implementation() {
    let p = PolicyParams::<f64>::init_with_std(&config(true), 0.3).unwrap();
    let tokens = [3, 0, 6, 6, 1, 2];
    let mut g = Graph::new();
    let out = forward(&p, &mut g, &tokens).unwrap();
    let (logits, values) = naive_forward(&p, &tokens);
    for (got, want) in g.value(out.logits).chunks(7).zip(&logits) {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    for (a, b) in g.value(out.values.unwrap()).iter().zip(values.unwrap()) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn check_decoder_bitwise<F: ibrolab::numerics::Scalar + Bits>(p: &PolicyParams<F>, tokens: &[TokenId]) {
    let mut g = Graph::new();
    let out = forward(p, &mut g, tokens).unwrap();
    let v = p.config().vocab_size;
    let full = g.value(out.logits).to_vec();
    let full_values = out.values.map(|x| g.value(x).to_vec());
    let mut dec = Decoder::new(p, &tokens[..1]).unwrap();
    for t in 0..tokens.len() {
        if t > 0 {
            dec.step(tokens[t]).unwrap();
        }
        assert_eq!(dec.len(), t + 1);
        let row = &full[t * v..(t + 1) * v];
        assert!(dec.logits().iter().zip(row).all(|(a, b)| a.bits() == b.bits()), "position {t}");
        if let Some(fv) = &full_values {
            assert_eq!(dec.value().unwrap().bits(), fv[t].bits());
        }
    }
}

trait Bits {
    fn bits(&self) -> u64;
}
impl Bits for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}
impl Bits for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

#[test]
fn decoder_is_bitwise_identical_to_forward() {
    let tokens = [1, 5, 2, 2, 0, 6, 3, 4, 4, 1];
    check_decoder_bitwise(&PolicyParams::<f32>::init_with_std(&config(true), 0.2).unwrap(), &tokens);
    check_decoder_bitwise(&PolicyParams::<f64>::init_with_std(&config(false), 0.2).unwrap(), &tokens);
}

#[test]
fn forward_is_causal() {
    let p = PolicyParams::<f64>::init_with_std(&config(false), 0.3).unwrap();
    let mut g = Graph::new();
    let a = forward(&p, &mut g, &[1, 2, 3, 4]).unwrap();
    let b = forward(&p, &mut g, &[1, 2, 3, 0]).unwrap();
    assert_eq!(g.value(a.logits)[..21], g.value(b.logits)[..21]);
    assert_ne!(g.value(a.logits)[21..], g.value(b.logits)[21..]);
}

#[test]
fn decoder_rejects_overflow_and_bad_tokens() {
    let p = PolicyParams::<f32>::init(&tiny_config(5, 3, 0)).unwrap();
    let mut dec = Decoder::new(&p, &[0, 1, 2]).unwrap();
    assert!(matches!(dec.step(0), Err(ModelError::SequenceTooLong { .. })));
    assert!(Decoder::new(&p, &[9]).is_err());
    assert!(Decoder::new(&p, &[]).is_err());
}

#[test]
fn policy_trait_matches_decoder() {
    let p = PolicyParams::<f32>::init_with_std(&config(true), 0.2).unwrap();
    let mut st = p.start(&[2, 3]).unwrap();
    let mut dec = Decoder::new(&p, &[2, 3]).unwrap();
    for tok in [4, 0, 1] {
        let a = st.next_logits();
        assert!(a.iter().zip(dec.logits()).all(|(x, y)| *x == *y as f64));
        st.push(tok).unwrap();
        dec.step(tok).unwrap();
    }
    assert_eq!(st.value(), dec.value().map(|v| v as f64));
}

#[test]
fn layout_counts_match_closed_form() {
    for (v, d, l, s, vh) in [(7, 12, 2, 10, true), (12, 16, 1, 16, false), (3, 4, 3, 5, true)] {
        let cfg = ModelConfig {
            vocab_size: v,
            d_model: d,
            n_layers: l,
            n_heads: 2,
            max_seq_len: s,
            has_value_head: vh,
            seed: 0,
        };
        let per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
        let want = v * d + s * d + l * per_layer + 2 * d + d * v + v + if vh { d + 1 } else { 0 };
        let got: usize = param_layout(&cfg).iter().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(got, want);
        assert_eq!(PolicyParams::<f32>::init(&cfg).unwrap().param_count(), want);
    }
}

#[test]
fn init_is_seeded() {
    let a = PolicyParams::<f32>::init(&config(true)).unwrap();
    let b = PolicyParams::<f32>::init(&config(true)).unwrap();
    let mut other = config(true);
    other.seed += 1;
    let c = PolicyParams::<f32>::init(&other).unwrap();
    assert_eq!(a.flat_values(), b.flat_values());
    assert_ne!(a.flat_values(), c.flat_values());
    assert_eq!(a.param_l2_from_init(), 0.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = config(false);
    c.n_heads = 5;
    assert!(PolicyParams::<f32>::init(&c).is_err());
    let mut c = config(false);
    c.vocab_size = 0;
    assert!(PolicyParams::<f32>::init(&c).is_err());
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let mut p = PolicyParams::<f32>::init_with_std(&config(true), 0.4).unwrap();
    p.tensors_mut()[3].values_mut()[0] = f32::MIN_POSITIVE;
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"IBRO");
    let q = read_checkpoint(buf.as_slice(), Some(&config(true))).unwrap();
    assert_eq!(q.config(), p.config());
    assert!(q.flat_values().iter().zip(p.flat_values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_rejects_corruption() {
    let p = PolicyParams::<f32>::init(&config(false)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice(), None).is_err());
    assert!(read_checkpoint(&buf[..buf.len() - 3], None).is_err());
    let mut other = config(false);
    other.d_model = 6;
    assert!(read_checkpoint(buf.as_slice(), Some(&other)).is_err());
}

proptest! {
    #[test]
    fn nucleus_is_a_valid_truncated_distribution(logits in prop::collection::vec(-5.0f64..5.0, 2..10), t in 0.05f64..3.0, top_p in 0.01f64..=1.0) {
        let dist = nucleus_distribution(&logits, t, top_p).unwrap();
        let total: f64 = dist.iter().map(|x| x.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
        let full = common::softmax(&scaled);
        let kept_mass: f64 = dist.iter().map(|(i, _)| full[*i as usize]).sum();
        prop_assert!(kept_mass >= top_p - 1e-9);
        // Dropping the last kept token would fall short of top_p.
        if dist.len() > 1 {
            let last = full[dist.last().unwrap().0 as usize];
            prop_assert!(kept_mass - last < top_p + 1e-9);
        }
        for (i, p) in &dist {
            prop_assert!((p - full[*i as usize] / kept_mass).abs() < 1e-9);
        }
        for w in dist.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn full_nucleus_is_softmax(logits in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let dist = nucleus_distribution(&logits, 1.0, 1.0).unwrap();
        let full = common::softmax(&logits);
        let mut seen = vec![false; logits.len()];
        for (i, p) in dist {
            prop_assert!((p - full[i as usize]).abs() < 1e-12);
            seen[i as usize] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn greedy_picks_argmax(logits in prop::collection::vec(-5.0f64..5.0, 1..8), seed in any::<u64>()) {
        let best = logits.iter().enumerate().fold(0, |b, (i, &x)| if x > logits[b] { i } else { b });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(sample_token(&logits, 0.0, 0.7, &mut rng).unwrap() as usize, best);
        prop_assert_eq!(sample_token(&logits, 1e-9, 1.0, &mut rng).unwrap() as usize, best);
    }
}

#[test]
fn nucleus_rejects_bad_arguments() {
    assert!(nucleus_distribution(&[0.0, 1.0], -1.0, 1.0).is_err());
    assert!(nucleus_distribution(&[0.0, 1.0], 1.0, 0.0).is_err());
    assert!(nucleus_distribution(&[0.0, 1.0], 1.0, 1.5).is_err());
    assert!(nucleus_distribution(&[f64::NAN, 1.0], 1.0, 1.0).is_err());
    assert!(nucleus_distribution(&[f64::NEG_INFINITY; 2], 1.0, 1.0).is_err());
}

#[test]
fn sampling_frequencies_match_nucleus() {
    let logits = [0.0, 1.0, 2.0, -1.0];
    let dist = nucleus_distribution(&logits, 0.9, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_token(&logits, 0.9, 0.8, &mut rng).unwrap() as usize] += 1;
    }
    for (tok, p) in dist.iter().copied() {
        let f = counts[tok as usize] as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-3, "token {tok}: {f} vs {p}");
    }
    let kept: Vec<_> = dist.iter().map(|x| x.0 as usize).collect();
    for (i, &c) in counts.iter().enumerate() {
        if !kept.contains(&i) {
            assert_eq!(c, 0);
        }
    }
}
