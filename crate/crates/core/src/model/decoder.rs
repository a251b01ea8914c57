//! Incremental inference with cached keys and values. Uses the same kernels
//! in the same order as [`super::forward`], so its logits match the tape's.

use super::params::PolicyParams;
use super::{check_tokens, DecodeState, ModelError, Policy};
use crate::numerics::kernels;
use crate::numerics::Scalar;
use crate::TokenId;

pub struct Decoder<'a, F> {
    params: &'a PolicyParams<F>,
    keys: Vec<Vec<F>>,
    vals: Vec<Vec<F>>,
    len: usize,
    logits: Vec<F>,
    value: Option<F>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(params: &'a PolicyParams<F>, prompt: &[TokenId]) -> Result<Self, ModelError> {
        let cfg = params.config();
        check_tokens(prompt, cfg)?;
        let mut dec = Self {
            params,
            keys: vec![Vec::new(); cfg.n_layers],
            vals: vec![Vec::new(); cfg.n_layers],
            len: 0,
            logits: vec![F::zero(); cfg.vocab_size],
            value: None,
        };
        for &t in prompt {
            dec.step(t)?;
        }
        Ok(dec)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the token after the last one pushed.
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    /// Critic estimate at the last pushed position.
    pub fn value(&self) -> Option<F> {
        self.value
    }

    pub fn step(&mut self, token: TokenId) -> Result<(), ModelError> {
        let cfg = self.params.config();
        if self.len >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let pos = self.len;
        let tensors = self.params.tensors();
        let tok = &tensors[0].values()[token as usize * d..(token as usize + 1) * d];
        let pe = &tensors[1].values()[pos * d..(pos + 1) * d];
        let mut x: Vec<F> = tok.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        let inv_sqrt = F::one() / F::of(dh as f64).sqrt();

        let mut h = vec![F::zero(); d];
        let mut xhat = vec![F::zero(); d];
        let mut rstd = [F::zero()];
        let mut qkv = vec![F::zero(); 3 * d];
        let mut cat = vec![F::zero(); d];
        let mut o = vec![F::zero(); d];
        let mut f = vec![F::zero(); 4 * d];
        let mut scores = vec![F::zero(); pos + 1];
        let mut probs = vec![F::zero(); pos + 1];

        for l in 0..cfg.n_layers {
            let p = self.params.layer(l);
            kernels::layer_norm_rows(&x, p[0].values(), p[1].values(), d, &mut h, &mut xhat, &mut rstd);
            kernels::matmul_nn(&h, p[2].values(), &mut qkv, 1, d, 3 * d);
            add_bias(&mut qkv, p[3].values());
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.vals[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let (kc, vc) = (&self.keys[l], &self.vals[l]);
            for hd in 0..cfg.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &kc[j * d + hd * dh..j * d + (hd + 1) * dh];
                    let mut acc = F::zero();
                    for (&a, &b) in q.iter().zip(k) {
                        acc += a * b;
                    }
                    *s = acc * inv_sqrt;
                }
                kernels::softmax_into(&scores, &mut probs);
                let out = &mut cat[hd * dh..(hd + 1) * dh];
                out.iter_mut().for_each(|v| *v = F::zero());
                for (j, &a) in probs.iter().enumerate() {
                    let v = &vc[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (ov, &vv) in out.iter_mut().zip(v) {
                        *ov += a * vv;
                    }
                }
            }
            kernels::matmul_nn(&cat, p[4].values(), &mut o, 1, d, d);
            add_bias(&mut o, p[5].values());
            add_bias(&mut x, &o);
            kernels::layer_norm_rows(&x, p[6].values(), p[7].values(), d, &mut h, &mut xhat, &mut rstd);
            kernels::matmul_nn(&h, p[8].values(), &mut f, 1, d, 4 * d);
            add_bias(&mut f, p[9].values());
            f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            kernels::matmul_nn(&f, p[10].values(), &mut o, 1, 4 * d, d);
            add_bias(&mut o, p[11].values());
            add_bias(&mut x, &o);
        }

        let tail = self.params.tail();
        kernels::layer_norm_rows(&x, tail[0].values(), tail[1].values(), d, &mut h, &mut xhat, &mut rstd);
        kernels::matmul_nn(&h, tail[2].values(), &mut self.logits, 1, d, cfg.vocab_size);
        add_bias(&mut self.logits, tail[3].values());
        if cfg.has_value_head {
            let mut v = [F::zero()];
            kernels::matmul_nn(&h, tail[4].values(), &mut v, 1, d, 1);
            self.value = Some(v[0] + tail[5].values()[0]);
        }
        self.len += 1;
        Ok(())
    }
}

fn add_bias<F: Scalar>(x: &mut [F], b: &[F]) {
    for (xi, &bi) in x.iter_mut().zip(b) {
        *xi += bi;
    }
}

impl<'a, F: Scalar> DecodeState for Decoder<'a, F> {
    fn next_logits(&self) -> Vec<f64> {
        self.logits.iter().map(|x| x.f64()).collect()
    }

    fn push(&mut self, token: TokenId) -> Result<(), ModelError> {
        self.step(token)
    }

    fn value(&self) -> Option<f64> {
        Decoder::value(self).map(|v| v.f64())
    }
}

impl<F: Scalar> Policy for PolicyParams<F> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn start<'s>(&'s self, prompt: &[TokenId]) -> Result<Box<dyn DecodeState + 's>, ModelError> {
        check_tokens(prompt, self.config())?;
        Ok(Box::new(Decoder::new(self, prompt)?))
    }
}
