use super::params::PolicyParams;
use super::{check_tokens, ModelError};
use crate::numerics::{Graph, Scalar, Var};
use crate::TokenId;

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T, V]` next-token logits; row `t` predicts token `t + 1`.
    pub logits: Var,
    /// `[T, 1]` critic estimates, when the value head is enabled.
    pub values: Option<Var>,
    /// One leaf per parameter tensor, in declaration order.
    pub param_vars: Vec<Var>,
}

/// Records a full causal forward pass over `tokens` on `g`.
pub fn forward<F: Scalar>(
    params: &PolicyParams<F>,
    g: &mut Graph<F>,
    tokens: &[TokenId],
) -> Result<ForwardOutput, ModelError> {
    let param_vars = param_leaves(params, g);
    forward_with(params, g, param_vars, tokens)
}

/// One leaf per parameter tensor, in declaration order.
pub fn param_leaves<F: Scalar>(params: &PolicyParams<F>, g: &mut Graph<F>) -> Vec<Var> {
    params.tensors().iter().map(|p| g.param(p)).collect()
}

/// Like [`forward`], reusing leaves from [`param_leaves`] so several
/// sequences in one graph share parameters.
pub fn forward_with<F: Scalar>(
    params: &PolicyParams<F>,
    g: &mut Graph<F>,
    param_vars: Vec<Var>,
    tokens: &[TokenId],
) -> Result<ForwardOutput, ModelError> {
    let cfg = params.config();
    check_tokens(tokens, cfg)?;
    if param_vars.len() != params.tensors().len() {
        return Err(ModelError::InvalidConfig(format!(
            "expected {} parameter leaves, got {}",
            params.tensors().len(),
            param_vars.len()
        )));
    }
    let t = tokens.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = F::one() / F::of(dh as f64).sqrt();

    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let positions: Vec<usize> = (0..t).collect();
    let tok = g.rows(param_vars[0], &ids)?;
    let pos = g.rows(param_vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let p = &param_vars[2 + l * super::params::PER_LAYER..];
        let h = g.layer_norm(x, p[0], p[1])?;
        let qkv = g.matmul(h, p[2])?;
        let qkv = g.add_row(qkv, p[3])?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, d + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, inv_sqrt);
            let a = g.causal_softmax(s)?;
            outs.push(g.matmul(a, v)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.matmul(cat, p[4])?;
        let o = g.add_row(o, p[5])?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, p[6], p[7])?;
        let f = g.matmul(h2, p[8])?;
        let f = g.add_row(f, p[9])?;
        let f = g.gelu(f);
        let f = g.matmul(f, p[10])?;
        let f = g.add_row(f, p[11])?;
        x = g.add(x, f)?;
    }

    let tail = &param_vars[2 + cfg.n_layers * super::params::PER_LAYER..];
    let hf = g.layer_norm(x, tail[0], tail[1])?;
    let logits = g.matmul(hf, tail[2])?;
    let logits = g.add_row(logits, tail[3])?;
    let values = if cfg.has_value_head {
        let v = g.matmul(hf, tail[4])?;
        Some(g.add_row(v, tail[5])?)
    } else {
        None
    };
    Ok(ForwardOutput {
        logits,
        values,
        param_vars,
    })
}
