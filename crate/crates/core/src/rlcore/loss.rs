//! Loss terms recorded on a [`Graph`]. Per-token inputs are `[N]` vectors
//! over a flattened batch; `mask` selects the tokens that count, and every
//! mean is a token mean over the whole batch.

use super::{ClipConfig, RegularizerKind, RegularizerMode, Result, RlError};
use crate::numerics::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy)]
pub struct PgLoss {
    pub loss: Var,
    /// Share of masked tokens whose clipped branch is selected and binding.
    pub clip_fraction: f64,
}

fn check_len<F: Scalar>(g: &Graph<F>, x: Var, n: usize, what: &str) -> Result<()> {
    if g.value(x).len() != n {
        return Err(RlError::Input(format!(
            "{what}: expected {n} tokens, got {}",
            g.value(x).len()
        )));
    }
    Ok(())
}

/// `-token_mean(min(r A, clip(r, 1 - eps_low, 1 + eps_high) A))` with
/// `r = exp(logp_new - logp_old)`.
pub fn ppo_clip_loss<F: Scalar>(
    g: &mut Graph<F>,
    logp_new: Var,
    logp_old: &[F],
    advantages: &[F],
    mask: &[bool],
    clip: &ClipConfig,
) -> Result<PgLoss> {
    let n = mask.len();
    check_len(g, logp_new, n, "logp_new")?;
    if logp_old.len() != n || advantages.len() != n {
        return Err(RlError::Input("ppo_clip_loss inputs are misaligned".into()));
    }
    let old = g.constant(logp_old.to_vec(), vec![n])?;
    let adv = g.constant(advantages.to_vec(), vec![n])?;
    let diff = g.sub(logp_new, old)?;
    let ratio = g.exp(diff);
    let lo = F::one() - F::of(clip.eps_low);
    let hi = F::one() + F::of(clip.eps_high);
    let unclipped = g.mul(ratio, adv)?;
    let clamped = g.clamp(ratio, lo, hi);
    let clipped = g.mul(clamped, adv)?;
    let objective = g.minimum(unclipped, clipped)?;
    let mean = g.masked_mean(objective, mask)?;
    let loss = g.scale(mean.value, -F::one());

    let r = g.value(ratio);
    let binding = (0..n)
        .filter(|&i| mask[i])
        .filter(|&i| {
            let a = advantages[i];
            (a > F::zero() && r[i] > hi) || (a < F::zero() && r[i] < lo)
        })
        .count();
    let clip_fraction = if mean.count == 0 {
        0.0
    } else {
        binding as f64 / mean.count as f64
    };
    Ok(PgLoss { loss, clip_fraction })
}

/// Scalar `J_reg`: zero, `token_mean(H)`, `token_mean(A H)` or
/// `token_mean((A + eta) H)`. Advantages enter as constant weights.
pub fn entropy_regularizer<F: Scalar>(
    g: &mut Graph<F>,
    entropy: Var,
    advantages: &[F],
    mask: &[bool],
    mode: &RegularizerMode,
) -> Result<Var> {
    let n = mask.len();
    check_len(g, entropy, n, "entropy")?;
    if advantages.len() != n {
        return Err(RlError::Input("entropy_regularizer inputs are misaligned".into()));
    }
    if mode.kind == RegularizerKind::None {
        return Ok(g.constant(vec![F::zero()], vec![1])?);
    }
    let count = mask.iter().filter(|&&m| m).count();
    let inv = if count == 0 {
        F::zero()
    } else {
        F::one() / F::of(count as f64)
    };
    let eta = F::of(mode.eta);
    let weights: Vec<F> = (0..n)
        .map(|i| {
            if !mask[i] {
                return F::zero();
            }
            let mut a = advantages[i];
            if mode.clip_advantage_to_unit {
                a = a.max(-F::one()).min(F::one());
            }
            let coeff = match mode.kind {
                RegularizerKind::Naive => F::one(),
                RegularizerKind::Ib => a,
                RegularizerKind::GeneralizedIb => a + eta,
                RegularizerKind::None => unreachable!(),
            };
            coeff * inv
        })
        .collect();
    Ok(g.weighted_sum(entropy, &weights)?)
}

/// `pg_loss - alpha * J_reg`.
pub fn total_policy_loss<F: Scalar>(g: &mut Graph<F>, pg_loss: Var, j_reg: Var, alpha: f64) -> Result<Var> {
    let scaled = g.scale(j_reg, F::of(alpha));
    Ok(g.sub(pg_loss, scaled)?)
}

/// Token-mean squared error to `returns`. With `clip`, each token takes the
/// larger of the plain error and the error of `old + clamp(new - old, ±clip)`.
pub fn value_loss<F: Scalar>(
    g: &mut Graph<F>,
    values_new: Var,
    returns: &[F],
    values_old: &[F],
    mask: &[bool],
    clip: Option<f64>,
) -> Result<Var> {
    let n = mask.len();
    check_len(g, values_new, n, "values_new")?;
    if returns.len() != n || values_old.len() != n {
        return Err(RlError::Input("value_loss inputs are misaligned".into()));
    }
    let ret = g.constant(returns.to_vec(), vec![n])?;
    let err = g.sub(values_new, ret)?;
    let sq = g.mul(err, err)?;
    let per_token = match clip {
        None => sq,
        Some(c) => {
            let old = g.constant(values_old.to_vec(), vec![n])?;
            let delta = g.sub(values_new, old)?;
            let delta = g.clamp(delta, F::of(-c), F::of(c));
            let v_clip = g.add(old, delta)?;
            let err_c = g.sub(v_clip, ret)?;
            let sq_c = g.mul(err_c, err_c)?;
            g.maximum(sq, sq_c)?
        }
    };
    Ok(g.masked_mean(per_token, mask)?.value)
}
