//! Assembles the full training loss for a mini-batch of trajectories on one
//! graph, sharing a single set of parameter leaves.

use super::{entropy_regularizer, ppo_clip_loss, total_policy_loss, value_loss, ClipConfig, LossReport, RegularizerMode, Result, RlError};
use crate::model::{forward_with, param_leaves, ModelError, PolicyParams};
use crate::numerics::{Graph, Scalar, Var};
use crate::rollout::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub clip: ClipConfig,
    pub regularizer: RegularizerMode,
    /// Temperature the rollouts were scored at.
    pub temperature: f64,
    /// Include the policy terms.
    pub actor: bool,
    /// Weight of the critic loss; zero leaves it out.
    pub value_coeff: f64,
    pub value_clip: Option<f64>,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            clip: ClipConfig::default(),
            regularizer: RegularizerMode::none(),
            temperature: 1.0,
            actor: true,
            value_coeff: 0.0,
            value_clip: None,
        }
    }
}

/// One mini-batch: trajectories with per-token advantages and, for the
/// critic, per-token returns.
#[derive(Debug, Clone, Copy)]
pub struct MiniBatch<'a> {
    pub trajectories: &'a [&'a Trajectory],
    pub advantages: &'a [Vec<f64>],
    pub returns: Option<&'a [Vec<f64>]>,
}

/// Graph nodes of an assembled loss.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub report: LossReport,
    /// Per-token new log-probabilities, `[N]`.
    pub logp: Var,
    /// Per-token entropies, `[N]`.
    pub entropy: Var,
}

/// Records the loss for `batch` on `g` using `param_vars` as parameters.
pub fn build_batch_loss<F: Scalar>(
    params: &PolicyParams<F>,
    g: &mut Graph<F>,
    param_vars: &[Var],
    batch: &MiniBatch<'_>,
    settings: &LossSettings,
) -> Result<BatchLoss> {
    let trajs = batch.trajectories;
    if trajs.is_empty() {
        return Err(RlError::Input("empty mini-batch".into()));
    }
    if batch.advantages.len() != trajs.len() {
        return Err(RlError::Input("one advantage vector per trajectory required".into()));
    }
    let mut logit_rows = Vec::with_capacity(trajs.len());
    let mut value_rows = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut old_logp = Vec::new();
    let mut adv = Vec::new();
    let mut old_values = Vec::new();
    let mut returns = Vec::new();
    let want_values = settings.value_coeff != 0.0;

    for (i, t) in trajs.iter().enumerate() {
        let n = t.response_tokens.len();
        if n == 0 || t.old_logprobs.len() != n || t.response_mask.len() != n || batch.advantages[i].len() != n {
            return Err(RlError::Input(format!("trajectory {i} has misaligned per-token fields")));
        }
        let out = forward_with(params, g, param_vars.to_vec(), &t.scoring_inputs()).map_err(|e| match e {
            ModelError::Numerics(n) => RlError::Numerics(n),
            other => RlError::Input(other.to_string()),
        })?;
        let start = t.prompt_tokens.len() - 1;
        let positions: Vec<usize> = (start..start + n).collect();
        logit_rows.push(g.rows(out.logits, &positions)?);
        if want_values {
            let values = out
                .values
                .ok_or_else(|| RlError::Input("critic loss requested without a value head".into()))?;
            value_rows.push(g.rows(values, &positions)?);
            let r = batch
                .returns
                .and_then(|r| r.get(i))
                .ok_or_else(|| RlError::Input("critic loss requested without returns".into()))?;
            if r.len() != n {
                return Err(RlError::Input(format!("trajectory {i} returns are misaligned")));
            }
            returns.extend(r.iter().map(|&x| F::of(x)));
            match &t.old_values {
                Some(v) if v.len() == n => old_values.extend(v.iter().map(|&x| F::of(x))),
                _ => old_values.extend(r.iter().map(|_| F::zero())),
            }
        }
        targets.extend(t.response_tokens.iter().map(|&x| x as usize));
        mask.extend_from_slice(&t.response_mask);
        old_logp.extend(t.old_logprobs.iter().map(|&x| F::of(x)));
        adv.extend(batch.advantages[i].iter().map(|&x| F::of(x)));
    }

    let logits = g.concat_rows(&logit_rows)?;
    let logits = if settings.temperature != 1.0 {
        g.scale(logits, F::of(1.0 / settings.temperature))
    } else {
        logits
    };
    let logsm = g.log_softmax(logits)?;
    let logp = g.gather(logsm, &targets)?;
    let entropy = g.entropy(logits)?;

    let mut report = LossReport::default();
    let ent_mean = g.masked_mean(entropy, &mask)?;
    report.mean_token_entropy = g.scalar(ent_mean.value).f64();

    let mut total = g.constant(vec![F::zero()], vec![1])?;
    if settings.actor {
        let pg = ppo_clip_loss(g, logp, &old_logp, &adv, &mask, &settings.clip)?;
        report.pg_loss = g.scalar(pg.loss).f64();
        report.clip_fraction = pg.clip_fraction;
        if settings.regularizer.is_active() {
            let j = entropy_regularizer(g, entropy, &adv, &mask, &settings.regularizer)?;
            report.entropy_reg_value = g.scalar(j).f64();
            total = total_policy_loss(g, pg.loss, j, settings.regularizer.alpha)?;
        } else {
            total = pg.loss;
        }
    }
    if want_values {
        let vals = g.concat_rows(&value_rows)?;
        let vals = g.gather(vals, &vec![0; targets.len()])?;
        let vl = value_loss(g, vals, &returns, &old_values, &mask, settings.value_clip)?;
        report.value_loss = g.scalar(vl).f64();
        let scaled = g.scale(vl, F::of(settings.value_coeff));
        total = g.add(total, scaled)?;
    }
    report.total_loss = g.scalar(total).f64();
    Ok(BatchLoss {
        total,
        report,
        logp,
        entropy,
    })
}

/// Builds the loss and returns it with one gradient per parameter tensor
/// (`None` where no gradient reached the tensor).
pub fn batch_gradients<F: Scalar>(
    params: &PolicyParams<F>,
    batch: &MiniBatch<'_>,
    settings: &LossSettings,
) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let leaves = param_leaves(params, &mut g);
    let loss = build_batch_loss(params, &mut g, &leaves, batch, settings)?;
    if !loss.report.total_loss.is_finite() {
        return Ok((loss.report, vec![None; leaves.len()]));
    }
    let grads = g.backward(loss.total)?;
    let out = leaves
        .iter()
        .map(|&v| grads.get(v).map(|d| d.iter().map(|x| x.f64()).collect()))
        .collect();
    Ok((loss.report, out))
}
