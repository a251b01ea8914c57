//! Advantage estimation, the clipped policy-gradient loss and the entropy
//! regularizer family.

mod batch;
mod loss;
mod optim;

pub use batch::{batch_gradients, build_batch_loss, BatchLoss, LossSettings, MiniBatch};
pub use loss::{entropy_regularizer, ppo_clip_loss, total_policy_loss, value_loss, PgLoss};
pub use optim::{Adam, AdamConfig};

use serde::{Deserialize, Serialize};

use crate::rollout::RolloutGroup;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    GaeCritic,
    GroupNormalized,
}

/// Per-token advantages for one response, aligned with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageField {
    pub values: Vec<f64>,
    pub source: AdvantageSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(RlError::Input(format!(
                "need 0 < eps_low <= eps_high < 1, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    Naive,
    Ib,
    GeneralizedIb,
}

impl std::str::FromStr for RegularizerKind {
    type Err = RlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "naive" => Ok(Self::Naive),
            "ib" => Ok(Self::Ib),
            "generalized_ib" => Ok(Self::GeneralizedIb),
            other => Err(RlError::Input(format!("unknown regularizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Naive => "naive",
            Self::Ib => "ib",
            Self::GeneralizedIb => "generalized_ib",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerMode {
    pub kind: RegularizerKind,
    pub alpha: f64,
    /// Offset added to advantages; used only by `GeneralizedIb`.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub clip_advantage_to_unit: bool,
}

impl Default for RegularizerMode {
    fn default() -> Self {
        Self::none()
    }
}

impl RegularizerMode {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            alpha: 0.0,
            eta: 0.0,
            clip_advantage_to_unit: false,
        }
    }

    pub fn naive(alpha: f64) -> Self {
        Self {
            kind: RegularizerKind::Naive,
            alpha,
            ..Self::none()
        }
    }

    pub fn ib(alpha: f64) -> Self {
        Self {
            kind: RegularizerKind::Ib,
            alpha,
            ..Self::none()
        }
    }

    pub fn generalized_ib(alpha: f64, eta: f64) -> Self {
        Self {
            kind: RegularizerKind::GeneralizedIb,
            alpha,
            eta,
            clip_advantage_to_unit: false,
        }
    }

    /// The per-kind default coefficient: 0.001 for the plain entropy bonus,
    /// 0.005 for the advantage-weighted ones.
    pub fn with_default_alpha(kind: RegularizerKind) -> Self {
        match kind {
            RegularizerKind::None => Self::none(),
            RegularizerKind::Naive => Self::naive(0.001),
            RegularizerKind::Ib => Self::ib(0.005),
            RegularizerKind::GeneralizedIb => Self::generalized_ib(0.005, 0.0),
        }
    }

    /// False when the regularizer cannot affect the loss.
    pub fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None && self.alpha != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !self.eta.is_finite() {
            return Err(RlError::Input(format!("bad regularizer coefficients {self:?}")));
        }
        Ok(())
    }
}

/// Scalars reported for one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pg_loss: f64,
    pub entropy_reg_value: f64,
    pub value_loss: f64,
    pub total_loss: f64,
    pub mean_token_entropy: f64,
    pub clip_fraction: f64,
}

/// Generalized advantage estimation over one response. The value after the
/// last token is taken as zero. Returns `(advantages, returns)`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<(AdvantageField, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(RlError::Input(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(RlError::Input(format!("gamma {gamma} and lam {lam} must lie in [0, 1]")));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lam * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((
        AdvantageField {
            values: adv,
            source: AdvantageSource::GaeCritic,
        },
        returns,
    ))
}

/// Group-normalized advantages `(R_i - mean) / std` with the population std.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub advantages: Vec<f64>,
    /// Every reward was equal; advantages are then all zero.
    pub zero_variance: bool,
}

pub fn group_normalized_advantages(rewards: &[f64]) -> Result<GroupAdvantages> {
    if rewards.len() < 2 {
        return Err(RlError::Input(format!("group of {} rewards, need >= 2", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(GroupAdvantages {
            advantages: vec![0.0; rewards.len()],
            zero_variance: true,
        });
    }
    Ok(GroupAdvantages {
        advantages: rewards.iter().map(|r| (r - mean) / std).collect(),
        zero_variance: false,
    })
}

/// Keeps groups whose rewards are not all equal. Returns the kept groups and
/// the number dropped.
pub fn filter_zero_variance_groups(groups: Vec<RolloutGroup>) -> (Vec<RolloutGroup>, usize) {
    let before = groups.len();
    let kept: Vec<_> = groups
        .into_iter()
        .filter(|g| g.group_rewards.iter().any(|&r| r != g.group_rewards[0]))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Whitens advantages to zero mean and unit variance across a batch.
pub fn whiten(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_telescopes_with_unit_discount() {
        let (a, ret) = gae_advantages(&[0.0, 0.0, 0.0, 2.0], &[0.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(a.values, vec![2.0; 4]);
        assert_eq!(ret, vec![2.0; 4]);
    }

    #[test]
    fn gae_zero_gamma_is_one_step() {
        let r = [0.5, 0.0, 1.0];
        let v = [0.2, 0.3, 0.4];
        let (a, _) = gae_advantages(&r, &v, 0.0, 0.9).unwrap();
        for t in 0..3 {
            assert_eq!(a.values[t], r[t] - v[t]);
        }
        assert!(gae_advantages(&r, &v[..2], 1.0, 1.0).is_err());
        assert!(gae_advantages(&r, &v, 1.5, 1.0).is_err());
    }

    #[test]
    fn group_normalization_examples() {
        assert_eq!(group_normalized_advantages(&[1.0, 0.0]).unwrap().advantages, vec![1.0, -1.0]);
        assert_eq!(
            group_normalized_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap().advantages,
            vec![1.0, 1.0, -1.0, -1.0]
        );
        let flat = group_normalized_advantages(&[0.3; 5]).unwrap();
        assert!(flat.zero_variance);
        assert_eq!(flat.advantages, vec![0.0; 5]);
        assert!(group_normalized_advantages(&[1.0]).is_err());
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig::default().validate().is_ok());
        assert!(ClipConfig { eps_low: 0.3, eps_high: 0.2 }.validate().is_err());
        assert!(ClipConfig { eps_low: 0.0, eps_high: 0.2 }.validate().is_err());
    }

    #[test]
    fn default_coefficients() {
        assert_eq!(RegularizerMode::with_default_alpha(RegularizerKind::Naive).alpha, 0.001);
        assert_eq!(RegularizerMode::with_default_alpha(RegularizerKind::Ib).alpha, 0.005);
        assert!(!RegularizerMode::naive(0.0).is_active());
        assert_eq!("generalized_ib".parse::<RegularizerKind>().unwrap(), RegularizerKind::GeneralizedIb);
    }
}
