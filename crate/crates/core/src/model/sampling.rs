use rand::Rng;

use super::ModelError;
use crate::TokenId;

/// Temperatures below this are treated as greedy decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// The distribution actually sampled from: temperature-scaled softmax,
/// truncated to the smallest probability-sorted prefix whose mass reaches
/// `top_p` (ties broken by ascending token id), then renormalised.
///
/// Entries are returned in that sorted order.
pub fn nucleus_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(TokenId, f64)>, ModelError> {
    if !(temperature >= 0.0) {
        return Err(ModelError::Sampling(format!("temperature must be >= 0, got {temperature}")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(ModelError::Sampling(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(ModelError::Sampling("logits contain NaN or +inf".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ModelError::Sampling("every logit is -inf".into()));
    }
    if temperature < GREEDY_TEMPERATURE {
        let best = logits.iter().position(|&x| x == max).expect("max is attained");
        return Ok(vec![(best as TokenId, 1.0)]);
    }
    let mut probs: Vec<(TokenId, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i as TokenId, ((z - max) / temperature).exp()))
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p.1;
        if cum >= top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    probs.retain(|p| p.1 > 0.0);
    let kept: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= kept);
    Ok(probs)
}

/// Draws one token from [`nucleus_distribution`] using a single uniform draw.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> Result<TokenId, ModelError> {
    let dist = nucleus_distribution(logits, temperature, top_p)?;
    if dist.len() == 1 {
        return Ok(dist[0].0);
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(tok, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(tok);
        }
    }
    Ok(dist.last().expect("non-empty nucleus").0)
}
