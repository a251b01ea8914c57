use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, Result, Tensor, Var};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Flat index across all parameters, in the order they were passed.
    pub worst_parameter_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates, chosen with `seed`.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coordinates: None,
            seed: 0,
        }
    }
}

/// `|a-n| / max(|a|, |n|, 1e-8)`, or 0 when both magnitudes are below 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale.max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences on every coordinate.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], epsilon: f64) -> Result<GradReport>
where
    Fun: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            epsilon,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<Fun>(mut f: Fun, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradReport>
where
    Fun: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.epsilon > 0.0) {
        return Err(NumericsError::Invalid("epsilon must be positive".into()));
    }
    let mut eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                g.leaf(t.values().to_vec(), t.shape().to_vec(), true)
                    .expect("tensor shape is consistent")
            })
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(NumericsError::Invalid("grad_check needs a scalar function".into()));
        }
        Ok((g, out, vars))
    };

    let (g, out, vars) = eval(params)?;
    let base = g.scalar(out);
    let (g2, out2, _) = eval(params)?;
    if g2.scalar(out2).to_bits() != base.to_bits() {
        return Err(NumericsError::NonDeterministic(format!(
            "two evaluations gave {base} and {}",
            g2.scalar(out2)
        )));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(params)
        .flat_map(|(&v, t)| match grads.get(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let total = analytic.len();
    let coords: Vec<usize> = match opts.max_coordinates {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };

    let mut report = GradReport {
        max_relative_error: 0.0,
        worst_parameter_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: coords.len(),
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for &flat in &coords {
        let (ti, off) = locate(params, flat);
        let orig = work[ti].values()[off];
        work[ti].values_mut()[off] = orig + opts.epsilon;
        let (gp, op, _) = eval(&work)?;
        work[ti].values_mut()[off] = orig - opts.epsilon;
        let (gm, om, _) = eval(&work)?;
        work[ti].values_mut()[off] = orig;
        let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * opts.epsilon);
        let err = relative_error(analytic[flat], numeric);
        if err > report.max_relative_error || flat == coords[0] {
            report.max_relative_error = err;
            report.worst_parameter_index = flat;
            report.analytic = analytic[flat];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn locate(params: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in params.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("coordinate index within total parameter count")
}
