use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numerics::{Scalar, Tensor};

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Residual,
    Zeros,
    Ones,
}

fn layout_with_init(c: &ModelConfig) -> Vec<(ParamSpec, InitKind)> {
    let d = c.d_model;
    let v = c.vocab_size;
    let mut out = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, init: InitKind| out.push((ParamSpec { name, shape }, init));
    p("tok_emb".into(), vec![v, d], InitKind::Normal);
    p("pos_emb".into(), vec![c.max_seq_len, d], InitKind::Normal);
    for l in 0..c.n_layers {
        p(format!("h{l}.ln1.g"), vec![d], InitKind::Ones);
        p(format!("h{l}.ln1.b"), vec![d], InitKind::Zeros);
        p(format!("h{l}.attn.w_qkv"), vec![d, 3 * d], InitKind::Normal);
        p(format!("h{l}.attn.b_qkv"), vec![3 * d], InitKind::Zeros);
        p(format!("h{l}.attn.w_o"), vec![d, d], InitKind::Residual);
        p(format!("h{l}.attn.b_o"), vec![d], InitKind::Zeros);
        p(format!("h{l}.ln2.g"), vec![d], InitKind::Ones);
        p(format!("h{l}.ln2.b"), vec![d], InitKind::Zeros);
        p(format!("h{l}.mlp.w_fc"), vec![d, 4 * d], InitKind::Normal);
        p(format!("h{l}.mlp.b_fc"), vec![4 * d], InitKind::Zeros);
        p(format!("h{l}.mlp.w_proj"), vec![4 * d, d], InitKind::Residual);
        p(format!("h{l}.mlp.b_proj"), vec![d], InitKind::Zeros);
    }
    p("ln_f.g".into(), vec![d], InitKind::Ones);
    p("ln_f.b".into(), vec![d], InitKind::Zeros);
    p("head.w".into(), vec![d, v], InitKind::Normal);
    p("head.b".into(), vec![v], InitKind::Zeros);
    if c.has_value_head {
        p("value.w".into(), vec![d, 1], InitKind::Normal);
        p("value.b".into(), vec![1], InitKind::Zeros);
    }
    out
}

/// Parameter tensors in declaration order.
pub fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    layout_with_init(config).into_iter().map(|(s, _)| s).collect()
}

pub(crate) const PER_LAYER: usize = 12;

/// Policy weights plus a snapshot of their initial values.
#[derive(Debug, Clone)]
pub struct PolicyParams<F> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    initial: Vec<Vec<F>>,
}

impl<F: Scalar> PolicyParams<F> {
    /// GPT-2 style initialisation with standard deviation 0.02.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::init_with_std(config, 0.02)
    }

    /// Same layout with a custom weight scale. Larger scales give sharper,
    /// more varied next-token distributions, which the exact oracles need.
    pub fn init_with_std(config: &ModelConfig, std: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let resid_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let resid = Normal::new(0.0, resid_std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (spec, kind) in layout_with_init(config) {
            let n: usize = spec.shape.iter().product();
            let values: Vec<F> = match kind {
                InitKind::Normal => (0..n).map(|_| F::of(normal.sample(&mut rng))).collect(),
                InitKind::Residual => (0..n).map(|_| F::of(resid.sample(&mut rng))).collect(),
                InitKind::Zeros => vec![F::zero(); n],
                InitKind::Ones => vec![F::one(); n],
            };
            names.push(spec.name);
            tensors.push(Tensor::from_vec(spec.shape, values)?.with_grad());
        }
        Ok(Self::from_parts(config.clone(), names, tensors))
    }

    fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<F>>) -> Self {
        let initial = tensors.iter().map(|t| t.values().to_vec()).collect();
        Self {
            config,
            names,
            tensors,
            initial,
        }
    }

    /// Builds parameters from flat values in declaration order. The values
    /// also become the reference point for [`Self::param_l2_from_init`].
    pub fn from_flat(config: &ModelConfig, flat: &[F]) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(config);
        let total: usize = layout.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(ModelError::Checkpoint(format!(
                "expected {total} parameters, found {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in layout {
            let n: usize = spec.shape.iter().product();
            tensors.push(Tensor::from_vec(spec.shape, flat[offset..offset + n].to_vec())?.with_grad());
            names.push(spec.name);
            offset += n;
        }
        Ok(Self::from_parts(config.clone(), names, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flat_values(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean distance between current and initial parameters.
    pub fn param_l2_from_init(&self) -> f64 {
        let mut acc = 0.0f64;
        for (t, init) in self.tensors.iter().zip(&self.initial) {
            for (&x, &x0) in t.values().iter().zip(init) {
                let d = x.f64() - x0.f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Makes the current values the new reference for `param_l2_from_init`.
    pub fn reset_reference(&mut self) {
        self.initial = self.tensors.iter().map(|t| t.values().to_vec()).collect();
    }

    pub fn cast<G: Scalar>(&self) -> PolicyParams<G> {
        PolicyParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            initial: self
                .initial
                .iter()
                .map(|v| v.iter().map(|x| G::of(x.f64())).collect())
                .collect(),
        }
    }

    pub(crate) fn layer(&self, l: usize) -> &[Tensor<F>] {
        let start = 2 + l * PER_LAYER;
        &self.tensors[start..start + PER_LAYER]
    }

    pub(crate) fn tail(&self) -> &[Tensor<F>] {
        &self.tensors[2 + self.config.n_layers * PER_LAYER..]
    }
}
