//! Wengert-style tape. Every op appends a node holding its forward value;
//! `backward` walks the tape in reverse and applies each op's adjoint rule.

use super::kernels;
use super::{NumericsError, Result, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Clamp(Var, F, F),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Gelu(Var),
    Rows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    LogSoftmax(Var),
    Entropy(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    SliceCols { x: Var, start: usize, width: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    WeightedSum(Var, Vec<F>),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Result of a masked mean. `degenerate` is set when no element was selected,
/// in which case the value is zero.
#[derive(Debug, Clone, Copy)]
pub struct MaskedMean {
    pub value: Var,
    pub count: usize,
    pub degenerate: bool,
}

/// A single-threaded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a node; meant for scalar results.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, values: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(shape_err("leaf", &shape, &[values.len()]));
        }
        Ok(self.push(values, shape, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, values: Vec<F>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// Registers a tensor as a leaf; it receives gradients iff it requires them.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(shape_err(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a * b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNt { a, b, m, k, n }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, node, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Adds a row vector `b: [n]` to every row of `x: [m,n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::AddRow(x, b), ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, node: Op<F>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, node, ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.map(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    /// Gathers whole rows of a `[R,d]` node; used for embeddings and for
    /// selecting positions.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = self.dims2(x, "rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Invalid(format!("row index {bad} out of range {r}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![idx.len(), d], Op::Rows(x, idx.to_vec()), ng))
    }

    /// Picks one element per row of `x: [T,V]`, yielding `[T]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(x, "gather")?;
        if idx.len() != t {
            return Err(shape_err("gather", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Invalid(format!("gather index {bad} out of range {v}")));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * v + i]).collect();
        let ng = self.ng(x);
        Ok(self.push(out, vec![t], Op::Pick(x, idx.to_vec()), ng))
    }

    fn last(&self, x: Var, op: &'static str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&v) if v >= 1 => Ok(v),
            _ => Err(shape_err(op, self.shape(x), &[])),
        }
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.last(x, "log_softmax")?;
        let mut out = vec![F::zero(); self.value(x).len()];
        kernels::log_softmax_rows(self.value(x), v, &mut out)?;
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::LogSoftmax(x), ng))
    }

    /// Per-row entropy (nats) of the softmax of `x: [T,V]`, yielding `[T]`.
    pub fn entropy(&mut self, x: Var) -> Result<Var> {
        let (t, v) = self.dims2(x, "entropy")?;
        let mut out = vec![F::zero(); t];
        kernels::entropy_rows(self.value(x), v, &mut out)?;
        let ng = self.ng(x);
        Ok(self.push(out, vec![t], Op::Entropy(x), ng))
    }

    /// Row softmax of a square score matrix under a causal mask.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (t, t2) = self.dims2(x, "causal_softmax")?;
        if t != t2 {
            return Err(shape_err("causal_softmax", self.shape(x), &[]));
        }
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite("causal_softmax"));
        }
        let mut out = vec![F::zero(); t * t];
        kernels::causal_softmax_rows(self.value(x), t, &mut out);
        let ng = self.ng(x);
        Ok(self.push(out, vec![t, t], Op::CausalSoftmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![F::zero(); m * d];
        let mut xhat = vec![F::zero(); m * d];
        let mut rstd = vec![F::zero(); m];
        kernels::layer_norm_rows(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            d,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            vec![m, d],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + width > n {
            return Err(shape_err("slice_cols", self.shape(x), &[start, width]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![m, width], Op::SliceCols { x, start, width }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, w) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, vec![m, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks nodes along the first axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat_rows of nothing".into()))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(shape_err("concat_rows", self.shape(first), &[]));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh.is_empty() || sh[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), sh));
            }
            rows += sh[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, shape, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.value(x) {
            acc += v;
        }
        let ng = self.ng(x);
        self.push(vec![acc], vec![1], Op::Sum(x), ng)
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let mut acc = F::zero();
        for (&v, &w) in self.value(x).iter().zip(weights) {
            acc += v * w;
        }
        let ng = self.ng(x);
        Ok(self.push(vec![acc], vec![1], Op::WeightedSum(x, weights.to_vec()), ng))
    }

    /// Mean over the elements where `mask` is true. An empty mask yields zero
    /// and sets `degenerate`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<MaskedMean> {
        let count = mask.iter().filter(|&&m| m).count();
        let w = if count == 0 {
            F::zero()
        } else {
            F::one() / F::of(count as f64)
        };
        let weights: Vec<F> = mask.iter().map(|&m| if m { w } else { F::zero() }).collect();
        let value = self.weighted_sum(x, &weights)?;
        Ok(MaskedMean {
            value,
            count,
            degenerate: count == 0,
        })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_adjoint(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn apply_adjoint(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if v.0 < grads.len() && nodes[v.0].needs_grad {
                let n = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |da| kernels::matmul_nt_acc(g, bv, da, m, n, k));
                acc(b, &mut |db| kernels::matmul_tn_acc(av, g, db, m, k, n));
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |da| kernels::matmul_nn_acc(g, bv, da, m, n, k));
                acc(b, &mut |db| kernels::matmul_tn_acc(g, av, db, m, n, k));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            &Op::AddRow(x, b) => {
                let n = nodes[b.0].value.len();
                acc(x, &mut |dx| add_into(dx, g));
                acc(b, &mut |db| {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |dx| {
                for (d, &v) in dx.iter_mut().zip(g) {
                    *d += c * v;
                }
            }),
            &Op::Exp(x) => acc(x, &mut |dx| {
                for ((d, &v), &y) in dx.iter_mut().zip(g).zip(&node.value) {
                    *d += v * y;
                }
            }),
            &Op::Clamp(x, lo, hi) => {
                let xv = &nodes[x.0].value;
                acc(x, &mut |dx| {
                    for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi >= lo && xi <= hi {
                            *d += v;
                        }
                    }
                });
            }
            &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                    .collect();
                acc(a, &mut |da| {
                    for ((d, &v), &p) in da.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *d += v;
                        }
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &v), &p) in db.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *d += v;
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(x, &mut |dx| {
                    for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += v * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Rows(x, idx) => {
                let d = node.shape[1];
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Pick(x, idx) => {
                let v = nodes[x.0].shape[1];
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        dx[r * v + i] += g[r];
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let v = node.shape[node.shape.len() - 1];
                acc(x, &mut |dx| {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(v)
                        .zip(g.chunks_exact(v))
                        .zip(node.value.chunks_exact(v))
                    {
                        let mut s = F::zero();
                        for &gi in grow {
                            s += gi;
                        }
                        for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - y.exp() * s;
                        }
                    }
                });
            }
            &Op::Entropy(x) => {
                let v = nodes[x.0].shape[1];
                let xv = &nodes[x.0].value;
                acc(x, &mut |dx| {
                    let mut logp = vec![F::zero(); v];
                    for (r, (drow, row)) in dx.chunks_exact_mut(v).zip(xv.chunks_exact(v)).enumerate() {
                        kernels::log_softmax_one(row, &mut logp);
                        let h = node.value[r];
                        for (d, &lp) in drow.iter_mut().zip(&logp) {
                            *d -= g[r] * lp.exp() * (lp + h);
                        }
                    }
                });
            }
            &Op::CausalSoftmax(x) => {
                let t = node.shape[0];
                acc(x, &mut |dx| {
                    for i in 0..t {
                        let y = &node.value[i * t..i * t + i + 1];
                        let gr = &g[i * t..i * t + i + 1];
                        let mut dot = F::zero();
                        for (&yi, &gi) in y.iter().zip(gr) {
                            dot += yi * gi;
                        }
                        for j in 0..=i {
                            dx[i * t + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.shape[1];
                let gv = &nodes[gamma.0].value;
                acc(*gamma, &mut |dg| {
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks_exact(d) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dxh = vec![F::zero(); d];
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xrow[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxh[j] - inv_d * s1 - xrow[j] * inv_d * s2);
                        }
                    }
                });
            }
            &Op::SliceCols { x, start, width } => {
                let n = nodes[x.0].shape[1];
                acc(x, &mut |dx| {
                    for (i, grow) in g.chunks_exact(width).enumerate() {
                        add_into(&mut dx[i * n + start..i * n + start + width], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(p, &mut |dp| {
                        for (i, drow) in dp.chunks_exact_mut(w).enumerate() {
                            add_into(drow, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::Sum(x) => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum(x, w) => acc(*x, &mut |dx| {
                for (d, &wi) in dx.iter_mut().zip(w) {
                    *d += g[0] * wi;
                }
            }),
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
