use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;

use super::{check_simplex, entropy, InfoError, Result, SequenceDistribution, Context, TOL};
use crate::TokenId;

type Dist = BTreeMap<Vec<TokenId>, f64>;

/// A joint distribution `p(q) p(a|q) p(r|q,a)` over prompts, answer labels
/// and response sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    prior: Vec<f64>,
    answer_given_prompt: Vec<Vec<f64>>,
    given_qa: Vec<Vec<Dist>>,
}

/// Entropies and marginals of a [`JointTable`], in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub h_r: f64,
    pub h_r_given_q: f64,
    pub h_r_given_a: f64,
    pub h_r_given_qa: f64,
    pub h_q_given_a: f64,
    pub pi_r: SequenceDistribution,
    /// `None` for answers with zero marginal probability.
    pub pi_r_given_a: Vec<Option<SequenceDistribution>>,
    /// Rows are prompts, columns follow `sequences`.
    pub joint_qr: Vec<Vec<f64>>,
    /// Rows are answers, columns follow `sequences`.
    pub joint_ra: Vec<Vec<f64>>,
    pub sequences: Vec<Vec<TokenId>>,
    pub notes: Vec<String>,
}

/// Per-token conditional entropies for one prompt and position `t` (1-based),
/// each an expectation over prefixes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenEntropy {
    pub prompt: usize,
    pub t: usize,
    /// `H(o_t | o_<t, q)`.
    pub h_q: f64,
    /// `H(o_t | o_<t, q, a)`, averaged over `p(a | q)`.
    pub h_qa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IbroReport {
    pub beta: f64,
    pub h_r: f64,
    pub h_r_given_q: f64,
    pub h_r_given_a: f64,
    pub h_r_given_qa: f64,
    pub h_q_given_a: f64,
    pub i_q_r: f64,
    pub i_r_a: f64,
    pub per_token: Vec<TokenEntropy>,
    pub ibro_value: f64,
    pub surrogate_value: f64,
    pub bound_residual: f64,
    /// `|sum_t E_q H(o_t|o_<t,q) - H(r|q)|`.
    pub chain_rule_gap_q: f64,
    /// `|sum_t E_qa H(o_t|o_<t,q,a) - H(r|q,a)|`.
    pub chain_rule_gap_qa: f64,
    pub notes: Vec<String>,
}

impl JointTable {
    /// Validates normalization and the prefix-free property of every
    /// conditional distribution.
    pub fn new(prior: Vec<f64>, answer_given_prompt: Vec<Vec<f64>>, given_qa: Vec<Vec<Dist>>) -> Result<Self> {
        check_simplex(&prior, "prompt prior")?;
        if answer_given_prompt.len() != prior.len() || given_qa.len() != prior.len() {
            return Err(InfoError::Distribution("tables disagree on the number of prompts".into()));
        }
        let n_answers = answer_given_prompt.first().map_or(0, |r| r.len());
        for (q, (row, dists)) in answer_given_prompt.iter().zip(&given_qa).enumerate() {
            if row.len() != n_answers || dists.len() != n_answers {
                return Err(InfoError::Distribution(format!("prompt {q} has a ragged answer row")));
            }
            check_simplex(row, "answer map row")?;
            for d in dists {
                let total: f64 = d.values().sum();
                if (total - 1.0).abs() > TOL || d.values().any(|&p| !(p >= 0.0)) {
                    return Err(InfoError::Distribution(format!("p(r|q={q},a) sums to {total}")));
                }
                for seq in d.keys() {
                    if seq.is_empty() || (1..seq.len()).any(|k| d.contains_key(&seq[..k])) {
                        return Err(InfoError::Distribution("sequence support is not prefix-free".into()));
                    }
                }
            }
        }
        Ok(Self {
            prior,
            answer_given_prompt,
            given_qa,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.prior.len()
    }

    pub fn n_answers(&self) -> usize {
        self.answer_given_prompt[0].len()
    }

    fn p_qa(&self, q: usize, a: usize) -> f64 {
        self.prior[q] * self.answer_given_prompt[q][a]
    }

    /// `p(r | q)`.
    pub fn given_q(&self, q: usize) -> Dist {
        let mut out = Dist::new();
        for (a, d) in self.given_qa[q].iter().enumerate() {
            let w = self.answer_given_prompt[q][a];
            if w == 0.0 {
                continue;
            }
            for (s, &p) in d {
                *out.entry(s.clone()).or_insert(0.0) += w * p;
            }
        }
        out
    }

    pub fn marginals(&self) -> Marginals {
        let (nq, na) = (self.n_prompts(), self.n_answers());
        let mut notes = Vec::new();
        let given_q: Vec<Dist> = (0..nq).map(|q| self.given_q(q)).collect();

        let mut pi_r = Dist::new();
        for (q, d) in given_q.iter().enumerate() {
            for (s, &p) in d {
                *pi_r.entry(s.clone()).or_insert(0.0) += self.prior[q] * p;
            }
        }
        let sequences: Vec<Vec<TokenId>> = pi_r
            .keys()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&[TokenId], usize> = sequences.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();

        let p_a: Vec<f64> = (0..na).map(|a| (0..nq).map(|q| self.p_qa(q, a)).sum()).collect();
        let mut pi_r_given_a = Vec::with_capacity(na);
        let mut joint_ra = vec![vec![0.0; sequences.len()]; na];
        let mut h_r_given_a = 0.0;
        let mut h_q_given_a = 0.0;
        for a in 0..na {
            if p_a[a] <= 0.0 {
                notes.push(format!("answer {a} has zero marginal probability and is excluded"));
                pi_r_given_a.push(None);
                continue;
            }
            let mut d = Dist::new();
            for q in 0..nq {
                let w = self.p_qa(q, a);
                if w == 0.0 {
                    continue;
                }
                for (s, &p) in &self.given_qa[q][a] {
                    *d.entry(s.clone()).or_insert(0.0) += w * p;
                    joint_ra[a][index[s.as_slice()]] += w * p;
                }
            }
            d.values_mut().for_each(|p| *p /= p_a[a]);
            h_r_given_a += p_a[a] * entropy(d.values().copied());
            h_q_given_a += p_a[a] * entropy((0..nq).map(|q| self.p_qa(q, a) / p_a[a]));
            pi_r_given_a.push(Some(SequenceDistribution {
                probs: d,
                context: Context::A,
            }));
        }

        let mut joint_qr = vec![vec![0.0; sequences.len()]; nq];
        for (q, d) in given_q.iter().enumerate() {
            for (s, &p) in d {
                joint_qr[q][index[s.as_slice()]] = self.prior[q] * p;
            }
        }

        let h_r_given_q = (0..nq).map(|q| self.prior[q] * entropy(given_q[q].values().copied())).sum();
        let mut h_r_given_qa = 0.0;
        for q in 0..nq {
            for a in 0..na {
                let w = self.p_qa(q, a);
                if w > 0.0 {
                    h_r_given_qa += w * entropy(self.given_qa[q][a].values().copied());
                }
            }
        }

        Marginals {
            h_r: entropy(pi_r.values().copied()),
            h_r_given_q,
            h_r_given_a,
            h_r_given_qa,
            h_q_given_a,
            pi_r: SequenceDistribution {
                probs: pi_r,
                context: Context::None,
            },
            pi_r_given_a,
            joint_qr,
            joint_ra,
            sequences,
            notes,
        }
    }

    fn max_len(&self) -> usize {
        self.given_qa
            .iter()
            .flatten()
            .flat_map(|d| d.keys().map(|s| s.len()))
            .max()
            .unwrap_or(0)
    }

    /// Per-(prompt, position) conditional entropies.
    pub fn per_token(&self) -> Vec<TokenEntropy> {
        let len = self.max_len();
        let mut rows = Vec::with_capacity(self.n_prompts() * len);
        for q in 0..self.n_prompts() {
            let dq = self.given_q(q);
            for t in 1..=len {
                let h_q = prefix_entropy(&dq, t);
                let h_qa = self.given_qa[q]
                    .iter()
                    .enumerate()
                    .filter(|(a, _)| self.answer_given_prompt[q][*a] > 0.0)
                    .map(|(a, d)| self.answer_given_prompt[q][a] * prefix_entropy(d, t))
                    .sum();
                rows.push(TokenEntropy { prompt: q, t, h_q, h_qa });
            }
        }
        rows
    }

    pub fn report(&self, beta: f64) -> Result<IbroReport> {
        if !(beta > 0.0) {
            return Err(InfoError::Distribution(format!("beta must be > 0, got {beta}")));
        }
        let m = self.marginals();
        let per_token = self.per_token();
        let i_q_r = m.h_r - m.h_r_given_q;
        let i_r_a = m.h_r - m.h_r_given_a;
        let ibro_value = i_q_r - beta * i_r_a;
        let mut sum_q = 0.0;
        let mut sum_qa = 0.0;
        for row in &per_token {
            sum_q += self.prior[row.prompt] * row.h_q;
            sum_qa += self.prior[row.prompt] * row.h_qa;
        }
        let surrogate_value = beta * sum_qa - sum_q;
        let bound_residual = (1.0 - beta) * m.h_r + beta * m.h_q_given_a + surrogate_value - ibro_value;
        Ok(IbroReport {
            beta,
            h_r: m.h_r,
            h_r_given_q: m.h_r_given_q,
            h_r_given_a: m.h_r_given_a,
            h_r_given_qa: m.h_r_given_qa,
            h_q_given_a: m.h_q_given_a,
            i_q_r,
            i_r_a,
            per_token,
            ibro_value,
            surrogate_value,
            bound_residual,
            chain_rule_gap_q: (sum_q - m.h_r_given_q).abs(),
            chain_rule_gap_qa: (sum_qa - m.h_r_given_qa).abs(),
            notes: m.notes,
        })
    }
}

/// `sum over prefixes of length t-1: P(prefix) H(o_t | prefix)`. Sequences
/// shorter than `t` have ended and contribute nothing.
fn prefix_entropy(d: &Dist, t: usize) -> f64 {
    let mut groups: HashMap<&[TokenId], HashMap<TokenId, f64>> = HashMap::new();
    for (s, &p) in d {
        if s.len() >= t && p > 0.0 {
            *groups.entry(&s[..t - 1]).or_default().entry(s[t - 1]).or_insert(0.0) += p;
        }
    }
    let mut h = 0.0;
    for children in groups.values() {
        let total: f64 = children.values().sum();
        for &m in children.values() {
            h -= m * (m / total).ln();
        }
    }
    h.max(0.0)
}

impl IbroReport {
    /// Scalar quantities as `(name, value)` pairs.
    pub fn records(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = [
            ("beta", self.beta),
            ("H_r", self.h_r),
            ("H_r_given_q", self.h_r_given_q),
            ("H_r_given_a", self.h_r_given_a),
            ("H_r_given_qa", self.h_r_given_qa),
            ("H_q_given_a", self.h_q_given_a),
            ("I_q_r", self.i_q_r),
            ("I_r_a", self.i_r_a),
            ("ibro_value", self.ibro_value),
            ("surrogate_value", self.surrogate_value),
            ("bound_residual", self.bound_residual),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for row in &self.per_token {
            out.push((format!("H_t_given_q[q={},t={}]", row.prompt, row.t), row.h_q));
            out.push((format!("H_t_given_qa[q={},t={}]", row.prompt, row.t), row.h_qa));
        }
        out
    }

    /// One `name<TAB>value` line per quantity.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, v) in self.records() {
            writeln!(w, "{k}\t{v:.17e}")?;
        }
        Ok(())
    }
}

/// `I(X;Y)` of a joint table with rows indexed by `X`.
pub fn mutual_information(joint: &[Vec<f64>]) -> Result<f64> {
    let cols = joint.first().map_or(0, |r| r.len());
    if joint.iter().any(|r| r.len() != cols) {
        return Err(InfoError::Distribution("ragged joint table".into()));
    }
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_simplex(&flat, "joint table")?;
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut i = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                i += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    Ok(i)
}
