//! Linear-chain CRF over per-token tag scores.
//!
//! A path `y` scores `start[y_0] + sum_t z_t[y_t] + sum_t trans[y_t][y_{t+1}] + end[y_{n-1}]`.
//! Inference runs in log space. Token marginals are the posterior
//! `P(y_t = c | z)`; their vector-Jacobian product is computed by pushing a
//! tangent through the same recursions, which works because the marginals
//! are the gradient of the (convex) log-partition and its Hessian is
//! symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `C x in_dim`; emissions are `z_t = W u_t`.
    pub projection: Matrix,
    /// `trans[a][b]` scores tag `a` followed by tag `b`.
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(num_tags: usize, in_dim: usize) -> Self {
        Self {
            projection: Matrix::zeros(num_tags, in_dim),
            transitions: Matrix::zeros(num_tags, num_tags),
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    pub fn in_dim(&self) -> usize {
        self.projection.cols()
    }

    /// `z = u W^T`, one row per token.
    pub fn emissions(&self, u: &Matrix) -> Matrix {
        let mut z = Matrix::zeros(u.rows(), self.num_tags());
        for t in 0..u.rows() {
            self.projection.matvec_acc(u.row(t), z.row_mut(t));
        }
        z
    }

    /// Accumulates the projection gradient into `grad` and returns dL/du.
    pub fn emissions_backward(&self, u: &Matrix, grad_z: &Matrix, grad: &mut CrfParams) -> Matrix {
        let mut grad_u = Matrix::zeros(u.rows(), u.cols());
        for t in 0..u.rows() {
            grad.projection.outer_acc(grad_z.row(t), u.row(t));
            self.projection.matvec_t_acc(grad_z.row(t), grad_u.row_mut(t));
        }
        grad_u
    }

    /// Accumulates the transition/start/end part of `g`.
    pub fn accumulate(&mut self, g: &CrfGrad) {
        axpy(1.0, g.transitions.as_slice(), self.transitions.as_mut_slice());
        axpy(1.0, &g.start, &mut self.start);
        axpy(1.0, &g.end, &mut self.end);
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.projection.as_slice(), self.transitions.as_slice(), &self.start, &self.end]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [self.projection.as_mut_slice(), self.transitions.as_mut_slice(), &mut self.start, &mut self.end]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of a scalar w.r.t. emissions and the path-structure parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emissions: Matrix,
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// `P(y_t = c | x)` for every token, `n x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMarginals(Matrix);

impl TokenMarginals {
    /// Wraps a probability matrix; rows must sum to one within 1e-8.
    pub fn new(probs: Matrix) -> Result<Self> {
        for t in 0..probs.rows() {
            let row = probs.row(t);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-8 || row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
                return Err(Error::Shape(format!("marginal row {t} is not a distribution: {row:?}")));
            }
        }
        Ok(Self(probs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn num_tags(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn sequence_score(emissions: &Matrix, tags: &[usize], params: &CrfParams) -> f64 {
    assert_eq!(emissions.rows(), tags.len(), "emission/tag length mismatch");
    if tags.is_empty() {
        return 0.0;
    }
    let mut s = params.start[tags[0]] + params.end[tags[tags.len() - 1]];
    for (t, &y) in tags.iter().enumerate() {
        s += emissions.get(t, y);
    }
    for w in tags.windows(2) {
        s += params.transitions.get(w[0], w[1]);
    }
    s
}

#[derive(Clone, Copy, Default)]
struct Dual {
    v: f64,
    t: f64,
}

/// Log-sum-exp of `(value, tangent)` pairs produced by `f(i)` for `i < len`.
#[inline]
fn lse_dual(len: usize, mut f: impl FnMut(usize) -> Dual, with_tangent: bool) -> Dual {
    let mut max = f64::NEG_INFINITY;
    let mut duals = smallbuf::Buf::new(len);
    for i in 0..len {
        let d = f(i);
        duals.set(i, d.v, d.t);
        if d.v > max {
            max = d.v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Dual { v: max, t: 0.0 };
    }
    let mut sum = 0.0;
    let mut tsum = 0.0;
    for i in 0..len {
        let (v, t) = duals.get(i);
        let w = (v - max).exp();
        sum += w;
        if with_tangent {
            tsum += w * t;
        }
    }
    Dual { v: max + sum.ln(), t: if with_tangent { tsum / sum } else { 0.0 } }
}

mod smallbuf {
    /// Scratch storage for one log-sum-exp; stays on the stack for small tag sets.
    #[allow(clippy::large_enum_variant)]
    pub enum Buf {
        Stack([(f64, f64); 32]),
        Heap(Vec<(f64, f64)>),
    }

    impl Buf {
        #[inline]
        pub fn new(len: usize) -> Self {
            if len <= 32 {
                Buf::Stack([(0.0, 0.0); 32])
            } else {
                Buf::Heap(vec![(0.0, 0.0); len])
            }
        }

        #[inline]
        pub fn set(&mut self, i: usize, v: f64, t: f64) {
            match self {
                Buf::Stack(a) => a[i] = (v, t),
                Buf::Heap(a) => a[i] = (v, t),
            }
        }

        #[inline]
        pub fn get(&self, i: usize) -> (f64, f64) {
            match self {
                Buf::Stack(a) => a[i],
                Buf::Heap(a) => a[i],
            }
        }
    }
}

/// Forward–backward result: log-partition, node marginals and expected
/// transition counts (summed over positions).
#[derive(Debug, Clone)]
pub struct Posterior {
    pub log_z: f64,
    pub nodes: Matrix,
    pub pairs: Matrix,
}

/// Runs forward–backward, optionally pushing the emission tangent
/// `tangent` (`n x C`) through. With a tangent, the second value holds the
/// directional derivatives of the node marginals and expected counts.
fn forward_backward_impl(emissions: &Matrix, params: &CrfParams, tangent: Option<&Matrix>) -> (Posterior, Option<CrfGrad>) {
    let n = emissions.rows();
    let c = params.num_tags();
    assert!(n >= 1, "forward-backward needs at least one token");
    assert_eq!(emissions.cols(), c, "emission width must equal the tag count");
    let jvp = tangent.is_some();
    let g = |t: usize, k: usize| tangent.map_or(0.0, |m| m.get(t, k));
    let trans = &params.transitions;

    let mut alpha = vec![Dual::default(); n * c];
    for (k, a) in alpha.iter_mut().take(c).enumerate() {
        *a = Dual { v: params.start[k] + emissions.get(0, k), t: g(0, k) };
    }
    for t in 1..n {
        for k in 0..c {
            let prev = &alpha[(t - 1) * c..t * c];
            let d = lse_dual(c, |a| Dual { v: prev[a].v + trans.get(a, k), t: prev[a].t }, jvp);
            alpha[t * c + k] = Dual { v: d.v + emissions.get(t, k), t: d.t + g(t, k) };
        }
    }

    let mut beta = vec![Dual::default(); n * c];
    for k in 0..c {
        beta[(n - 1) * c + k] = Dual { v: params.end[k], t: 0.0 };
    }
    for t in (0..n - 1).rev() {
        for a in 0..c {
            let next = &beta[(t + 1) * c..(t + 2) * c];
            beta[t * c + a] =
                lse_dual(c, |b| Dual { v: trans.get(a, b) + emissions.get(t + 1, b) + next[b].v, t: g(t + 1, b) + next[b].t }, jvp);
        }
    }

    let last = &alpha[(n - 1) * c..];
    let log_z = lse_dual(c, |k| Dual { v: last[k].v + params.end[k], t: last[k].t }, jvp);

    let mut nodes = Matrix::zeros(n, c);
    let mut d_nodes = if jvp { Some(Matrix::zeros(n, c)) } else { None };
    for t in 0..n {
        let mut sum = 0.0;
        for k in 0..c {
            let a = alpha[t * c + k];
            let b = beta[t * c + k];
            let p = (a.v + b.v - log_z.v).exp();
            nodes.set(t, k, p);
            sum += p;
            if let Some(dn) = d_nodes.as_mut() {
                dn.set(t, k, p * (a.t + b.t - log_z.t));
            }
        }
        // Absorb rounding drift so each row is a distribution.
        for k in 0..c {
            nodes.set(t, k, nodes.get(t, k) / sum);
        }
    }

    let mut pairs = Matrix::zeros(c, c);
    let mut d_pairs = if jvp { Some(Matrix::zeros(c, c)) } else { None };
    for t in 0..n.saturating_sub(1) {
        for a in 0..c {
            let al = alpha[t * c + a];
            for b in 0..c {
                let be = beta[(t + 1) * c + b];
                let xi = (al.v + trans.get(a, b) + emissions.get(t + 1, b) + be.v - log_z.v).exp();
                pairs.add_at(a, b, xi);
                if let Some(dp) = d_pairs.as_mut() {
                    dp.add_at(a, b, xi * (al.t + g(t + 1, b) + be.t - log_z.t));
                }
            }
        }
    }

    let grad = d_nodes.map(|dn| {
        let start = dn.row(0).to_vec();
        let end = dn.row(n - 1).to_vec();
        CrfGrad { emissions: dn, transitions: d_pairs.expect("pairs tangent"), start, end }
    });
    (Posterior { log_z: log_z.v, nodes, pairs }, grad)
}

pub fn forward_backward(emissions: &Matrix, params: &CrfParams) -> Posterior {
    forward_backward_impl(emissions, params, None).0
}

/// `log sum_y exp s(z, y)` via the forward recursion.
pub fn log_partition(emissions: &Matrix, params: &CrfParams) -> f64 {
    let n = emissions.rows();
    let c = params.num_tags();
    assert!(n >= 1, "log_partition needs at least one token");
    let mut alpha: Vec<f64> = (0..c).map(|k| params.start[k] + emissions.get(0, k)).collect();
    let mut next = vec![0.0; c];
    let mut terms = vec![0.0; c];
    for t in 1..n {
        for (k, nk) in next.iter_mut().enumerate() {
            for (a, term) in terms.iter_mut().enumerate() {
                *term = alpha[a] + params.transitions.get(a, k);
            }
            *nk = crate::linalg::log_sum_exp(&terms) + emissions.get(t, k);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    for (k, term) in terms.iter_mut().enumerate() {
        *term = alpha[k] + params.end[k];
    }
    crate::linalg::log_sum_exp(&terms)
}

pub fn token_marginals(emissions: &Matrix, params: &CrfParams) -> TokenMarginals {
    TokenMarginals(forward_backward(emissions, params).nodes)
}

/// Negative log-likelihood of `tags` and its gradient.
pub fn nll_loss_and_grad(emissions: &Matrix, tags: &[usize], params: &CrfParams) -> Result<(f64, CrfGrad)> {
    let n = emissions.rows();
    if n == 0 {
        return Err(Error::EmptyInstance);
    }
    if tags.len() != n {
        return Err(Error::Shape(format!("{} tags for {} tokens", tags.len(), n)));
    }
    let c = params.num_tags();
    if let Some(&bad) = tags.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("tag id {bad} out of range for {c} tags")));
    }
    let post = forward_backward(emissions, params);
    let loss = post.log_z - sequence_score(emissions, tags, params);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "crf nll (log_z = {}, max |z| = {})",
            post.log_z,
            emissions.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        )));
    }
    let mut grad_e = post.nodes.clone();
    let mut start: Vec<f64> = post.nodes.row(0).to_vec();
    let mut end: Vec<f64> = post.nodes.row(n - 1).to_vec();
    let mut trans = post.pairs.clone();
    for (t, &y) in tags.iter().enumerate() {
        grad_e.add_at(t, y, -1.0);
    }
    start[tags[0]] -= 1.0;
    end[tags[n - 1]] -= 1.0;
    for w in tags.windows(2) {
        trans.add_at(w[0], w[1], -1.0);
    }
    Ok((loss, CrfGrad { emissions: grad_e, transitions: trans, start, end }))
}

/// Gradient of `sum_{t,c} upstream[t][c] * P(y_t = c | z)` w.r.t. the emissions
/// and the transition/start/end scores.
pub fn marginals_vjp(emissions: &Matrix, params: &CrfParams, upstream: &Matrix) -> CrfGrad {
    assert_eq!(upstream.shape(), emissions.shape(), "upstream shape");
    forward_backward_impl(emissions, params, Some(upstream)).1.expect("tangent requested")
}

/// Highest-scoring path and its score. Ties go to the lowest tag id.
pub fn viterbi_decode(emissions: &Matrix, params: &CrfParams) -> (Vec<usize>, f64) {
    let n = emissions.rows();
    let c = params.num_tags();
    assert!(n >= 1, "viterbi needs at least one token");
    let mut delta: Vec<f64> = (0..c).map(|k| params.start[k] + emissions.get(0, k)).collect();
    let mut next = vec![0.0; c];
    let mut back = vec![0usize; n * c];
    for t in 1..n {
        for k in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (a, &d) in delta.iter().enumerate() {
                let s = d + params.transitions.get(a, k);
                if s > best {
                    best = s;
                    arg = a;
                }
            }
            next[k] = best + emissions.get(t, k);
            back[t * c + k] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (k, &d) in delta.iter().enumerate() {
        let s = d + params.end[k];
        if s > best {
            best = s;
            arg = k;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = arg;
    for t in (1..n).rev() {
        path[t - 1] = back[t * c + path[t]];
    }
    (path, best)
}

/// Per-token softmax of the emissions, ignoring transitions. Alternative
/// reading of the token distribution, selectable on the model.
pub fn softmax_marginals(emissions: &Matrix) -> TokenMarginals {
    let mut m = emissions.clone();
    for t in 0..m.rows() {
        crate::linalg::softmax_in_place(m.row_mut(t));
    }
    TokenMarginals(m)
}

/// Emission gradient of `sum upstream * softmax(z)`.
pub fn softmax_vjp(probs: &TokenMarginals, upstream: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(probs.len(), probs.num_tags());
    for t in 0..probs.len() {
        let p = probs.row(t);
        let u = upstream.row(t);
        let inner: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
        for (k, gk) in g.row_mut(t).iter_mut().enumerate() {
            *gk = p[k] * (u[k] - inner);
        }
    }
    g
}
