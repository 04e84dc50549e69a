//! Position-attentive token encoder.
//!
//! Pipeline for one (sentence, query `p`) pair of length `n`:
//!
//! 1. `x_t = E[w_t] + R[role_t]`, where `role_t` is before / at / after the query;
//! 2. first dropout site;
//! 3. local mixer `h_t = tanh(A x_t + L x_{t-1} + R x_{t+1} + b)` (zero padded);
//! 4. second dropout site;
//! 5. query attention `a_j = softmax_j(h_p^T M h_j)` and context `c = sum_j a_j h_j`;
//! 6. output `u_t = [h_t | c]` of width `2d`.
//!
//! Dropout is inverted (kept units scaled by `1 / (1 - rate)`), so the
//! deterministic mode is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};
use crate::rng;

pub const OOV: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Role {
    BeforeQuery = 0,
    Query = 1,
    AfterQuery = 2,
}

impl Role {
    pub fn of(t: usize, query: usize) -> Role {
        match t.cmp(&query) {
            std::cmp::Ordering::Less => Role::BeforeQuery,
            std::cmp::Ordering::Equal => Role::Query,
            std::cmp::Ordering::Greater => Role::AfterQuery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `V x d`; row [`OOV`] is the unknown-word embedding.
    pub embeddings: Matrix,
    /// `3 x d`, indexed by [`Role`].
    pub roles: Matrix,
    pub mix_center: Matrix,
    pub mix_left: Matrix,
    pub mix_right: Matrix,
    pub mix_bias: Vec<f64>,
    /// Bilinear attention form `M`, `d x d`.
    pub attention: Matrix,
}

impl EncoderParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            embeddings: Matrix::zeros(vocab_size, dim),
            roles: Matrix::zeros(3, dim),
            mix_center: Matrix::zeros(dim, dim),
            mix_left: Matrix::zeros(dim, dim),
            mix_right: Matrix::zeros(dim, dim),
            mix_bias: vec![0.0; dim],
            attention: Matrix::zeros(dim, dim),
        }
    }

    /// Uniform in `[-1/sqrt(d), 1/sqrt(d)]`, zero bias.
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(vocab_size.max(1), dim);
        let bound = 1.0 / (dim as f64).sqrt();
        let [emb, roles, c, l, r, _bias, m] = p.tensors_mut();
        for t in [emb, roles, c, l, r, m] {
            for v in t.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.mix_bias.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.embeddings.as_slice(),
            self.roles.as_slice(),
            self.mix_center.as_slice(),
            self.mix_left.as_slice(),
            self.mix_right.as_slice(),
            &self.mix_bias,
            self.attention.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.embeddings.as_mut_slice(),
            self.roles.as_mut_slice(),
            self.mix_center.as_mut_slice(),
            self.mix_left.as_mut_slice(),
            self.mix_right.as_mut_slice(),
            &mut self.mix_bias,
            self.attention.as_mut_slice(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: DropoutMode,
    pub seed: u64,
}

impl DropoutConfig {
    pub fn deterministic() -> Self {
        Self { rate: 0.0, mode: DropoutMode::Deterministic, seed: 0 }
    }

    pub fn stochastic(rate: f64, seed: u64) -> Self {
        Self { rate, mode: DropoutMode::Stochastic, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.rate)));
        }
        Ok(())
    }

    /// Masks for one forward call. `path` addresses the call within the seeded
    /// stream, so replaying the same path reproduces the same masks.
    pub fn masks(&self, n: usize, dim: usize, path: &[u64]) -> DropoutMasks {
        match self.mode {
            DropoutMode::Deterministic => DropoutMasks::identity(n, dim),
            DropoutMode::Stochastic => DropoutMasks::sample(self.rate, n, dim, &mut rng::stream(self.seed, path)),
        }
    }
}

/// Per-site multiplicative masks, entries `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub embed: Matrix,
    pub hidden: Matrix,
}

impl DropoutMasks {
    pub fn identity(n: usize, dim: usize) -> Self {
        let mut embed = Matrix::zeros(n, dim);
        embed.fill(1.0);
        Self { hidden: embed.clone(), embed }
    }

    pub fn sample(rate: f64, n: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::identity(n, dim);
        if rate <= 0.0 {
            return m;
        }
        let keep = 1.0 / (1.0 - rate);
        for site in [&mut m.embed, &mut m.hidden] {
            for v in site.as_mut_slice() {
                *v = if rng.gen::<f64>() < rate { 0.0 } else { keep };
            }
        }
        m
    }
}

/// Forward activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Vec<u32>,
    query: usize,
    masks: DropoutMasks,
    /// Embedding-plus-role after the first dropout site.
    x: Matrix,
    /// Mixer output after tanh, before the second dropout site.
    h_raw: Matrix,
    h: Matrix,
    attn: Vec<f64>,
    /// Token representations `u`, `n x 2d`.
    pub output: Matrix,
}

impl EncoderCache {
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }

    pub fn masks(&self) -> &DropoutMasks {
        &self.masks
    }
}

fn check_input(tokens: &[u32], query: usize, params: &EncoderParams) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInstance);
    }
    if query >= tokens.len() {
        return Err(Error::Shape(format!("query {query} outside {} tokens", tokens.len())));
    }
    if let Some(&w) = tokens.iter().find(|&&w| w as usize >= params.vocab_size()) {
        return Err(Error::Shape(format!("token id {w} outside vocabulary of {}", params.vocab_size())));
    }
    Ok(())
}

pub fn encode(tokens: &[u32], query: usize, params: &EncoderParams, masks: DropoutMasks) -> Result<EncoderCache> {
    check_input(tokens, query, params)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("encoder parameters".into()));
    }
    let n = tokens.len();
    let d = params.dim();
    if masks.embed.shape() != (n, d) || masks.hidden.shape() != (n, d) {
        return Err(Error::MaskReplay(format!("masks shaped {:?} for input {n} x {d}", masks.embed.shape())));
    }

    let mut x = Matrix::zeros(n, d);
    for (t, &w) in tokens.iter().enumerate() {
        let role = Role::of(t, query) as usize;
        let row = x.row_mut(t);
        row.copy_from_slice(params.embeddings.row(w as usize));
        axpy(1.0, params.roles.row(role), row);
        for (v, m) in row.iter_mut().zip(masks.embed.row(t)) {
            *v *= m;
        }
    }

    let mut h_raw = Matrix::zeros(n, d);
    for t in 0..n {
        let row = h_raw.row_mut(t);
        row.copy_from_slice(&params.mix_bias);
        params.mix_center.matvec_acc(x.row(t), row);
        if t > 0 {
            params.mix_left.matvec_acc(x.row(t - 1), row);
        }
        if t + 1 < n {
            params.mix_right.matvec_acc(x.row(t + 1), row);
        }
        for v in row.iter_mut() {
            *v = v.tanh();
        }
    }
    let mut h = h_raw.clone();
    for (v, m) in h.as_mut_slice().iter_mut().zip(masks.hidden.as_slice()) {
        *v *= m;
    }

    // s_j = h_p^T M h_j = (M^T h_p) . h_j
    let mut q = vec![0.0; d];
    params.attention.matvec_t_acc(h.row(query), &mut q);
    let mut attn: Vec<f64> = (0..n).map(|j| dot(&q, h.row(j))).collect();
    softmax_in_place(&mut attn);
    let mut context = vec![0.0; d];
    for (j, &a) in attn.iter().enumerate() {
        axpy(a, h.row(j), &mut context);
    }

    let mut output = Matrix::zeros(n, 2 * d);
    for t in 0..n {
        let row = output.row_mut(t);
        row[..d].copy_from_slice(h.row(t));
        row[d..].copy_from_slice(&context);
    }

    Ok(EncoderCache { tokens: tokens.to_vec(), query, masks, x, h_raw, h, attn, output })
}

/// Accumulates the parameter gradient of `sum upstream * u` into `grad`.
/// `cache` must come from [`encode`] on the same tokens and query.
pub fn encode_backward(
    tokens: &[u32],
    query: usize,
    params: &EncoderParams,
    cache: &EncoderCache,
    upstream: &Matrix,
    grad: &mut EncoderParams,
) -> Result<()> {
    check_input(tokens, query, params)?;
    if cache.tokens != tokens || cache.query != query {
        return Err(Error::MaskReplay("backward input differs from the cached forward call".into()));
    }
    let n = tokens.len();
    let d = params.dim();
    if upstream.shape() != (n, 2 * d) {
        return Err(Error::Shape(format!("upstream {:?}, expected ({n}, {})", upstream.shape(), 2 * d)));
    }
    if grad.dim() != d || grad.vocab_size() != params.vocab_size() {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    let h = &cache.h;
    let attn = &cache.attn;

    let mut dh = Matrix::zeros(n, d);
    let mut dc = vec![0.0; d];
    for t in 0..n {
        let row = upstream.row(t);
        dh.row_mut(t).copy_from_slice(&row[..d]);
        axpy(1.0, &row[d..], &mut dc);
    }

    // c = sum_j a_j h_j
    let mut da = vec![0.0; n];
    for j in 0..n {
        axpy(attn[j], &dc, dh.row_mut(j));
        da[j] = dot(&dc, h.row(j));
    }
    let mean: f64 = attn.iter().zip(&da).map(|(a, g)| a * g).sum();
    let ds: Vec<f64> = attn.iter().zip(&da).map(|(a, g)| a * (g - mean)).collect();

    // s_j = q . h_j with q = M^T h_p
    let mut q = vec![0.0; d];
    params.attention.matvec_t_acc(h.row(query), &mut q);
    let mut dq = vec![0.0; d];
    for (j, &s) in ds.iter().enumerate().take(n) {
        axpy(s, &q, dh.row_mut(j));
        axpy(s, h.row(j), &mut dq);
    }
    grad.attention.outer_acc(h.row(query), &dq);
    params.attention.matvec_acc(&dq, dh.row_mut(query));

    // Second dropout site and tanh.
    let mut dpre = dh;
    for ((g, m), hr) in dpre.as_mut_slice().iter_mut().zip(cache.masks.hidden.as_slice()).zip(cache.h_raw.as_slice()) {
        *g *= m * (1.0 - hr * hr);
    }

    let x = &cache.x;
    let mut dx = Matrix::zeros(n, d);
    for t in 0..n {
        let g = dpre.row(t);
        axpy(1.0, g, &mut grad.mix_bias);
        grad.mix_center.outer_acc(g, x.row(t));
        params.mix_center.matvec_t_acc(g, dx.row_mut(t));
        if t > 0 {
            grad.mix_left.outer_acc(g, x.row(t - 1));
            params.mix_left.matvec_t_acc(g, dx.row_mut(t - 1));
        }
        if t + 1 < n {
            grad.mix_right.outer_acc(g, x.row(t + 1));
            params.mix_right.matvec_t_acc(g, dx.row_mut(t + 1));
        }
    }

    for (t, &w) in tokens.iter().enumerate() {
        let row = dx.row_mut(t);
        for (v, m) in row.iter_mut().zip(cache.masks.embed.row(t)) {
            *v *= m;
        }
        axpy(1.0, row, grad.embeddings.row_mut(w as usize));
        axpy(1.0, row, grad.roles.row_mut(Role::of(t, query) as usize));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(vocab: usize, d: usize, seed: u64) -> EncoderParams {
        EncoderParams::init(vocab, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_token_context_equals_state() {
        let p = params(4, 3, 1);
        let cache = encode(&[2], 0, &p, DropoutMasks::identity(1, 3)).unwrap();
        assert_eq!(cache.attention(), &[1.0]);
        let u = cache.output.row(0);
        assert_eq!(&u[..3], &u[3..]);
    }

    #[test]
    fn zero_rate_ignores_seed() {
        let p = params(6, 4, 2);
        let tokens = [1, 4, 5, 0];
        let a = DropoutConfig::stochastic(0.0, 1).masks(4, 4, &[0]);
        let b = DropoutConfig::stochastic(0.0, 99).masks(4, 4, &[7]);
        let ua = encode(&tokens, 1, &p, a).unwrap().output;
        let ub = encode(&tokens, 1, &p, b).unwrap().output;
        assert_eq!(ua, ub);
    }

    #[test]
    fn attention_is_a_distribution() {
        let p = params(10, 4, 3);
        let tokens = [1, 2, 3, 4, 5, 6, 7];
        for q in 0..tokens.len() {
            let masks = DropoutConfig::stochastic(0.3, 5).masks(7, 4, &[q as u64]);
            let c = encode(&tokens, q, &p, masks).unwrap();
            assert!(c.attention().iter().all(|&a| a >= 0.0));
            assert!((c.attention().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = params(3, 2, 4);
        assert!(matches!(encode(&[], 0, &p, DropoutMasks::identity(0, 2)), Err(Error::EmptyInstance)));
        assert!(encode(&[5], 0, &p, DropoutMasks::identity(1, 2)).is_err());
        assert!(encode(&[1], 0, &p, DropoutMasks::identity(2, 2)).is_err());
        p.mix_bias[0] = f64::INFINITY;
        assert!(matches!(encode(&[1], 0, &p, DropoutMasks::identity(1, 2)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_rejects_other_forward_call() {
        let p = params(5, 2, 5);
        let cache = encode(&[1, 2, 3], 0, &p, DropoutMasks::identity(3, 2)).unwrap();
        let up = Matrix::zeros(3, 4);
        let mut g = EncoderParams::zeros(5, 2);
        let err = encode_backward(&[1, 2, 3], 1, &p, &cache, &up, &mut g).unwrap_err();
        assert!(matches!(err, Error::MaskReplay(_)));
        let err = encode_backward(&[1, 2, 4], 0, &p, &cache, &up, &mut g).unwrap_err();
        assert!(matches!(err, Error::MaskReplay(_)));
    }

    #[test]
    fn mask_replay_is_reproducible() {
        let cfg = DropoutConfig::stochastic(0.5, 11);
        assert_eq!(cfg.masks(3, 4, &[1, 2]), cfg.masks(3, 4, &[1, 2]));
        assert_ne!(cfg.masks(3, 4, &[1, 2]), cfg.masks(3, 4, &[1, 3]));
    }
}
