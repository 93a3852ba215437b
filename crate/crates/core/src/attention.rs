//! Monotonic scaled dot-product attention.
//!
//! Scores are damped by an exponential decay in a context-aware distance:
//!
//! ```text
//! s(t,τ) = exp(−θ · d(t,τ)) · q_tᵀk_τ / √D_k
//! d(t,τ) = |t − τ| · Σ_{t'=τ+1..t} γ(t,t')
//! γ(t,·) = softmax of the row's raw scores over the allowed positions
//! ```
//!
//! `d` is recomputed from the current parameters on every forward pass and then
//! treated as a constant: no gradient flows through it. `θ = softplus(ρ)` keeps
//! the per-head decay rate positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AktError, Result};
use crate::numerics::{
    dropout, masked_softmax_rows, softplus, softplus_inverse, xavier_init, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::scalar::Scalar;

/// Which past positions a row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// τ ≤ t (encoders)
    Inclusive,
    /// τ < t (knowledge retriever); row 0 attends to nothing.
    Strict,
}

pub fn causal_mask(len: usize, kind: MaskKind) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for t in 0..len {
        let end = match kind {
            MaskKind::Inclusive => t + 1,
            MaskKind::Strict => t,
        };
        for m in &mut mask[t * len..t * len + end] {
            *m = true;
        }
    }
    mask
}

/// How the temporal term enters the attention score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `exp(−θ·d) · qᵀk/√D_k`
    #[default]
    MultiplicativeDecay,
    /// `qᵀk/√D_k − θ·d`
    AdditiveDecay,
    /// Plain scaled dot product, no temporal term.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Var {
        match self {
            Activation::Softplus => g.softplus(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// `qᵀk / √D_k` for every pair of rows, on plain values.
pub fn raw_scores<S: Scalar>(queries: &Tensor<S>, keys: &Tensor<S>) -> Result<Tensor<S>> {
    if queries.cols() != keys.cols() {
        return Err(AktError::shape("raw_scores", format!("{:?} vs {:?}", queries.shape(), keys.shape())));
    }
    let scale = S::one() / S::from_usize_lossy(queries.cols()).sqrt();
    let mut s = queries.matmul(&keys.transpose())?;
    s.scale_inplace(scale);
    Ok(s)
}

/// Context-aware distance for a square score matrix under `mask`.
/// Entries outside the lower triangle are zero.
pub fn context_distance<S: Scalar>(scores: &Tensor<S>, mask: &[bool]) -> Tensor<S> {
    let n = scores.rows();
    let gamma = masked_softmax_rows(scores, mask);
    let mut d = Tensor::zeros(&[n, n]);
    for t in 0..n {
        // running Σ_{t'=τ+1..t} γ(t,t'), built from τ = t downwards
        let mut mass = S::zero();
        for tau in (0..=t).rev() {
            if tau < t {
                mass += gamma.get(t, tau + 1);
            }
            d.set(t, tau, S::from_usize_lossy(t - tau) * mass);
        }
    }
    d
}

/// Where the attention layers take their distance matrices from.
#[derive(Clone, Debug, Default)]
pub enum DistanceTape<S> {
    /// Compute from the current scores (normal operation).
    #[default]
    Live,
    /// Compute, and keep a copy of each matrix in call order.
    Record(Vec<Tensor<S>>),
    /// Reuse matrices captured by an earlier `Record` pass, in the same order.
    Replay { frozen: Vec<Tensor<S>>, cursor: usize },
}

impl<S: Scalar> DistanceTape<S> {
    fn next(&mut self, scores: &Tensor<S>, mask: &[bool]) -> Result<Tensor<S>> {
        match self {
            DistanceTape::Live => Ok(context_distance(scores, mask)),
            DistanceTape::Record(saved) => {
                let d = context_distance(scores, mask);
                saved.push(d.clone());
                Ok(d)
            }
            DistanceTape::Replay { frozen, cursor } => {
                let d = frozen
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| AktError::Numerical("distance replay ran past the recorded passes".into()))?;
                *cursor += 1;
                if d.shape() != scores.shape() {
                    return Err(AktError::shape("distance replay", format!("{:?} vs {:?}", d.shape(), scores.shape())));
                }
                Ok(d)
            }
        }
    }

    /// Turn a finished recording into a replay starting from the beginning.
    pub fn into_replay(self) -> Self {
        match self {
            DistanceTape::Record(frozen) | DistanceTape::Replay { frozen, .. } => DistanceTape::Replay { frozen, cursor: 0 },
            DistanceTape::Live => DistanceTape::Live,
        }
    }

    pub fn rewind(&mut self) {
        if let DistanceTape::Replay { cursor, .. } = self {
            *cursor = 0;
        }
    }
}

/// Attention weights of one head, for export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub head: usize,
    /// `None` under standard attention.
    pub theta: Option<f64>,
    pub rows: Vec<Vec<f64>>,
}

/// Per-forward state threaded through every attention layer.
pub struct ForwardCtx<S> {
    pub training: bool,
    pub rng: ChaCha8Rng,
    pub distances: DistanceTape<S>,
    /// When true, each multi-head call appends its per-head weights to `traces`.
    pub record_traces: bool,
    pub traces: Vec<(String, Vec<AttentionTrace>)>,
}

impl<S: Scalar> ForwardCtx<S> {
    pub fn eval() -> Self {
        Self::new(false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn new(training: bool, rng: ChaCha8Rng) -> Self {
        ForwardCtx { training, rng, distances: DistanceTape::Live, record_traces: false, traces: Vec::new() }
    }
}

/// Scores for one head, before the softmax.
fn head_scores<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    theta: Option<Var>,
    mode: ScoreMode,
    mask: &[bool],
    distances: &mut DistanceTape<S>,
) -> Result<Var> {
    let dk = g.value(q).cols();
    let kt = g.transpose(k);
    let dot = g.matmul(q, kt)?;
    let raw = g.scale(dot, S::one() / S::from_usize_lossy(dk).sqrt());
    let scores = match (mode, theta) {
        (ScoreMode::Standard, _) => raw,
        (_, None) => return Err(AktError::config("decay score mode without a decay rate")),
        (ScoreMode::MultiplicativeDecay, Some(theta)) => {
            let d = distances.next(g.value(raw), mask)?;
            let td = g.scalar_times_const(theta, d)?;
            let neg = g.scale(td, -S::one());
            let decay = g.exp(neg);
            g.mul(raw, decay)?
        }
        (ScoreMode::AdditiveDecay, Some(theta)) => {
            let d = distances.next(g.value(raw), mask)?;
            let td = g.scalar_times_const(theta, d)?;
            g.sub(raw, td)?
        }
    };
    let finite = g
        .value(scores)
        .data()
        .iter()
        .zip(mask)
        .all(|(v, &keep)| !keep || v.is_finite());
    if !finite {
        return Err(AktError::Numerical("non-finite attention score".into()));
    }
    Ok(scores)
}

/// Single-head attention. Returns the `(T, D_v)` output and the weight matrix.
/// Rows with no allowed position produce zero weights and a zero output row.
#[allow(clippy::too_many_arguments)]
pub fn monotonic_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    theta: Option<Var>,
    mode: ScoreMode,
    mask: &[bool],
    dropout_rate: f64,
    ctx: &mut ForwardCtx<S>,
) -> Result<(Var, Tensor<S>)> {
    let scores = head_scores(g, q, k, theta, mode, mask, &mut ctx.distances)?;
    let alpha = g.masked_softmax(scores, mask)?;
    let weights = g.value(alpha).clone();
    let dropped = dropout(g, alpha, dropout_rate, ctx.training, &mut ctx.rng)?;
    Ok((g.matmul(dropped, v)?, weights))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// in × out
    pub weight: ParamId,
    /// 1 × out
    pub bias: ParamId,
}

impl Linear {
    pub fn build<S: Scalar, R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, store: &mut ParamStore<S>, rng: &mut R) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier_init(&[fan_in, fan_out], rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn parameter_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn build<S: Scalar>(name: &str, dim: usize, store: &mut ParamStore<S>) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], S::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub share_query_key: bool,
    pub score_mode: ScoreMode,
    pub dropout: f64,
    /// Apply dropout to the attention weights as well as the residual branches.
    pub attention_dropout: bool,
    pub activation: Activation,
    /// Initial decay rate θ for every head.
    pub initial_theta: f64,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(AktError::config(format!("{} heads do not divide embedding size {}", self.heads, self.dim)));
        }
        if self.ffn_dim == 0 {
            return Err(AktError::config("feed-forward width must be positive"));
        }
        if self.initial_theta <= 0.0 {
            return Err(AktError::config("initial decay rate must be positive"));
        }
        crate::numerics::check_dropout_rate(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    /// Query projection; also the key projection when shared.
    pub query: Linear,
    pub key: Option<Linear>,
    pub value: Linear,
    pub output: Linear,
    /// 1 × H raw decay parameters, θ_h = softplus(ρ_h); absent for standard attention.
    pub decay: Option<ParamId>,
}

impl MultiHeadParams {
    pub fn build<S: Scalar, R: Rng + ?Sized>(name: &str, cfg: &AttentionConfig, store: &mut ParamStore<S>, rng: &mut R) -> Self {
        let d = cfg.dim;
        let query = Linear::build(&format!("{name}.query"), d, d, store, rng);
        let key = (!cfg.share_query_key).then(|| Linear::build(&format!("{name}.key"), d, d, store, rng));
        let value = Linear::build(&format!("{name}.value"), d, d, store, rng);
        let output = Linear::build(&format!("{name}.output"), d, d, store, rng);
        let rho = softplus_inverse(cfg.initial_theta);
        let decay = (cfg.score_mode != ScoreMode::Standard)
            .then(|| store.add(format!("{name}.decay"), Tensor::full(&[1, cfg.heads], S::from_f64_lossy(rho))));
        MultiHeadParams { query, key, value, output, decay }
    }

    pub fn parameter_count(cfg: &AttentionConfig) -> usize {
        let proj = Linear::parameter_count(cfg.dim, cfg.dim);
        let projections = if cfg.share_query_key { 3 } else { 4 };
        let decay = if cfg.score_mode == ScoreMode::Standard { 0 } else { cfg.heads };
        projections * proj + decay
    }

    /// Current decay rates θ_h (empty for standard attention).
    pub fn thetas<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<f64> {
        self.decay.map_or_else(Vec::new, |id| store.get(id).data().iter().map(|&r| softplus(r).to_f64_lossless()).collect())
    }
}

/// Multi-head attention: per-head monotonic attention on column slices of the
/// projections, concatenated and passed through the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    params: &MultiHeadParams,
    cfg: &AttentionConfig,
    query_in: Var,
    key_in: Var,
    value_in: Var,
    mask: &[bool],
    ctx: &mut ForwardCtx<S>,
    label: &str,
) -> Result<Var> {
    cfg.validate()?;
    let q = params.query.apply(g, store, query_in)?;
    let k = match &params.key {
        Some(key) => key.apply(g, store, key_in)?,
        None if key_in == query_in => q,
        None => params.query.apply(g, store, key_in)?,
    };
    let v = params.value.apply(g, store, value_in)?;
    let thetas = match (cfg.score_mode, params.decay) {
        (ScoreMode::Standard, _) => None,
        (_, Some(decay)) => {
            let rho = g.param(store, decay);
            Some(g.softplus(rho))
        }
        (_, None) => return Err(AktError::config("decay score mode without decay parameters")),
    };
    let dh = cfg.head_dim();
    let att_rate = if cfg.attention_dropout { cfg.dropout } else { 0.0 };
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut traces = Vec::new();
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let theta = thetas.map(|t| g.slice_cols(t, h, 1)).transpose()?;
        let (out, weights) = monotonic_attention(g, qh, kh, vh, theta, cfg.score_mode, mask, att_rate, ctx)?;
        if ctx.record_traces {
            let theta_value = theta.map(|t| g.value(t).data()[0].to_f64_lossless());
            traces.push(AttentionTrace {
                head: h,
                theta: theta_value,
                rows: (0..weights.rows()).map(|i| weights.row(i).iter().map(|v| v.to_f64_lossless()).collect()).collect(),
            });
        }
        heads.push(out);
    }
    if ctx.record_traces {
        ctx.traces.push((label.to_string(), traces));
    }
    let concat = g.concat_cols(&heads)?;
    params.output.apply(g, store, concat)
}

/// Attention, then feed-forward, each wrapped as `layer_norm(x + dropout(branch(x)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attention: MultiHeadParams,
    pub norm1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNormParams,
}

impl BlockParams {
    pub fn build<S: Scalar, R: Rng + ?Sized>(name: &str, cfg: &AttentionConfig, store: &mut ParamStore<S>, rng: &mut R) -> Self {
        BlockParams {
            attention: MultiHeadParams::build(&format!("{name}.attn"), cfg, store, rng),
            norm1: LayerNormParams::build(&format!("{name}.norm1"), cfg.dim, store),
            ffn_in: Linear::build(&format!("{name}.ffn_in"), cfg.dim, cfg.ffn_dim, store, rng),
            ffn_out: Linear::build(&format!("{name}.ffn_out"), cfg.ffn_dim, cfg.dim, store, rng),
            norm2: LayerNormParams::build(&format!("{name}.norm2"), cfg.dim, store),
        }
    }

    pub fn parameter_count(cfg: &AttentionConfig) -> usize {
        MultiHeadParams::parameter_count(cfg)
            + 4 * cfg.dim
            + Linear::parameter_count(cfg.dim, cfg.ffn_dim)
            + Linear::parameter_count(cfg.ffn_dim, cfg.dim)
    }
}

/// One encoder (or retriever) block. For self-attention pass the same node as
/// `query_in`, `key_in` and `value_in`; the residual path follows `query_in`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    block: &BlockParams,
    cfg: &AttentionConfig,
    query_in: Var,
    key_in: Var,
    value_in: Var,
    mask: &[bool],
    ctx: &mut ForwardCtx<S>,
    label: &str,
) -> Result<Var> {
    let att = multi_head(g, store, &block.attention, cfg, query_in, key_in, value_in, mask, ctx, label)?;
    let att = dropout(g, att, cfg.dropout, ctx.training, &mut ctx.rng)?;
    let res1 = g.add(query_in, att)?;
    let x = block.norm1.apply(g, store, res1)?;
    let hidden = block.ffn_in.apply(g, store, x)?;
    let hidden = cfg.activation.apply(g, hidden);
    let hidden = dropout(g, hidden, cfg.dropout, ctx.training, &mut ctx.rng)?;
    let ff = block.ffn_out.apply(g, store, hidden)?;
    let ff = dropout(g, ff, cfg.dropout, ctx.training, &mut ctx.rng)?;
    let res2 = g.add(x, ff)?;
    block.norm2.apply(g, store, res2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, heads: usize) -> AttentionConfig {
        AttentionConfig {
            dim,
            heads,
            ffn_dim: dim,
            share_query_key: true,
            score_mode: ScoreMode::MultiplicativeDecay,
            dropout: 0.0,
            attention_dropout: true,
            activation: Activation::Softplus,
            initial_theta: 1.0,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        xavier_init(&[rows, cols], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn raw_score_cases() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let s = raw_scores(&q, &k).unwrap();
        assert_eq!(s.data(), &[0.0, 0.5]);

        let (a, b) = (random(5, 3, 1), random(4, 3, 2));
        let s = raw_scores(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let dot: f64 = (0..3).map(|c| a.get(i, c) * b.get(j, c)).sum();
                assert!((s.get(i, j) - dot / 3f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_zero_on_diagonal_and_identical_keys_closed_form() {
        let n = 7;
        let scores = Tensor::<f64>::full(&[n, n], 0.3);
        let d = context_distance(&scores, &causal_mask(n, MaskKind::Inclusive));
        for t in 0..n {
            assert_eq!(d.get(t, t), 0.0);
            for tau in 0..=t {
                // 1-based: (t − τ)² / t
                let expected = ((t - tau) * (t - tau)) as f64 / (t + 1) as f64;
                assert!((d.get(t, tau) - expected).abs() < 1e-12);
            }
        }
        assert!((d.get(3, 0) - 9.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn distance_limit_when_mass_sits_on_current_step() {
        let n = 5;
        let mut scores = Tensor::<f64>::zeros(&[n, n]);
        for t in 0..n {
            scores.set(t, t, 60.0);
        }
        let d = context_distance(&scores, &causal_mask(n, MaskKind::Inclusive));
        for t in 0..n {
            for tau in 0..=t {
                assert!((d.get(t, tau) - (t - tau) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distance_grows_into_the_past() {
        let s = random(9, 9, 3);
        for kind in [MaskKind::Inclusive, MaskKind::Strict] {
            let d = context_distance(&s, &causal_mask(9, kind));
            for t in 0..9 {
                for tau in 1..=t {
                    assert!(d.get(t, tau - 1) >= d.get(t, tau));
                    assert!(d.get(t, tau) >= 0.0);
                }
            }
        }
    }

    fn single_head(theta: f64, mode: ScoreMode, q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>, kind: MaskKind) -> (Tensor<f64>, Tensor<f64>) {
        let n = q.rows();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let t = g.constant(Tensor::scalar(theta));
        let mut ctx = ForwardCtx::eval();
        let (out, w) = monotonic_attention(&mut g, qv, kv, vv, Some(t), mode, &causal_mask(n, kind), 0.0, &mut ctx).unwrap();
        (g.value(out).clone(), w)
    }

    #[test]
    fn vanishing_decay_is_standard_attention() {
        let (q, k, v) = (random(6, 4, 5), random(6, 4, 6), random(6, 4, 7));
        let (a, _) = single_head(1e-12, ScoreMode::MultiplicativeDecay, q.clone(), k.clone(), v.clone(), MaskKind::Inclusive);
        let (b, _) = single_head(1.0, ScoreMode::Standard, q, k, v, MaskKind::Inclusive);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn equal_scores_decay_into_the_past() {
        let n = 6;
        let q = Tensor::full(&[n, 2], 0.5);
        let (_, w) = single_head(1.0, ScoreMode::MultiplicativeDecay, q.clone(), q.clone(), q, MaskKind::Inclusive);
        for t in 1..n {
            for tau in 1..=t {
                assert!(w.get(t, tau - 1) < w.get(t, tau), "row {t}: {:?}", w.row(t));
            }
            let sum: f64 = w.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_first_row_is_empty() {
        let (q, k, v) = (random(4, 2, 1), random(4, 2, 2), random(4, 2, 3));
        let (out, w) = single_head(0.5, ScoreMode::MultiplicativeDecay, q, k, v, MaskKind::Strict);
        assert!(w.row(0).iter().all(|&x| x == 0.0));
        assert!(out.row(0).iter().all(|&x| x == 0.0));
        assert!((w.row(1)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn multi_head_shapes_and_degenerate_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(16, 8);
        let p = MultiHeadParams::build("mh", &c, &mut store, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(random(5, 16, 9));
        let mut ctx = ForwardCtx::eval();
        let out = multi_head(&mut g, &store, &p, &c, x, x, x, &causal_mask(5, MaskKind::Inclusive), &mut ctx, "t").unwrap();
        assert_eq!(g.shape(out), &[5, 16]);
        assert_eq!(c.head_dim(), 2);
        assert_eq!(store.scalar_count(), MultiHeadParams::parameter_count(&c));

        let bad = AttentionConfig { heads: 3, ..c };
        assert!(matches!(bad.validate(), Err(AktError::Config(_))));
    }

    #[test]
    fn identical_heads_give_identical_halves() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(4, 2);
        let p = MultiHeadParams::build("mh", &c, &mut store, &mut rng);
        // copy head 0's columns onto head 1 for the q/k and v projections
        for lin in [&p.query, &p.value] {
            let w = store.get_mut(lin.weight);
            for r in 0..4 {
                for j in 0..2 {
                    let v = w.get(r, j);
                    w.set(r, j + 2, v);
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(random(3, 4, 1));
        let mut ctx = ForwardCtx::eval();
        ctx.record_traces = true;
        multi_head(&mut g, &store, &p, &c, x, x, x, &causal_mask(3, MaskKind::Inclusive), &mut ctx, "t").unwrap();
        let traces = &ctx.traces[0].1;
        assert_eq!(traces[0].rows, traces[1].rows);
    }

    #[test]
    fn zero_branches_reduce_to_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(4, 2);
        let block = BlockParams::build("enc", &c, &mut store, &mut rng);
        for lin in [&block.attention.value, &block.attention.output, &block.ffn_in, &block.ffn_out] {
            store.get_mut(lin.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = random(5, 4, 6);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut ctx = ForwardCtx::eval();
        let out = encoder_block(&mut g, &store, &block, &c, x, x, x, &causal_mask(5, MaskKind::Inclusive), &mut ctx, "enc").unwrap();
        let gain = g.constant(Tensor::full(&[1, 4], 1.0));
        let bias = g.constant(Tensor::zeros(&[1, 4]));
        let ln = g.layer_norm(x, gain, bias).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(ln).data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(store.scalar_count(), BlockParams::parameter_count(&c));
    }

    #[test]
    fn block_is_causal() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cfg(4, 2);
        let block = BlockParams::build("enc", &c, &mut store, &mut rng);
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(input);
            let mut ctx = ForwardCtx::eval();
            let out = encoder_block(&mut g, &store, &block, &c, x, x, x, &causal_mask(6, MaskKind::Inclusive), &mut ctx, "enc").unwrap();
            g.value(out).clone()
        };
        let base = random(6, 4, 1);
        let before = run(base.clone());
        let mut changed = base;
        for j in 0..4 {
            changed.set(4, j, 3.0 + j as f64);
        }
        let after = run(changed);
        for t in 0..4 {
            assert_eq!(before.row(t), after.row(t));
        }
        assert_ne!(before.row(4), after.row(4));
    }
}
