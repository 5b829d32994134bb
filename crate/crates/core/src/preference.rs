//! Preference losses: score-level DPO-BT and Plackett-Luce, flow-level
//! pairwise FlowDPO, and the listwise EPO bound with its per-sample
//! score.
//!
//! All flow-level losses share one structure: a coupling pair `(y1, y0,
//! t)` turns a generated sample into a point on the interpolant path,
//! and the per-sample score is the MSE gap between the frozen reference
//! and the trainable model at that point. Scores feed either the
//! pairwise logistic loss or the listwise Plackett-Luce loss in
//! energy-ascending order. Only adapter parameters train; the reference
//! binding never receives gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Array, Graph, NodeId};
use crate::energy::RankedEnsemble;
use crate::flowmodel::{draw_time, ModelBinding, ModelPair, Schedule, Trainable, DEFAULT_TIME_CLAMP};

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("listwise loss needs K >= 2 ranked samples, got {0}")]
    TooFewSamples(usize),
    #[error("empty score list")]
    EmptyScores,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Flow(#[from] crate::flowmodel::FlowError),
}

fn default_beta() -> f64 {
    1.0
}

fn default_list_size() -> usize {
    8
}

fn default_shared_t() -> bool {
    true
}

fn default_clamp() -> f64 {
    DEFAULT_TIME_CLAMP
}

/// Preference-loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceConfig {
    /// Score scale; also the implicit KL strength against the reference.
    pub beta: f64,
    /// List size K.
    pub k: usize,
    /// Draw one t per list instead of one per element.
    pub shared_t: bool,
    /// Times are drawn from [clamp, 1 - clamp].
    pub time_clamp: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            beta: default_beta(),
            k: default_list_size(),
            shared_t: default_shared_t(),
            time_clamp: default_clamp(),
        }
    }
}

impl PreferenceConfig {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PreferenceError::BadConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if self.k < 2 {
            return Err(PreferenceError::BadConfig(format!(
                "list size K must be >= 2, got {}",
                self.k
            )));
        }
        if !(self.time_clamp > 0.0 && self.time_clamp < 0.1) {
            return Err(PreferenceError::BadConfig(format!(
                "time_clamp must lie in (0, 0.1), got {}",
                self.time_clamp
            )));
        }
        Ok(())
    }
}

/// A data-side sample coupled with a fresh prior draw at a fixed time.
///
/// The prior endpoint is always freshly drawn: the reverse transition is
/// approximated by the forward process, so generation-time noise is
/// never retained.
#[derive(Debug, Clone)]
pub struct CouplingPair {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub t: f64,
}

impl CouplingPair {
    /// Couple `y1` with a fresh standard-normal `y0` at time `t`.
    pub fn draw(y1: &[f64], t: f64, rng: &mut ChaCha8Rng) -> CouplingPair {
        let y0 = (0..y1.len()).map(|_| rng.sample(StandardNormal)).collect();
        CouplingPair {
            y1: y1.to_vec(),
            y0,
            t,
        }
    }
}

/// Draw one coupling pair per sample, in sample order. With `shared_t`
/// a single t serves the whole list; otherwise each element gets its
/// own draw.
pub fn draw_pairs(
    samples: &[Vec<f64>],
    cfg: &PreferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<CouplingPair> {
    let shared = if cfg.shared_t {
        Some(draw_time(rng, cfg.time_clamp))
    } else {
        None
    };
    samples
        .iter()
        .map(|y1| {
            let t = shared.unwrap_or_else(|| draw_time(rng, cfg.time_clamp));
            CouplingPair::draw(y1, t, rng)
        })
        .collect()
}

/// Both models bound on one tape: the trainable side exposes adapter
/// gradients, the reference side is frozen.
#[derive(Debug)]
pub struct PairBinding {
    pub opt: ModelBinding,
    pub reference: ModelBinding,
}

/// Bind a [`ModelPair`] for loss construction.
pub fn bind_pair(g: &mut Graph, models: &ModelPair) -> PairBinding {
    PairBinding {
        opt: models.opt().bind(g, Trainable::AdaptersOnly, true),
        reference: models.reference().bind(g, Trainable::Frozen, true),
    }
}

/// Squared velocity-regression error of one model at a coupling pair,
/// averaged over state dimensions (so beta stays comparable across d):
/// `MSE_t = ||v(y_t, t) - y_dot_t||^2 / d`.
pub fn mse_t(
    g: &mut Graph,
    model: &crate::flowmodel::VelocityModel,
    binding: &ModelBinding,
    pair: &CouplingPair,
    sched: Schedule,
) -> Result<NodeId, PreferenceError> {
    let d = model.dim();
    let (xt, vt) = crate::flowmodel::path_point(&pair.y0, &pair.y1, pair.t, sched)?;
    let feats = model.features_batch(&xt, 1, &[pair.t]);
    let pred = model.forward_graph(g, binding, feats)?;
    let target = g.constant(Array::matrix(1, d, vt).expect("sized"));
    let sq = g.squared_error(pred, target)?;
    Ok(g.scale(sq, 1.0 / d as f64))
}

/// Bradley-Terry pairwise loss on plain scores: `-log sigmoid(s_w - s_l)`.
pub fn dpo_bt_from_scores(s_w: f64, s_l: f64) -> f64 {
    -log_sigmoid_scalar(s_w - s_l)
}

/// Tape version of [`dpo_bt_from_scores`] over scalar score nodes.
pub fn dpo_bt(g: &mut Graph, s_w: NodeId, s_l: NodeId) -> Result<NodeId, PreferenceError> {
    let diff = g.sub(s_w, s_l)?;
    let ls = g.log_sigmoid(diff);
    Ok(g.neg(ls))
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Plackett-Luce listwise loss over scores already in rank order (best
/// first): `sum_k [logsumexp(s_k..) - s_k]`, via a stable suffix scan.
/// A single-element list scores 0.
pub fn listwise_pl_from_scores(scores: &[f64]) -> Result<f64, PreferenceError> {
    if scores.is_empty() {
        return Err(PreferenceError::EmptyScores);
    }
    let mut loss = 0.0;
    let mut suffix_lse = f64::NEG_INFINITY;
    for &s in scores.iter().rev() {
        suffix_lse = log_add_exp(suffix_lse, s);
        loss += suffix_lse - s;
    }
    Ok(loss)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Tape version of [`listwise_pl_from_scores`] over scalar score nodes
/// in rank order.
pub fn listwise_pl(g: &mut Graph, scores: &[NodeId]) -> Result<NodeId, PreferenceError> {
    if scores.is_empty() {
        return Err(PreferenceError::EmptyScores);
    }
    let mut terms = Vec::with_capacity(scores.len());
    for k in 0..scores.len() {
        let suffix = g.concat(&scores[k..])?;
        let lse = g.logsumexp(suffix);
        terms.push(g.sub(lse, scores[k])?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Per-sample preference score (the MSE proxy for the log-likelihood
/// ratio): `s = beta * (MSE_t(ref) - MSE_t(opt))`. Positive when the
/// trainable model fits the sample better than the reference.
pub fn epo_score(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    pair: &CouplingPair,
    beta: f64,
    sched: Schedule,
) -> Result<NodeId, PreferenceError> {
    let mse_ref = mse_t(g, models.reference(), &pb.reference, pair, sched)?;
    let mse_opt = mse_t(g, models.opt(), &pb.opt, pair, sched)?;
    let gap = g.sub(mse_ref, mse_opt)?;
    Ok(g.scale(gap, beta))
}

/// Pairwise flow preference loss, amortized over time:
/// `-log sigmoid(beta [MSE_w(ref) - MSE_w(opt) - MSE_l(ref) + MSE_l(opt)])`.
pub fn flowdpo_pair_loss(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    pair_w: &CouplingPair,
    pair_l: &CouplingPair,
    beta: f64,
    sched: Schedule,
) -> Result<NodeId, PreferenceError> {
    let s_w = epo_score(g, models, pb, pair_w, beta, sched)?;
    let s_l = epo_score(g, models, pb, pair_l, beta, sched)?;
    dpo_bt(g, s_w, s_l)
}

/// The listwise EPO bound: per-element scores in energy-ascending order
/// fed through the Plackett-Luce loss. Pairs must align with the
/// ensemble's sample order (see [`draw_pairs`]).
pub fn epo_list_loss_with_pairs(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    ranked: &RankedEnsemble,
    pairs: &[CouplingPair],
    beta: f64,
    sched: Schedule,
) -> Result<NodeId, PreferenceError> {
    if ranked.len() < 2 {
        return Err(PreferenceError::TooFewSamples(ranked.len()));
    }
    let mut scores = Vec::with_capacity(ranked.len());
    for &idx in ranked.order() {
        scores.push(epo_score(g, models, pb, &pairs[idx], beta, sched)?);
    }
    listwise_pl(g, &scores)
}

/// Adjacent-pairs variant: the mean pairwise loss over the K-1
/// energy-adjacent pairs of the ranked list.
pub fn epo_pair_loss_with_pairs(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    ranked: &RankedEnsemble,
    pairs: &[CouplingPair],
    beta: f64,
    sched: Schedule,
) -> Result<NodeId, PreferenceError> {
    if ranked.len() < 2 {
        return Err(PreferenceError::TooFewSamples(ranked.len()));
    }
    let mut terms = Vec::with_capacity(ranked.len() - 1);
    for k in 0..ranked.len() - 1 {
        let w = &pairs[ranked.order()[k]];
        let l = &pairs[ranked.order()[k + 1]];
        terms.push(flowdpo_pair_loss(g, models, pb, w, l, beta, sched)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Draw coupling pairs and evaluate the listwise bound.
pub fn epo_list_loss(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    ranked: &RankedEnsemble,
    cfg: &PreferenceConfig,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, PreferenceError> {
    if ranked.len() < 2 {
        return Err(PreferenceError::TooFewSamples(ranked.len()));
    }
    let pairs = draw_pairs(ranked.samples(), cfg, rng);
    epo_list_loss_with_pairs(g, models, pb, ranked, &pairs, cfg.beta, sched)
}

/// Draw coupling pairs and evaluate the adjacent-pairs variant.
pub fn epo_pair_loss(
    g: &mut Graph,
    models: &ModelPair,
    pb: &PairBinding,
    ranked: &RankedEnsemble,
    cfg: &PreferenceConfig,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, PreferenceError> {
    if ranked.len() < 2 {
        return Err(PreferenceError::TooFewSamples(ranked.len()));
    }
    let pairs = draw_pairs(ranked.samples(), cfg, rng);
    epo_pair_loss_with_pairs(g, models, pb, ranked, &pairs, cfg.beta, sched)
}
