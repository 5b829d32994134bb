//! The MLP velocity field v(x, t) with time embeddings and optional
//! low-rank adapters.
//!
//! Two forward paths exist and must stay bit-identical: a tape path
//! (`forward_graph`) used by every loss, and a plain path (`eval_batch`)
//! used by the samplers. Both route matrix products through the same
//! accumulation kernel so that training and sampling see the same
//! function.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Gradients, Graph, NodeId};

use super::FlowError;

/// Architecture of a [`VelocityModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// State dimension d; also the output dimension.
    pub dim: usize,
    /// Hidden layer widths.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features (even: sin/cos pairs).
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    /// Embed the state as (sin x, cos x) per dimension; used for
    /// potentials that declare period 2*pi.
    #[serde(default)]
    pub periodic: bool,
    /// Fixed conditioning vector appended to the input features.
    #[serde(default)]
    pub conditioning: Vec<f64>,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_time_features() -> usize {
    16
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        ModelConfig {
            dim,
            hidden: default_hidden(),
            time_features: default_time_features(),
            periodic: false,
            conditioning: Vec::new(),
        }
    }
}

/// One affine layer, stored in the forward convention: `y = x @ w + b`
/// with `w: [fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub w: Array,
    pub b: Array,
}

/// Low-rank additive factor on one affine layer.
///
/// Contribution: `scale * (x @ down) @ up` with `down: [fan_in, rank]`
/// and `up: [rank, fan_out]`. `up` is zero-initialized, so a fresh
/// adapter contributes exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub down: Array,
    pub up: Array,
    pub scale: f64,
    pub rank: usize,
}

/// Which parameters receive gradients when binding a model to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    AdaptersOnly,
    Frozen,
}

/// A time-dependent MLP velocity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    dim: usize,
    hidden: Vec<usize>,
    time_freqs: Vec<f64>,
    periodic: bool,
    conditioning: Vec<f64>,
    layers: Vec<AffineLayer>,
    adapters: Option<Vec<LowRankAdapter>>,
}

impl VelocityModel {
    /// Xavier-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, FlowError> {
        if cfg.dim == 0 {
            return Err(FlowError::BadModel("state dimension must be positive".into()));
        }
        if cfg.time_features % 2 != 0 || cfg.time_features == 0 {
            return Err(FlowError::BadModel(
                "time_features must be a positive even count (sin/cos pairs)".into(),
            ));
        }
        let time_freqs: Vec<f64> = (0..cfg.time_features / 2)
            .map(|k| std::f64::consts::PI * (1u64 << k) as f64)
            .collect();
        let state_feats = if cfg.periodic { 2 * cfg.dim } else { cfg.dim };
        let feat = state_feats + cfg.time_features + cfg.conditioning.len();
        let mut widths = vec![feat];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(cfg.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                AffineLayer {
                    w: Array::matrix(fan_in, fan_out, w).expect("sized"),
                    b: Array::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(VelocityModel {
            dim: cfg.dim,
            hidden: cfg.hidden.clone(),
            time_freqs,
            periodic: cfg.periodic,
            conditioning: cfg.conditioning.clone(),
            layers,
            adapters: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.is_some()
    }

    pub fn adapters(&self) -> Option<&[LowRankAdapter]> {
        self.adapters.as_deref()
    }

    pub fn feature_dim(&self) -> usize {
        let state = if self.periodic { 2 * self.dim } else { self.dim };
        state + 2 * self.time_freqs.len() + self.conditioning.len()
    }

    /// Attach one adapter per affine layer: random down-projection,
    /// zero up-projection.
    pub fn attach_adapters(&mut self, rank: usize, scale: f64, seed: u64) -> Result<(), FlowError> {
        if rank == 0 {
            return Err(FlowError::BadModel("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = self
            .layers
            .iter()
            .map(|layer| {
                let fan_in = layer.w.shape()[0];
                let fan_out = layer.w.shape()[1];
                let limit = (6.0 / (fan_in + rank) as f64).sqrt();
                let down: Vec<f64> = (0..fan_in * rank)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                LowRankAdapter {
                    down: Array::matrix(fan_in, rank, down).expect("sized"),
                    up: Array::zeros(vec![rank, fan_out]),
                    scale,
                    rank,
                }
            })
            .collect();
        self.adapters = Some(adapters);
        Ok(())
    }

    /// A copy with the adapters dropped (the base weights).
    pub fn without_adapters(&self) -> VelocityModel {
        let mut m = self.clone();
        m.adapters = None;
        m
    }

    /// Effective weight of one layer with its adapter merged in:
    /// `base + scale * (down @ up)`.
    pub fn effective_weight(&self, layer: usize) -> Array {
        let base = &self.layers[layer].w;
        let Some(adapters) = &self.adapters else {
            return base.clone();
        };
        let ad = &adapters[layer];
        let (fan_in, fan_out) = (base.shape()[0], base.shape()[1]);
        let mut delta = vec![0.0; fan_in * fan_out];
        crate::diffcore::matmul_into(ad.down.data(), ad.up.data(), fan_in, ad.rank, fan_out, &mut delta);
        let data = base
            .data()
            .iter()
            .zip(&delta)
            .map(|(&w, &d)| w + ad.scale * d)
            .collect();
        Array::matrix(fan_in, fan_out, data).expect("sized")
    }

    /// Named parameters in binding order: per-layer `w`, `b`, then
    /// per-layer adapter `down`, `up`.
    pub fn params(&self, set: Trainable) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        if matches!(set, Trainable::All) {
            for (i, layer) in self.layers.iter().enumerate() {
                out.push((format!("layer{i}.w"), &layer.w));
                out.push((format!("layer{i}.b"), &layer.b));
            }
        }
        if matches!(set, Trainable::All | Trainable::AdaptersOnly) {
            if let Some(adapters) = &self.adapters {
                for (i, ad) in adapters.iter().enumerate() {
                    out.push((format!("adapter{i}.down"), &ad.down));
                    out.push((format!("adapter{i}.up"), &ad.up));
                }
            }
        }
        out
    }

    /// Mutable view of the same parameters, in the same order.
    pub fn params_mut(&mut self, set: Trainable) -> Vec<(String, &mut Array)> {
        let mut out = Vec::new();
        if matches!(set, Trainable::All) {
            for (i, layer) in self.layers.iter_mut().enumerate() {
                out.push((format!("layer{i}.w"), &mut layer.w));
                out.push((format!("layer{i}.b"), &mut layer.b));
            }
        }
        if matches!(set, Trainable::All | Trainable::AdaptersOnly) {
            if let Some(adapters) = &mut self.adapters {
                for (i, ad) in adapters.iter_mut().enumerate() {
                    out.push((format!("adapter{i}.down"), &mut ad.down));
                    out.push((format!("adapter{i}.up"), &mut ad.up));
                }
            }
        }
        out
    }

    /// Input features for one state/time pair, appended to `buf`.
    fn features_into(&self, x: &[f64], t: f64, buf: &mut Vec<f64>) {
        if self.periodic {
            for &v in x {
                buf.push(v.sin());
                buf.push(v.cos());
            }
        } else {
            buf.extend_from_slice(x);
        }
        for &w in &self.time_freqs {
            buf.push((w * t).sin());
            buf.push((w * t).cos());
        }
        buf.extend_from_slice(&self.conditioning);
    }

    /// Feature matrix for `n` row-major states with per-row times.
    pub fn features_batch(&self, xs: &[f64], n: usize, ts: &[f64]) -> Array {
        assert_eq!(xs.len(), n * self.dim, "state buffer size");
        assert_eq!(ts.len(), n, "one time per row");
        let f = self.feature_dim();
        let mut buf = Vec::with_capacity(n * f);
        for i in 0..n {
            self.features_into(&xs[i * self.dim..(i + 1) * self.dim], ts[i], &mut buf);
        }
        Array::matrix(n, f, buf).expect("sized")
    }

    /// Tape-free forward pass over `n` states at a shared time `t`.
    pub fn eval_batch(&self, xs: &[f64], n: usize, t: f64, adapters_on: bool) -> Vec<f64> {
        let f = self.feature_dim();
        let mut buf = Vec::with_capacity(n * f);
        for i in 0..n {
            self.features_into(&xs[i * self.dim..(i + 1) * self.dim], t, &mut buf);
        }
        let mut cur = buf;
        let mut width = f;
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let out_w = layer.w.shape()[1];
            let mut next = vec![0.0; n * out_w];
            for i in 0..n {
                next[i * out_w..(i + 1) * out_w].copy_from_slice(layer.b.data());
            }
            crate::diffcore::matmul_into(&cur, layer.w.data(), n, width, out_w, &mut next);
            if adapters_on {
                if let Some(adapters) = &self.adapters {
                    let ad = &adapters[li];
                    let mut lo = vec![0.0; n * ad.rank];
                    crate::diffcore::matmul_into(&cur, ad.down.data(), n, width, ad.rank, &mut lo);
                    let mut hi = vec![0.0; n * out_w];
                    crate::diffcore::matmul_into(&lo, ad.up.data(), n, ad.rank, out_w, &mut hi);
                    for (o, &h) in next.iter_mut().zip(&hi) {
                        *o += ad.scale * h;
                    }
                }
            }
            if li + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            cur = next;
            width = out_w;
        }
        cur
    }

    /// Single-state convenience wrapper around [`Self::eval_batch`].
    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.eval_batch(x, 1, t, true)
    }

    /// Insert the parameters as tape leaves. `adapters_on` controls
    /// whether adapter leaves are bound at all; `trainable` controls
    /// which leaves receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable, adapters_on: bool) -> ModelBinding {
        let base_grad = matches!(trainable, Trainable::All);
        let adapter_grad = matches!(trainable, Trainable::All | Trainable::AdaptersOnly);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.w.clone(), base_grad),
                    g.leaf(l.b.clone(), base_grad),
                )
            })
            .collect();
        let adapters = if adapters_on {
            self.adapters.as_ref().map(|ads| {
                ads.iter()
                    .map(|ad| {
                        (
                            g.leaf(ad.down.clone(), adapter_grad),
                            g.leaf(ad.up.clone(), adapter_grad),
                            ad.scale,
                        )
                    })
                    .collect()
            })
        } else {
            None
        };
        ModelBinding {
            layers,
            adapters,
            trainable,
        }
    }

    /// Forward pass on the tape from a feature matrix (built with
    /// [`Self::features_batch`]). Returns the `[n, dim]` output node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        feats: Array,
    ) -> Result<NodeId, DiffError> {
        let mut h = g.constant(feats);
        let n_layers = binding.layers.len();
        for (li, &(w, b)) in binding.layers.iter().enumerate() {
            let mut out = g.affine(h, w, b)?;
            if let Some(adapters) = &binding.adapters {
                let (down, up, scale) = adapters[li];
                let lo = g.matmul(h, down)?;
                let hi = g.matmul(lo, up)?;
                let hi = g.scale(hi, scale);
                out = g.add(out, hi)?;
            }
            if li + 1 < n_layers {
                out = g.tanh(out);
            }
            h = out;
        }
        Ok(h)
    }

    /// Structural validity check used when loading checkpoints.
    pub fn validate(&self) -> Result<(), FlowError> {
        let state = if self.periodic { 2 * self.dim } else { self.dim };
        let mut widths = vec![state + 2 * self.time_freqs.len() + self.conditioning.len()];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.dim);
        if self.layers.len() + 1 != widths.len() {
            return Err(FlowError::BadModel(format!(
                "expected {} layers, found {}",
                widths.len() - 1,
                self.layers.len()
            )));
        }
        for (i, (layer, io)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.w.shape() != [io[0], io[1]] || layer.b.shape() != [io[1]] {
                return Err(FlowError::BadModel(format!(
                    "layer {i}: weight shape {:?} does not match {:?}",
                    layer.w.shape(),
                    &io[..2]
                )));
            }
        }
        if let Some(adapters) = &self.adapters {
            if adapters.len() != self.layers.len() {
                return Err(FlowError::BadModel("one adapter per layer required".into()));
            }
            for (i, (ad, layer)) in adapters.iter().zip(&self.layers).enumerate() {
                let (fan_in, fan_out) = (layer.w.shape()[0], layer.w.shape()[1]);
                if ad.down.shape() != [fan_in, ad.rank] || ad.up.shape() != [ad.rank, fan_out] {
                    return Err(FlowError::BadModel(format!(
                        "adapter {i}: projection shapes do not match layer"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tape leaf ids for one bound model.
#[derive(Debug)]
pub struct ModelBinding {
    layers: Vec<(NodeId, NodeId)>,
    adapters: Option<Vec<(NodeId, NodeId, f64)>>,
    trainable: Trainable,
}

impl ModelBinding {
    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    /// Gradients for the trainable parameters, aligned with
    /// `params(trainable)` order. Parameters that the loss never
    /// touched get zeros.
    pub fn trainable_grads(&self, g: &Graph, grads: &Gradients) -> Vec<Array> {
        let mut ids: Vec<NodeId> = Vec::new();
        if matches!(self.trainable, Trainable::All) {
            for &(w, b) in &self.layers {
                ids.push(w);
                ids.push(b);
            }
        }
        if matches!(self.trainable, Trainable::All | Trainable::AdaptersOnly) {
            if let Some(adapters) = &self.adapters {
                for &(down, up, _) in adapters {
                    ids.push(down);
                    ids.push(up);
                }
            }
        }
        ids.iter()
            .map(|&id| match grads.get(id) {
                Some(a) => a.clone(),
                None => Array::zeros(g.value(id).shape().to_vec()),
            })
            .collect()
    }
}

/// Trainable model plus its frozen reference.
///
/// The reference is a deep copy taken at refinement start and is never
/// mutated afterwards; there is no mutable accessor. The optimized model
/// shares the base weights and trains only its adapters.
#[derive(Debug, Clone)]
pub struct ModelPair {
    opt: VelocityModel,
    reference: VelocityModel,
}

impl ModelPair {
    /// Start refinement from a pretrained model: freeze a copy as the
    /// reference and attach zero-initialized adapters to the trainable
    /// copy. A model that already carries adapters resumes as-is, with
    /// the reference rebuilt from its base weights.
    pub fn init_refinement(
        pretrained: &VelocityModel,
        lora_rank: usize,
        lora_scale: f64,
        seed: u64,
    ) -> Result<ModelPair, FlowError> {
        let reference = pretrained.without_adapters();
        let mut opt = pretrained.clone();
        if !opt.has_adapters() {
            opt.attach_adapters(lora_rank, lora_scale, seed)?;
        }
        Ok(ModelPair { opt, reference })
    }

    pub fn opt(&self) -> &VelocityModel {
        &self.opt
    }

    pub fn opt_mut(&mut self) -> &mut VelocityModel {
        &mut self.opt
    }

    pub fn reference(&self) -> &VelocityModel {
        &self.reference
    }
}
