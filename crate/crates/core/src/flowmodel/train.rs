//! Flow-matching loss and the pretraining loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{AdamParams, AdamState, Graph, NodeId};
use crate::seed;

use super::{ModelBinding, Schedule, VelocityModel};
use super::FlowError;

/// Default clamp keeping sampled times away from the interpolant
/// endpoints, where the score transform is singular.
pub const DEFAULT_TIME_CLAMP: f64 = 1e-3;

/// Draw a time in `[clamp, 1 - clamp]`.
pub fn draw_time(rng: &mut ChaCha8Rng, clamp: f64) -> f64 {
    rng.random_range(clamp..=1.0 - clamp)
}

/// Flow-matching regression loss on the tape:
/// mean over the batch of `|| v(x_t, t) - x_dot_t ||^2` with fresh
/// `x0 ~ N(0, I)` and `t ~ U(clamp, 1 - clamp)` per sample.
pub fn fm_loss(
    g: &mut Graph,
    model: &VelocityModel,
    binding: &ModelBinding,
    x1: &[Vec<f64>],
    sched: Schedule,
    time_clamp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, FlowError> {
    if x1.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let d = model.dim();
    let n = x1.len();
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    for row in x1 {
        if row.len() != d {
            return Err(FlowError::DimMismatch {
                expected: d,
                got: row.len(),
            });
        }
        let t = draw_time(rng, time_clamp);
        ts.push(t);
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
        for &q in row {
            let p: f64 = rng.sample(StandardNormal);
            xt.push(a * q + s * p);
            target.push(ad * q + sd * p);
        }
    }
    let feats = model.features_batch(&xt, n, &ts);
    let pred = model.forward_graph(g, binding, feats)?;
    let target = g.constant(crate::diffcore::Array::matrix(n, d, target).expect("sized"));
    let sq = g.squared_error(pred, target)?;
    Ok(g.scale(sq, 1.0 / n as f64))
}

/// Convenience: evaluate [`fm_loss`] on a throwaway tape.
pub fn fm_loss_value(
    model: &VelocityModel,
    x1: &[Vec<f64>],
    sched: Schedule,
    time_clamp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, FlowError> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, super::Trainable::Frozen, true);
    let loss = fm_loss(&mut g, model, &binding, x1, sched, time_clamp, rng)?;
    Ok(g.value(loss).item())
}

/// Learning-rate schedule for the pretraining loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamParams,
    pub lr_schedule: LrSchedule,
    pub time_clamp: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 128,
            optimizer: AdamParams::with_lr(1e-3),
            lr_schedule: LrSchedule::default(),
            time_clamp: DEFAULT_TIME_CLAMP,
            seed: 0,
        }
    }
}

/// Minimize the flow-matching loss over the dataset with Adam.
///
/// Returns the per-step loss trace. Deterministic in `cfg.seed`; zero
/// epochs leave the model untouched and the trace empty. A non-finite
/// loss aborts with the epoch and step index.
pub fn pretrain(
    model: &mut VelocityModel,
    data: &[Vec<f64>],
    sched: Schedule,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>, FlowError> {
    if data.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    if cfg.batch_size == 0 {
        return Err(FlowError::BadModel("batch_size must be positive".into()));
    }
    let trainable = super::Trainable::All;
    let named: Vec<(String, &crate::diffcore::Array)> = model.params(trainable);
    let mut adam = AdamState::new(cfg.optimizer, &named);
    drop(named);
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = seed::stream_rng(seed::mix(cfg.seed, &[1, epoch as u64]), 0);
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut draw_rng =
                seed::stream_rng(seed::mix(cfg.seed, &[2, epoch as u64, batch_idx as u64]), 0);
            let mut g = Graph::new();
            let binding = model.bind(&mut g, trainable, true);
            let loss = fm_loss(
                &mut g,
                model,
                &binding,
                &batch,
                sched,
                cfg.time_clamp,
                &mut draw_rng,
            )?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(FlowError::NonFiniteLoss { epoch, step });
            }
            trace.push(value);
            let grads = g.backward(loss)?;
            let grad_arrays = binding.trainable_grads(&g, &grads);
            adam.set_lr(cfg.lr_schedule.at(cfg.optimizer.lr, step, total_steps));
            let mut params = model.params_mut(trainable);
            let mut refs: Vec<&mut crate::diffcore::Array> =
                params.iter_mut().map(|(_, p)| &mut **p).collect();
            adam.step(&mut refs, &grad_arrays)?;
            step += 1;
        }
    }
    Ok(trace)
}
