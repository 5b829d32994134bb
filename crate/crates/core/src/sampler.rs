//! Deterministic ODE and stochastic SDE integration of a velocity field.
//!
//! Integration runs forward in t over `[clamp, 1 - clamp]` in `steps`
//! uniform steps; the clamp keeps the score transform away from its
//! t -> 1 singularity at the cost of an O(clamp) terminal bias. The SDE
//! takes its final step without noise so the output is not
//! noise-dominated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowmodel::{Schedule, VelocityModel};
use crate::seed;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampler config: {0}")]
    InvalidConfig(String),
    #[error("singular time t={t}: sigma={sigma:.3e}, denominator={denom:.3e}")]
    SingularTime { t: f64, sigma: f64, denom: f64 },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("non-finite state at ODE step {step}")]
    NonFiniteOde { step: usize },
    #[error("non-finite state at SDE step {step} (score norm {score_norm})")]
    NonFiniteSde { step: usize, score_norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Integration method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OdeEuler,
    OdeHeun,
    Sde,
}

/// Sampler settings. `score_norm` is the SDE diffusion strength w,
/// constant in t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: Method,
    pub score_norm: f64,
    pub time_clamp: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            method: Method::Sde,
            score_norm: 0.01,
            time_clamp: 1e-3,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps < 2 {
            return Err(SamplerError::InvalidConfig(format!(
                "steps must be >= 2, got {}",
                self.steps
            )));
        }
        if !(self.score_norm >= 0.0 && self.score_norm.is_finite()) {
            return Err(SamplerError::InvalidConfig(format!(
                "score_norm must be a finite non-negative float, got {}",
                self.score_norm
            )));
        }
        if !(self.time_clamp > 0.0 && self.time_clamp < 0.1) {
            return Err(SamplerError::InvalidConfig(format!(
                "time_clamp must lie in (0, 0.1), got {}",
                self.time_clamp
            )));
        }
        Ok(())
    }
}

/// A velocity field the samplers can integrate.
///
/// Implementations must be pure: the batch evaluation of row i equals
/// the single evaluation of that row.
pub trait Velocity {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// Evaluate `n` row-major states at a shared time.
    fn velocity_batch(&self, xs: &[f64], n: usize, t: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..n {
            let v = self.velocity(&xs[i * d..(i + 1) * d], t);
            out[i * d..(i + 1) * d].copy_from_slice(&v);
        }
    }
}

impl Velocity for VelocityModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.eval_batch(x, 1, t, true)
    }

    fn velocity_batch(&self, xs: &[f64], n: usize, t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.eval_batch(xs, n, t, true));
    }
}

/// Exact velocity for a Gaussian target `N(mean, var I)` with prior
/// `x0 ~ N(0, I)`: the conditional expectation of the path velocity.
/// `var = 0` is the point-mass target.
#[derive(Debug, Clone)]
pub struct GaussianTargetVelocity {
    pub mean: Vec<f64>,
    pub var: f64,
    pub sched: Schedule,
}

impl GaussianTargetVelocity {
    /// Marginal variance of x_t per dimension.
    pub fn marginal_var(&self, t: f64) -> f64 {
        let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
        a * a * self.var + s * s
    }

    /// Analytic score of the marginal at time t.
    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let a = self.sched.alpha(t);
        let var = self.marginal_var(t);
        x.iter()
            .zip(&self.mean)
            .map(|(&xi, &mi)| -(xi - a * mi) / var)
            .collect()
    }

    /// Log-density of the marginal at time t (sum over dimensions).
    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let a = self.sched.alpha(t);
        let var = self.marginal_var(t);
        x.iter()
            .zip(&self.mean)
            .map(|(&xi, &mi)| {
                let z = xi - a * mi;
                -0.5 * (2.0 * std::f64::consts::PI * var).ln() - z * z / (2.0 * var)
            })
            .sum()
    }
}

impl Velocity for GaussianTargetVelocity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let sched = self.sched;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
        let var = a * a * self.var + s * s;
        let slope = (ad * a * self.var + sd * s) / var;
        x.iter()
            .zip(&self.mean)
            .map(|(&xi, &mi)| ad * mi + slope * (xi - a * mi))
            .collect()
    }
}

/// Score from velocity:
/// `s = sigma^{-1} (alpha v - alpha_dot x) / (alpha_dot sigma - alpha sigma_dot)`.
pub fn score_from_velocity(
    v: &[f64],
    x: &[f64],
    t: f64,
    sched: Schedule,
) -> Result<Vec<f64>, SamplerError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SamplerError::TimeOutOfRange(t));
    }
    if v.len() != x.len() {
        return Err(SamplerError::DimMismatch {
            expected: x.len(),
            got: v.len(),
        });
    }
    let (c1, c2) = score_coefficients(t, sched)?;
    Ok(v.iter().zip(x).map(|(&vi, &xi)| c1 * vi - c2 * xi).collect())
}

/// Coefficients (c1, c2) with `score = c1 * v - c2 * x`.
fn score_coefficients(t: f64, sched: Schedule) -> Result<(f64, f64), SamplerError> {
    let sigma = sched.sigma(t);
    let denom = sched.denom(t);
    if sigma.abs() < 1e-12 || denom.abs() < 1e-12 {
        return Err(SamplerError::SingularTime { t, sigma, denom });
    }
    let alpha = sched.alpha(t);
    let alpha_dot = sched.alpha_dot(t);
    Ok((alpha / (sigma * denom), alpha_dot / (sigma * denom)))
}

fn time_grid(cfg: &SamplerConfig) -> (f64, f64) {
    let t0 = cfg.time_clamp;
    let dt = (1.0 - 2.0 * cfg.time_clamp) / cfg.steps as f64;
    (t0, dt)
}

fn check_finite_ode(xs: &[f64], step: usize) -> Result<(), SamplerError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SamplerError::NonFiniteOde { step })
    }
}

fn euler_advance(xs: &mut [f64], vb: &[f64], dt: f64) {
    for (x, &v) in xs.iter_mut().zip(vb) {
        *x += dt * v;
    }
}

/// In-place Euler integration of the probability-flow ODE.
fn ode_euler_batch<V: Velocity + ?Sized>(
    v: &V,
    xs: &mut [f64],
    n: usize,
    cfg: &SamplerConfig,
) -> Result<(), SamplerError> {
    let (t0, dt) = time_grid(cfg);
    let mut vb = vec![0.0; xs.len()];
    for k in 0..cfg.steps {
        let t = t0 + k as f64 * dt;
        v.velocity_batch(xs, n, t, &mut vb);
        euler_advance(xs, &vb, dt);
        check_finite_ode(xs, k)?;
    }
    Ok(())
}

/// In-place Heun (2nd order) integration of the probability-flow ODE.
fn ode_heun_batch<V: Velocity + ?Sized>(
    v: &V,
    xs: &mut [f64],
    n: usize,
    cfg: &SamplerConfig,
) -> Result<(), SamplerError> {
    let (t0, dt) = time_grid(cfg);
    let mut v1 = vec![0.0; xs.len()];
    let mut v2 = vec![0.0; xs.len()];
    let mut pred = vec![0.0; xs.len()];
    for k in 0..cfg.steps {
        let t = t0 + k as f64 * dt;
        v.velocity_batch(xs, n, t, &mut v1);
        pred.copy_from_slice(xs);
        euler_advance(&mut pred, &v1, dt);
        v.velocity_batch(&pred, n, t + dt, &mut v2);
        for ((x, &a), &b) in xs.iter_mut().zip(&v1).zip(&v2) {
            *x += 0.5 * dt * (a + b);
        }
        check_finite_ode(xs, k)?;
    }
    Ok(())
}

/// In-place Euler-Maruyama integration of the marginal-preserving SDE
/// `dx = v dt + (w/2) s dt + sqrt(w) dW`, with a noiseless final step.
/// At `w = 0` this walks exactly the Euler ODE trajectory.
fn sde_batch<V: Velocity + ?Sized>(
    v: &V,
    xs: &mut [f64],
    n: usize,
    cfg: &SamplerConfig,
    sched: Schedule,
    rngs: &mut [ChaCha8Rng],
) -> Result<(), SamplerError> {
    let d = v.dim();
    let w = cfg.score_norm;
    let (t0, dt) = time_grid(cfg);
    let noise_amp = (w * dt).sqrt();
    let mut vb = vec![0.0; xs.len()];
    for k in 0..cfg.steps {
        let t = t0 + k as f64 * dt;
        v.velocity_batch(xs, n, t, &mut vb);
        if w == 0.0 {
            euler_advance(xs, &vb, dt);
        } else {
            let (c1, c2) = score_coefficients(t, sched)?;
            for (x, &vi) in xs.iter_mut().zip(&vb) {
                let score = c1 * vi - c2 * *x;
                *x += dt * (vi + 0.5 * w * score);
            }
            if k + 1 < cfg.steps {
                for (i, rng) in rngs.iter_mut().enumerate() {
                    for x in xs[i * d..(i + 1) * d].iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *x += noise_amp * z;
                    }
                }
            }
        }
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(SamplerError::NonFiniteSde {
                step: k,
                score_norm: w,
            });
        }
    }
    Ok(())
}

/// Integrate one prior sample through the configured ODE method. The
/// schedule is implicit in the learned velocity; it is accepted for
/// signature symmetry with the SDE path.
pub fn ode_sample<V: Velocity + ?Sized>(
    v: &V,
    x0: &[f64],
    cfg: &SamplerConfig,
    _sched: Schedule,
) -> Result<Vec<f64>, SamplerError> {
    cfg.validate()?;
    if x0.len() != v.dim() {
        return Err(SamplerError::DimMismatch {
            expected: v.dim(),
            got: x0.len(),
        });
    }
    let mut xs = x0.to_vec();
    match cfg.method {
        Method::OdeEuler => ode_euler_batch(v, &mut xs, 1, cfg)?,
        Method::OdeHeun => ode_heun_batch(v, &mut xs, 1, cfg)?,
        Method::Sde => {
            return Err(SamplerError::InvalidConfig(
                "ode_sample requires an ODE method".into(),
            ))
        }
    }
    Ok(xs)
}

/// Integrate one prior sample through the SDE.
pub fn sde_sample<V: Velocity + ?Sized>(
    v: &V,
    x0: &[f64],
    cfg: &SamplerConfig,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SamplerError> {
    cfg.validate()?;
    if x0.len() != v.dim() {
        return Err(SamplerError::DimMismatch {
            expected: v.dim(),
            got: x0.len(),
        });
    }
    let mut xs = x0.to_vec();
    sde_batch(v, &mut xs, 1, cfg, sched, std::slice::from_mut(rng))?;
    Ok(xs)
}

/// Full SDE trajectory of one sample (steps + 1 states, the first being
/// `x0`). Used for step-level diagnostics.
pub fn sde_path<V: Velocity + ?Sized>(
    v: &V,
    x0: &[f64],
    cfg: &SamplerConfig,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(x0.to_vec());
    let mut xs = x0.to_vec();
    let (t0, dt) = time_grid(cfg);
    let mut vb = vec![0.0; xs.len()];
    let w = cfg.score_norm;
    let noise_amp = (w * dt).sqrt();
    for k in 0..cfg.steps {
        let t = t0 + k as f64 * dt;
        v.velocity_batch(&xs, 1, t, &mut vb);
        if w == 0.0 {
            euler_advance(&mut xs, &vb, dt);
        } else {
            let (c1, c2) = score_coefficients(t, sched)?;
            for (x, &vi) in xs.iter_mut().zip(&vb) {
                let score = c1 * vi - c2 * *x;
                *x += dt * (vi + 0.5 * w * score);
            }
            if k + 1 < cfg.steps {
                for x in xs.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += noise_amp * z;
                }
            }
        }
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(SamplerError::NonFiniteSde {
                step: k,
                score_norm: w,
            });
        }
        states.push(xs.clone());
    }
    Ok(states)
}

/// Draw `n` prior samples and push them through the configured sampler.
/// Per-sample RNG streams derive from `(cfg.seed, index)`, so the result
/// is independent of batching and reproducible.
pub fn generate_ensemble<V: Velocity + ?Sized>(
    v: &V,
    n: usize,
    cfg: &SamplerConfig,
    sched: Schedule,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    cfg.validate()?;
    if n == 0 {
        return Err(SamplerError::InvalidConfig("ensemble size must be >= 1".into()));
    }
    let d = v.dim();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| seed::stream_rng(cfg.seed, i as u64))
        .collect();
    let mut xs = vec![0.0; n * d];
    for (i, rng) in rngs.iter_mut().enumerate() {
        for x in xs[i * d..(i + 1) * d].iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }
    match cfg.method {
        Method::OdeEuler => ode_euler_batch(v, &mut xs, n, cfg)?,
        Method::OdeHeun => ode_heun_batch(v, &mut xs, n, cfg)?,
        Method::Sde => sde_batch(v, &mut xs, n, cfg, sched, &mut rngs)?,
    }
    Ok(xs.chunks(d).map(|c| c.to_vec()).collect())
}
