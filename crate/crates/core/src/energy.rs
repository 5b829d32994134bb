//! Analytic energy oracles, Boltzmann ground truth, and energy ranking.
//!
//! Potentials play the role of the physics-based reward: samplers and
//! preference losses only ever see energies through their ranking, so
//! units are reduced (kT defaults to 1) and no normalization is applied.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::seed;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("dimension mismatch: potential has d={expected}, state has d={got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid potential: {0}")]
    BadPotential(String),
    #[error("non-finite energy at index {0}")]
    NonFiniteEnergy(usize),
    #[error("samples and energies differ in length: {samples} vs {energies}")]
    LengthMismatch { samples: usize, energies: usize },
    #[error("grid: {0}")]
    BadGrid(String),
    #[error(
        "grid edge mass {edge_mass:.3e} exceeds 1e-6 of total; widen the bounds \
         (currently {bounds:?})"
    )]
    GridTailMass {
        edge_mass: f64,
        bounds: Vec<(f64, f64)>,
    },
}

/// One exponential term of the 2-D Mueller-Brown surface:
/// `amp * exp(ax (x-x0)^2 + bxy (x-x0)(y-y0) + cy (y-y0)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbTerm {
    pub amp: f64,
    pub ax: f64,
    pub bxy: f64,
    pub cy: f64,
    pub x0: f64,
    pub y0: f64,
}

/// The classic literature constants, shipped as a named preset.
pub fn mueller_brown_classic() -> Vec<MbTerm> {
    let amp = [-200.0, -100.0, -170.0, 15.0];
    let ax = [-1.0, -1.0, -6.5, 0.7];
    let bxy = [0.0, 0.0, 11.0, 0.6];
    let cy = [-10.0, -10.0, -6.5, 0.7];
    let x0 = [1.0, 0.0, -0.5, -1.0];
    let y0 = [0.0, 0.5, 1.5, 1.0];
    (0..4)
        .map(|i| MbTerm {
            amp: amp[i],
            ax: ax[i],
            bxy: bxy[i],
            cy: cy[i],
            x0: x0[i],
            y0: y0[i],
        })
        .collect()
}

fn default_kt() -> f64 {
    1.0
}

/// An analytic energy function with a temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Potential {
    /// `E(x) = a (x^2 - 1)^2 + tilt * x` on the line.
    #[serde(rename = "double-well-1d")]
    DoubleWell1d {
        a: f64,
        #[serde(default)]
        tilt: f64,
        #[serde(default = "default_kt")]
        kt: f64,
    },
    /// `E(x) = -kT log sum_i w_i N(x; mu_i, S_i)` for d <= 3.
    #[serde(rename = "gaussian-mixture")]
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// Row-major d x d covariance per component.
        covariances: Vec<Vec<f64>>,
        #[serde(default = "default_kt")]
        kt: f64,
    },
    /// Four-term exponential surface on the plane.
    #[serde(rename = "mueller-brown-2d")]
    MuellerBrown2d {
        #[serde(default = "mueller_brown_classic")]
        terms: Vec<MbTerm>,
        #[serde(default = "default_kt")]
        kt: f64,
    },
    /// `E(x) = sum_j sum_m c[j][m-1] cos(m x_j)`, period 2*pi per
    /// dimension.
    #[serde(rename = "periodic-torsion")]
    PeriodicTorsion {
        coefficients: Vec<Vec<f64>>,
        #[serde(default = "default_kt")]
        kt: f64,
    },
}

impl Potential {
    pub fn dim(&self) -> usize {
        match self {
            Potential::DoubleWell1d { .. } => 1,
            Potential::GaussianMixture { means, .. } => {
                means.first().map_or(0, |m| m.len())
            }
            Potential::MuellerBrown2d { .. } => 2,
            Potential::PeriodicTorsion { coefficients, .. } => coefficients.len(),
        }
    }

    pub fn kt(&self) -> f64 {
        match self {
            Potential::DoubleWell1d { kt, .. }
            | Potential::GaussianMixture { kt, .. }
            | Potential::MuellerBrown2d { kt, .. }
            | Potential::PeriodicTorsion { kt, .. } => *kt,
        }
    }

    /// Potentials built from torsion angles declare period 2*pi; the
    /// model then embeds states as (sin x, cos x).
    pub fn is_periodic(&self) -> bool {
        matches!(self, Potential::PeriodicTorsion { .. })
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if self.kt() <= 0.0 || !self.kt().is_finite() {
            return Err(EnergyError::BadPotential(format!(
                "kT must be positive and finite, got {}",
                self.kt()
            )));
        }
        match self {
            Potential::DoubleWell1d { a, tilt, .. } => {
                if !a.is_finite() || !tilt.is_finite() {
                    return Err(EnergyError::BadPotential("non-finite coefficients".into()));
                }
            }
            Potential::GaussianMixture {
                weights,
                means,
                covariances,
                ..
            } => {
                let d = self.dim();
                if d == 0 || d > 3 {
                    return Err(EnergyError::BadPotential(format!(
                        "mixture dimension must be 1..=3, got {d}"
                    )));
                }
                if weights.is_empty()
                    || weights.len() != means.len()
                    || weights.len() != covariances.len()
                {
                    return Err(EnergyError::BadPotential(
                        "weights, means, covariances must have equal non-zero length".into(),
                    ));
                }
                if weights.iter().any(|&w| w <= 0.0) {
                    return Err(EnergyError::BadPotential("weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(EnergyError::BadPotential(format!(
                        "weights must sum to 1, got {total}"
                    )));
                }
                for (i, (m, c)) in means.iter().zip(covariances).enumerate() {
                    if m.len() != d || c.len() != d * d {
                        return Err(EnergyError::BadPotential(format!(
                            "component {i}: mean/covariance shapes do not match d={d}"
                        )));
                    }
                    if linalg::spd_det_inverse(c, d).is_none() {
                        return Err(EnergyError::BadPotential(format!(
                            "component {i}: covariance is not positive definite"
                        )));
                    }
                }
            }
            Potential::MuellerBrown2d { terms, .. } => {
                if terms.is_empty() {
                    return Err(EnergyError::BadPotential("no exponential terms".into()));
                }
            }
            Potential::PeriodicTorsion { coefficients, .. } => {
                if coefficients.is_empty() {
                    return Err(EnergyError::BadPotential("no dimensions declared".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact analytic energy.
    pub fn energy(&self, x: &[f64]) -> Result<f64, EnergyError> {
        let d = self.dim();
        if x.len() != d {
            return Err(EnergyError::DimMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(match self {
            Potential::DoubleWell1d { a, tilt, .. } => {
                let q = x[0] * x[0] - 1.0;
                a * q * q + tilt * x[0]
            }
            Potential::GaussianMixture {
                weights,
                means,
                covariances,
                kt,
            } => {
                // -kT log sum_i w_i N(x; mu_i, S_i), computed through a
                // shifted log-sum-exp over component log-densities
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(covariances)
                    .map(|((&w, m), c)| {
                        let (det, inv) = linalg::spd_det_inverse(c, d).expect("validated");
                        let mut quad = 0.0;
                        for r in 0..d {
                            for s in 0..d {
                                quad += (x[r] - m[r]) * inv[r * d + s] * (x[s] - m[s]);
                            }
                        }
                        w.ln()
                            - 0.5 * quad
                            - 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
                            - 0.5 * det.ln()
                    })
                    .collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                -kt * lse
            }
            Potential::MuellerBrown2d { terms, .. } => {
                let (px, py) = (x[0], x[1]);
                terms
                    .iter()
                    .map(|t| {
                        let (dx, dy) = (px - t.x0, py - t.y0);
                        t.amp * (t.ax * dx * dx + t.bxy * dx * dy + t.cy * dy * dy).exp()
                    })
                    .sum()
            }
            Potential::PeriodicTorsion { coefficients, .. } => coefficients
                .iter()
                .zip(x)
                .map(|(cs, &xi)| {
                    cs.iter()
                        .enumerate()
                        .map(|(m, &c)| c * ((m + 1) as f64 * xi).cos())
                        .sum::<f64>()
                })
                .sum(),
        })
    }

    /// Energies of a batch of states.
    pub fn energies(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, EnergyError> {
        xs.iter().map(|x| self.energy(x)).collect()
    }
}

/// Evaluation grid for the Boltzmann oracle (d <= 2): per-dimension
/// bounds and node counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub points: Vec<usize>,
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if self.bounds.is_empty() || self.bounds.len() > 2 {
            return Err(EnergyError::BadGrid(format!(
                "oracle grids support d in 1..=2, got {}",
                self.bounds.len()
            )));
        }
        if self.bounds.len() != self.points.len() {
            return Err(EnergyError::BadGrid("bounds/points length mismatch".into()));
        }
        for (&(lo, hi), &n) in self.bounds.iter().zip(&self.points) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(EnergyError::BadGrid(format!("bad bounds ({lo}, {hi})")));
            }
            if n < 3 {
                return Err(EnergyError::BadGrid("need at least 3 nodes per dim".into()));
            }
        }
        Ok(())
    }

    pub fn node(&self, dim: usize, idx: usize) -> f64 {
        let (lo, hi) = self.bounds[dim];
        lo + (hi - lo) * idx as f64 / (self.points[dim] - 1) as f64
    }

    fn step(&self, dim: usize) -> f64 {
        let (lo, hi) = self.bounds[dim];
        (hi - lo) / (self.points[dim] - 1) as f64
    }

    /// Trapezoid quadrature weight of a node (product over dims).
    fn weight(&self, idx: &[usize]) -> f64 {
        idx.iter()
            .enumerate()
            .map(|(d, &i)| {
                let h = self.step(d);
                if i == 0 || i == self.points[d] - 1 {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }
}

/// Trapezoid-normalized Boltzmann density on a grid.
#[derive(Debug, Clone)]
pub struct BoltzmannGrid {
    pub spec: GridSpec,
    /// Normalized density at each node, row-major over dims.
    pub density: Vec<f64>,
}

impl BoltzmannGrid {
    fn index(&self, idx: &[usize]) -> usize {
        match idx.len() {
            1 => idx[0],
            2 => idx[0] * self.spec.points[1] + idx[1],
            _ => unreachable!("validated d <= 2"),
        }
    }

    /// Integral of the density (1 up to roundoff).
    pub fn total_mass(&self) -> f64 {
        let mut acc = 0.0;
        match self.spec.dim() {
            1 => {
                for i in 0..self.spec.points[0] {
                    acc += self.density[i] * self.spec.weight(&[i]);
                }
            }
            2 => {
                for i in 0..self.spec.points[0] {
                    for j in 0..self.spec.points[1] {
                        acc += self.density[self.index(&[i, j])] * self.spec.weight(&[i, j]);
                    }
                }
            }
            _ => unreachable!(),
        }
        acc
    }

    /// Node weights for integrating the piecewise-linear density over
    /// `[lo, hi]` along one dimension; boundaries may fall anywhere
    /// inside a grid segment.
    fn interval_weights(&self, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
        let n = self.spec.points[dim];
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let x0 = self.spec.node(dim, i);
            let x1 = self.spec.node(dim, i + 1);
            let a = lo.max(x0);
            let b = hi.min(x1);
            if b <= a {
                continue;
            }
            let h = x1 - x0;
            let right = ((b - x0) * (b - x0) - (a - x0) * (a - x0)) / (2.0 * h);
            w[i] += (b - a) - right;
            w[i + 1] += right;
        }
        w
    }

    /// Probability mass per cell of an axis-aligned partition. The
    /// partition lists interior boundaries per dimension; cells are
    /// ordered lexicographically (first dimension slowest). A boundary
    /// splits its grid segment by exact linear interpolation.
    pub fn mode_masses(&self, partition: &[Vec<f64>]) -> Vec<f64> {
        let d = self.spec.dim();
        assert_eq!(partition.len(), d, "one boundary list per dimension");
        // per-dim cell edges: [lo, boundaries..., hi]
        let edges: Vec<Vec<f64>> = (0..d)
            .map(|dim| {
                let (lo, hi) = self.spec.bounds[dim];
                let mut e = vec![lo];
                e.extend_from_slice(&partition[dim]);
                e.push(hi);
                e
            })
            .collect();
        let cells_per_dim: Vec<usize> = edges.iter().map(|e| e.len() - 1).collect();
        let total_cells: usize = cells_per_dim.iter().product();
        let mut masses = vec![0.0; total_cells];
        for cell in 0..total_cells {
            let mut rem = cell;
            let mut cell_idx = vec![0usize; d];
            for dim in (0..d).rev() {
                cell_idx[dim] = rem % cells_per_dim[dim];
                rem /= cells_per_dim[dim];
            }
            let w_per_dim: Vec<Vec<f64>> = (0..d)
                .map(|dim| {
                    let c = cell_idx[dim];
                    self.interval_weights(dim, edges[dim][c], edges[dim][c + 1])
                })
                .collect();
            masses[cell] = match d {
                1 => self
                    .density
                    .iter()
                    .zip(&w_per_dim[0])
                    .map(|(&rho, &w)| rho * w)
                    .sum(),
                2 => {
                    let mut acc = 0.0;
                    for i in 0..self.spec.points[0] {
                        for j in 0..self.spec.points[1] {
                            acc += self.density[self.index(&[i, j])]
                                * w_per_dim[0][i]
                                * w_per_dim[1][j];
                        }
                    }
                    acc
                }
                _ => unreachable!(),
            };
        }
        let total: f64 = masses.iter().sum();
        for m in masses.iter_mut() {
            *m /= total;
        }
        masses
    }

    /// Cell probabilities on a center-evaluated histogram-compatible
    /// grid, for divergence comparisons against sample histograms.
    pub fn cell_probs(p: &Potential, bounds: &[(f64, f64)], bins: &[usize]) -> Result<Vec<f64>, EnergyError> {
        if bounds.len() != p.dim() || bounds.len() != bins.len() {
            return Err(EnergyError::BadGrid(
                "cell grid rank must match the potential".into(),
            ));
        }
        let kt = p.kt();
        let mut logs = Vec::new();
        match bounds.len() {
            1 => {
                let (lo, hi) = bounds[0];
                let n = bins[0];
                for i in 0..n {
                    let x = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
                    logs.push(-p.energy(&[x])? / kt);
                }
            }
            2 => {
                for i in 0..bins[0] {
                    for j in 0..bins[1] {
                        let x = bounds[0].0
                            + (bounds[0].1 - bounds[0].0) * (i as f64 + 0.5) / bins[0] as f64;
                        let y = bounds[1].0
                            + (bounds[1].1 - bounds[1].0) * (j as f64 + 0.5) / bins[1] as f64;
                        logs.push(-p.energy(&[x, y])? / kt);
                    }
                }
            }
            _ => {
                return Err(EnergyError::BadGrid(
                    "cell grids support d in 1..=2".into(),
                ))
            }
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = probs.iter().sum();
        for v in probs.iter_mut() {
            *v /= z;
        }
        Ok(probs)
    }
}

/// Normalized Boltzmann density `exp(-E/kT) / Z` on the grid, with Z by
/// trapezoid quadrature. Rejects grids whose edges still carry mass.
pub fn boltzmann_oracle(p: &Potential, spec: &GridSpec) -> Result<BoltzmannGrid, EnergyError> {
    p.validate()?;
    spec.validate()?;
    if spec.dim() != p.dim() {
        return Err(EnergyError::BadGrid(format!(
            "grid rank {} does not match potential d={}",
            spec.dim(),
            p.dim()
        )));
    }
    let kt = p.kt();
    let mut log_rho = Vec::new();
    match spec.dim() {
        1 => {
            for i in 0..spec.points[0] {
                log_rho.push(-p.energy(&[spec.node(0, i)])? / kt);
            }
        }
        2 => {
            for i in 0..spec.points[0] {
                for j in 0..spec.points[1] {
                    log_rho.push(-p.energy(&[spec.node(0, i), spec.node(1, j)])? / kt);
                }
            }
        }
        _ => unreachable!(),
    }
    let shift = log_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rho: Vec<f64> = log_rho.iter().map(|l| (l - shift).exp()).collect();

    let mut z = 0.0;
    let mut edge = 0.0;
    match spec.dim() {
        1 => {
            for i in 0..spec.points[0] {
                let w = spec.weight(&[i]) * rho[i];
                z += w;
                if i == 0 || i == spec.points[0] - 1 {
                    edge += w;
                }
            }
        }
        2 => {
            for i in 0..spec.points[0] {
                for j in 0..spec.points[1] {
                    let w = spec.weight(&[i, j]) * rho[i * spec.points[1] + j];
                    z += w;
                    if i == 0 || i == spec.points[0] - 1 || j == 0 || j == spec.points[1] - 1 {
                        edge += w;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    if edge / z > 1e-6 {
        return Err(EnergyError::GridTailMass {
            edge_mass: edge / z,
            bounds: spec.bounds.clone(),
        });
    }
    let density = rho.iter().map(|r| r / z).collect();
    Ok(BoltzmannGrid {
        spec: spec.clone(),
        density,
    })
}

/// Random-walk Metropolis chain targeting `exp(-E/kT)`.
///
/// Deterministic in `chain_seed`. Logs a warning when the post-burn-in
/// acceptance rate falls outside [0.05, 0.95].
pub fn mh_sample(
    p: &Potential,
    n: usize,
    proposal_step: f64,
    burn_in: usize,
    thinning: usize,
    chain_seed: u64,
) -> Result<Vec<Vec<f64>>, EnergyError> {
    p.validate()?;
    if n == 0 {
        return Err(EnergyError::BadPotential("need n >= 1 samples".into()));
    }
    if thinning == 0 {
        return Err(EnergyError::BadPotential("thinning must be >= 1".into()));
    }
    let d = p.dim();
    let kt = p.kt();
    let mut rng = seed::stream_rng(chain_seed, 0);
    let mut x = vec![0.0; d];
    let mut e = p.energy(&x)?;
    let mut samples = Vec::with_capacity(n);
    let total = burn_in + n * thinning;
    let mut accepted = 0usize;
    let mut proposed_after_burn_in = 0usize;
    let mut prop = vec![0.0; d];
    for it in 0..total {
        for (pi, &xi) in prop.iter_mut().zip(&x) {
            let z: f64 = rng.sample(StandardNormal);
            *pi = xi + proposal_step * z;
        }
        let ep = p.energy(&prop)?;
        let accept = if ep <= e {
            true
        } else {
            rng.random::<f64>() < (-(ep - e) / kt).exp()
        };
        if it >= burn_in {
            proposed_after_burn_in += 1;
        }
        if accept {
            x.copy_from_slice(&prop);
            e = ep;
            if it >= burn_in {
                accepted += 1;
            }
        }
        if it >= burn_in && (it - burn_in + 1) % thinning == 0 {
            samples.push(x.clone());
        }
    }
    let rate = accepted as f64 / proposed_after_burn_in.max(1) as f64;
    if !(0.05..=0.95).contains(&rate) {
        log::warn!(
            "mh_sample: acceptance rate {rate:.3} outside [0.05, 0.95]; \
             consider adjusting proposal_step={proposal_step}"
        );
    }
    samples.truncate(n);
    Ok(samples)
}

/// K samples with their energies and the energy-ascending permutation.
#[derive(Debug, Clone)]
pub struct RankedEnsemble {
    samples: Vec<Vec<f64>>,
    energies: Vec<f64>,
    /// `order[k]` is the index of the k-th lowest-energy sample; stable
    /// under ties.
    order: Vec<usize>,
}

impl RankedEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Sample at rank `k` (0 = lowest energy).
    pub fn ranked(&self, k: usize) -> &[f64] {
        &self.samples[self.order[k]]
    }

    pub fn ranked_energy(&self, k: usize) -> f64 {
        self.energies[self.order[k]]
    }

    pub fn mean_energy(&self) -> f64 {
        self.energies.iter().sum::<f64>() / self.energies.len() as f64
    }

    pub fn min_energy(&self) -> f64 {
        self.energies.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_energy(&self) -> f64 {
        self.energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stable ascending sort by energy; ties keep original sample order.
pub fn rank_by_energy(
    samples: Vec<Vec<f64>>,
    energies: Vec<f64>,
) -> Result<RankedEnsemble, EnergyError> {
    if samples.len() != energies.len() {
        return Err(EnergyError::LengthMismatch {
            samples: samples.len(),
            energies: energies.len(),
        });
    }
    if let Some(i) = energies.iter().position(|e| !e.is_finite()) {
        return Err(EnergyError::NonFiniteEnergy(i));
    }
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&i, &j| energies[i].partial_cmp(&energies[j]).expect("finite"));
    Ok(RankedEnsemble {
        samples,
        energies,
        order,
    })
}
