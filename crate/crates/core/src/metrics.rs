//! Distributional evaluation: JSD, Wasserstein-2, free-energy surfaces,
//! mode masses, and TICA.
//!
//! Conventions are recorded in the metric outputs where they matter:
//! JSD uses the natural log (maximum ln 2), histograms get 1e-12 added
//! to every bin before normalization, and FES empty bins cap at the
//! maximum finite value plus 2 kT.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Smoothing added to every histogram bin before normalization,
/// preventing infinite KL terms on disjoint support while perturbing
/// reported values by far less than sampling noise.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("histogram: {0}")]
    BadSpec(String),
    #[error("empty sample set")]
    EmptySamples,
    #[error("dimension mismatch: spec has d={expected}, samples have d={got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("covariance is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("free-energy surface supports d in 1..=2, got {0}")]
    FesRank(usize),
    #[error("all histogram bins are empty")]
    EmptyHistogram,
    #[error("trajectory too short: length {len} needs > lag {lag} + 2")]
    ShortTrajectory { len: usize, lag: usize },
    #[error(
        "rank-deficient instantaneous covariance (eigenvalue ratio {0:.3e}); \
         add noise or drop constant coordinates"
    )]
    RankDeficient(f64),
}

/// Binning for sample histograms. Periodic dimensions wrap into
/// [-pi, pi); non-periodic out-of-range samples count toward the edge
/// bins with a logged warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bounds: Vec<(f64, f64)>,
    pub bins: Vec<usize>,
    #[serde(default)]
    pub periodic: Vec<bool>,
}

impl HistogramSpec {
    pub fn new(bounds: Vec<(f64, f64)>, bins: Vec<usize>) -> Self {
        let periodic = vec![false; bounds.len()];
        HistogramSpec {
            bounds,
            bins,
            periodic,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn total_bins(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.bounds.is_empty() {
            return Err(MetricsError::BadSpec("no dimensions".into()));
        }
        if self.bounds.len() != self.bins.len() {
            return Err(MetricsError::BadSpec("bounds/bins length mismatch".into()));
        }
        if !self.periodic.is_empty() && self.periodic.len() != self.bounds.len() {
            return Err(MetricsError::BadSpec(
                "periodic flags must match dimension count".into(),
            ));
        }
        for (&(lo, hi), &b) in self.bounds.iter().zip(&self.bins) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(MetricsError::BadSpec(format!("bad bounds ({lo}, {hi})")));
            }
            if b < 2 {
                return Err(MetricsError::BadSpec("need at least 2 bins".into()));
            }
        }
        Ok(())
    }

    fn is_periodic(&self, d: usize) -> bool {
        self.periodic.get(d).copied().unwrap_or(false)
    }

    /// Flat bin index of a sample; out-of-range coordinates clamp to
    /// the edge bins and report `clamped = true`.
    fn bin_of(&self, x: &[f64]) -> (usize, bool) {
        let mut idx = 0usize;
        let mut clamped = false;
        for d in 0..self.dim() {
            let (lo, hi) = self.bounds[d];
            let mut v = x[d];
            if self.is_periodic(d) {
                v = wrap_to_pi(v);
            }
            let f = (v - lo) / (hi - lo) * self.bins[d] as f64;
            let mut b = f.floor() as isize;
            if b < 0 {
                b = 0;
                clamped = true;
            }
            if b as usize >= self.bins[d] {
                if v > hi {
                    clamped = true;
                }
                b = self.bins[d] as isize - 1;
            }
            idx = idx * self.bins[d] + b as usize;
        }
        (idx, clamped)
    }

    /// Center of a flat bin index.
    pub fn center(&self, mut flat: usize) -> Vec<f64> {
        let mut rev = Vec::with_capacity(self.dim());
        for d in (0..self.dim()).rev() {
            let b = flat % self.bins[d];
            flat /= self.bins[d];
            let (lo, hi) = self.bounds[d];
            rev.push(lo + (hi - lo) * (b as f64 + 0.5) / self.bins[d] as f64);
        }
        rev.reverse();
        rev
    }
}

/// Wrap a coordinate into [-pi, pi).
pub fn wrap_to_pi(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if v >= std::f64::consts::PI {
        v -= two_pi;
    }
    v
}

/// Raw bin counts of a sample set.
pub fn histogram(samples: &[Vec<f64>], spec: &HistogramSpec) -> Result<Vec<f64>, MetricsError> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if samples[0].len() != spec.dim() {
        return Err(MetricsError::DimMismatch {
            expected: spec.dim(),
            got: samples[0].len(),
        });
    }
    let mut counts = vec![0.0; spec.total_bins()];
    let mut clamped = 0usize;
    for s in samples {
        let (idx, c) = spec.bin_of(s);
        counts[idx] += 1.0;
        if c {
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!(
            "histogram: {clamped} of {} samples fell outside the bounds and were \
             counted in edge bins",
            samples.len()
        );
    }
    Ok(counts)
}

/// Smooth (add [`HISTOGRAM_SMOOTHING`]) and normalize raw weights.
pub fn normalize_probs(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().map(|w| w + HISTOGRAM_SMOOTHING).sum();
    weights
        .iter()
        .map(|w| (w + HISTOGRAM_SMOOTHING) / total)
        .collect()
}

/// Jensen-Shannon divergence (natural log) between two probability
/// vectors over the same bins. Exactly symmetric; 0 on identical input.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / mi).ln();
        }
    }
    acc.max(0.0)
}

/// JSD between the smoothed histograms of two sample sets.
pub fn jsd_hist(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    spec: &HistogramSpec,
) -> Result<f64, MetricsError> {
    let pa = normalize_probs(&histogram(a, spec)?);
    let pb = normalize_probs(&histogram(b, spec)?);
    Ok(jsd_probs(&pa, &pb))
}

/// JSD between a sample histogram and a reference probability vector on
/// the same binning (e.g. the Boltzmann oracle's cell probabilities).
pub fn jsd_hist_vs_probs(
    samples: &[Vec<f64>],
    probs: &[f64],
    spec: &HistogramSpec,
) -> Result<f64, MetricsError> {
    let ps = normalize_probs(&histogram(samples, spec)?);
    if ps.len() != probs.len() {
        return Err(MetricsError::BadSpec(format!(
            "reference has {} cells, spec has {}",
            probs.len(),
            ps.len()
        )));
    }
    Ok(jsd_probs(&ps, &normalize_probs(probs)))
}

/// 1-D Wasserstein-2 distance via the quantile coupling: the root mean
/// squared difference of sorted samples (interpolated quantiles when the
/// sizes differ).
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let (small, large) = if sa.len() <= sb.len() { (&sa, &sb) } else { (&sb, &sa) };
    let m = small.len();
    let mut acc = 0.0;
    if sa.len() == sb.len() {
        for (x, y) in sa.iter().zip(&sb) {
            acc += (x - y) * (x - y);
        }
    } else {
        for i in 0..m {
            let q = (i as f64 + 0.5) / m as f64;
            let d = small[i] - quantile_sorted(large, q);
            acc += d * d;
        }
    }
    Ok((acc / m as f64).sqrt())
}

/// Linear-interpolated quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
}

/// Closed-form Gaussian Wasserstein-2 distance:
/// `sqrt(||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2))`.
pub fn w2_gauss(
    mu1: &[f64],
    cov1: &[f64],
    mu2: &[f64],
    cov2: &[f64],
) -> Result<f64, MetricsError> {
    let d = mu1.len();
    if mu2.len() != d || cov1.len() != d * d || cov2.len() != d * d {
        return Err(MetricsError::DimMismatch {
            expected: d,
            got: mu2.len(),
        });
    }
    let tol = 1e-10;
    let s2_half = linalg::sym_sqrt(cov2, d, tol).map_err(MetricsError::NotPsd)?;
    let inner = linalg::matmul(
        &linalg::matmul(&s2_half, cov1, d, d, d),
        &s2_half,
        d,
        d,
        d,
    );
    // inner is symmetric up to roundoff; symmetrize before the sqrt
    let mut sym = inner.clone();
    for r in 0..d {
        for c in 0..d {
            sym[r * d + c] = 0.5 * (inner[r * d + c] + inner[c * d + r]);
        }
    }
    let cross = linalg::sym_sqrt(&sym, d, tol).map_err(MetricsError::NotPsd)?;
    let mut total = 0.0;
    for (a, b) in mu1.iter().zip(mu2) {
        total += (a - b) * (a - b);
    }
    for i in 0..d {
        total += cov1[i * d + i] + cov2[i * d + i] - 2.0 * cross[i * d + i];
    }
    Ok(total.max(0.0).sqrt())
}

/// Sample mean and covariance (row-major d x d).
pub fn moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for r in 0..d {
            for c in 0..d {
                cov[r * d + c] += (s[r] - mean[r]) * (s[c] - mean[c]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= n;
    }
    Ok((mean, cov))
}

/// A free-energy surface: `-kT log p` on a histogram grid, shifted so
/// the minimum is 0, with empty bins capped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FesGrid {
    pub spec: HistogramSpec,
    pub values: Vec<f64>,
    /// Value assigned to empty bins: max finite + 2 kT.
    pub cap: f64,
    pub kt: f64,
}

/// Free-energy surface of a sample set (d in 1..=2).
pub fn fes_grid(
    samples: &[Vec<f64>],
    spec: &HistogramSpec,
    kt: f64,
) -> Result<FesGrid, MetricsError> {
    if spec.dim() > 2 {
        return Err(MetricsError::FesRank(spec.dim()));
    }
    let counts = histogram(samples, spec)?;
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(MetricsError::EmptyHistogram);
    }
    let mut raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0.0).then(|| -kt * (c / total).ln()))
        .collect();
    let min = raw
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    for v in raw.iter_mut().flatten() {
        *v -= min;
    }
    let max = raw.iter().flatten().cloned().fold(0.0, f64::max);
    let cap = max + 2.0 * kt;
    let values = raw.into_iter().map(|v| v.unwrap_or(cap)).collect();
    Ok(FesGrid {
        spec: spec.clone(),
        values,
        cap,
        kt,
    })
}

/// Fraction of samples per cell of an axis-aligned partition. The
/// partition lists interior boundaries per dimension; cells are ordered
/// lexicographically (first dimension slowest). Weights sum to exactly
/// one: the largest cell absorbs the rounding residual.
pub fn mode_masses(
    samples: &[Vec<f64>],
    partition: &[Vec<f64>],
) -> Result<Vec<f64>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let d = samples[0].len();
    if partition.len() != d {
        return Err(MetricsError::DimMismatch {
            expected: d,
            got: partition.len(),
        });
    }
    let cells_per_dim: Vec<usize> = partition.iter().map(|b| b.len() + 1).collect();
    let total_cells: usize = cells_per_dim.iter().product();
    let mut counts = vec![0usize; total_cells];
    for s in samples {
        let mut idx = 0usize;
        for dim in 0..d {
            let bs = &partition[dim];
            let c = bs.iter().take_while(|&&b| s[dim] >= b).count();
            idx = idx * cells_per_dim[dim] + c;
        }
        counts[idx] += 1;
    }
    let n = samples.len() as f64;
    let mut weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let argmax = counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(i, _)| i)
        .unwrap_or(0);
    let others: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &w)| w)
        .sum();
    weights[argmax] = 1.0 - others;
    Ok(weights)
}

/// Time-lagged independent component analysis of a trajectory.
///
/// Estimated over the pairs `(x_t, x_{t+lag})` with the symmetrized
/// estimator: both covariances average the two pair endpoints, which
/// keeps the whitened eigenvalues inside [-1, 1] by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TicaModel {
    pub lag: usize,
    pub mean: Vec<f64>,
    /// z = whiten . (x - mean); row-major d x d.
    pub whiten: Vec<f64>,
    /// x = mean + unwhiten . z; row-major d x d.
    pub unwhiten: Vec<f64>,
    /// Columns are TIC directions in whitened space (orthonormal).
    pub components: Vec<f64>,
    /// Autocorrelations of the TICs, sorted descending.
    pub eigenvalues: Vec<f64>,
    pub dim: usize,
    pub n_components: usize,
}

impl TicaModel {
    /// Project one state onto the leading TICs.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                z[r] += self.whiten[r * d + c] * (x[c] - self.mean[c]);
            }
        }
        (0..self.n_components)
            .map(|k| (0..d).map(|r| self.components[r * d + k] * z[r]).sum())
            .collect()
    }

    /// Invert a full-rank projection (requires n_components == dim).
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.n_components, self.dim, "full projection required");
        let d = self.dim;
        let mut z = vec![0.0; d];
        for r in 0..d {
            for k in 0..d {
                z[r] += self.components[r * d + k] * y[k];
            }
        }
        let mut x = self.mean.clone();
        for r in 0..d {
            for c in 0..d {
                x[r] += self.unwhiten[r * d + c] * z[c];
            }
        }
        x
    }

    /// TIC directions in the original coordinates (column k = TIC k),
    /// unit-norm under the instantaneous covariance metric.
    pub fn directions(&self) -> Vec<f64> {
        let d = self.dim;
        // whiten^T . components
        let wt = linalg::transpose(&self.whiten, d, d);
        linalg::matmul(&wt, &self.components, d, d, d)
    }
}

/// Fit TICA and project the trajectory onto the leading components.
pub fn tica(
    trajectory: &[Vec<f64>],
    lag: usize,
    n_components: usize,
) -> Result<(TicaModel, Vec<Vec<f64>>), MetricsError> {
    let len = trajectory.len();
    if lag == 0 || len <= lag + 2 {
        return Err(MetricsError::ShortTrajectory { len, lag });
    }
    let d = trajectory[0].len();
    let n_components = n_components.min(d).max(1);
    let pairs = len - lag;
    // pair-weighted mean: every pair contributes both endpoints
    let mut mean = vec![0.0; d];
    for t in 0..pairs {
        for (m, (&a, &b)) in mean.iter_mut().zip(trajectory[t].iter().zip(&trajectory[t + lag])) {
            *m += 0.5 * (a + b);
        }
    }
    for m in mean.iter_mut() {
        *m /= pairs as f64;
    }
    // symmetrized instantaneous and lagged covariances over the pairs
    let mut c0 = vec![0.0; d * d];
    let mut ct = vec![0.0; d * d];
    let mut u = vec![0.0; d];
    let mut w = vec![0.0; d];
    for t in 0..pairs {
        for i in 0..d {
            u[i] = trajectory[t][i] - mean[i];
            w[i] = trajectory[t + lag][i] - mean[i];
        }
        for r in 0..d {
            for c in 0..d {
                c0[r * d + c] += 0.5 * (u[r] * u[c] + w[r] * w[c]);
                ct[r * d + c] += 0.5 * (u[r] * w[c] + w[r] * u[c]);
            }
        }
    }
    for v in c0.iter_mut() {
        *v /= pairs as f64;
    }
    for v in ct.iter_mut() {
        *v /= pairs as f64;
    }

    let (c0_vals, c0_vecs) = linalg::sym_eig(&c0, d);
    let max_val = c0_vals[0].max(1e-300);
    if let Some(&bad) = c0_vals.iter().find(|&&v| v < 1e-10 * max_val) {
        return Err(MetricsError::RankDeficient(bad / max_val));
    }
    // whiten = L^{-1/2} U^T, unwhiten = U L^{1/2}
    let mut whiten = vec![0.0; d * d];
    let mut unwhiten = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            whiten[r * d + c] = c0_vecs[c * d + r] / c0_vals[r].sqrt();
            unwhiten[r * d + c] = c0_vecs[r * d + c] * c0_vals[c].sqrt();
        }
    }
    let cw = linalg::matmul(
        &linalg::matmul(&whiten, &ct, d, d, d),
        &linalg::transpose(&whiten, d, d),
        d,
        d,
        d,
    );
    let mut cw_sym = cw.clone();
    for r in 0..d {
        for c in 0..d {
            cw_sym[r * d + c] = 0.5 * (cw[r * d + c] + cw[c * d + r]);
        }
    }
    let (eigenvalues, components) = linalg::sym_eig(&cw_sym, d);
    let model = TicaModel {
        lag,
        mean,
        whiten,
        unwhiten,
        components,
        eigenvalues: eigenvalues[..n_components].to_vec(),
        dim: d,
        n_components,
    };
    let projected = trajectory.iter().map(|x| model.project(x)).collect();
    Ok((model, projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spec_1d(lo: f64, hi: f64, bins: usize) -> HistogramSpec {
        HistogramSpec::new(vec![(lo, hi)], vec![bins])
    }

    #[test]
    fn jsd_identical_sets_is_zero() {
        let a: Vec<Vec<f64>> = (0..500).map(|i| vec![(i % 37) as f64 * 0.1 - 1.5]).collect();
        let v = jsd_hist(&a, &a, &spec_1d(-2.0, 2.5, 64)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn jsd_disjoint_supports_is_ln2() {
        let a: Vec<Vec<f64>> = (0..10_000).map(|i| vec![-1.0 - (i % 100) as f64 * 0.001]).collect();
        let b: Vec<Vec<f64>> = (0..10_000).map(|i| vec![1.0 + (i % 100) as f64 * 0.001]).collect();
        let v = jsd_hist(&a, &b, &spec_1d(-2.0, 2.0, 200)).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-3, "{v}");
    }

    #[test]
    fn jsd_bernoulli_value() {
        // Bernoulli(0.5) vs Bernoulli(0) on two bins:
        // JSD = 0.5 ln 2 - 0.75 ln(3/2) + ... computed directly
        let p = [0.5_f64, 0.5];
        let q = [1.0_f64, 0.0];
        let m = [0.75_f64, 0.25];
        let expect = 0.5
            * (p[0] * (p[0] / m[0]).ln()
                + p[1] * (p[1] / m[1]).ln()
                + q[0] * (q[0] / m[0]).ln());
        let a: Vec<Vec<f64>> = (0..20_000)
            .map(|i| vec![if i % 2 == 0 { 0.25 } else { 0.75 }])
            .collect();
        let b: Vec<Vec<f64>> = (0..20_000).map(|_| vec![0.25]).collect();
        let v = jsd_hist(&a, &b, &spec_1d(0.0, 1.0, 2)).unwrap();
        assert_abs_diff_eq!(v, expect, epsilon = 1e-6);
        assert_abs_diff_eq!(expect, 0.215_76, epsilon = 1e-4);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded() {
        let a: Vec<Vec<f64>> = (0..400).map(|i| vec![(i as f64 * 0.013).sin()]).collect();
        let b: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64 * 0.029).cos()]).collect();
        let spec = spec_1d(-1.5, 1.5, 48);
        let ab = jsd_hist(&a, &b, &spec).unwrap();
        let ba = jsd_hist(&b, &a, &spec).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=2.0_f64.ln() + 1e-12).contains(&ab));
    }

    #[test]
    fn periodic_dimension_wraps() {
        let two_pi = 2.0 * std::f64::consts::PI;
        let a = vec![vec![0.5], vec![0.5 + two_pi], vec![0.5 - two_pi]];
        let mut spec = spec_1d(-std::f64::consts::PI, std::f64::consts::PI, 16);
        spec.periodic = vec![true];
        let h = histogram(&a, &spec).unwrap();
        assert_eq!(h.iter().sum::<f64>(), 3.0);
        assert_eq!(h.iter().cloned().fold(0.0, f64::max), 3.0, "all in one bin");
    }

    #[test]
    fn w2_identical_is_zero_and_shift_is_exact() {
        let a: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        assert_eq!(w2_1d(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert_eq!(w2_1d(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn w2_shifted_gaussians() {
        let mut rng = crate::seed::stream_rng(3, 0);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let v = w2_1d(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn w2_unequal_sizes_uses_quantiles() {
        let a: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let b: Vec<f64> = (0..500).map(|i| i as f64 / 500.0 + 0.5).collect();
        let v = w2_1d(&a, &b).unwrap();
        assert!((v - 0.5).abs() < 0.01, "{v}");
    }

    #[test]
    fn w2_gauss_identical_is_zero() {
        let cov = [1.3, 0.2, 0.2, 0.7];
        let v = w2_gauss(&[0.1, -0.4], &cov, &[0.1, -0.4], &cov).unwrap();
        assert!(v < 1e-7, "{v}");
    }

    #[test]
    fn w2_gauss_equal_covs_is_mean_distance() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mu = [3.0, 4.0];
        let v = w2_gauss(&[0.0, 0.0], &eye, &mu, &eye).unwrap();
        assert_abs_diff_eq!(v, 5.0, epsilon = 1e-10);
    }

    #[test]
    fn w2_gauss_commuting_diagonals_matches_per_axis_formula() {
        let c1 = [0.8, 0.0, 0.0, 2.0];
        let c2 = [1.5, 0.0, 0.0, 0.5];
        let v = w2_gauss(&[0.0, 1.0], &c1, &[2.0, -1.0], &c2).unwrap();
        // per-axis: (mu1-mu2)^2 + (sqrt(s1) - sqrt(s2))^2
        let per_axis = |m1: f64, s1: f64, m2: f64, s2: f64| {
            (m1 - m2) * (m1 - m2) + (s1.sqrt() - s2.sqrt()) * (s1.sqrt() - s2.sqrt())
        };
        let expect = (per_axis(0.0, 0.8, 2.0, 1.5) + per_axis(1.0, 2.0, -1.0, 0.5)).sqrt();
        assert_abs_diff_eq!(v, expect, epsilon = 1e-9);
    }

    #[test]
    fn w2_gauss_is_symmetric() {
        let c1 = [1.0, 0.3, 0.3, 0.9];
        let c2 = [0.6, -0.1, -0.1, 1.4];
        let v1 = w2_gauss(&[0.0, 0.0], &c1, &[1.0, 2.0], &c2).unwrap();
        let v2 = w2_gauss(&[1.0, 2.0], &c2, &[0.0, 0.0], &c1).unwrap();
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-10);
    }

    #[test]
    fn w2_gauss_rejects_indefinite_input() {
        let bad = [1.0, 0.0, 0.0, -0.2];
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            w2_gauss(&[0.0, 0.0], &bad, &[0.0, 0.0], &eye),
            Err(MetricsError::NotPsd(_))
        ));
    }

    #[test]
    fn fes_minimum_is_zero_and_uniform_is_flat() {
        let mut rng = crate::seed::stream_rng(5, 0);
        let n = 400_000;
        let bins = 8;
        let samples: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let spec = spec_1d(0.0, 1.0, bins);
        let fes = fes_grid(&samples, &spec, 1.0).unwrap();
        let min = fes.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
        // flatness: max - min is a pairwise FES difference, whose MC
        // standard error is sqrt(2) * sqrt((1-p)/(n p)) per bin pair
        let p = 1.0 / bins as f64;
        let se = (2.0 * (1.0 - p) / (n as f64 * p)).sqrt();
        let max = fes.values.iter().cloned().fold(0.0, f64::max);
        assert!(max < 3.0 * se, "max {max}, 3se {}", 3.0 * se);
    }

    #[test]
    fn fes_empty_bins_get_the_cap() {
        let samples = vec![vec![0.1], vec![0.11], vec![0.12]];
        let fes = fes_grid(&samples, &spec_1d(0.0, 1.0, 10), 2.0).unwrap();
        let max_finite = fes
            .values
            .iter()
            .filter(|&&v| v != fes.cap)
            .cloned()
            .fold(0.0, f64::max);
        assert_eq!(fes.cap, max_finite + 2.0 * 2.0);
        assert!(fes.values.iter().any(|&v| v == fes.cap));
    }

    #[test]
    fn mode_masses_all_in_one_cell() {
        let samples = vec![vec![-1.0]; 10];
        let m = mode_masses(&samples, &[vec![0.0]]).unwrap();
        assert_eq!(m, vec![1.0, 0.0]);
    }

    #[test]
    fn mode_masses_sum_to_one_exactly() {
        let samples: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64 - 3.0, (i % 3) as f64 - 1.0])
            .collect();
        let m = mode_masses(&samples, &[vec![-1.5, 1.5], vec![0.0]]).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn tica_white_noise_has_no_slow_modes() {
        let mut rng = crate::seed::stream_rng(11, 0);
        let n = 100_000;
        let traj: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let (model, _) = tica(&traj, 5, 2).unwrap();
        // standard error of an autocorrelation estimate is ~ 1/sqrt(n)
        let bound = 3.0 / (n as f64).sqrt();
        for &ev in &model.eigenvalues {
            assert!(ev.abs() < bound, "eigenvalue {ev}, bound {bound}");
        }
    }

    #[test]
    fn tica_recovers_the_slow_axis_of_ar1() {
        // 2-D independent AR(1) with rho = (0.99, 0.5): the first TIC
        // aligns with the slow axis
        let mut rng = crate::seed::stream_rng(13, 0);
        let n = 100_000;
        let rho = [0.99_f64, 0.5];
        let mut x = [0.0, 0.0];
        let mut traj = Vec::with_capacity(n);
        for _ in 0..n {
            for d in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                x[d] = rho[d] * x[d] + (1.0 - rho[d] * rho[d]).sqrt() * z;
            }
            traj.push(x.to_vec());
        }
        let (model, _) = tica(&traj, 1, 2).unwrap();
        let dirs = model.directions();
        // column 0 in original coordinates
        let v = [dirs[0], dirs[2]];
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let cosine = v[0].abs() / norm;
        assert!(cosine > 0.99, "cosine {cosine}");
        assert!(model.eigenvalues[0] > 0.95, "{:?}", model.eigenvalues);
        assert!(
            model.eigenvalues[0] <= 1.0 + 1e-6 && model.eigenvalues[1] >= -1.0 - 1e-6,
            "{:?}",
            model.eigenvalues
        );
    }

    #[test]
    fn tica_round_trip_reconstructs_data() {
        let mut rng = crate::seed::stream_rng(17, 0);
        let n = 5000;
        let mut x = [0.0, 0.0, 0.0];
        let mut traj = Vec::with_capacity(n);
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            x[0] = 0.9 * x[0] + z0;
            x[1] = 0.5 * x[1] + z1 + 0.3 * x[0];
            x[2] = 0.2 * x[2] + 0.5 * z2;
            traj.push(x.to_vec());
        }
        let (model, projected) = tica(&traj, 2, 3).unwrap();
        let mut max_err = 0.0_f64;
        for (orig, proj) in traj.iter().zip(&projected) {
            let back = model.reconstruct(proj);
            for (a, b) in orig.iter().zip(&back) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-8, "round-trip error {max_err}");
    }

    #[test]
    fn tica_rejects_rank_deficient_input() {
        let traj: Vec<Vec<f64>> = (0..1000)
            .map(|i| {
                let v = (i as f64 * 0.01).sin();
                vec![v, 2.0 * v]
            })
            .collect();
        assert!(matches!(
            tica(&traj, 1, 2),
            Err(MetricsError::RankDeficient(_))
        ));
    }

    #[test]
    fn tica_rejects_short_trajectories() {
        let traj = vec![vec![0.0]; 5];
        assert!(matches!(
            tica(&traj, 4, 1),
            Err(MetricsError::ShortTrajectory { .. })
        ));
    }

    proptest::proptest! {
        /// Triangle inequality for the 1-D quantile W2.
        #[test]
        fn w2_triangle_inequality(
            a in proptest::collection::vec(-5.0f64..5.0, 8..40),
            b in proptest::collection::vec(-5.0f64..5.0, 8..40),
            c in proptest::collection::vec(-5.0f64..5.0, 8..40),
        ) {
            // equal sizes keep the coupling exact
            let n = a.len().min(b.len()).min(c.len());
            let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
            let ab = w2_1d(a, b).unwrap();
            let bc = w2_1d(b, c).unwrap();
            let ac = w2_1d(a, c).unwrap();
            proptest::prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
