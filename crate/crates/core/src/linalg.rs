//! Small symmetric-matrix helpers (d <= 3 in practice).
//!
//! Matrices are row-major `Vec<f64>` of length `d * d`. Eigensolves use
//! cyclic Jacobi rotations, which are exact enough for the metric and
//! whitening uses here and fully deterministic.

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(values, vectors)` with eigenvalues sorted descending and
/// `vectors` row-major with column `j` holding the eigenvector for
/// `values[j]`.
pub fn sym_eig(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d, "matrix must be d*d");
    let mut m = a.to_vec();
    // v starts as identity and accumulates rotations.
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        let scale: f64 = (0..d).map(|i| m[i * d + i].abs()).fold(1e-300, f64::max);
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        m[j * d + j]
            .partial_cmp(&m[i * d + i])
            .expect("finite eigenvalues")
    });
    let values: Vec<f64> = order.iter().map(|&i| m[i * d + i]).collect();
    let mut vectors = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vectors[r * d + new_col] = v[r * d + old_col];
        }
    }
    (values, vectors)
}

/// `a @ b` for row-major `[n, k]` and `[k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += aip * b[p * m + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Symmetric matrix square root via eigendecomposition. Eigenvalues
/// below `-tol` are rejected; small negatives from roundoff clamp to 0.
pub fn sym_sqrt(a: &[f64], d: usize, tol: f64) -> Result<Vec<f64>, f64> {
    let (vals, vecs) = sym_eig(a, d);
    if let Some(&bad) = vals.iter().find(|&&v| v < -tol) {
        return Err(bad);
    }
    let roots: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    // U sqrt(L) U^T
    let mut scaled = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            scaled[r * d + c] = vecs[r * d + c] * roots[c];
        }
    }
    let ut = transpose(&vecs, d, d);
    Ok(matmul(&scaled, &ut, d, d, d))
}

/// Determinant and inverse of a small symmetric positive-definite
/// matrix (d <= 3), by closed form. Returns `None` when the determinant
/// is not strictly positive.
pub fn spd_det_inverse(a: &[f64], d: usize) -> Option<(f64, Vec<f64>)> {
    match d {
        1 => {
            let det = a[0];
            (det > 0.0).then(|| (det, vec![1.0 / det]))
        }
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            (det > 0.0).then(|| (det, vec![a[3] / det, -a[1] / det, -a[2] / det, a[0] / det]))
        }
        3 => {
            let c00 = a[4] * a[8] - a[5] * a[7];
            let c01 = a[5] * a[6] - a[3] * a[8];
            let c02 = a[3] * a[7] - a[4] * a[6];
            let det = a[0] * c00 + a[1] * c01 + a[2] * c02;
            if det <= 0.0 {
                return None;
            }
            let inv = vec![
                c00 / det,
                (a[2] * a[7] - a[1] * a[8]) / det,
                (a[1] * a[5] - a[2] * a[4]) / det,
                c01 / det,
                (a[0] * a[8] - a[2] * a[6]) / det,
                (a[2] * a[3] - a[0] * a[5]) / det,
                c02 / det,
                (a[1] * a[6] - a[0] * a[7]) / det,
                (a[0] * a[4] - a[1] * a[3]) / det,
            ];
            Some((det, inv))
        }
        _ => None,
    }
}
