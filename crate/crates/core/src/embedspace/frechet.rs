//! Fréchet distance between two Gaussian fits of feature sets:
//! ||μ_a − μ_b||² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^½). The matrix square roots
//! go through symmetric eigendecompositions with negative eigenvalues
//! clamped to zero, so near-singular covariances stay finite.

use crate::numerics::NdArray;
use anyhow::{ensure, Result};
use nalgebra::DMatrix;

fn mean_and_cov(x: &NdArray) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.as_2d();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x.data[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = x.data[r * d + i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (x.data[r * d + j] - mean[j]);
            }
        }
    }
    // Unbiased estimate, mirrored to the lower triangle.
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// Symmetric PSD square root, eigenvalues clamped at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[(i, j)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Distance between Gaussian fits of two feature sets shaped [N, d].
/// Each set needs at least d + 1 samples for a meaningful covariance.
pub fn frechet_distance(features_a: &NdArray, features_b: &NdArray) -> Result<f64> {
    ensure!(
        features_a.shape.len() == 2 && features_b.shape.len() == 2,
        "feature sets must be [N, d], got {:?} and {:?}",
        features_a.shape,
        features_b.shape
    );
    let (na, d) = features_a.as_2d();
    let (nb, db) = features_b.as_2d();
    ensure!(d == db, "feature dimensions differ: {} vs {}", d, db);
    ensure!(
        na >= d + 1 && nb >= d + 1,
        "need at least {} samples per set for dimension {}, got {} and {}",
        d + 1,
        d,
        na,
        nb
    );
    let (mu_a, cov_a) = mean_and_cov(features_a);
    let (mu_b, cov_b) = mean_and_cov(features_b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let sqrt_b = sqrt_psd(&cov_b);
    let mut inner = &sqrt_b * &cov_a * &sqrt_b;
    // Symmetrize before the second eigendecomposition; rounding in the
    // triple product breaks exact symmetry.
    let t = inner.transpose();
    inner = (&inner + &t) * 0.5;
    let cross = sqrt_psd(&inner);
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn gaussian_features(seed: u64, n: usize, d: usize, shift: f64, spread: f64) -> NdArray {
        let mut rng = RngStream::new(seed, 77);
        let mut x = NdArray::zeros(&[n, d]);
        rng.fill_normal(&mut x.data);
        for r in 0..n {
            for c in 0..d {
                // Anisotropic scale per coordinate plus a common shift.
                x.data[r * d + c] = x.data[r * d + c] * spread * (1.0 + c as f64 * 0.3) + shift;
            }
        }
        x
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = gaussian_features(1, 40, 5, 0.0, 1.0);
        let d = frechet_distance(&a, &a.clone()).unwrap();
        assert!(d <= 1e-8, "got {}", d);
    }

    #[test]
    fn pure_mean_shift_gives_squared_norm() {
        let a = gaussian_features(2, 50, 4, 0.0, 1.0);
        let mut b = a.clone();
        let shift = [0.5, -1.0, 0.25, 2.0];
        for r in 0..50 {
            for c in 0..4 {
                b.data[r * 4 + c] += shift[c];
            }
        }
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - expect).abs() < 1e-6, "got {} want {}", d, expect);
    }

    #[test]
    fn distance_is_symmetric() {
        let a = gaussian_features(3, 60, 6, 0.0, 1.0);
        let b = gaussian_features(4, 70, 6, 1.5, 0.7);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{} vs {}", ab, ba);
        assert!(ab > 0.1, "distinct distributions should be far apart, got {}", ab);
    }

    #[test]
    fn too_few_samples_fail() {
        let a = gaussian_features(5, 6, 6, 0.0, 1.0);
        let b = gaussian_features(6, 40, 6, 0.0, 1.0);
        let err = frechet_distance(&a, &b).unwrap_err();
        assert!(err.to_string().contains("at least 7 samples"), "{}", err);
    }

    /// Cyclic Jacobi eigendecomposition for 3x3 symmetric matrices; an
    /// implementation-independent oracle for the nalgebra-based path.
    fn jacobi_eigen_3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut a = m;
        let mut v = [[0.0; 3]; 3];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _sweep in 0..64 {
            let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
            if off < 1e-15 {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..3 {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
        ([a[0][0], a[1][1], a[2][2]], v)
    }

    fn jacobi_sqrt_3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let (vals, vecs) = jacobi_eigen_3(m);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, &val) in vals.iter().enumerate() {
                    out[i][j] += vecs[i][k] * val.max(0.0).sqrt() * vecs[j][k];
                }
            }
        }
        out
    }

    fn reference_frechet_3(a: &NdArray, b: &NdArray) -> f64 {
        let to_arr = |m: &DMatrix<f64>| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = m[(i, j)];
                }
            }
            out
        };
        let (mu_a, cov_a) = mean_and_cov(a);
        let (mu_b, cov_b) = mean_and_cov(b);
        let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
        let sb = jacobi_sqrt_3(to_arr(&cov_b));
        let ca = to_arr(&cov_a);
        // inner = sb * ca * sb
        let mut tmp = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, cak) in ca.iter().enumerate() {
                    tmp[i][j] += sb[i][k] * cak[j];
                }
            }
        }
        let mut inner = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, sbk) in sb.iter().enumerate() {
                    inner[i][j] += tmp[i][k] * sbk[j];
                }
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                let s = 0.5 * (inner[i][j] + inner[j][i]);
                inner[i][j] = s;
                inner[j][i] = s;
            }
        }
        let cross = jacobi_sqrt_3(inner);
        let tr = |m: &[[f64; 3]; 3]| m[0][0] + m[1][1] + m[2][2];
        (mean_term + tr(&ca) + cov_b.trace() - 2.0 * tr(&cross)).max(0.0)
    }

    #[test]
    fn matches_independent_jacobi_reference_in_3d() {
        let a = gaussian_features(7, 64, 3, 0.0, 1.0);
        let b = gaussian_features(8, 64, 3, 0.8, 1.4);
        let got = frechet_distance(&a, &b).unwrap();
        let want = reference_frechet_3(&a, &b);
        assert!((got - want).abs() < 1e-6, "got {} want {}", got, want);
        assert!(got > 0.0);
    }
}
