//! Spectral conditioning of token feature maps.
//!
//! Valid tokens of a `[batch, time, d]` activation are stacked into an
//! `N x d` matrix `X` (`N > d` required); its singular values come from a
//! cyclic Jacobi eigensolve of the `d x d` Gram matrix `X^T X`. Reported:
//!
//! * `C_p(X) = sigma_1 / sigma_ceil(p*d)` — decay of the spectrum at depth `p`
//!   (1-based index), infinite when the trailing singular value is zero;
//! * `C_max(X) = sigma_1` — the largest singular value.

use crate::norm::SeqMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CondError {
    /// The stacked token matrix must be tall: more valid tokens than
    /// feature dimensions.
    #[error("need more valid tokens than features: {tokens} tokens for {features} features")]
    NotEnoughTokens { tokens: usize, features: usize },
    /// The Jacobi sweep budget ran out before the off-diagonal mass died.
    #[error("Jacobi eigensolve failed to converge in {sweeps} sweeps (off-diagonal {off:.3e})")]
    NoConvergence { sweeps: usize, off: f64 },
    /// Non-finite entries in the feature map.
    #[error("feature map contains non-finite values")]
    NonFinite,
}

/// Conditioning numbers of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub layer_index: usize,
    pub step: u64,
    pub c_50: f64,
    pub c_80: f64,
    pub c_max: f64,
}

impl ConditionReport {
    /// Computes all three metrics for a feature map's valid tokens.
    pub fn compute<T: Scalar>(
        features: &Tensor<T>,
        mask: &SeqMask,
        layer_index: usize,
        step: u64,
    ) -> Result<ConditionReport, CondError> {
        let stacked = reshape_tokens(features, mask)?;
        let svals = singular_values(&stacked)?;
        Ok(ConditionReport {
            layer_index,
            step,
            c_50: c_p(&svals, 0.5),
            c_80: c_p(&svals, 0.8),
            c_max: c_max(&svals),
        })
    }
}

/// Stacks the valid tokens of a `[batch, time, d]` feature map into an
/// `N x d` `f64` matrix, dropping padded positions.
pub fn reshape_tokens<T: Scalar>(
    features: &Tensor<T>,
    mask: &SeqMask,
) -> Result<Tensor<f64>, CondError> {
    let sh = features.shape();
    assert_eq!(sh.len(), 3, "feature map must be [batch, time, feature], got {sh:?}");
    assert_eq!(sh[0], mask.batch(), "mask batch mismatch");
    assert_eq!(sh[1], mask.time(), "mask time mismatch");
    let d = sh[2];
    let n = mask.count();
    if n <= d {
        return Err(CondError::NotEnoughTokens { tokens: n, features: d });
    }
    let mut data = Vec::with_capacity(n * d);
    for b in 0..sh[0] {
        for t in 0..sh[1] {
            if mask.is_valid(b, t) {
                let base = (b * sh[1] + t) * d;
                for j in 0..d {
                    let v = features.data()[base + j].to_f64();
                    if !v.is_finite() {
                        return Err(CondError::NonFinite);
                    }
                    data.push(v);
                }
            }
        }
    }
    Ok(Tensor::new([n, d], data))
}

/// Singular values of a tall `N x d` matrix, descending, via a cyclic
/// Jacobi eigensolve of the Gram matrix.
pub fn singular_values(x: &Tensor<f64>) -> Result<Vec<f64>, CondError> {
    let sh = x.shape();
    assert_eq!(sh.len(), 2, "singular_values expects a matrix, got {sh:?}");
    let (n, d) = (sh[0], sh[1]);
    if n <= d {
        return Err(CondError::NotEnoughTokens { tokens: n, features: d });
    }
    if !x.all_finite() {
        return Err(CondError::NonFinite);
    }
    // Gram matrix G = X^T X, symmetric positive semidefinite.
    let mut g = vec![0.0f64; d * d];
    for row in 0..n {
        let r = &x.data()[row * d..(row + 1) * d];
        for i in 0..d {
            for j in i..d {
                g[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
    let eigs = jacobi_eigenvalues(&mut g, d)?;
    let mut svals: Vec<f64> = eigs.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    svals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(svals)
}

/// Maximum cyclic sweeps before declaring non-convergence. Jacobi converges
/// quadratically; ordinary matrices finish in well under ten sweeps.
const MAX_SWEEPS: usize = 50;

/// Relative off-diagonal tolerance: converged when the off-diagonal
/// Frobenius mass falls below this times the full Frobenius norm.
const OFF_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric `d x d` matrix by cyclic Jacobi rotations.
/// Destroys `a`.
fn jacobi_eigenvalues(a: &mut [f64], d: usize) -> Result<Vec<f64>, CondError> {
    debug_assert_eq!(a.len(), d * d);
    if d == 1 {
        return Ok(vec![a[0]]);
    }
    let fro: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fro == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let off_mass = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..MAX_SWEEPS {
        if off_mass(a) <= OFF_TOL * fro {
            return Ok((0..d).map(|i| a[i * d + i]).collect());
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q.
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(CondError::NoConvergence { sweeps: MAX_SWEEPS, off: off_mass(a) })
}

/// `C_p`: ratio of the largest singular value to the one at 1-based index
/// `ceil(p * d)`. Returns infinity when that value is zero but the largest
/// is not; 0/0 is reported as 0 (a zero matrix has no conditioning issue).
pub fn c_p(svals: &[f64], p: f64) -> f64 {
    assert!(p > 0.0 && p <= 1.0, "p must lie in (0, 1], got {p}");
    assert!(!svals.is_empty(), "empty spectrum");
    let d = svals.len();
    let idx = ((p * d as f64).ceil() as usize).clamp(1, d) - 1;
    let top = svals[0];
    let bottom = svals[idx];
    if bottom == 0.0 {
        if top == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        top / bottom
    }
}

/// The largest singular value.
pub fn c_max(svals: &[f64]) -> f64 {
    assert!(!svals.is_empty(), "empty spectrum");
    svals[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_arithmetic_on_known_spectrum() {
        // d = 3, spectrum [4, 2, 1]:
        // C_50 -> index ceil(1.5) = 2 -> 4/2 = 2
        // C_80 -> index ceil(2.4) = 3 -> 4/1 = 4
        let s = [4.0, 2.0, 1.0];
        assert_eq!(c_p(&s, 0.5), 2.0);
        assert_eq!(c_p(&s, 0.8), 4.0);
        assert_eq!(c_p(&s, 1.0), 4.0);
        assert_eq!(c_max(&s), 4.0);
    }

    #[test]
    fn equal_spectrum_is_perfectly_conditioned() {
        let s = [3.0, 3.0, 3.0, 3.0];
        assert_eq!(c_p(&s, 0.5), 1.0);
        assert_eq!(c_p(&s, 0.8), 1.0);
    }

    #[test]
    fn rank_deficiency_reports_infinity() {
        let s = [2.0, 1.0, 0.0];
        assert_eq!(c_p(&s, 0.8), f64::INFINITY);
        assert_eq!(c_p(&s, 0.5), 2.0);
    }

    #[test]
    fn zero_matrix_reports_zero_not_nan() {
        let s = [0.0, 0.0];
        assert_eq!(c_p(&s, 0.5), 0.0);
        assert_eq!(c_max(&s), 0.0);
    }

    #[test]
    fn c_p_is_monotone_in_p() {
        let s = [9.0, 5.0, 3.0, 1.5, 0.5];
        let mut prev = 1.0;
        for p in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let c = c_p(&s, p);
            assert!(c >= prev, "C_p must not decrease in p");
            prev = c;
        }
    }

    #[test]
    fn orthonormal_columns_have_unit_spectrum() {
        // Tall matrix with orthonormal columns e_1, e_2.
        let x = Tensor::new([4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = singular_values(&x).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product_spectrum() {
        // X = u v^T has singular values (||u|| ||v||, 0, ...).
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, -1.0, 0.5];
        let mut data = Vec::new();
        for &uu in &u {
            for &vv in &v {
                data.push(uu * vv);
            }
        }
        let x = Tensor::new([4, 3], data);
        let s = singular_values(&x).unwrap();
        let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((s[0] - nu * nv).abs() < 1e-10, "top value {} vs {}", s[0], nu * nv);
        assert!(s[1].abs() < 1e-8);
        assert!(s[2].abs() < 1e-8);
    }

    #[test]
    fn scaling_the_matrix_scales_the_spectrum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::from_fn([10, 4], |_| rng.gen_range(-1.0..1.0f64));
        let s1 = singular_values(&x).unwrap();
        let s2 = singular_values(&x.map(|v| v * 2.0)).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((2.0 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wide_matrix_is_rejected() {
        let x = Tensor::<f64>::ones([3, 3]);
        assert!(matches!(
            singular_values(&x),
            Err(CondError::NotEnoughTokens { tokens: 3, features: 3 })
        ));
    }

    #[test]
    fn reshape_drops_padded_tokens() {
        let mask = SeqMask::from_lengths(&[2, 1], 2);
        let feats = Tensor::new(
            [2, 2, 2],
            vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 99.0, 99.0],
        );
        let m = reshape_tokens(&feats, &mask).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn reshape_requires_tall_stack() {
        let mask = SeqMask::from_lengths(&[2], 2);
        let feats = Tensor::<f64>::ones([1, 2, 3]);
        assert!(matches!(
            reshape_tokens(&feats, &mask),
            Err(CondError::NotEnoughTokens { tokens: 2, features: 3 })
        ));
    }

    #[test]
    fn jacobi_agrees_with_power_iteration_oracle() {
        use crate::oracles::power_iteration_singular_values;
        use rand::{Rng, SeedableRng};
        for trial in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(500 + trial);
            let x = Tensor::from_fn([64, 16], |_| rng.gen_range(-1.0..1.0f64));
            let jac = singular_values(&x).unwrap();
            let ora = power_iteration_singular_values(x.data(), 64, 16, 800);
            for (a, b) in jac.iter().zip(&ora) {
                let denom = a.abs().max(b.abs()).max(1e-12);
                assert!(
                    (a - b).abs() / denom < 1e-6,
                    "trial {trial}: jacobi {a} vs oracle {b}"
                );
            }
        }
    }

    #[test]
    fn constructed_spectrum_roundtrips_through_jacobi() {
        use crate::oracles::matrix_with_spectrum;
        let spectrum = [4.0, 2.0, 1.0];
        let data = matrix_with_spectrum(&spectrum, 10, 77);
        let x = Tensor::new([10, 3], data);
        let s = singular_values(&x).unwrap();
        for (got, want) in s.iter().zip(spectrum) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!((c_p(&s, 0.5) - 2.0).abs() < 1e-9);
        assert!((c_p(&s, 0.8) - 4.0).abs() < 1e-9);
        assert!((c_max(&s) - 4.0).abs() < 1e-9);
    }
}
