//! Independent reference implementations used only by test suites.
//!
//! These deliberately avoid the production code paths (no shared kernels, no
//! shared eigensolver) so that agreement between the two is evidence, not
//! tautology.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Singular values of a tall row-major `n x d` matrix (descending) by power
/// iteration on the Gram matrix with explicit (Hotelling) deflation after each
/// converged eigenpair, plus per-iteration re-orthogonalization against the
/// found eigenvectors.
///
/// The deflation has to be explicit (`G -= lambda v v^T`) rather than purely
/// projection-based: once the remaining spectrum is ~0, the iterate after a
/// matvec is pure rounding noise, and normalizing that noise yields a vector
/// with an O(1) component along the found eigenvectors. A Rayleigh quotient
/// against the *original* Gram matrix then reports `lambda_1 * cos^2` instead
/// of ~0; against the deflated matrix it is bounded by machine-epsilon noise.
pub fn power_iteration_singular_values(x: &[f64], n: usize, d: usize, iters: usize) -> Vec<f64> {
    assert_eq!(x.len(), n * d, "matrix data length mismatch");
    // Gram matrix, plain triple loop.
    let mut g = vec![0.0f64; d * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] += row[i] * row[j];
            }
        }
    }
    // Projects out already-found directions, then normalizes. Returns false
    // when nothing of the vector survives.
    let orthonormalize = |v: &mut Vec<f64>, found: &[Vec<f64>]| -> bool {
        for u in found {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-150 {
            return false;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        true
    };
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut eigs = Vec::with_capacity(d);
    for e in 0..d {
        let matvec = |v: &[f64], out: &mut [f64]| {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += g[i * d + j] * v[j];
                }
                out[i] = acc;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + e as u64);
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = vec![0.0f64; d];
        let mut alive = true;
        for _ in 0..iters {
            if !orthonormalize(&mut v, &found) {
                alive = false;
                break;
            }
            matvec(&v, &mut w);
            std::mem::swap(&mut v, &mut w);
        }
        if !(alive && orthonormalize(&mut v, &found)) {
            // The deflated matrix annihilates everything left of this
            // direction: the eigenvalue is 0, and so are all later ones.
            eigs.push(0.0);
            continue;
        }
        matvec(&v, &mut w);
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        eigs.push(rayleigh);
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] -= rayleigh * v[i] * v[j];
            }
        }
        found.push(v.clone());
    }
    let mut svals: Vec<f64> = eigs.into_iter().map(|l| l.sqrt()).collect();
    svals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    svals
}

/// A tall matrix with a prescribed singular spectrum: random orthonormal
/// column/row factors around `diag(spectrum)`. Returns row-major `n x d`.
pub fn matrix_with_spectrum(spectrum: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let d = spectrum.len();
    assert!(n > d, "need a tall matrix");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthonormal_columns(&mut rng, n, d);
    let v = random_orthonormal_columns(&mut rng, d, d);
    // X = U diag(s) V^T  =>  X[r][c] = sum_k U[r][k] s[k] V[c][k].
    let mut x = vec![0.0f64; n * d];
    for r in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for (k, &s) in spectrum.iter().enumerate() {
                acc += u[r * d + k] * s * v[c * d + k];
            }
            x[r * d + c] = acc;
        }
    }
    x
}

/// `k` orthonormal columns of length `rows` via Gram-Schmidt on Gaussian
/// vectors; row-major `rows x k`.
fn random_orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> =
            (0..rows).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw; try again
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut out = vec![0.0f64; rows * k];
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[r * k + c] = v;
        }
    }
    out
}
