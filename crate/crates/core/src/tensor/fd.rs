//! Central-difference gradient probes, the reference every analytic
//! gradient in this workspace is checked against.
//!
//! The loss closure must be deterministic and side-effect-free: it is called
//! twice per probed coordinate with perturbed copies of the parameters.

use super::{Scalar, Tensor, TensorError};

/// Full central-difference gradient of `f` with respect to every coordinate
/// of every parameter, at step size `step`.
pub fn finite_diff<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    step: T,
) -> Result<Vec<Tensor<T>>, TensorError>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> T,
{
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut grads: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let g = probe(&mut f, &mut work, pi, ci, step)?;
            grads[pi].data_mut()[ci] = g;
        }
    }
    Ok(grads)
}

/// Central differences at selected `(param index, flat coordinate)` pairs
/// only; the economical form for model-sized checks.
pub fn finite_diff_at<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    coords: &[(usize, usize)],
    step: T,
) -> Result<Vec<T>, TensorError>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> T,
{
    let mut work: Vec<Tensor<T>> = params.to_vec();
    coords
        .iter()
        .map(|&(pi, ci)| {
            assert!(pi < work.len(), "finite_diff_at: param index {pi} out of range");
            assert!(ci < work[pi].numel(), "finite_diff_at: coord {ci} out of range for param {pi}");
            probe(&mut f, &mut work, pi, ci, step)
        })
        .collect()
}

fn probe<T, F>(
    f: &mut F,
    work: &mut [Tensor<T>],
    pi: usize,
    ci: usize,
    step: T,
) -> Result<T, TensorError>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> T,
{
    let orig = work[pi].data()[ci];
    work[pi].data_mut()[ci] = orig + step;
    let fp = f(work);
    work[pi].data_mut()[ci] = orig - step;
    let fm = f(work);
    work[pi].data_mut()[ci] = orig;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(TensorError::NonFiniteProbe { param: pi, coord: ci });
    }
    Ok((fp - fm) / (step + step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn quadratic_slope() {
        // f(x) = x^2 at x = 3 has slope 6.
        let params = [Tensor::new([1], vec![3.0f64])];
        let g = finite_diff(|p| p[0].data()[0] * p[0].data()[0], &params, 1e-5).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cubic_slope_coarser_tolerance() {
        // f(x) = x^3 at x = 1 has slope 3; curvature costs accuracy.
        let params = [Tensor::new([1], vec![1.0f64])];
        let g = finite_diff(|p| p[0].data()[0].powi(3), &params, 1e-5).unwrap();
        assert!((g[0].data()[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let params = [Tensor::new([3], vec![1.0f64, -2.0, 0.5])];
        let g = finite_diff(|_| 42.0, &params, 1e-5).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let params = [Tensor::new([1], vec![0.0f64])];
        let err = finite_diff(|p| p[0].data()[0].sqrt(), &params, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteProbe { .. }));
    }

    #[test]
    fn selected_coords_match_full_gradient() {
        let params = [Tensor::new([3], vec![0.3f64, -1.2, 2.0])];
        let f = |p: &[Tensor<f64>]| p[0].data().iter().map(|&v| (v * v * v) - v).sum::<f64>();
        let full = finite_diff(f, &params, 1e-5).unwrap();
        let picked = finite_diff_at(f, &params, &[(0, 0), (0, 2)], 1e-5).unwrap();
        assert!((picked[0] - full[0].data()[0]).abs() < 1e-12);
        assert!((picked[1] - full[0].data()[2]).abs() < 1e-12);
    }

    #[test]
    fn backward_agrees_with_probes_on_composite() {
        // A composite touching every differentiable op once, in f64.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let a0 = Tensor::from_fn([2, 3], |_| rng.gen_range(-1.5..1.5f64)).with_grad();
            let b0 = Tensor::from_fn([3, 2], |_| rng.gen_range(-1.5..1.5f64)).with_grad();

            let eval = |p: &[Tensor<f64>]| -> f64 {
                let g = Graph::new();
                let a = g.leaf(p[0].clone().with_grad());
                let b = g.leaf(p[1].clone().with_grad());
                let prod = a.matmul(b); // [2,2]
                let sym = prod + prod.transpose_last();
                let pos = (sym * sym).add_scalar(0.25).sqrt();
                let gated = pos.relu() * sym.softmax(1) + (-sym).exp().scale(0.5);
                let (mean, var) = gated.moments(&[0, 1], false);
                let spread = (gated / pos.add_scalar(1.0)).sum_all();
                (mean + var + spread).item()
            };

            // Analytic gradients.
            let g = Graph::new();
            let a = g.leaf(a0.clone());
            let b = g.leaf(b0.clone());
            let prod = a.matmul(b);
            let sym = prod + prod.transpose_last();
            let pos = (sym * sym).add_scalar(0.25).sqrt();
            let gated = pos.relu() * sym.softmax(1) + (-sym).exp().scale(0.5);
            let (mean, var) = gated.moments(&[0, 1], false);
            let spread = (gated / pos.add_scalar(1.0)).sum_all();
            let loss = mean + var + spread;
            g.backward(loss).unwrap();
            let da = g.grad(a).unwrap();
            let db = g.grad(b).unwrap();

            let fd = finite_diff(eval, &[a0.clone(), b0.clone()], 1e-5).unwrap();
            for (ana, num) in [(da, &fd[0]), (db, &fd[1])] {
                for (x, y) in ana.data().iter().zip(num.data()) {
                    let denom = x.abs().max(y.abs()).max(1e-6);
                    assert!(
                        (x - y).abs() / denom < 1e-4,
                        "autodiff {x} vs finite difference {y}"
                    );
                }
            }
        }
    }
}
