//! Shape bookkeeping and the dense compute kernels behind the graph ops.
//!
//! Broadcasting follows the usual right-aligned rule: trailing axes must
//! match or be 1, and missing leading axes count as 1. All kernels are plain
//! loops over contiguous slices; at this scale that is fast enough and keeps
//! every numeric path auditable.

use super::{Scalar, Tensor};

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape; panics on incompatible extents.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let ea = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let eb = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        assert!(
            ea == eb || ea == 1 || eb == 1,
            "cannot broadcast shapes {a:?} and {b:?}"
        );
        out[i] = ea.max(eb);
    }
    out
}

/// Strides of `shape` viewed inside the broadcast shape `out`; 0 where the
/// source extent is 1 (or the axis is missing).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                debug_assert_eq!(shape[i - off], out[i]);
                own[i - off]
            }
        })
        .collect()
}

/// Elementwise combine with broadcasting.
pub(crate) fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 {
        let y = b.data()[0];
        return Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect());
    }
    if a.numel() == 1 {
        let x = a.data()[0];
        return Tensor::new(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect());
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let total: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        data.push(f(a.data()[ia], b.data()[ib]));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data)
}

/// `dst += sign * src` where `src` is reduced down to `dst`'s shape
/// (the reverse of broadcasting `dst` up to `src`). Used to push gradients
/// back through broadcast ops.
pub(crate) fn add_reduced<T: Scalar>(src: &Tensor<T>, sign: T, dst: &mut Tensor<T>) {
    if src.shape() == dst.shape() {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += sign * s;
        }
        return;
    }
    let out_shape = src.shape().to_vec();
    let sd = broadcast_strides(dst.shape(), &out_shape);
    let nd = out_shape.len();
    let total = src.numel();
    let mut idx = vec![0usize; nd];
    let mut id = 0usize;
    let dd = dst.data_mut();
    for i in 0..total {
        dd[id] += sign * src.data()[i];
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            id += sd[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            id -= sd[ax] * out_shape[ax];
        }
    }
}

/// `dst += src` where `src` (right-aligned, possibly with 1-extents) is
/// broadcast up to `dst`'s shape. Used by the `Sum` backward.
pub(crate) fn add_broadcast<T: Scalar>(src: &Tensor<T>, dst: &mut Tensor<T>) {
    if src.shape() == dst.shape() {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += s;
        }
        return;
    }
    let out_shape = dst.shape().to_vec();
    let ss = broadcast_strides(src.shape(), &out_shape);
    let nd = out_shape.len();
    let total = dst.numel();
    let mut idx = vec![0usize; nd];
    let mut is = 0usize;
    let dd = dst.data_mut();
    for i in 0..total {
        dd[i] += src.data()[is];
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            is += ss[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            is -= ss[ax] * out_shape[ax];
        }
    }
}

/// Sum over the given axes, keeping them as extent-1 dimensions.
pub(crate) fn sum_axes_keepdim<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut keep = x.shape().to_vec();
    for &ax in axes {
        assert!(ax < keep.len(), "sum axis {ax} out of range for shape {:?}", x.shape());
        keep[ax] = 1;
    }
    let mut out = Tensor::zeros(keep);
    add_reduced(x, T::one(), &mut out);
    out
}

/// Copy with two axes swapped.
pub(crate) fn swap_axes_copy<T: Scalar>(x: &Tensor<T>, a: usize, b: usize) -> Tensor<T> {
    let nd = x.rank();
    assert!(a < nd && b < nd, "swap_axes({a},{b}) on rank-{nd} tensor");
    if a == b {
        return x.clone();
    }
    let mut out_shape = x.shape().to_vec();
    out_shape.swap(a, b);
    let in_strides = strides_of(x.shape());
    // Stride of the input along each *output* axis.
    let mut perm_strides: Vec<usize> = (0..nd).map(|i| in_strides[i]).collect();
    perm_strides.swap(a, b);
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut is = 0usize;
    for _ in 0..total {
        data.push(x.data()[is]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            is += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            is -= perm_strides[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data)
}

/// `c += a @ b` for row-major slices: a is m×k, b is k×n, c is m×n.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a @ b^T`: a is m×k, b is n×k, c is m×n.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `c += a^T @ b`: a is p×m, b is p×n, c is m×n.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Matrix product with batching: both operands expose trailing [m,k] / [k,n]
/// matrices; leading axes must match exactly, or one side may omit them
/// entirely (a plain matrix applied across the batch).
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ash, bsh) = (a.shape(), b.shape());
    assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2, got {ash:?} x {bsh:?}");
    let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    assert_eq!(ka, kb, "matmul inner dimensions disagree: {ash:?} x {bsh:?}");
    let alead = &ash[..ash.len() - 2];
    let blead = &bsh[..bsh.len() - 2];
    let lead: Vec<usize> = if alead.is_empty() {
        blead.to_vec()
    } else if blead.is_empty() {
        alead.to_vec()
    } else {
        assert_eq!(alead, blead, "matmul batch dimensions disagree: {ash:?} x {bsh:?}");
        alead.to_vec()
    };
    let batch: usize = lead.iter().product();
    let mut out_shape = lead.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(out_shape);
    let (sa, sb, so) = (m * ka, kb * n, m * n);
    for s in 0..batch {
        let aslice = if alead.is_empty() { a.data() } else { &a.data()[s * sa..(s + 1) * sa] };
        let bslice = if blead.is_empty() { b.data() } else { &b.data()[s * sb..(s + 1) * sb] };
        gemm_nn(aslice, bslice, &mut out.data_mut()[s * so..(s + 1) * so], m, ka, n);
    }
    out
}

/// Decomposes a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along one axis.
pub(crate) fn softmax_lanes<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = lane_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut mx = xd[at(0)];
            for l in 1..len {
                if xd[at(l)] > mx {
                    mx = xd[at(l)];
                }
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (xd[at(l)] - mx).exp();
                out[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[at(l)] = out[at(l)] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax adjoint: `dx = (g - <g, y>) .* y` per lane.
pub(crate) fn softmax_backward_lanes<T: Scalar>(
    y: &Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
) -> Tensor<T> {
    let (outer, len, inner) = lane_split(y.shape(), axis);
    let mut out = vec![T::zero(); y.numel()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                dot += gd[at(l)] * yd[at(l)];
            }
            for l in 0..len {
                out[at(l)] = (gd[at(l)] - dot) * yd[at(l)];
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 3]), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[], &[5]), vec![5]);
        assert_eq!(broadcast_shape(&[3], &[3]), vec![3]);
    }

    #[test]
    #[should_panic(expected = "cannot broadcast")]
    fn incompatible_broadcast_panics() {
        broadcast_shape(&[2, 3], &[4, 3, 2]);
    }

    #[test]
    fn zip_right_aligned() {
        let a = Tensor::new([2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new([3], vec![10.0, 20.0, 30.0]);
        let c = zip_broadcast(&a, &b, |x, y| x + y);
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn reduce_reverses_broadcast() {
        let src = Tensor::new([2, 3], vec![1.0f64; 6]);
        let mut dst = Tensor::zeros([3]);
        add_reduced(&src, 1.0, &mut dst);
        assert_eq!(dst.data(), &[2.0, 2.0, 2.0]);
        let mut dst2 = Tensor::zeros([2, 1]);
        add_reduced(&src, -1.0, &mut dst2);
        assert_eq!(dst2.data(), &[-3.0, -3.0]);
    }

    #[test]
    fn swap_axes_matches_transpose() {
        let x = Tensor::new([2, 3], (0..6).map(|i| i as f64).collect());
        let t = swap_axes_copy(&x, 0, 1);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c1 = [0.0f64; 4];
        gemm_nn(&a, &b, &mut c1, 2, 3, 2);
        // b^T is 2x3; gemm_nt(a, b^T) must agree.
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        // a^T is 3x2; gemm_tn(a^T, b) must agree.
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c1, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }

    #[test]
    fn batched_matmul_broadcasts_plain_matrix() {
        let a = Tensor::new([2, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = Tensor::new([2, 1], vec![3.0, 4.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_lane_normalizes() {
        let x = Tensor::new([2, 3], vec![1.0f64, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let y = softmax_lanes(&x, 1);
        for row in 0..2 {
            let s: f64 = y.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
