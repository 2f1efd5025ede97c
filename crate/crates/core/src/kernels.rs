//! Dense compute kernels.
//!
//! Plain functions over row-major slices, shared by the graph ops and their
//! backward passes. Accumulation order is fixed (no fusion, no intra-op
//! threading) so that repeated evaluation of the same composition is
//! bit-identical.

use crate::scalar::Scalar;

/// `C[m,n] += A[m,k] · B[k,n]`
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `C[m,n] += A[m,k] · B[n,k]ᵀ`
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// `C[k,n] += A[m,k]ᵀ · B[m,n]`
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
}

pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        if v > T::zero() {
            *d = *d + g;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &[T], out: &mut [T]) {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x) {
        let u = c * (v + a * v * v * v);
        *o = half * v * (T::one() + u.tanh_approx());
    }
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    let c = T::of_f64(GELU_C);
    let a3 = T::of_f64(3.0 * GELU_A);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh_approx();
        let du = c * (T::one() + a3 * v * v);
        let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
        *d = *d + g * deriv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], cols: usize) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut mx = xr[0];
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// `dx += y ∘ (dy − Σ(dy ∘ y))` per row, where `y` is the softmax output.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], cols: usize) {
    for ((yr, gr), dr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let mut dot = T::zero();
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot = dot + yv * gv;
        }
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = *d + yv * (gv - dot);
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Row-wise layernorm with affine gain/bias. Writes `(mean, inv_std)` per row
/// into `stats` (`2·rows` values) for the backward pass.
pub fn layernorm_rows<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    stats: &mut [T],
    cols: usize,
) {
    let eps = T::of_f64(LAYERNORM_EPS);
    let inv_n = T::one() / T::of_f64(cols as f64);
    for (r, (xr, or)) in x
        .chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .enumerate()
    {
        let mut mean = T::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        stats[2 * r] = mean;
        stats[2 * r + 1] = inv_std;
        for ((o, &v), (&g, &b)) in or.iter_mut().zip(xr).zip(gain.iter().zip(bias)) {
            *o = (v - mean) * inv_std * g + b;
        }
    }
}

pub fn layernorm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    stats: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    cols: usize,
) {
    let inv_n = T::one() / T::of_f64(cols as f64);
    let mut dgain = dgain;
    let mut dbias = dbias;
    for (r, (xr, gr)) in x.chunks_exact(cols).zip(dy.chunks_exact(cols)).enumerate() {
        let mean = stats[2 * r];
        let inv_std = stats[2 * r + 1];
        // dxhat = dy ∘ gain; dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for ((&xv, &gv), &g) in xr.iter().zip(gain).zip(gr) {
            let xh = (xv - mean) * inv_std;
            let dxh = g * gv;
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = sum_dxh_xh + dxh * xh;
        }
        let m1 = sum_dxh * inv_n;
        let m2 = sum_dxh_xh * inv_n;
        let dr = &mut dx[r * cols..(r + 1) * cols];
        for (j, (d, &xv)) in dr.iter_mut().zip(xr).enumerate() {
            let xh = (xv - mean) * inv_std;
            let dxh = gr[j] * gain[j];
            *d = *d + inv_std * (dxh - m1 - xh * m2);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for (j, dgv) in dg.iter_mut().enumerate() {
                let xh = (xr[j] - mean) * inv_std;
                *dgv = *dgv + gr[j] * xh;
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (j, dbv) in db.iter_mut().enumerate() {
                *dbv = *dbv + gr[j];
            }
        }
    }
}

/// Bilinear sampling weights for one axis under the half-pixel-center
/// convention: source coordinate `(i + 0.5)·src/dst − 0.5`, clamped.
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..dst)
        .map(|i| {
            let c = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5)
                .clamp(0.0, (src - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = c - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let mut rng = crate::rng::StreamRng::new(11, "gemm");
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // bt[n,k] = transpose of b, so A·btᵀ must equal A·B
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // at[k,m]ᵀ·B == ... reuse: gemm_tn(at, b) with at = Aᵀ gives A·B
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn_acc(&at, &b, &mut c3, k, m, n);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.0f64, 0.0, 3.0, -1.0, 2.0, 0.5];
        let mut y = vec![0.0; 6];
        softmax_rows(&x, &mut y, 3);
        assert!((y[0] + y[1] + y[2] - 1.0).abs() < 1e-12);
        assert!((y[3] + y[4] + y[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_standardizes_before_affine() {
        let mut rng = crate::rng::StreamRng::new(3, "ln");
        let cols = 16;
        let x: Vec<f64> = (0..4 * cols).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let gain = vec![1.0; cols];
        let bias = vec![0.0; cols];
        let mut y = vec![0.0; x.len()];
        let mut stats = vec![0.0; 8];
        layernorm_rows(&x, &gain, &bias, &mut y, &mut stats, cols);
        for row in y.chunks_exact(cols) {
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bilinear_axis_identity_when_same_size() {
        for (i, &(i0, _, w0, _)) in bilinear_axis(5, 5).iter().enumerate() {
            assert_eq!(i0, i);
            assert!((w0 - 1.0).abs() < 1e-12);
        }
    }
}
