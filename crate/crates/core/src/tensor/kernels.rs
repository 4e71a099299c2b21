//! Raw slice kernels shared by the tape's forward and backward passes.
//! Reductions accumulate in f64.

/// `out[n×m] = a[n×k] · b[k×m]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    batched_matmul(a, b, 1, n, k, m, false, out);
}

/// `batch` independent products `a[i]·b[i]`, or `a[i]·b` when `shared_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul(
    a: &[f32],
    b: &[f32],
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    shared_b: bool,
    out: &mut [f32],
) {
    if shared_b {
        // Rows are independent, so the batch folds into one tall product.
        return single(a, b, batch * n, k, m, out);
    }
    for i in 0..batch {
        single(
            &a[i * n * k..(i + 1) * n * k],
            &b[i * k * m..(i + 1) * k * m],
            n,
            k,
            m,
            &mut out[i * n * m..(i + 1) * n * m],
        );
    }
}

fn single(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if m == 1 {
        for i in 0..n {
            out[i] = dot(&a[i * k..(i + 1) * k], b) as f32;
        }
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { avx2::matmul(a, b, n, k, m, out) };
        return;
    }
    portable(a, b, n, k, m, out);
}

fn portable(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    for i in (0..n).step_by(4) {
        for j0 in (0..m).step_by(8) {
            tile(a, &b64, i, j0, n, k, m, out);
        }
    }
}

// One block of at most 4 rows × 8 columns of the output. Each element
// accumulates its k products in order, in f64, with separate multiply and
// add so that the vector path below rounds identically.
#[allow(clippy::too_many_arguments)]
fn tile(a: &[f32], b64: &[f64], i: usize, j0: usize, n: usize, k: usize, m: usize, out: &mut [f32]) {
    let rows = (n - i).min(4);
    let w = (m - j0).min(8);
    let mut acc = [[0f64; 8]; 4];
    for p in 0..k {
        let brow = &b64[p * m + j0..p * m + j0 + w];
        for (r, row) in acc.iter_mut().enumerate().take(rows) {
            let x = a[(i + r) * k + p] as f64;
            for (s, &y) in row.iter_mut().zip(brow) {
                *s += x * y;
            }
        }
    }
    for (r, row) in acc.iter().enumerate().take(rows) {
        for (d, &v) in out[(i + r) * m + j0..(i + r) * m + j0 + w].iter_mut().zip(row) {
            *d = v as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let (full_rows, full_cols) = (n / 4 * 4, m / 8 * 8);
        for i in (0..full_rows).step_by(4) {
            for j0 in (0..full_cols).step_by(8) {
                full_tile(a, &b64, i, j0, k, m, out);
            }
            for j0 in (full_cols..m).step_by(8) {
                super::tile(a, &b64, i, j0, n, k, m, out);
            }
        }
        for i in (full_rows..n).step_by(4) {
            for j0 in (0..m).step_by(8) {
                super::tile(a, &b64, i, j0, n, k, m, out);
            }
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn full_tile(a: &[f32], b64: &[f64], i: usize, j0: usize, k: usize, m: usize, out: &mut [f32]) {
        assert!(k == 0 || ((i + 4) * k <= a.len() && (k - 1) * m + j0 + 8 <= b64.len()));
        let mut acc = [_mm256_setzero_pd(); 8];
        let bp = b64.as_ptr();
        let ap = a.as_ptr();
        for p in 0..k {
            let b0 = _mm256_loadu_pd(bp.add(p * m + j0));
            let b1 = _mm256_loadu_pd(bp.add(p * m + j0 + 4));
            for r in 0..4 {
                let x = _mm256_set1_pd(*ap.add((i + r) * k + p) as f64);
                acc[2 * r] = _mm256_add_pd(acc[2 * r], _mm256_mul_pd(x, b0));
                acc[2 * r + 1] = _mm256_add_pd(acc[2 * r + 1], _mm256_mul_pd(x, b1));
            }
        }
        for r in 0..4 {
            let o = out[(i + r) * m + j0..(i + r) * m + j0 + 8].as_mut_ptr();
            _mm_storeu_ps(o, _mm256_cvtpd_ps(acc[2 * r]));
            _mm_storeu_ps(o.add(4), _mm256_cvtpd_ps(acc[2 * r + 1]));
        }
    }
}

pub(crate) fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Decompose `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along a strided axis.
pub(crate) fn softmax(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0f64;
            for j in 0..len {
                denom += ((x[idx(j)] - max) as f64).exp();
            }
            for j in 0..len {
                out[idx(j)] = (((x[idx(j)] - max) as f64).exp() / denom) as f32;
            }
        }
    }
    out
}

/// `log Σ exp(row)` computed with max subtraction.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner) as f32
}
