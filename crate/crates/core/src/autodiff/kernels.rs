//! Plain loops behind the differentiable primitives.

// Thin wrappers over `dgemm`; transposes are expressed through strides.
// Every call accumulates into `c` (beta = 1).

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    gemm(m, n, k, g, (n, 1), b, (1, n), c);
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(k, m, n, a, (1, k), g, (n, 1), c);
}

/// Below this many multiply-adds the packing done by `dgemm` costs more
/// than it saves.
const SMALL_GEMM: usize = 512;

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * sa.0 + p * sa.1];
                for j in 0..n {
                    c[i * n + j] += aip * b[p * sb.0 + j * sb.1];
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders the axes of a row-major array: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
