//! Dense row-major kernels shared by the forward, backward and decode paths.

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `op(a)` is `m×k`, `op(b)` is `k×n`. With `ta` set, `a` is stored as `k×m`;
/// with `tb` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertion above guarantees every index touched by the
    // given strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-row layer normalization. Writes the normalized rows into `xhat`, the
/// affine output into `out`, and returns the per-row reciprocal std.
pub(crate) fn layernorm(
    x: &[f64],
    rows: usize,
    dim: usize,
    gain: &[f64],
    bias: &[f64],
    xhat: &mut [f64],
    out: &mut [f64],
) -> Vec<f64> {
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..dim {
            let h = (row[j] - mean) * rstd;
            xhat[r * dim + j] = h;
            out[r * dim + j] = h * gain[j] + bias[j];
        }
        rstds.push(rstd);
    }
    rstds
}

/// Backward of [`layernorm`]; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    rows: usize,
    dim: usize,
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let o = r * dim;
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..dim {
            let d = dout[o + j];
            dgain[j] += d * xhat[o + j];
            dbias[j] += d;
            dxhat[j] = d * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[o + j];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        for j in 0..dim {
            dx[o + j] += rstd[r] * (dxhat[j] - mean_d - xhat[o + j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax(v)[i]` without materializing the distribution.
pub(crate) fn log_softmax_at(v: &[f64], i: usize) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v[i] - lse
}
