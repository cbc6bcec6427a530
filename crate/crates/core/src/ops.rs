//! Forward kernels and their vector-Jacobian products.
//!
//! All kernels take FP32 row-major operands. The graph in [`crate::graph`]
//! wraps these with gradient bookkeeping; they are also usable directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `a[m×p] · b[p×n]` into a raw buffer.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, p: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[m×p] · b[n×p]ᵀ`.
pub(crate) fn matmul_t_raw(a: &[f32], b: &[f32], m: usize, p: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[p×m]ᵀ · b[p×n]`.
pub(crate) fn t_matmul_raw(a: &[f32], b: &[f32], p: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for k in 0..p {
        let arow = &a[k * m..(k + 1) * m];
        let brow = &b[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_fp32("matmul")?;
    b.require_fp32("matmul")?;
    let (m, p) = rank2("matmul", a)?;
    let (p2, n) = rank2("matmul", b)?;
    if p != p2 {
        return Err(mismatch("matmul", a, b));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, p, n))
}

/// `a · bᵀ`, both operands with the same number of columns.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_fp32("matmul_transposed")?;
    b.require_fp32("matmul_transposed")?;
    let (m, p) = rank2("matmul_transposed", a)?;
    let (n, p2) = rank2("matmul_transposed", b)?;
    if p != p2 {
        return Err(mismatch("matmul_transposed", a, b));
    }
    Tensor::new(vec![m, n], matmul_t_raw(a.data(), b.data(), m, p, n))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.require_fp32("softmax_rows")?;
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let (m, n) = x.dims2();
    let mut out = x.data().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax VJP given the softmax output `y`.
pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], n: usize) -> Vec<f32> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f32 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| silu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Per-row normalisation statistics kept for the backward pass.
pub(crate) struct NormStats {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layer_norm_raw(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    n: usize,
    eps: f32,
) -> (Vec<f32>, NormStats) {
    let m = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..n {
            let h = (row[j] - mean) * r;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gamma[j] + beta[j];
        }
    }
    (out, NormStats { xhat, rstd })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    x.require_fp32("layer_norm")?;
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (_, n) = x.dims2();
    if gamma.numel() != n || beta.numel() != n {
        return Err(mismatch("layer_norm", x, gamma));
    }
    let (out, _) = layer_norm_raw(x.data(), gamma.data(), beta.data(), n, eps);
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(
    stats: &NormStats,
    gamma: &[f32],
    dy: &[f32],
    n: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = dy.len() / n;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for i in 0..m {
        let xh = &stats.xhat[i * n..(i + 1) * n];
        let g = &dy[i * n..(i + 1) * n];
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for j in 0..n {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            let gj = g[j] * gamma[j];
            sum_g += gj;
            sum_gx += gj * xh[j];
        }
        let r = stats.rstd[i] / n as f32;
        for j in 0..n {
            let gj = g[j] * gamma[j];
            dx[i * n + j] = r * (n as f32 * gj - sum_g - xh[j] * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

fn check_kernel(k: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    Ok((k - 1) / 2)
}

/// Dense 1D convolution over the sequence axis with symmetric zero padding,
/// `kernel[k × c_in × c_out]`, output length equal to input length.
pub fn conv1d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.require_fp32("conv1d_same")?;
    let (len, c_in) = x.dims2();
    let [k, kc_in, c_out] = *kernel.shape() else {
        return Err(mismatch("conv1d_same", x, kernel));
    };
    let pad = check_kernel(k)?;
    if kc_in != c_in {
        return Err(Error::ChannelMismatch {
            input: c_in,
            kernel: kc_in,
        });
    }
    if bias.numel() != c_out {
        return Err(mismatch("conv1d_same", kernel, bias));
    }
    let out = conv1d_raw(x.data(), kernel.data(), Some(bias.data()), len, c_in, c_out, k, pad);
    Tensor::new(vec![len, c_out], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_raw(
    x: &[f32],
    kernel: &[f32],
    bias: Option<&[f32]>,
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; len * c_out];
    for t in 0..len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        if let Some(b) = bias {
            orow.copy_from_slice(b);
        }
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..c_in {
                let xv = x[src * c_in + c];
                let krow = &kernel[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                for (o, &w) in orow.iter_mut().zip(krow) {
                    *o += xv * w;
                }
            }
        }
    }
    out
}

/// Returns (dx, dkernel, dbias).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; c_out];
    for t in 0..len {
        let g = &dy[t * c_out..(t + 1) * c_out];
        for (b, &gv) in db.iter_mut().zip(g) {
            *b += gv;
        }
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..c_in {
                let base = (j * c_in + c) * c_out;
                let xv = x[src * c_in + c];
                let mut acc = 0.0;
                for o in 0..c_out {
                    acc += g[o] * kernel[base + o];
                    dk[base + o] += g[o] * xv;
                }
                dx[src * c_in + c] += acc;
            }
        }
    }
    (dx, dk, db)
}

/// Depthwise 1D convolution with a channel multiplier: each input channel `c`
/// feeds output channels `c·mult .. c·mult + mult`, `kernel[k × c × mult]`.
/// Unlike [`conv1d_same`], even kernels are accepted: the extra tap falls on
/// the right, with `⌊(k−1)/2⌋` zeros padded on the left.
pub fn conv1d_depthwise_same(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    x.require_fp32("conv1d_depthwise_same")?;
    let (len, c) = x.dims2();
    let [k, kc, mult] = *kernel.shape() else {
        return Err(mismatch("conv1d_depthwise_same", x, kernel));
    };
    let pad = (k - 1) / 2;
    if kc != c {
        return Err(Error::ChannelMismatch { input: c, kernel: kc });
    }
    Tensor::new(
        vec![len, c * mult],
        depthwise_raw(x.data(), kernel.data(), len, c, mult, k, pad),
    )
}

pub(crate) fn depthwise_raw(
    x: &[f32],
    kernel: &[f32],
    len: usize,
    c: usize,
    mult: usize,
    k: usize,
    pad: usize,
) -> Vec<f32> {
    let width = c * mult;
    let mut out = vec![0.0f32; len * width];
    for t in 0..len {
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for ch in 0..c {
                let xv = x[src * c + ch];
                for q in 0..mult {
                    out[t * width + ch * mult + q] += xv * kernel[(j * c + ch) * mult + q];
                }
            }
        }
    }
    out
}

/// Returns (dx, dkernel).
pub(crate) fn depthwise_backward(
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    len: usize,
    c: usize,
    mult: usize,
    k: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>) {
    let width = c * mult;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for t in 0..len {
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for ch in 0..c {
                let xv = x[src * c + ch];
                for q in 0..mult {
                    let g = dy[t * width + ch * mult + q];
                    let ki = (j * c + ch) * mult + q;
                    dx[src * c + ch] += g * kernel[ki];
                    dk[ki] += g * xv;
                }
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = t2(&[&[5., 6.], &[7., 8.]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = t2(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let k = 7;
        let ones_row = Tensor::full(&[1, k], 1.0);
        let ones_col = Tensor::full(&[k, 1], 1.0);
        assert_eq!(matmul(&ones_row, &ones_col).unwrap().data(), &[k as f32]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let h = Tensor::zeros(&[2, 2]).to_precision(crate::tensor::Precision::Fp16).unwrap();
        assert!(matmul(&h, &Tensor::eye(2)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t2(&[&[0., 0.]])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t2(&[&[0., 2f32.ln()]])).unwrap();
        assert!((y.data()[0] - 1. / 3.).abs() < 1e-6 && (y.data()[1] - 2. / 3.).abs() < 1e-6);
        let y = softmax_rows(&t2(&[&[1000., 0.]])).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1] < 1e-30);
        assert!(matches!(
            softmax_rows(&t2(&[&[f32::NAN, 0.]])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn silu_examples() {
        let y = silu(&Tensor::vector(vec![0.0, 1.0, -1000.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_6).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-30 && y.data()[2].is_finite());
        assert_eq!(silu_grad(0.0), 0.5);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&t2(&[&[4., 4., 4.]]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);
        let y = layer_norm(
            &t2(&[&[-1., 1.]]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let b = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let y = layer_norm(&t2(&[&[1., 9., -3.], &[0., 1., 2.]]), &zero, &b, 1e-5).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());
        assert!(layer_norm(&t2(&[&[1.]]), &Tensor::full(&[1], 1.), &Tensor::zeros(&[1]), 0.0).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let x = Tensor::new(vec![3, 1], vec![1., 2., 3.]).unwrap();
        let k = Tensor::new(vec![1, 1, 1], vec![2.]).unwrap();
        let y = conv1d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[2., 4., 6.]);

        let x = Tensor::full(&[3, 1], 1.0);
        let k = Tensor::full(&[3, 1, 1], 1.0);
        let y = conv1d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[2., 3., 2.]);

        let x = Tensor::new(vec![4, 2], vec![1., -2., 3., 0.5, 7., 1., -1., 2.]).unwrap();
        let y = conv1d_same(&x, &Tensor::zeros(&[3, 2, 3]), &Tensor::full(&[3], 1.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        assert_eq!(y.shape(), &[4, 3]);
    }

    #[test]
    fn conv1d_errors() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            conv1d_same(&x, &Tensor::zeros(&[2, 2, 1]), &Tensor::zeros(&[1])),
            Err(Error::EvenKernel(2))
        ));
        assert!(matches!(
            conv1d_same(&x, &Tensor::zeros(&[3, 3, 1]), &Tensor::zeros(&[1])),
            Err(Error::ChannelMismatch { input: 2, kernel: 3 })
        ));
    }

    #[test]
    fn identity_pointwise_kernels_are_identity() {
        let x = Tensor::new(vec![3, 2], vec![1., -2., 3., 0.5, 7., 1.]).unwrap();
        let mut k = Tensor::zeros(&[1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        assert_eq!(conv1d_same(&x, &k, &Tensor::zeros(&[2])).unwrap(), x);
        let dk = Tensor::full(&[1, 2, 1], 1.0);
        assert_eq!(conv1d_depthwise_same(&x, &dk).unwrap(), x);
    }

    #[test]
    fn depthwise_matches_dense_with_block_diagonal_kernel() {
        let (len, c, mult, k) = (5, 3, 2, 3);
        let x: Vec<f32> = (0..len * c).map(|i| (i as f32 * 0.37).sin()).collect();
        let kd: Vec<f32> = (0..k * c * mult).map(|i| (i as f32 * 0.91).cos()).collect();
        let mut dense = vec![0.0; k * c * c * mult];
        for j in 0..k {
            for ch in 0..c {
                for q in 0..mult {
                    dense[(j * c + ch) * c * mult + ch * mult + q] = kd[(j * c + ch) * mult + q];
                }
            }
        }
        let xt = Tensor::new(vec![len, c], x).unwrap();
        let a = conv1d_depthwise_same(&xt, &Tensor::new(vec![k, c, mult], kd).unwrap()).unwrap();
        let b = conv1d_same(
            &xt,
            &Tensor::new(vec![k, c, c * mult], dense).unwrap(),
            &Tensor::zeros(&[c * mult]),
        )
        .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
