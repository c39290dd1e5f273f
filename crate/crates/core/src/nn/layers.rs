//! Forward and backward passes for the layer types used by the grading model.
//!
//! Every op takes owned or borrowed [`Tensor`]s and returns fresh buffers. Convolutions
//! lower each sample to an im2col matrix and hand the product to `sgemm`; dense layers are
//! small enough that plain loops are faster than packing.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of a dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

/// Gradients of a convolution. `grad_x` is `None` when the caller asked to skip it.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_x: Option<Tensor>,
    pub grad_k: Tensor,
    pub grad_b: Tensor,
}

fn check_dense(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank(2, "dense input")?;
    w.expect_rank(2, "dense weight")?;
    let (batch, inputs) = (x.dim(0), x.dim(1));
    if w.dim(0) != inputs {
        return Err(Error::Shape(format!(
            "dense: input width {} vs weight rows {}",
            inputs,
            w.dim(0)
        )));
    }
    Ok((batch, inputs, w.dim(1)))
}

/// `out[b,o] = Σ_i x[b,i]·w[i,o] + bias[o]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, _, outputs) = check_dense(x, w)?;
    if bias.shape() != [outputs] {
        return Err(Error::Shape(format!(
            "dense: bias {:?} vs {} outputs",
            bias.shape(),
            outputs
        )));
    }
    let mut out = vec![0.0f32; batch * outputs];
    let wd = w.data();
    for b in 0..batch {
        let row = &mut out[b * outputs..(b + 1) * outputs];
        row.copy_from_slice(bias.data());
        for (i, &xv) in x.row(b).iter().enumerate() {
            let wrow = &wd[i * outputs..(i + 1) * outputs];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(vec![batch, outputs], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (batch, inputs, outputs) = check_dense(x, w)?;
    if grad_out.shape() != [batch, outputs] {
        return Err(Error::Shape(format!(
            "dense backward: grad_out {:?}, expected [{batch}, {outputs}]",
            grad_out.shape()
        )));
    }
    let wd = w.data();
    let mut grad_w = vec![0.0f32; inputs * outputs];
    let mut grad_b = vec![0.0f32; outputs];
    let mut grad_x = vec![0.0f32; batch * inputs];
    for b in 0..batch {
        let g = grad_out.row(b);
        for (gb, &gv) in grad_b.iter_mut().zip(g) {
            *gb += gv;
        }
        let xr = x.row(b);
        for i in 0..inputs {
            let wrow = &wd[i * outputs..(i + 1) * outputs];
            let gw = &mut grad_w[i * outputs..(i + 1) * outputs];
            let mut acc = 0.0f32;
            for o in 0..outputs {
                gw[o] += xr[i] * g[o];
                acc += g[o] * wrow[o];
            }
            grad_x[b * inputs + i] = acc;
        }
    }
    Ok(DenseGrads {
        grad_x: Tensor::new(vec![batch, inputs], grad_x)?,
        grad_w: Tensor::new(vec![inputs, outputs], grad_w)?,
        grad_b: Tensor::new(vec![outputs], grad_b)?,
    })
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

fn conv_geom(x: &Tensor, k: &Tensor, stride: usize) -> Result<ConvGeom> {
    x.expect_rank(4, "conv input")?;
    k.expect_rank(4, "conv kernel")?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    let (batch, channels, height, width) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (filters, kc, kh, kw) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
    if kc != channels {
        return Err(Error::Shape(format!(
            "conv: kernel expects {kc} channels, input has {channels}"
        )));
    }
    if kh > height || kw > width || kh == 0 || kw == 0 {
        return Err(Error::Shape(format!(
            "conv: kernel {kh}x{kw} does not fit input {height}x{width}"
        )));
    }
    Ok(ConvGeom {
        batch,
        channels,
        height,
        width,
        filters,
        kh,
        kw,
        stride,
        out_h: conv_output_size(height, kh, stride),
        out_w: conv_output_size(width, kw, stride),
    })
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let src = &plane[(oy * g.stride + i) * g.width + j..];
                    let dst = &mut col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox * g.stride];
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f32], x: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let base = (oy * g.stride + i) * g.width + j;
                    let src = &col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &s) in src.iter().enumerate() {
                        plane[base + ox * g.stride] += s;
                    }
                }
            }
        }
    }
}

/// Eight-lane dot product so the compiler can keep the accumulators in one vector register.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover every index reached by the strides.
    unsafe {
        matrixmultiply::sgemm(
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

/// Valid cross-correlation: `x [B,C,H,W]`, `k [F,C,kh,kw]`, `bias [F]` → `[B,F,OH,OW]`.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom(x, k, stride)?;
    if bias.shape() != [g.filters] {
        return Err(Error::Shape(format!(
            "conv: bias {:?} vs {} filters",
            bias.shape(),
            g.filters
        )));
    }
    let (p, kl) = (g.positions(), g.patch_len());
    let mut out = vec![0.0f32; g.batch * g.filters * p];
    let mut col = vec![0.0f32; kl * p];
    for b in 0..g.batch {
        im2col(&g, x.sample(b), &mut col);
        let ob = &mut out[b * g.filters * p..(b + 1) * g.filters * p];
        gemm(
            g.filters,
            kl,
            p,
            k.data(),
            (kl as isize, 1),
            &col,
            (p as isize, 1),
            0.0,
            ob,
        );
        for (f, plane) in ob.chunks_exact_mut(p).enumerate() {
            let bv = bias.data()[f];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d_forward`].
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    conv2d_backward_opt(x, k, grad_out, stride, true)
}

/// Same as [`conv2d_backward`], optionally skipping the input gradient (first layer).
pub fn conv2d_backward_opt(
    x: &Tensor,
    k: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    want_grad_x: bool,
) -> Result<ConvGrads> {
    let g = conv_geom(x, k, stride)?;
    if grad_out.shape() != [g.batch, g.filters, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "conv backward: grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [g.batch, g.filters, g.out_h, g.out_w]
        )));
    }
    let (p, kl) = (g.positions(), g.patch_len());
    let mut grad_k = vec![0.0f32; g.filters * kl];
    let mut grad_b = vec![0.0f64; g.filters];
    let mut grad_x = if want_grad_x {
        Some(vec![0.0f32; g.batch * g.input_len()])
    } else {
        None
    };
    let mut col = vec![0.0f32; kl * p];
    let mut grad_col = if want_grad_x {
        vec![0.0f32; kl * p]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let go = grad_out.sample(b);
        for (f, plane) in go.chunks_exact(p).enumerate() {
            grad_b[f] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        im2col(&g, x.sample(b), &mut col);
        // grad_k[F, KL] += grad_out[F, P] · colᵀ[P, KL]; both operands are row-contiguous
        // along P, so plain dot products beat a gemm with a long inner dimension here.
        for (gk_row, go_row) in grad_k.chunks_exact_mut(kl).zip(go.chunks_exact(p)) {
            for (gk, col_row) in gk_row.iter_mut().zip(col.chunks_exact(p)) {
                *gk += dot(go_row, col_row);
            }
        }
        if let Some(gx) = grad_x.as_mut() {
            // grad_col[KL, P] = kᵀ[KL, F] · grad_out[F, P]
            gemm(
                kl,
                g.filters,
                p,
                k.data(),
                (1, kl as isize),
                go,
                (p as isize, 1),
                0.0,
                &mut grad_col,
            );
            let len = g.input_len();
            col2im_add(&g, &grad_col, &mut gx[b * len..(b + 1) * len]);
        }
    }
    Ok(ConvGrads {
        grad_x: grad_x
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        grad_k: Tensor::new(k.shape().to_vec(), grad_k)?,
        grad_b: Tensor::new(
            vec![g.filters],
            grad_b.into_iter().map(|v| v as f32).collect(),
        )?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Passes `grad_out` where `x > 0`; the subgradient at exactly zero is zero.
///
/// `x` may be either the pre-activation or the ReLU output, the mask is the same.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Inverted dropout. Returns the output and the 0/1 keep mask.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    p: f32,
    rng: &mut R,
    train: bool,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {p} outside [0, 1)"
        )));
    }
    if !train || p == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), 1.0)));
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.random::<f32>() < keep {
            1.0
        } else {
            0.0
        }
    });
    let y = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| v * m * scale)
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), y)?, mask))
}

pub fn dropout_backward(grad_out: &Tensor, mask: &Tensor, p: f32) -> Result<Tensor> {
    if grad_out.shape() != mask.shape() {
        return Err(Error::Shape("dropout backward: mask shape".into()));
    }
    let scale = 1.0 / (1.0 - p);
    let data = grad_out
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| g * m * scale)
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

/// `[B,C,H,W]` → `[B,C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(4, "global_avg_pool input")?;
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
    }
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::Shape(format!(
            "global_avg_pool backward: grad {:?} vs input {:?}",
            grad_out.shape(),
            input_shape
        )));
    }
    let hw = input_shape[2] * input_shape[3];
    let inv = 1.0 / hw as f32;
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax input")?;
    let k = logits.dim(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean soft-target cross-entropy and its gradient `(softmax − t)/B`.
pub fn softmax_xent(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "logits")?;
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "softmax_xent: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let (batch, k) = (logits.dim(0), logits.dim(1));
    for (i, row) in targets.data().chunks_exact(k).enumerate() {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "target row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    let inv_b = 1.0 / batch as f64;
    for (row, t) in logits
        .data()
        .chunks_exact(k)
        .zip(targets.data().chunks_exact(k))
    {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let shifted: Vec<f64> = row.iter().map(|&v| v as f64 - max).collect();
        let log_z = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
        for (s, &tv) in shifted.iter().zip(t) {
            let log_p = s - log_z;
            if tv > 0.0 {
                loss -= tv as f64 * log_p;
            }
            grad.push(((log_p.exp() - tv as f64) * inv_b) as f32);
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![batch, k], grad)?))
}
