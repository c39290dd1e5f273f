//! Plain f64 re-implementation of the dual-stream forward pass, used as a finite-difference
//! oracle free of f32 rounding.

use fedpath_core::nn::ParamVector;

pub struct Tensor64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn seg(params: &ParamVector, name: &str) -> (Vec<usize>, Vec<f64>) {
    let s = params
        .segment(name)
        .unwrap_or_else(|| panic!("missing {name}"));
    (s.shape.clone(), s.data.iter().map(|&v| v as f64).collect())
}

/// Valid convolution followed by ReLU.
fn conv_relu(x: &Tensor64, k: &[f64], kshape: &[usize], bias: &[f64], stride: usize) -> Tensor64 {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (f, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    assert_eq!(kshape[1], c);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            let row = ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            let krow = ((fi * c + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += x.data[row + kx] * k[krow + kx];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
    }
    Tensor64 {
        shape: vec![b, f, oh, ow],
        data: out,
    }
}

fn stream(
    params: &ParamVector,
    name: &str,
    x: &Tensor64,
    layers: usize,
    stride: usize,
) -> Vec<Vec<f64>> {
    let mut cur = Tensor64 {
        shape: x.shape.clone(),
        data: x.data.clone(),
    };
    for i in 1..=layers {
        let (ks, k) = seg(params, &format!("{name}.conv{i}.weight"));
        let (_, b) = seg(params, &format!("{name}.conv{i}.bias"));
        cur = conv_relu(&cur, &k, &ks, &b, stride);
    }
    let (b, c) = (cur.shape[0], cur.shape[1]);
    let hw = cur.shape[2] * cur.shape[3];
    (0..b)
        .map(|bi| {
            (0..c)
                .map(|ci| {
                    let start = (bi * c + ci) * hw;
                    cur.data[start..start + hw].iter().sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect()
}

fn dense(x: &[f64], w: &[f64], wshape: &[usize], b: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (wshape[0], wshape[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|o| b[o] + (0..n_in).map(|i| x[i] * w[i * n_out + o]).sum::<f64>())
        .collect()
}

/// Mean soft-target cross-entropy of the model with the given dropout keep mask
/// (`[B, hidden]`, 0/1) and rate.
pub fn model_loss(
    params: &ParamVector,
    x224: &Tensor64,
    x320: &Tensor64,
    mask: &[f32],
    p: f64,
    targets: &[[f64; 3]],
) -> f64 {
    let coarse = stream(params, "coarse", x320, 3, 2);
    let fine = stream(params, "fine", x224, 3, 2);
    let (w1s, w1) = seg(params, "head.fc1.weight");
    let (_, b1) = seg(params, "head.fc1.bias");
    let (w2s, w2) = seg(params, "head.fc2.weight");
    let (_, b2) = seg(params, "head.fc2.bias");
    let hidden = w1s[1];
    let mut total = 0.0;
    for (bi, t) in targets.iter().enumerate() {
        let feat: Vec<f64> = coarse[bi].iter().chain(&fine[bi]).copied().collect();
        let h: Vec<f64> = dense(&feat, &w1, &w1s, &b1)
            .into_iter()
            .enumerate()
            .map(|(j, v)| v.max(0.0) * mask[bi * hidden + j] as f64 / (1.0 - p))
            .collect();
        let z = dense(&h, &w2, &w2s, &b2);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += t
            .iter()
            .zip(&z)
            .map(|(ti, zi)| ti * (lse - zi))
            .sum::<f64>();
    }
    total / targets.len() as f64
}
