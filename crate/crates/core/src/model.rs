//! Dual-stream grading network: two convolutional encoders at different input scales whose
//! pooled features are concatenated and classified by a small dense head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::LabeledBatch;
use crate::error::{Error, Result};
use crate::imaging::{COARSE_SIZE, FINE_SIZE};
use crate::labels::NUM_GRADES;
use crate::nn::{
    conv2d_backward_opt, conv2d_forward, conv_output_size, dense_backward, dense_forward, dropout,
    dropout_backward, global_avg_pool, global_avg_pool_backward, relu_backward, relu_in_place,
    softmax, ParamVector, Segment, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    pub hidden: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: "tiny".into(),
            hidden: 32,
            dropout: 0.3,
        }
    }
}

/// Conv stack shared by both streams: `kernel`×`kernel` valid convolutions, each
/// followed by ReLU, then global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub name: &'static str,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Backbone {
    pub fn by_name(name: &str) -> Result<Backbone> {
        match name {
            "tiny" => Ok(Backbone {
                name: "tiny",
                widths: vec![8, 16, 32],
                kernel: 3,
                stride: 2,
            }),
            other => Err(Error::UnknownBackbone(other.to_string())),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("backbone has at least one layer")
    }

    /// Spatial side after every block, for an input of side `size`.
    pub fn spatial_sizes(&self, size: usize) -> Vec<usize> {
        let mut s = size;
        self.widths
            .iter()
            .map(|_| {
                s = conv_output_size(s, self.kernel, self.stride);
                s
            })
            .collect()
    }
}

/// Names of the stream prefixes in canonical parameter order.
pub const STREAMS: [&str; 2] = ["coarse", "fine"];

#[derive(Debug, Clone)]
pub struct DualStreamModel {
    config: ModelConfig,
    backbone: Backbone,
    params: ParamVector,
    generation: u64,
}

/// Per-stream intermediates. `acts[i]` is the post-ReLU output of block `i`.
#[derive(Debug, Clone)]
struct StreamCache {
    input: Tensor,
    acts: Vec<Tensor>,
}

/// Everything [`DualStreamModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    coarse: StreamCache,
    fine: StreamCache,
    /// `[B, D_c + D_f]`, coarse features first.
    pub features: Tensor,
    hidden: Tensor,
    dropped: Tensor,
    mask: Tensor,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn conv_names(stream: &str, layer: usize) -> (String, String) {
    (
        format!("{stream}.conv{}.weight", layer + 1),
        format!("{stream}.conv{}.bias", layer + 1),
    )
}

/// Builds the model with He-uniform weights and zero biases drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<DualStreamModel> {
    let backbone = Backbone::by_name(&config.backbone)?;
    if config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config(format!(
            "model: hidden {} / dropout {} out of range",
            config.hidden, config.dropout
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = Vec::new();
    for stream in STREAMS {
        let mut in_ch = 3;
        for (i, &out_ch) in backbone.widths.iter().enumerate() {
            let (wn, bn) = conv_names(stream, i);
            let k = backbone.kernel;
            let fan_in = in_ch * k * k;
            segments.push(Segment::from_tensor(
                wn,
                he_uniform(&mut rng, &[out_ch, in_ch, k, k], fan_in),
            ));
            segments.push(Segment::from_tensor(bn, Tensor::zeros(&[out_ch])));
            in_ch = out_ch;
        }
    }
    let d = 2 * backbone.feature_dim();
    let h = config.hidden;
    segments.push(Segment::from_tensor(
        "head.fc1.weight",
        he_uniform(&mut rng, &[d, h], d),
    ));
    segments.push(Segment::from_tensor("head.fc1.bias", Tensor::zeros(&[h])));
    segments.push(Segment::from_tensor(
        "head.fc2.weight",
        he_uniform(&mut rng, &[h, NUM_GRADES], h),
    ));
    segments.push(Segment::from_tensor(
        "head.fc2.bias",
        Tensor::zeros(&[NUM_GRADES]),
    ));
    Ok(DualStreamModel {
        config: config.clone(),
        backbone,
        params: ParamVector::new(segments)?,
        generation: 0,
    })
}

impl DualStreamModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        self.generation += 1;
        &mut self.params
    }

    /// Replaces the parameters with a congruent vector.
    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_congruent(&params)?;
        self.params = params;
        self.generation += 1;
        Ok(())
    }

    /// Head input width `D_c + D_f`.
    pub fn head_input_dim(&self) -> usize {
        2 * self.backbone.feature_dim()
    }

    fn seg(&self, name: &str) -> Tensor {
        self.params
            .segment(name)
            .unwrap_or_else(|| panic!("missing parameter segment {name}"))
            .to_tensor()
    }

    fn stream_forward(&self, stream: &str, x: &Tensor) -> Result<(Tensor, StreamCache)> {
        let mut acts = Vec::with_capacity(self.backbone.widths.len());
        let mut cur = x;
        for i in 0..self.backbone.widths.len() {
            let (wn, bn) = conv_names(stream, i);
            let mut a = conv2d_forward(cur, &self.seg(&wn), &self.seg(&bn), self.backbone.stride)?;
            relu_in_place(&mut a);
            acts.push(a);
            cur = acts.last().unwrap();
        }
        let pooled = global_avg_pool(cur)?;
        Ok((
            pooled,
            StreamCache {
                input: x.clone(),
                acts,
            },
        ))
    }

    fn stream_backward(
        &self,
        stream: &str,
        cache: &StreamCache,
        grad_f: &Tensor,
        grads: &mut ParamVector,
    ) -> Result<()> {
        let last = cache.acts.last().unwrap();
        let mut g = global_avg_pool_backward(grad_f, last.shape())?;
        for i in (0..cache.acts.len()).rev() {
            g = relu_backward(&cache.acts[i], &g)?;
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.acts[i - 1]
            };
            let (wn, bn) = conv_names(stream, i);
            let cg = conv2d_backward_opt(input, &self.seg(&wn), &g, self.backbone.stride, i > 0)?;
            grads.segment_mut(&wn).unwrap().data = cg.grad_k.into_data();
            grads.segment_mut(&bn).unwrap().data = cg.grad_b.into_data();
            if let Some(gx) = cg.grad_x {
                g = gx;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, size: usize, what: &str) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != [3, size, size] {
            return Err(Error::Shape(format!(
                "{what} stream expects [B,3,{size},{size}], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Coarse stream sees `x320`, fine stream sees `x224`; features are `[f_c | f_f]`.
    pub fn forward_tensors<R: Rng + ?Sized>(
        &self,
        x224: &Tensor,
        x320: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x320, COARSE_SIZE, "coarse")?;
        self.check_input(x224, FINE_SIZE, "fine")?;
        if x224.dim(0) != x320.dim(0) {
            return Err(Error::Shape("stream batch sizes differ".into()));
        }
        let (fc, coarse) = self.stream_forward("coarse", x320)?;
        let (ff, fine) = self.stream_forward("fine", x224)?;
        let features = concat_features(&fc, &ff)?;
        let mut hidden = dense_forward(
            &features,
            &self.seg("head.fc1.weight"),
            &self.seg("head.fc1.bias"),
        )?;
        relu_in_place(&mut hidden);
        let (dropped, mask) = dropout(&hidden, self.config.dropout, rng, train)?;
        let logits = dense_forward(
            &dropped,
            &self.seg("head.fc2.weight"),
            &self.seg("head.fc2.bias"),
        )?;
        let cache = ForwardCache {
            generation: self.generation,
            coarse,
            fine,
            features,
            hidden,
            dropped,
            mask,
        };
        Ok((logits, cache))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &LabeledBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor, ForwardCache)> {
        self.forward_tensors(&batch.x224, &batch.x320, train, rng)
    }

    /// Head only, in evaluation mode, applied to precomputed `[B, D_c + D_f]` features.
    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut hidden = dense_forward(
            features,
            &self.seg("head.fc1.weight"),
            &self.seg("head.fc1.bias"),
        )?;
        relu_in_place(&mut hidden);
        dense_forward(
            &hidden,
            &self.seg("head.fc2.weight"),
            &self.seg("head.fc2.bias"),
        )
    }

    /// Logits in evaluation mode (dropout off, no rng consumed).
    pub fn predict_logits(&self, batch: &LabeledBatch) -> Result<Tensor> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, false, &mut unused)?.0)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, x224: &Tensor, x320: &Tensor) -> Result<Tensor> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = self.forward_tensors(x224, x320, false, &mut unused)?;
        softmax(&logits)
    }

    /// Gradient of `Σ grad_logits ⊙ logits` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<ParamVector> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let b = cache.features.dim(0);
        if grad_logits.shape() != [b, NUM_GRADES] {
            return Err(Error::Shape(format!(
                "grad_logits {:?}, expected [{b}, {NUM_GRADES}]",
                grad_logits.shape()
            )));
        }
        let mut grads = self.params.zeros_like();
        let w2 = self.seg("head.fc2.weight");
        let g2 = dense_backward(&cache.dropped, &w2, grad_logits)?;
        let gh = dropout_backward(&g2.grad_x, &cache.mask, self.config.dropout)?;
        let gz = relu_backward(&cache.hidden, &gh)?;
        let g1 = dense_backward(&cache.features, &self.seg("head.fc1.weight"), &gz)?;
        for (name, t) in [
            ("head.fc1.weight", g1.grad_w),
            ("head.fc1.bias", g1.grad_b),
            ("head.fc2.weight", g2.grad_w),
            ("head.fc2.bias", g2.grad_b),
        ] {
            grads.segment_mut(name).unwrap().data = t.into_data();
        }
        let (gfc, gff) = split_features(&g1.grad_x, self.backbone.feature_dim())?;
        self.stream_backward("coarse", &cache.coarse, &gfc, &mut grads)?;
        self.stream_backward("fine", &cache.fine, &gff, &mut grads)?;
        Ok(grads)
    }
}

/// `[B, Dc] ‖ [B, Df]` → `[B, Dc + Df]`.
pub fn concat_features(fc: &Tensor, ff: &Tensor) -> Result<Tensor> {
    if fc.rank() != 2 || ff.rank() != 2 || fc.dim(0) != ff.dim(0) {
        return Err(Error::Shape("feature concat".into()));
    }
    let b = fc.dim(0);
    let mut data = Vec::with_capacity(b * (fc.dim(1) + ff.dim(1)));
    for i in 0..b {
        data.extend_from_slice(fc.row(i));
        data.extend_from_slice(ff.row(i));
    }
    Tensor::new(vec![b, fc.dim(1) + ff.dim(1)], data)
}

/// Adjoint of [`concat_features`]: the first `dc` columns go to the coarse stream.
pub fn split_features(g: &Tensor, dc: usize) -> Result<(Tensor, Tensor)> {
    if g.rank() != 2 || g.dim(1) < dc {
        return Err(Error::Shape("feature split".into()));
    }
    let (b, d) = (g.dim(0), g.dim(1));
    let mut a = Vec::with_capacity(b * dc);
    let mut c = Vec::with_capacity(b * (d - dc));
    for i in 0..b {
        let row = g.row(i);
        a.extend_from_slice(&row[..dc]);
        c.extend_from_slice(&row[dc..]);
    }
    Ok((
        Tensor::new(vec![b, dc], a)?,
        Tensor::new(vec![b, d - dc], c)?,
    ))
}
