//! Client-side training with the FedProx proximal term, and batched evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::FederationConfig;
use super::data::Sample;
use crate::augment::{balanced_indices_present, mixup, LabeledBatch};
use crate::error::{Error, Result};
use crate::imaging::{color_jitter, make_dual_scale, JitterConfig};
use crate::labels::{Magnification, NUM_GRADES};
use crate::metrics::MetricsReport;
use crate::model::DualStreamModel;
use crate::nn::{adam_step, softmax, softmax_xent, AdamState, ParamVector, Tensor};

/// Samples evaluated per forward pass.
pub const EVAL_BATCH: usize = 16;

/// Stacks samples into a batch, optionally colour-jittering each one first.
pub fn build_batch<R: Rng + ?Sized>(
    samples: &[&Sample],
    jitter: Option<(&JitterConfig, &mut R)>,
) -> Result<LabeledBatch> {
    let mut fine = Vec::with_capacity(samples.len());
    let mut coarse = Vec::with_capacity(samples.len());
    let mut jitter = jitter;
    for s in samples {
        let dual = match jitter.as_mut() {
            Some((cfg, rng)) => make_dual_scale(&color_jitter(&s.image, &mut **rng, cfg))?,
            None => make_dual_scale(&s.image)?,
        };
        fine.push(dual.t224);
        coarse.push(dual.t320);
    }
    let y: Vec<f32> = samples.iter().flat_map(|s| s.label().one_hot()).collect();
    LabeledBatch::new(
        Tensor::stack(&fine.iter().collect::<Vec<_>>())?,
        Tensor::stack(&coarse.iter().collect::<Vec<_>>())?,
        Tensor::new(vec![samples.len(), NUM_GRADES], y)?,
        samples.iter().map(|s| s.record.magnification).collect(),
    )
}

/// `(mu / 2)·‖w − w_t‖²`.
pub fn proximal_penalty(w: &ParamVector, anchor: &ParamVector, mu: f32) -> Result<f64> {
    let d = ParamVector::l2_dist(w, anchor)?;
    Ok(0.5 * mu as f64 * d * d)
}

/// Adds the proximal gradient `mu·(w − w_t)` to `grads` in place.
pub fn add_proximal_grad(
    grads: &mut ParamVector,
    w: &ParamVector,
    anchor: &ParamVector,
    mu: f32,
) -> Result<()> {
    grads.check_congruent(w)?;
    w.check_congruent(anchor)?;
    if mu == 0.0 {
        return Ok(());
    }
    for ((g, wv), av) in grads.values_mut().zip(w.values()).zip(anchor.values()) {
        *g += mu * (wv - av);
    }
    Ok(())
}

/// Outcome of one client's local epochs.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_k: usize,
    /// Mean data loss over all steps (excludes the proximal term).
    pub train_loss: f64,
    pub step_losses: Vec<f64>,
}

fn epoch_order(
    shard: &[&Sample],
    cfg: &FederationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if cfg.balanced_sampling {
        let labels: Vec<_> = shard.iter().map(|s| s.label()).collect();
        balanced_indices_present(&labels, shard.len(), rng)
    } else {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(rng);
        Ok(order)
    }
}

fn train_steps(
    model: &mut DualStreamModel,
    shard: &[&Sample],
    anchor: &ParamVector,
    cfg: &FederationConfig,
    rng: &mut ChaCha8Rng,
    step_losses: &mut Vec<f64>,
) -> Result<()> {
    let mut adam = AdamState::new(anchor, cfg.adam());
    for _ in 0..cfg.local_epochs {
        let order = epoch_order(shard, cfg, rng)?;
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| shard[i]).collect();
            let batch = build_batch(&picked, Some((&cfg.jitter, &mut *rng)))?;
            let batch = if cfg.mixup_alpha > 0.0 {
                mixup(&batch, cfg.mixup_alpha, rng)?
            } else {
                batch
            };
            let (logits, cache) = model.forward(&batch, true, rng)?;
            logits.check_finite("logits")?;
            let (loss, grad_logits) = softmax_xent(&logits, &batch.y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            let mut grads = model.backward(&cache, &grad_logits)?;
            add_proximal_grad(&mut grads, model.params(), anchor, cfg.mu)?;
            adam_step(model.params_mut(), &grads, &mut adam)?;
            step_losses.push(loss);
        }
    }
    if !model.params().is_finite() {
        return Err(Error::NonFinite("parameters".into()));
    }
    Ok(())
}

/// Runs `local_epochs` passes of class-balanced, MixUp-augmented mini-batches starting
/// from `global`, with Adam on `grad F_k + mu·(w − w_t)`. Non-finite values surface as
/// [`Error::ClientFailure`].
pub fn local_train(
    model: &DualStreamModel,
    shard: &[&Sample],
    global: &ParamVector,
    cfg: &FederationConfig,
    client_id: usize,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LocalResult> {
    if shard.is_empty() {
        return Err(Error::ClientFailure {
            client_id,
            round,
            cause: "empty shard".into(),
        });
    }
    let mut local = model.clone();
    local.set_params(global.clone())?;
    let mut step_losses = Vec::new();
    match train_steps(&mut local, shard, global, cfg, rng, &mut step_losses) {
        Ok(()) => {}
        Err(Error::NonFinite(what)) => {
            return Err(Error::ClientFailure {
                client_id,
                round,
                cause: format!("non-finite {what}"),
            })
        }
        Err(e) => return Err(e),
    }
    let train_loss = if step_losses.is_empty() {
        0.0
    } else {
        step_losses.iter().sum::<f64>() / step_losses.len() as f64
    };
    Ok(LocalResult {
        client_id,
        params: local.params().clone(),
        n_k: shard.len(),
        train_loss,
        step_losses,
    })
}

/// Class probabilities for every sample, in evaluation mode.
pub fn predict(model: &DualStreamModel, samples: &[&Sample]) -> Result<Vec<[f32; NUM_GRADES]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = build_batch::<ChaCha8Rng>(chunk, None)?;
        let probs = softmax(&model.predict_logits(&batch)?)?;
        for i in 0..chunk.len() {
            let r = probs.row(i);
            out.push([r[0], r[1], r[2]]);
        }
    }
    Ok(out)
}

/// Index of the largest probability; ties go to the lower grade.
pub fn argmax(p: &[f32; NUM_GRADES]) -> usize {
    (1..NUM_GRADES).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}

pub fn evaluate(model: &DualStreamModel, samples: &[&Sample]) -> Result<MetricsReport> {
    let probs = predict(model, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label().index()).collect();
    let preds: Vec<usize> = probs.iter().map(argmax).collect();
    let tags: Vec<Magnification> = samples.iter().map(|s| s.record.magnification).collect();
    MetricsReport::from_predictions(&truth, &preds, &tags)
}
