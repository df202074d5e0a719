//! Reconstruction objectives and their gradients.

use crate::discriminator::{Discriminator, DiscriminatorCache};
use crate::error::{invalid, Result};
use crate::features::FeatureExtractor;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// A scalar loss with its gradient w.r.t. the estimate.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sim: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sim: 6e-3, adv: 1e-3 }
    }
}

/// Values of the three terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub mse: f64,
    pub sim: f64,
    pub adv: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(mse: f64, sim: f64, adv: f64, weights: LossWeights) -> Self {
        Self { mse, sim, adv, total: total_loss(mse, sim, adv, weights) }
    }
}

/// `l_mse + λ_sim·l_sim + λ_adv·l_adv`.
pub fn total_loss(mse: f64, sim: f64, adv: f64, weights: LossWeights) -> f64 {
    mse + weights.sim * sim + weights.adv * adv
}

fn check_shapes(x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(invalid(format!("shape mismatch: {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    Ok(())
}

/// Mean over all elements of `(a − b)²`, with gradient w.r.t. `b`.
fn mean_square_diff(a: &Tensor, b: &Tensor) -> LossGrad {
    let n = a.len() as f64;
    let mut grad = b.clone();
    let mut value = 0.0;
    for (g, &av) in grad.data.iter_mut().zip(&a.data) {
        let d = *g - av;
        value += d * d;
        *g = 2.0 * d / n;
    }
    LossGrad { value: value / n, grad }
}

/// Batch mean of per-image mean squared pixel error.
pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<LossGrad> {
    check_shapes(x, x_hat)?;
    Ok(mean_square_diff(x, x_hat))
}

/// Mean squared distance between extractor features, averaged over
/// positions, channels and batch. Only `x_hat` receives a gradient.
pub fn perceptual_loss(feat: &FeatureExtractor, x: &Tensor, x_hat: &Tensor) -> Result<LossGrad> {
    check_shapes(x, x_hat)?;
    let target = feat.forward(x)?;
    perceptual_loss_against(feat, &target, x_hat)
}

/// As [`perceptual_loss`] with the reference features precomputed.
pub fn perceptual_loss_against(feat: &FeatureExtractor, target: &Tensor, x_hat: &Tensor) -> Result<LossGrad> {
    let cache = feat.forward_cached(x_hat)?;
    let LossGrad { value, grad } = mean_square_diff(target, cache.output());
    Ok(LossGrad { value, grad: feat.backward(&cache, &grad) })
}

/// `mean(−ln clamp(p))` and its derivative w.r.t. each logit.
pub fn adversarial_from_probs(probs: &[f64]) -> (f64, Vec<f64>) {
    let m = probs.len() as f64;
    let mut value = 0.0;
    let grads = probs
        .iter()
        .map(|&p| {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            value -= pc.ln();
            if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                -(1.0 - p) / m
            } else {
                0.0
            }
        })
        .collect();
    (value / m, grads)
}

/// Generator-side adversarial loss `−mean ln D(x̂)` with gradient w.r.t. `x̂`.
/// Batch-norm layers of `d` run in training mode when `train` is set.
pub fn adversarial_loss(d: &Discriminator, x_hat: &Tensor, train: bool) -> Result<LossGrad> {
    let cache = d.forward_cached(x_hat, train)?;
    let (value, d_logits) = adversarial_from_probs(cache.probs());
    let (grad, _) = d.backward(&cache, &d_logits, true);
    Ok(LossGrad { value, grad: grad.expect("input gradient requested") })
}

/// Binary cross-entropy with real = 1 and fake = 0, averaged over each batch
/// and summed, i.e. the negated discriminator ascent objective. Returns the
/// loss and the derivatives w.r.t. the real and fake logits.
pub fn discriminator_bce(real: &DiscriminatorCache, fake: &DiscriminatorCache) -> (f64, Vec<f64>, Vec<f64>) {
    let (loss_real, d_real) = adversarial_from_probs(real.probs());
    let m = fake.probs().len() as f64;
    let mut loss_fake = 0.0;
    let d_fake = fake
        .probs()
        .iter()
        .map(|&p| {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss_fake -= (1.0 - pc).ln();
            if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                p / m
            } else {
                0.0
            }
        })
        .collect();
    (loss_real + loss_fake / m, d_real, d_fake)
}
