//! Adversarial training loop.
//!
//! Per minibatch: acquire → ℓ2 reconstruction → one discriminator step → one
//! generator step. The generator output computed for the discriminator step
//! is reused by the generator step, which is exact because the discriminator
//! update does not touch the generator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spi_core::acquisition::{acquire, image_rng};
use spi_core::metrics::{psnr_from_mse, ssim, PSNR_CAP_DB, SSIM_WINDOW};
use spi_core::recovery::{L2Reconstructor, SparsifyingBasis};
use spi_core::{Image, ScanningBasis};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{invalid, Error, Result};
use crate::features::{ExtractorConfig, FeatureExtractor};
use crate::generator::{Generator, GeneratorCache, GeneratorConfig};
use crate::layers::Grads;
use crate::losses::{
    adversarial_from_probs, discriminator_bce, mse_loss, perceptual_loss_against, LossComponents, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Measurement noise level `σ / N` used while training.
    pub noise_level: f64,
    /// Noise level for the per-epoch validation pass.
    pub val_noise_level: f64,
    pub generator: GeneratorConfig,
    pub disc_base_channels: usize,
    pub disc_stages: usize,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-5,
            batch_size: 64,
            epochs: 150,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            noise_level: 0.0,
            val_noise_level: 0.0,
            generator: GeneratorConfig::default(),
            disc_base_channels: 64,
            disc_stages: 4,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(invalid("learning rate and weight decay must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !finite_nonneg(self.weights.sim) || !finite_nonneg(self.weights.adv) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !finite_nonneg(self.noise_level) || !finite_nonneg(self.val_noise_level) {
            return Err(invalid("noise levels must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("invalid Adam moments"));
        }
        self.generator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn discriminator_config(&self, height: usize, width: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.disc_base_channels,
            stages: self.disc_stages,
            height,
            width,
            seed: self.seed.wrapping_add(1),
        }
    }
}

/// Networks and optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct GanState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor,
    pub g_opt: Adam,
    pub d_opt: Adam,
}

impl GanState {
    pub fn new(cfg: &TrainConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            generator: Generator::new(cfg.generator)?,
            discriminator: Discriminator::new(cfg.discriminator_config(height, width))?,
            extractor: FeatureExtractor::new(&cfg.extractor)?,
            g_opt: Adam::new(cfg.adam()),
            d_opt: Adam::new(cfg.adam()),
        })
    }
}

/// Discriminator BCE (real = 1, fake = 0) and its parameter gradients.
pub fn discriminator_loss_and_grads(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<(f64, Grads)> {
    let (loss, grads, _) = discriminator_pass(d, real, fake)?;
    Ok((loss, grads))
}

fn discriminator_pass(
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(f64, Grads, [crate::discriminator::DiscriminatorCache; 2])> {
    if real.n() != fake.n() {
        return Err(invalid(format!("{} real vs {} fake images", real.n(), fake.n())));
    }
    let real_cache = d.forward_cached(real, true)?;
    let fake_cache = d.forward_cached(fake, true)?;
    let (loss, d_real, d_fake) = discriminator_bce(&real_cache, &fake_cache);
    if !loss.is_finite() {
        return Err(Error::NumericalFailure { layer: "discriminator loss".into() });
    }
    let (_, mut grads) = d.backward(&real_cache, &d_real, false);
    grads.merge(d.backward(&fake_cache, &d_fake, false).1);
    Ok((loss, grads, [real_cache, fake_cache]))
}

fn discriminator_update(d: &mut Discriminator, opt: &mut Adam, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (loss, grads, caches) = discriminator_pass(d, real, fake)?;
    opt.step(d, &grads);
    for c in &caches {
        d.absorb(c);
    }
    Ok(loss)
}

/// One discriminator update on `real` against `G(noisy)`; the generator is
/// only read. Returns the pre-step loss.
pub fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    g: &Generator,
    real: &Tensor,
    noisy: &Tensor,
) -> Result<f64> {
    let fake = g.forward_cached(noisy, true)?;
    discriminator_update(d, opt, real, fake.output())
}

/// Reconstruction objective for a generator pass and its gradients w.r.t.
/// the generator parameters. The discriminator runs with batch statistics
/// but its running estimates are left alone.
pub fn generator_loss_and_grads(
    g: &Generator,
    cache: &GeneratorCache,
    d: &Discriminator,
    feat: &FeatureExtractor,
    real: &Tensor,
    weights: LossWeights,
) -> Result<(LossComponents, Grads)> {
    let x_hat = cache.output();
    let mse = mse_loss(real, x_hat)?;
    let target = feat.forward(real)?;
    let sim = perceptual_loss_against(feat, &target, x_hat)?;
    let d_cache = d.forward_cached(x_hat, true)?;
    let (adv, d_logits) = adversarial_from_probs(d_cache.probs());
    let adv_grad = d.backward(&d_cache, &d_logits, true).0.expect("input gradient requested");

    let comps = LossComponents::combine(mse.value, sim.value, adv, weights);
    if !comps.total.is_finite() {
        return Err(Error::NumericalFailure { layer: "generator loss".into() });
    }
    let mut d_out = mse.grad;
    for ((o, s), a) in d_out.data.iter_mut().zip(&sim.grad.data).zip(&adv_grad.data) {
        *o += weights.sim * s + weights.adv * a;
    }
    Ok((comps, g.backward(cache, &d_out)))
}

fn generator_update(
    state: &mut GanState,
    cache: &GeneratorCache,
    real: &Tensor,
    weights: LossWeights,
) -> Result<LossComponents> {
    let (comps, grads) =
        generator_loss_and_grads(&state.generator, cache, &state.discriminator, &state.extractor, real, weights)?;
    state.g_opt.step(&mut state.generator, &grads);
    state.generator.absorb(cache);
    Ok(comps)
}

/// One generator update on the composite objective. The discriminator and
/// the feature extractor are only read. Returns the pre-step components.
pub fn generator_step(state: &mut GanState, real: &Tensor, noisy: &Tensor, weights: LossWeights) -> Result<LossComponents> {
    let cache = state.generator.forward_cached(noisy, true)?;
    generator_update(state, &cache, real, weights)
}

/// Per-epoch record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossComponents,
    pub d_loss: f64,
    pub val_psnr: f64,
    /// `None` when the images are smaller than the SSIM window.
    pub val_ssim: Option<f64>,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        let ssim = self.val_ssim.map_or("n/a".to_string(), |s| format!("{s:.4}"));
        format!(
            "epoch {} l_mse {:.6e} l_sim {:.6e} l_adv {:.6e} l_rec {:.6e} val_psnr {:.3} val_ssim {}",
            self.epoch, self.losses.mse, self.losses.sim, self.losses.adv, self.losses.total, self.val_psnr, ssim
        )
    }
}

pub struct TrainOutcome {
    /// Networks after the last fully completed epoch.
    pub state: GanState,
    pub history: Vec<EpochStats>,
    /// Set when training stopped early on non-finite values.
    pub failure: Option<Error>,
}

/// Measures and ℓ2-reconstructs a set of images; image `i` draws noise from
/// stream `i` of `seed`.
pub fn noisy_reconstructions(
    images: &[Image],
    phi: &ScanningBasis,
    recon: &L2Reconstructor,
    noise_level: f64,
    seed: u64,
) -> Result<Vec<Image>> {
    let sigma = noise_level * phi.n() as f64;
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = acquire(x, phi, sigma, &mut image_rng(seed, i))?;
            Ok(recon.reconstruct(&y)?.image)
        })
        .collect()
}

/// Mean PSNR and (when defined) SSIM of `g` applied to `inputs`.
pub fn evaluate(g: &Generator, references: &[Image], inputs: &[Image]) -> Result<(f64, Option<f64>)> {
    let out = g.forward(&Tensor::from_images(inputs)?)?.to_images()?;
    let mut psnr = 0.0;
    let mut total_ssim = 0.0;
    let with_ssim = references.first().is_some_and(|r| r.width() >= SSIM_WINDOW && r.height() >= SSIM_WINDOW);
    for (x, y) in references.iter().zip(&out) {
        psnr += psnr_from_mse(spi_core::metrics::mse(x, y)?, 1.0, PSNR_CAP_DB);
        if with_ssim {
            total_ssim += ssim(x, y)?;
        }
    }
    let n = references.len() as f64;
    Ok((psnr / n, with_ssim.then_some(total_ssim / n)))
}

/// Trains from scratch on `dataset`, validating on `validation` (or the
/// training set when it is empty). Stops early, keeping the last completed
/// epoch, if any pass produces non-finite values.
pub fn train(dataset: &[Image], validation: &[Image], phi: &ScanningBasis, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, validation, phi, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback run after every completed epoch (used to write
/// checkpoints).
pub fn train_with(
    dataset: &[Image],
    validation: &[Image],
    phi: &ScanningBasis,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&GanState, &[EpochStats]) -> Result<()>,
) -> Result<TrainOutcome> {
    let first = dataset.first().ok_or_else(|| invalid("training set is empty"))?;
    let (w, h) = (first.width(), first.height());
    if w * h != phi.n() {
        return Err(invalid(format!("{w}x{h} images do not match a basis over {} pixels", phi.n())));
    }
    let recon = L2Reconstructor::new(phi, &SparsifyingBasis::identity(w, h))?;
    let mut state = GanState::new(cfg, h, w)?;
    let validation = if validation.is_empty() { dataset } else { validation };
    let val_inputs = noisy_reconstructions(validation, phi, &recon, cfg.val_noise_level, cfg.seed ^ 0x5eed)?;

    // σ = 0 makes every epoch see the same inputs
    let fixed_inputs = if cfg.noise_level == 0.0 {
        Some(Tensor::from_images(&noisy_reconstructions(dataset, phi, &recon, 0.0, 0)?)?)
    } else {
        None
    };
    let real_all = Tensor::from_images(dataset)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = state.clone();

    for epoch in 0..cfg.epochs {
        let result = (|| -> Result<EpochStats> {
            order.shuffle(&mut shuffle_rng);
            let inputs = match &fixed_inputs {
                Some(t) => t.clone(),
                None => {
                    let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64 + 1);
                    Tensor::from_images(&noisy_reconstructions(dataset, phi, &recon, cfg.noise_level, seed)?)?
                }
            };
            let mut sums = LossComponents::default();
            let mut d_sum = 0.0;
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            for idx in &batches {
                let real = real_all.select(idx);
                let noisy = inputs.select(idx);
                let g_cache = state.generator.forward_cached(&noisy, true)?;
                d_sum += discriminator_update(&mut state.discriminator, &mut state.d_opt, &real, g_cache.output())?;
                let c = generator_update(&mut state, &g_cache, &real, cfg.weights)?;
                sums.mse += c.mse;
                sums.sim += c.sim;
                sums.adv += c.adv;
                sums.total += c.total;
            }
            let nb = batches.len() as f64;
            let (val_psnr, val_ssim) = evaluate(&state.generator, validation, &val_inputs)?;
            if !val_psnr.is_finite() {
                return Err(Error::NumericalFailure { layer: "validation".into() });
            }
            Ok(EpochStats {
                epoch: epoch + 1,
                losses: LossComponents {
                    mse: sums.mse / nb,
                    sim: sums.sim / nb,
                    adv: sums.adv / nb,
                    total: sums.total / nb,
                },
                d_loss: d_sum / nb,
                val_psnr,
                val_ssim,
            })
        })();
        match result {
            Ok(stats) => {
                log::info!("{}", stats.log_line());
                history.push(stats);
                on_epoch(&state, &history)?;
                last_good = state.clone();
            }
            Err(e @ Error::NumericalFailure { .. }) => {
                log::warn!("training aborted in epoch {}: {e}", epoch + 1);
                return Ok(TrainOutcome { state: last_good, history, failure: Some(e) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { state, history, failure: None })
}
