//! Central finite-difference checks of the analytic gradients.
//!
//! Each check builds a small network from a seed, evaluates the analytic
//! gradient once and compares sampled coordinates against
//! `(f(θ + h) − f(θ − h)) / 2h`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::Result;
use crate::features::{ExtractorConfig, FeatureExtractor, WeightSource};
use crate::generator::{Generator, GeneratorConfig};
use crate::layers::{Grads, Module};
use crate::losses::{adversarial_loss, mse_loss, perceptual_loss, LossWeights};
use crate::tensor::Tensor;
use crate::train::{discriminator_loss_and_grads, generator_loss_and_grads};

pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
}

fn indices(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count >= len {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, count).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks the input gradient of `f` at `count` sampled entries of `x`.
fn check_input(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    count: usize,
    rng: &mut impl Rng,
    f: impl Fn(&Tensor) -> Result<f64>,
) -> Result<GradReport> {
    let mut report = GradReport::default();
    for j in indices(x.len(), count, rng) {
        let mut xp = x.clone();
        xp.data[j] += STEP;
        let mut xm = x.clone();
        xm.data[j] -= STEP;
        let numeric = (f(&xp)? - f(&xm)?) / (2.0 * STEP);
        report.record(|| format!("{name}[{j}]"), analytic.data[j], numeric);
    }
    Ok(report)
}

/// Checks parameter gradients of `module` under `f`, sampling up to
/// `per_kind` coordinates for every parameter kind (the name suffix after
/// the last dot, e.g. `weight`, `gamma`, `slope`).
fn check_params<M: Module + Clone>(
    module: &M,
    grads: &Grads,
    per_kind: usize,
    rng: &mut impl Rng,
    f: impl Fn(&M) -> Result<f64>,
) -> Result<GradReport> {
    let mut kinds: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (pi, p) in module.params().iter().enumerate() {
        let kind = p.name.rsplit('.').next().unwrap_or(&p.name).to_string();
        let coords = (0..p.len()).map(|c| (pi, c));
        match kinds.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, v)) => v.extend(coords),
            None => kinds.push((kind, coords.collect())),
        }
    }
    let mut report = GradReport::default();
    let mut probe = module.clone();
    for (_, coords) in kinds {
        for i in indices(coords.len(), per_kind, rng) {
            let (pi, c) = coords[i];
            let name = module.params()[pi].name.clone();
            let analytic = grads.get(&name).map_or(0.0, |g| g[c]);
            let orig = probe.params()[pi].value[c];
            probe.params_mut()[pi].value[c] = orig + STEP;
            let fp = f(&probe)?;
            probe.params_mut()[pi].value[c] = orig - STEP;
            let fm = f(&probe)?;
            probe.params_mut()[pi].value[c] = orig;
            report.record(|| format!("{name}[{c}]"), analytic, (fp - fm) / (2.0 * STEP));
        }
    }
    Ok(report)
}

fn tiny_extractor(layer: usize, seed: u64) -> Result<FeatureExtractor> {
    FeatureExtractor::new(&ExtractorConfig { layer, width_divisor: 16, source: WeightSource::Random { seed } })
}

fn tiny_discriminator(side: usize, seed: u64) -> Result<Discriminator> {
    Discriminator::new(DiscriminatorConfig { base_channels: 2, stages: 2, height: side, width: side, seed })
}

/// Pixel MSE gradient w.r.t. the estimate.
pub fn check_mse(seed: u64, count: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([2, 1, 8, 8], &mut rng);
    let x_hat = random_tensor([2, 1, 8, 8], &mut rng);
    let g = mse_loss(&x, &x_hat)?.grad;
    check_input("mse.x_hat", &x_hat, &g, count, &mut rng, |t| Ok(mse_loss(&x, t)?.value))
}

/// Perceptual loss gradient w.r.t. the estimate on 8×8 inputs with a cut
/// after convolution `layer`.
pub fn check_perceptual(seed: u64, layer: usize, count: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = tiny_extractor(layer, seed)?;
    let x = random_tensor([1, 1, 8, 8], &mut rng);
    let x_hat = random_tensor([1, 1, 8, 8], &mut rng);
    let g = perceptual_loss(&feat, &x, &x_hat)?.grad;
    check_input("perceptual.x_hat", &x_hat, &g, count, &mut rng, |t| Ok(perceptual_loss(&feat, &x, t)?.value))
}

/// Adversarial pathway: the generator-side loss w.r.t. its input, and the
/// discriminator BCE w.r.t. sampled discriminator parameters on a
/// one-image batch.
pub fn check_adversarial(seed: u64, count: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tiny_discriminator(8, seed)?;
    let x_hat = random_tensor([2, 1, 8, 8], &mut rng);
    let g = adversarial_loss(&d, &x_hat, true)?.grad;
    let mut report =
        check_input("adversarial.x_hat", &x_hat, &g, count, &mut rng, |t| Ok(adversarial_loss(&d, t, true)?.value))?;

    let real = random_tensor([1, 1, 8, 8], &mut rng);
    let fake = random_tensor([1, 1, 8, 8], &mut rng);
    let (_, grads) = discriminator_loss_and_grads(&d, &real, &fake)?;
    report.merge(check_params(&d, &grads, count / 4, &mut rng, |d| {
        Ok(discriminator_loss_and_grads(d, &real, &fake)?.0)
    })?);
    Ok(report)
}

/// Discriminator BCE w.r.t. the final-layer bias on a one-image batch.
pub fn check_discriminator_bias(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tiny_discriminator(8, seed)?;
    let real = random_tensor([1, 1, 8, 8], &mut rng);
    let fake = random_tensor([1, 1, 8, 8], &mut rng);
    let (_, grads) = discriminator_loss_and_grads(&d, &real, &fake)?;
    let analytic = grads.get("d.fc.bias").map_or(0.0, |g| g[0]);
    let mut probe = d.clone();
    probe.head.bias.value[0] += STEP;
    let fp = discriminator_loss_and_grads(&probe, &real, &fake)?.0;
    probe.head.bias.value[0] -= 2.0 * STEP;
    let fm = discriminator_loss_and_grads(&probe, &real, &fake)?.0;
    let mut report = GradReport::default();
    report.record(|| "d.fc.bias[0]".to_string(), analytic, (fp - fm) / (2.0 * STEP));
    Ok(report)
}

/// Gradient of the composite generator objective for every parameter kind
/// of an `F = 4`, `B = 1` generator on an 8×8 batch of two.
pub fn check_generator(seed: u64, per_kind: usize, skip_enabled: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(GeneratorConfig { features: 4, blocks: 1, skip_enabled, seed })?;
    let d = tiny_discriminator(8, seed + 1)?;
    let feat = tiny_extractor(2, seed + 2)?;
    let real = random_tensor([2, 1, 8, 8], &mut rng);
    let noisy = random_tensor([2, 1, 8, 8], &mut rng);
    // larger weights on the auxiliary terms so their gradients are not
    // swamped by the pixel term
    let weights = LossWeights { sim: 0.5, adv: 0.1 };
    let objective = |g: &Generator| -> Result<f64> {
        let cache = g.forward_cached(&noisy, true)?;
        Ok(generator_loss_and_grads(g, &cache, &d, &feat, &real, weights)?.0.total)
    };
    let cache = g.forward_cached(&noisy, true)?;
    let (_, grads) = generator_loss_and_grads(&g, &cache, &d, &feat, &real, weights)?;
    check_params(&g, &grads, per_kind, &mut rng, objective)
}
