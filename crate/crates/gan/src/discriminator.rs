//! Convolutional real/fake classifier `D`.
//!
//! Each stage `s` has width `base · 2^s`: a stride-1 3×3 conv followed by a
//! stride-2 3×3 conv, each with leaky rectification. Every conv except the
//! very first is followed by batch-norm. A single linear layer maps the
//! flattened features to one logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::layers::{
    leaky_relu, leaky_relu_backward, sigmoid, BatchNorm2d, BnCache, Buffer, Conv2d, Grads, Linear, Module,
    Param,
};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Smallest distance kept between an output probability and 0 or 1.
pub const PROB_MARGIN: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, stages: 4, height: 64, width: 64, seed: 1 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.stages == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(format!("discriminator dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvUnit {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    units: Vec<ConvUnit>,
    pub head: Linear,
}

struct UnitCache {
    input: Tensor,
    bn: Option<BnCache>,
    pre_act: Tensor,
}

pub struct DiscriminatorCache {
    units: Vec<UnitCache>,
    features: Tensor,
    logits: Vec<f64>,
    probs: Vec<f64>,
    train: bool,
}

impl DiscriminatorCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Output probabilities, strictly inside (0, 1).
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut units = Vec::with_capacity(2 * config.stages);
        let (mut h, mut w, mut in_ch) = (config.height, config.width, 1);
        for s in 0..config.stages {
            let ch = config.base_channels << s;
            for (j, stride) in [1, 2].into_iter().enumerate() {
                let name = format!("d.stage{s}.conv{j}");
                let conv = Conv2d::new(&name, in_ch, ch, 3, stride, &mut rng);
                (h, w) = conv.out_size(h, w);
                let bn = (s > 0 || j > 0).then(|| BatchNorm2d::new(&format!("d.stage{s}.bn{j}"), ch));
                units.push(ConvUnit { conv, bn });
                in_ch = ch;
            }
        }
        let head = Linear::new("d.fc", in_ch * h * w, 1, &mut rng);
        Ok(Self { config, units, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn forward_cached(&self, x: &Tensor, train: bool) -> Result<DiscriminatorCache> {
        if x.c() != 1 || x.h() != self.config.height || x.w() != self.config.width {
            return Err(invalid(format!(
                "discriminator expects Nx1x{}x{}, got {:?}",
                self.config.height,
                self.config.width,
                x.shape()
            )));
        }
        x.check_finite("discriminator input")?;
        let mut h = x.clone();
        let mut units = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let a = unit.conv.forward(&h);
            let (pre_act, bn) = match &unit.bn {
                Some(layer) => {
                    let (y, c) = layer.forward(&a, train);
                    (y, Some(c))
                }
                None => (a, None),
            };
            let out = leaky_relu(&pre_act, LEAKY_SLOPE);
            out.check_finite(&unit.conv.weight.name)?;
            units.push(UnitCache { input: h, bn, pre_act });
            h = out;
        }
        let logits = self.head.forward(&h).data;
        if logits.iter().any(|z| z.is_nan()) {
            return Err(crate::error::Error::NumericalFailure { layer: "d.fc".into() });
        }
        let probs = logits.iter().map(|&z| sigmoid(z).clamp(PROB_MARGIN, 1.0 - PROB_MARGIN)).collect();
        Ok(DiscriminatorCache { units, features: h, logits, probs, train })
    }

    /// Probabilities in inference mode.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, false)?.probs)
    }

    /// Backpropagates gradients w.r.t. the logits. The input gradient is
    /// computed only when `need_dx` is set.
    pub fn backward(&self, cache: &DiscriminatorCache, d_logits: &[f64], need_dx: bool) -> (Option<Tensor>, Grads) {
        let mut grads = Grads::default();
        let dz = Tensor::from_vec([d_logits.len(), 1, 1, 1], d_logits.to_vec()).unwrap();
        let (mut dh, g) = self.head.backward(&cache.features, &dz);
        grads.merge(g);
        for (i, (unit, uc)) in self.units.iter().zip(&cache.units).enumerate().rev() {
            let d_pre = leaky_relu_backward(&uc.pre_act, &dh, LEAKY_SLOPE);
            let d_conv = match (&unit.bn, &uc.bn) {
                (Some(layer), Some(c)) => {
                    let (d, g) = layer.backward(c, &d_pre);
                    grads.merge(g);
                    d
                }
                _ => d_pre,
            };
            let want_dx = need_dx || i > 0;
            let (d_in, g) = unit.conv.backward(&uc.input, &d_conv, want_dx);
            grads.merge(g);
            match d_in {
                Some(d) => dh = d,
                None => return (None, grads),
            }
        }
        (Some(dh), grads)
    }

    pub fn absorb(&mut self, cache: &DiscriminatorCache) {
        if !cache.train {
            return;
        }
        for (unit, uc) in self.units.iter_mut().zip(&cache.units) {
            if let (Some(bn), Some(c)) = (&mut unit.bn, &uc.bn) {
                bn.absorb(c);
            }
        }
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for u in &self.units {
            out.extend(u.conv.params());
            if let Some(bn) = &u.bn {
                out.extend(bn.params());
            }
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for u in &mut self.units {
            out.extend(u.conv.params_mut());
            if let Some(bn) = &mut u.bn {
                out.extend(bn.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    fn buffers(&self) -> Vec<Buffer> {
        self.units.iter().filter_map(|u| u.bn.as_ref()).flat_map(|bn| bn.buffers()).collect()
    }

    fn set_buffer(&mut self, name: &str, value: &[f64]) -> bool {
        self.units.iter_mut().filter_map(|u| u.bn.as_mut()).any(|bn| bn.set_buffer(name, value))
    }
}
