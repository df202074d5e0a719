//! Residual reconstruction network `G`.
//!
//! `head → B × residual block → bridge (+ head skip) → tail → sigmoid`.
//! With `skip_enabled = false` both the per-block and the global skip
//! connections are removed; the parameter set is unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::layers::{sigmoid, BatchNorm2d, BnCache, Buffer, Conv2d, Grads, Module, PRelu, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Channel width `F`.
    pub features: usize,
    /// Number of residual blocks `B`.
    pub blocks: usize,
    pub skip_enabled: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { features: 64, blocks: 14, skip_enabled: true, seed: 0 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(invalid("generator width must be positive"));
        }
        Ok(())
    }

    /// Head, residual blocks, bridge and tail.
    pub fn conv_blocks(&self) -> usize {
        self.blocks + 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub act: PRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    pub head: Conv2d,
    pub head_act: PRelu,
    pub blocks: Vec<ResidualBlock>,
    pub bridge: Conv2d,
    pub bridge_bn: BatchNorm2d,
    pub tail: Conv2d,
}

struct BlockCache {
    input: Tensor,
    bn1: BnCache,
    n1: Tensor,
    p1: Tensor,
    bn2: BnCache,
}

/// Intermediate activations of one forward pass.
pub struct GeneratorCache {
    input: Tensor,
    head_pre: Tensor,
    blocks: Vec<BlockCache>,
    trunk: Tensor,
    bridge_bn: BnCache,
    bridge_out: Tensor,
    output: Tensor,
    train: bool,
}

impl GeneratorCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let f = config.features;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head = Conv2d::new("g.head", 1, f, 9, 1, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| ResidualBlock {
                conv1: Conv2d::new(&format!("g.block{b}.conv1"), f, f, 3, 1, &mut rng),
                bn1: BatchNorm2d::new(&format!("g.block{b}.bn1"), f),
                act: PRelu::new(&format!("g.block{b}.act"), f),
                conv2: Conv2d::new(&format!("g.block{b}.conv2"), f, f, 3, 1, &mut rng),
                bn2: BatchNorm2d::new(&format!("g.block{b}.bn2"), f),
            })
            .collect();
        Ok(Self {
            config,
            head,
            head_act: PRelu::new("g.head_act", f),
            blocks,
            bridge: Conv2d::new("g.bridge", f, f, 3, 1, &mut rng),
            bridge_bn: BatchNorm2d::new("g.bridge_bn", f),
            tail: Conv2d::new("g.tail", f, 1, 9, 1, &mut rng),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn forward_cached(&self, x: &Tensor, train: bool) -> Result<GeneratorCache> {
        if x.c() != 1 {
            return Err(invalid(format!("generator expects 1 channel, got {}", x.c())));
        }
        x.check_finite("generator input")?;
        let skip = self.config.skip_enabled;
        let head_pre = self.head.forward(x);
        let head_out = self.head_act.forward(&head_pre);
        head_out.check_finite("g.head")?;

        let mut h = head_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let a1 = block.conv1.forward(&h);
            let (n1, bn1) = block.bn1.forward(&a1, train);
            let p1 = block.act.forward(&n1);
            let a2 = block.conv2.forward(&p1);
            let (mut out, bn2) = block.bn2.forward(&a2, train);
            if skip {
                out.add_assign(&h);
            }
            out.check_finite(&format!("g.block{b}"))?;
            blocks.push(BlockCache { input: h, bn1, n1, p1, bn2 });
            h = out;
        }

        let bridge_pre = self.bridge.forward(&h);
        let (mut bridge_out, bridge_bn) = self.bridge_bn.forward(&bridge_pre, train);
        if skip {
            bridge_out.add_assign(&head_out);
        }
        bridge_out.check_finite("g.bridge")?;
        let logits = self.tail.forward(&bridge_out);
        logits.check_finite("g.tail")?;
        let output = logits.map(sigmoid);
        Ok(GeneratorCache {
            input: x.clone(),
            head_pre,
            blocks,
            trunk: h,
            bridge_bn,
            bridge_out,
            output,
            train,
        })
    }

    /// Inference with running batch-norm statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x, false)?.output)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the sigmoid output).
    pub fn backward(&self, cache: &GeneratorCache, d_out: &Tensor) -> Grads {
        let skip = self.config.skip_enabled;
        let mut grads = Grads::default();
        let mut d_logits = d_out.clone();
        for (d, y) in d_logits.data.iter_mut().zip(&cache.output.data) {
            *d *= y * (1.0 - y);
        }
        let (d_bridge_out, g) = self.tail.backward(&cache.bridge_out, &d_logits, true);
        grads.merge(g);
        let d_bridge_out = d_bridge_out.unwrap();
        let (d_bridge_pre, g) = self.bridge_bn.backward(&cache.bridge_bn, &d_bridge_out);
        grads.merge(g);
        let (d_trunk, g) = self.bridge.backward(&cache.trunk, &d_bridge_pre, true);
        grads.merge(g);
        let mut dh = d_trunk.unwrap();

        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (d_a2, g) = block.bn2.backward(&bc.bn2, &dh);
            grads.merge(g);
            let (d_p1, g) = block.conv2.backward(&bc.p1, &d_a2, true);
            grads.merge(g);
            let (d_n1, g) = block.act.backward(&bc.n1, &d_p1.unwrap());
            grads.merge(g);
            let (d_a1, g) = block.bn1.backward(&bc.bn1, &d_n1);
            grads.merge(g);
            let (d_in, g) = block.conv1.backward(&bc.input, &d_a1, true);
            grads.merge(g);
            let mut d_in = d_in.unwrap();
            if skip {
                d_in.add_assign(&dh);
            }
            dh = d_in;
        }

        if skip {
            dh.add_assign(&d_bridge_out);
        }
        let (d_head_pre, g) = self.head_act.backward(&cache.head_pre, &dh);
        grads.merge(g);
        let (_, g) = self.head.backward(&cache.input, &d_head_pre, false);
        grads.merge(g);
        grads
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates.
    pub fn absorb(&mut self, cache: &GeneratorCache) {
        if !cache.train {
            return;
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn1.absorb(&bc.bn1);
            block.bn2.absorb(&bc.bn2);
        }
        self.bridge_bn.absorb(&cache.bridge_bn);
    }

    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut out: Vec<&BatchNorm2d> = self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2]).collect();
        out.push(&self.bridge_bn);
        out
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.head.params();
        out.extend(self.head_act.params());
        for b in &self.blocks {
            out.extend(b.conv1.params());
            out.extend(b.bn1.params());
            out.extend(b.act.params());
            out.extend(b.conv2.params());
            out.extend(b.bn2.params());
        }
        out.extend(self.bridge.params());
        out.extend(self.bridge_bn.params());
        out.extend(self.tail.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.head.params_mut();
        out.extend(self.head_act.params_mut());
        for b in &mut self.blocks {
            out.extend(b.conv1.params_mut());
            out.extend(b.bn1.params_mut());
            out.extend(b.act.params_mut());
            out.extend(b.conv2.params_mut());
            out.extend(b.bn2.params_mut());
        }
        out.extend(self.bridge.params_mut());
        out.extend(self.bridge_bn.params_mut());
        out.extend(self.tail.params_mut());
        out
    }

    fn buffers(&self) -> Vec<Buffer> {
        self.batch_norms().into_iter().flat_map(|bn| bn.buffers()).collect()
    }

    fn set_buffer(&mut self, name: &str, value: &[f64]) -> bool {
        let mut bns: Vec<&mut BatchNorm2d> =
            self.blocks.iter_mut().flat_map(|b| [&mut b.bn1, &mut b.bn2]).collect();
        bns.push(&mut self.bridge_bn);
        bns.into_iter().any(|bn| bn.set_buffer(name, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(skip: bool) -> Generator {
        Generator::new(GeneratorConfig { features: 4, blocks: 2, skip_enabled: skip, seed: 11 }).unwrap()
    }

    fn random_input(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 1, side, side], (0..n * side * side).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let g = tiny(true);
        let x = random_input(2, 8, 0);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn inference_is_deterministic() {
        let a = tiny(true).forward(&random_input(1, 8, 1)).unwrap();
        let b = tiny(true).forward(&random_input(1, 8, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_block_count() {
        assert_eq!(GeneratorConfig::default().conv_blocks(), 17);
    }

    #[test]
    fn skip_toggle_keeps_parameter_count() {
        assert_eq!(tiny(true).param_count(), tiny(false).param_count());
        assert_ne!(tiny(true).forward(&random_input(1, 8, 2)).unwrap(), tiny(false).forward(&random_input(1, 8, 2)).unwrap());
    }

    #[test]
    fn rejects_multichannel_input() {
        let x = Tensor::zeros(1, 2, 8, 8);
        assert!(tiny(true).forward(&x).is_err());
    }

    #[test]
    fn non_finite_input_is_reported() {
        let mut x = random_input(1, 8, 3);
        x.data[5] = f64::NAN;
        let err = tiny(true).forward(&x).unwrap_err();
        assert!(err.to_string().contains("generator input"));
    }

    #[test]
    fn parameter_names_are_unique() {
        let g = tiny(true);
        let mut names: Vec<&str> = g.params().iter().map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}
