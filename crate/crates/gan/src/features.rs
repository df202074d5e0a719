//! Frozen perceptual feature extractor with the 19-layer VGG topology.
//!
//! The network is cut after the activation of its `k`-th convolution; if a
//! max-pool directly follows that convolution in the topology it is kept.
//!
//! Weight file layout (little-endian):
//!
//! ```text
//! "SPIF" | u32 version = 1 | u32 layers | u32 input channels
//! per layer: u32 out | u32 in | u32 kh | u32 kw | f32 weights[out·in·kh·kw] | f32 bias[out]
//! ```
//!
//! A file whose first layer takes three (RGB) channels is folded to a
//! single-channel input by summing the kernels over the colour axis.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::layers::{leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, Conv2d, Module, Param};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPIF";
const VERSION: u32 = 1;

/// Channel widths of the 16 convolutions; `None` marks a max-pool.
const VGG19: [Option<usize>; 21] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
];

pub const VGG19_CONVS: usize = 16;
pub const DEFAULT_LAYER: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    /// He-initialized weights drawn once from this seed.
    Random { seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    /// 1-based index of the last convolution kept.
    pub layer: usize,
    /// Divides every channel width of the random topology.
    pub width_divisor: usize,
    pub source: WeightSource,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { layer: DEFAULT_LAYER, width_divisor: 1, source: WeightSource::Random { seed: 2 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv(Conv2d),
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    mode: String,
}

enum StageCache {
    Conv { input: Tensor, pre_act: Tensor },
    Pool { shape: [usize; 4], argmax: Vec<usize> },
}

pub struct FeatureCache {
    stages: Vec<StageCache>,
    output: Tensor,
}

impl FeatureCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Topology entries kept for a cut after convolution `k`.
fn kept_entries(k: usize) -> Result<&'static [Option<usize>]> {
    if k == 0 || k > VGG19_CONVS {
        return Err(invalid(format!("feature layer must be in 1..={VGG19_CONVS}, got {k}")));
    }
    let mut convs = 0;
    for (i, entry) in VGG19.iter().enumerate() {
        if entry.is_some() {
            convs += 1;
            if convs == k {
                let end = if VGG19.get(i + 1) == Some(&None) { i + 2 } else { i + 1 };
                return Ok(&VGG19[..end]);
            }
        }
    }
    unreachable!()
}

impl FeatureExtractor {
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        let entries = kept_entries(config.layer)?;
        if config.width_divisor == 0 {
            return Err(invalid("width divisor must be positive"));
        }
        match &config.source {
            WeightSource::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut in_ch = 1;
                let mut idx = 0;
                let stages = entries
                    .iter()
                    .map(|entry| match entry {
                        Some(width) => {
                            idx += 1;
                            let out = (width / config.width_divisor).max(1);
                            let conv = Conv2d::new(&format!("f.conv{idx}"), in_ch, out, 3, 1, &mut rng);
                            in_ch = out;
                            Stage::Conv(conv)
                        }
                        None => Stage::Pool,
                    })
                    .collect();
                let mode = format!("random(seed={seed},width/{})", config.width_divisor);
                Ok(Self { stages, mode })
            }
            WeightSource::File(path) => Self::load(path, entries),
        }
    }

    /// Describes where the weights came from, for reports.
    pub fn mode(&self) -> &str {
        &self.mode
    }

    pub fn conv_count(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Conv(_))).count()
    }

    pub fn ends_with_pool(&self) -> bool {
        matches!(self.stages.last(), Some(Stage::Pool))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<FeatureCache> {
        if x.c() != 1 {
            return Err(invalid(format!("feature extractor expects 1 channel, got {}", x.c())));
        }
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match stage {
                Stage::Conv(conv) => {
                    let pre_act = conv.forward(&h);
                    let out = leaky_relu(&pre_act, 0.0);
                    out.check_finite(&conv.weight.name)?;
                    stages.push(StageCache::Conv { input: h, pre_act });
                    h = out;
                }
                Stage::Pool => {
                    if h.h() < 2 || h.w() < 2 {
                        return Err(invalid(format!("input too small for pooling at {}x{}", h.h(), h.w())));
                    }
                    let (out, argmax) = max_pool2(&h);
                    stages.push(StageCache::Pool { shape: h.shape(), argmax });
                    h = out;
                }
            }
        }
        Ok(FeatureCache { stages, output: h })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Gradient w.r.t. the input; the weights stay frozen.
    pub fn backward(&self, cache: &FeatureCache, d_out: &Tensor) -> Tensor {
        let mut dh = d_out.clone();
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            dh = match (stage, sc) {
                (Stage::Conv(conv), StageCache::Conv { input, pre_act }) => {
                    let d_pre = leaky_relu_backward(pre_act, &dh, 0.0);
                    conv.backward(input, &d_pre, true).0.unwrap()
                }
                (Stage::Pool, StageCache::Pool { shape, argmax }) => max_pool2_backward(*shape, argmax, &dh),
                _ => unreachable!("cache does not match topology"),
            };
        }
        dh
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Conv(c) => Some(c),
            Stage::Pool => None,
        })
    }

    /// Writes the convolution weights in the extractor file format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for v in [VERSION, self.conv_count() as u32, 1] {
            w.write_all(&v.to_le_bytes())?;
        }
        for conv in self.convs() {
            let k = conv.kernel() as u32;
            for v in [conv.out_channels() as u32, conv.in_channels() as u32, k, k] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in conv.weight.value.iter().chain(&conv.bias.value) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn load(path: &Path, entries: &[Option<usize>]) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a feature weight file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let layers = read_u32(&mut r)? as usize;
        let _input_channels = read_u32(&mut r)?;
        let needed = entries.iter().filter(|e| e.is_some()).count();
        if layers < needed {
            return Err(invalid(format!("feature file has {layers} layers, {needed} required")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stages = Vec::with_capacity(entries.len());
        let mut prev_out = 1;
        let mut idx = 0;
        for entry in entries {
            if entry.is_none() {
                stages.push(Stage::Pool);
                continue;
            }
            idx += 1;
            let dims: Vec<usize> = (0..4).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
            let (out, inp, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
            if kh != 3 || kw != 3 {
                return Err(Error::Format(format!("layer {idx}: expected 3x3 kernels, got {kh}x{kw}")));
            }
            let weights = read_f32s(&mut r, out * inp * kh * kw)?;
            let bias = read_f32s(&mut r, out)?;
            let (inp, weights) = if idx == 1 && inp != 1 {
                let mut folded = vec![0.0; out * kh * kw];
                for o in 0..out {
                    for c in 0..inp {
                        for t in 0..kh * kw {
                            folded[o * kh * kw + t] += weights[(o * inp + c) * kh * kw + t];
                        }
                    }
                }
                (1, folded)
            } else {
                (inp, weights)
            };
            if inp != prev_out {
                return Err(Error::Format(format!("layer {idx}: takes {inp} channels but receives {prev_out}")));
            }
            let mut conv = Conv2d::new(&format!("f.conv{idx}"), inp, out, 3, 1, &mut rng);
            conv.weight.value = weights;
            conv.bias.value = bias;
            prev_out = out;
            stages.push(Stage::Conv(conv));
        }
        Ok(Self { stages, mode: format!("file({})", path.display()) })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

impl Module for FeatureExtractor {
    fn params(&self) -> Vec<&Param> {
        self.convs().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages
            .iter_mut()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c),
                Stage::Pool => None,
            })
            .flat_map(|c| c.params_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layer: usize) -> ExtractorConfig {
        ExtractorConfig { layer, width_divisor: 16, source: WeightSource::Random { seed: 5 } }
    }

    #[test]
    fn cut_points_follow_topology() {
        let f = FeatureExtractor::new(&cfg(2)).unwrap();
        assert_eq!(f.conv_count(), 2);
        assert!(f.ends_with_pool());
        let f = FeatureExtractor::new(&cfg(11)).unwrap();
        assert_eq!(f.conv_count(), 11);
        assert!(!f.ends_with_pool());
        let f = FeatureExtractor::new(&cfg(16)).unwrap();
        assert!(f.ends_with_pool());
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        assert!(FeatureExtractor::new(&cfg(0)).is_err());
        assert!(FeatureExtractor::new(&cfg(17)).is_err());
    }

    #[test]
    fn output_geometry() {
        let f = FeatureExtractor::new(&cfg(11)).unwrap();
        // three pools before conv 11; width 512/16
        let y = f.forward(&Tensor::zeros(2, 1, 32, 32)).unwrap();
        assert_eq!(y.shape(), [2, 32, 4, 4]);
    }

    #[test]
    fn random_source_is_deterministic() {
        assert_eq!(FeatureExtractor::new(&cfg(4)).unwrap(), FeatureExtractor::new(&cfg(4)).unwrap());
    }

    #[test]
    fn file_round_trip_and_rgb_folding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.spif");
        let f = FeatureExtractor::new(&cfg(3)).unwrap();
        f.save(&path).unwrap();
        let cfg_file = ExtractorConfig { layer: 3, width_divisor: 1, source: WeightSource::File(path.clone()) };
        let g = FeatureExtractor::new(&cfg_file).unwrap();
        for (a, b) in f.params().iter().zip(g.params()) {
            for (u, v) in a.value.iter().zip(&b.value) {
                assert_eq!(*u as f32, *v as f32);
            }
        }
        assert!(g.mode().starts_with("file("));

        // a three-channel first layer whose kernels sum to the original
        let rgb = dir.path().join("rgb.spif");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        for v in [VERSION, 1, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [2u32, 3, 3, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for o in 0..2 {
            for c in 0..3 {
                for t in 0..9 {
                    bytes.extend_from_slice(&((o * 100 + c * 10 + t) as f32).to_le_bytes());
                }
            }
        }
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.5f32).to_le_bytes());
        std::fs::write(&rgb, bytes).unwrap();
        let cfg_rgb = ExtractorConfig { layer: 1, width_divisor: 1, source: WeightSource::File(rgb) };
        let h = FeatureExtractor::new(&cfg_rgb).unwrap();
        let w = &h.params()[0].value;
        assert_eq!(w.len(), 18);
        assert_eq!(w[0], 0.0 + 10.0 + 20.0);
        assert_eq!(w[9 + 4], (100 + 4) as f64 * 3.0 + 30.0);
    }

    #[test]
    fn short_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.spif");
        FeatureExtractor::new(&cfg(2)).unwrap().save(&path).unwrap();
        let cfg_file = ExtractorConfig { layer: 5, width_divisor: 1, source: WeightSource::File(path) };
        assert!(FeatureExtractor::new(&cfg_file).is_err());
    }
}
