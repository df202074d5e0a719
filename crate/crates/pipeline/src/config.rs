//! Run settings.
//!
//! Values come from three layers: built-in defaults, a flat `key=value`
//! config file (`#` starts a comment), and command-line flags. Later layers
//! win. Keys accept `-` or `_` interchangeably.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use spi_gan::{ExtractorConfig, GeneratorConfig, LossWeights, TrainConfig, WeightSource};

use crate::error::{invalid, Result};

/// Where perceptual-extractor weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorSpec {
    Random,
    File(PathBuf),
}

impl FromStr for ExtractorSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            _ => match s.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(Self::File(PathBuf::from(path))),
                _ => Err(invalid(format!("extractor must be `random` or `file:<path>`, got {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sr: f64,
    pub noise_level: f64,
    pub extractor: ExtractorSpec,
    pub extractor_layer: usize,
    pub extractor_divisor: usize,
    /// Image side length.
    pub size: usize,
    /// Image directory; `None` selects the synthetic generator.
    pub data_dir: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda_sim: f64,
    pub lambda_adv: f64,
    pub features: usize,
    pub blocks: usize,
    pub skip: bool,
    pub disc_base: usize,
    pub disc_stages: usize,
    pub dmd_rate: f64,
}

/// Full-scale split sizes, scaled by [`DESK_FRACTION`] by default.
pub const FULL_SPLITS: [usize; 3] = [40_000, 3_000, 2_000];
pub const DESK_FRACTION: f64 = 0.005;

impl Default for Settings {
    fn default() -> Self {
        let scaled = |n: usize| ((n as f64 * DESK_FRACTION).round() as usize).max(1);
        let train = TrainConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("spi-out"),
            sr: 0.25,
            noise_level: 0.0,
            extractor: ExtractorSpec::Random,
            extractor_layer: 11,
            extractor_divisor: 1,
            size: 64,
            data_dir: None,
            train_count: scaled(FULL_SPLITS[0]),
            val_count: scaled(FULL_SPLITS[1]),
            test_count: scaled(FULL_SPLITS[2]),
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            lambda_sim: train.weights.sim,
            lambda_adv: train.weights.adv,
            features: train.generator.features,
            blocks: train.generator.blocks,
            skip: true,
            disc_base: train.disc_base_channels,
            disc_stages: train.disc_stages,
            dmd_rate: 20_000.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| invalid(format!("bad value for {key}: {value:?}")))
}

impl Settings {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse(&key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "sr" => self.sr = parse(&key, v)?,
            "noise_level" => self.noise_level = parse(&key, v)?,
            "extractor" => self.extractor = v.parse()?,
            "extractor_layer" => self.extractor_layer = parse(&key, v)?,
            "extractor_divisor" => self.extractor_divisor = parse(&key, v)?,
            "size" => self.size = parse(&key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_count" => self.train_count = parse(&key, v)?,
            "val_count" => self.val_count = parse(&key, v)?,
            "test_count" => self.test_count = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "weight_decay" => self.weight_decay = parse(&key, v)?,
            "lambda_sim" => self.lambda_sim = parse(&key, v)?,
            "lambda_adv" => self.lambda_adv = parse(&key, v)?,
            "features" => self.features = parse(&key, v)?,
            "blocks" => self.blocks = parse(&key, v)?,
            "skip" => self.skip = parse(&key, v)?,
            "disc_base" => self.disc_base = parse(&key, v)?,
            "disc_stages" => self.disc_stages = parse(&key, v)?,
            "dmd_rate" => self.dmd_rate = parse(&key, v)?,
            _ => return Err(invalid(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Defaults, then the config file (if any), then `overrides` in order.
    pub fn resolve<'a>(
        config: Option<&Path>,
        overrides: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut s = Self::default();
        if let Some(path) = config {
            s.apply_file(path)?;
        }
        for (k, v) in overrides {
            s.set(k, &v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sr > 0.0 && self.sr <= 1.0) {
            return Err(invalid(format!("sampling rate must be in (0, 1], got {}", self.sr)));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(invalid(format!("noise level must be non-negative, got {}", self.noise_level)));
        }
        if !self.size.is_power_of_two() {
            return Err(invalid(format!("image size must be a power of two, got {}", self.size)));
        }
        if !(self.dmd_rate > 0.0) {
            return Err(invalid("dmd rate must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// Pattern count `K = round(sr · N)`, at least 1.
    pub fn patterns(&self) -> usize {
        patterns_for(self.sr, self.pixels())
    }

    /// Noise deviation `σ = noise_level · N`.
    pub fn sigma(&self) -> f64 {
        self.noise_level * self.pixels() as f64
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            layer: self.extractor_layer,
            width_divisor: self.extractor_divisor,
            source: match &self.extractor {
                ExtractorSpec::Random => WeightSource::Random { seed: self.seed.wrapping_add(2) },
                ExtractorSpec::File(p) => WeightSource::File(p.clone()),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            weights: LossWeights { sim: self.lambda_sim, adv: self.lambda_adv },
            seed: self.seed,
            noise_level: self.noise_level,
            generator: GeneratorConfig {
                features: self.features,
                blocks: self.blocks,
                skip_enabled: self.skip,
                seed: self.seed,
            },
            disc_base_channels: self.disc_base,
            disc_stages: self.disc_stages,
            extractor: self.extractor_config(),
            ..TrainConfig::default()
        }
    }
}

pub fn patterns_for(sr: f64, n: usize) -> usize {
    ((sr * n as f64).round() as usize).clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_overrides_config_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# desk run\nsr = 0.3\nseed=4  # trailing comment\n\nnoise-level=1e-3\n").unwrap();
        let s = Settings::resolve(Some(&path), [("sr", "0.1".to_string())]).unwrap();
        assert_eq!(s.sr, 0.1);
        assert_eq!(s.seed, 4);
        assert_eq!(s.noise_level, 1e-3);
        assert_eq!(s.size, 64);
        let s = Settings::resolve(Some(&path), []).unwrap();
        assert_eq!(s.sr, 0.3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut s = Settings::default();
        assert!(s.apply_text("bogus=1").is_err());
        assert!(s.apply_text("sr").is_err());
        assert!(s.set("seed", "minus one").is_err());
        assert!(Settings::resolve(None, [("sr", "1.5".to_string())]).is_err());
        assert!(Settings::resolve(None, [("size", "48".to_string())]).is_err());
    }

    #[test]
    fn extractor_spec_parsing() {
        assert_eq!("random".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Random);
        assert_eq!("file:w.spif".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::File("w.spif".into()));
        assert!("file:".parse::<ExtractorSpec>().is_err());
        assert!("vgg".parse::<ExtractorSpec>().is_err());
    }

    #[test]
    fn derived_quantities() {
        let mut s = Settings::default();
        s.sr = 0.15;
        assert_eq!(s.patterns(), 614);
        s.noise_level = 1e-3;
        assert!((s.sigma() - 4.096).abs() < 1e-12);
        assert_eq!(s.train_count, 200);
        assert_eq!(s.test_count, 10);
    }
}
