//! Reconstruction methods, sweeps over sampling rate and noise, frame
//! sequences and timing.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use spi_core::acquisition::image_rng;
use spi_core::baselines::{ap_reconstruct, cgd_reconstruct, dgi_reconstruct, ista_image, IterativeConfig};
use spi_core::recovery::L2Reconstructor;
use spi_core::{acquire, build_scanning_basis, effective_matrix, EffectiveMatrix, Image, QualityScore};
use spi_core::{ScanningBasis, SparsifyingBasis};
use spi_gan::{Generator, Tensor};

use crate::config::patterns_for;
use crate::dataset::{list_files, load_image};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    L2,
    Cgd,
    Ap,
    Ista,
    Dgi,
    Gan,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::L2, Method::Cgd, Method::Ap, Method::Ista, Method::Dgi, Method::Gan];
    /// Methods that need no trained network.
    pub const CLASSICAL: [Method; 5] = [Method::L2, Method::Cgd, Method::Ap, Method::Ista, Method::Dgi];

    pub fn name(self) -> &'static str {
        match self {
            Method::L2 => "l2",
            Method::Cgd => "cgd",
            Method::Ap => "ap",
            Method::Ista => "ista",
            Method::Dgi => "dgi",
            Method::Gan => "gan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}, expected one of l2|cgd|ap|ista|dgi|gan")))
    }
}

enum Engine {
    L2(L2Reconstructor),
    Cgd(IterativeConfig),
    Ap(IterativeConfig),
    Ista(EffectiveMatrix, IterativeConfig),
    Dgi,
    Gan(L2Reconstructor, Generator),
}

/// A reconstruction method bound to one scanning basis. ISTA works in the
/// 2-D DCT basis; the neural method refines the ℓ2 estimate.
pub struct Reconstructor {
    method: Method,
    phi: ScanningBasis,
    side: usize,
    engine: Engine,
}

fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(invalid(format!("a basis over {n} pixels does not describe a square image")));
    }
    Ok(side)
}

impl Reconstructor {
    pub fn new(method: Method, phi: &ScanningBasis, generator: Option<&Generator>) -> Result<Self> {
        let side = square_side(phi.n())?;
        let identity = SparsifyingBasis::identity(side, side);
        let engine = match method {
            Method::L2 => Engine::L2(L2Reconstructor::new(phi, &identity)?),
            Method::Cgd => Engine::Cgd(IterativeConfig::cgd()),
            Method::Ap => Engine::Ap(IterativeConfig::ap()),
            Method::Ista => {
                Engine::Ista(effective_matrix(phi, &SparsifyingBasis::dct2d(side, side))?, IterativeConfig::ista())
            }
            Method::Dgi => Engine::Dgi,
            Method::Gan => {
                let g = generator.ok_or_else(|| invalid("the gan method needs a trained checkpoint"))?;
                Engine::Gan(L2Reconstructor::new(phi, &identity)?, g.clone())
            }
        };
        Ok(Self { method, phi: phi.clone(), side, engine })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn basis(&self) -> &ScanningBasis {
        &self.phi
    }

    pub fn reconstruct(&self, y: &spi_core::MeasurementVector) -> Result<Image> {
        let phi = &self.phi;
        Ok(match &self.engine {
            Engine::L2(r) => r.reconstruct(y)?.image,
            Engine::Cgd(cfg) => cgd_reconstruct(phi, y, cfg)?.image,
            Engine::Ap(cfg) => ap_reconstruct(phi, y, cfg)?.image,
            Engine::Ista(theta, cfg) => ista_image(theta, y, cfg)?.image,
            Engine::Dgi => dgi_reconstruct(phi, y)?.image,
            Engine::Gan(r, g) => {
                let x0 = r.reconstruct(y)?.image;
                let out = g.forward(&Tensor::from_images(&[x0])?)?;
                let values = out.data;
                Image::from_clipped(self.side, self.side, values)?.0
            }
        })
    }

    /// Acquires `x` with noise deviation `sigma` and reconstructs it.
    pub fn measure_and_reconstruct(&self, x: &Image, sigma: f64, rng: &mut impl rand::Rng) -> Result<Image> {
        let y = acquire(x, &self.phi, sigma, rng)?;
        self.reconstruct(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub rates: Vec<f64>,
    /// Noise levels `σ / N`.
    pub noise_levels: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            rates: vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            noise_levels: vec![1e-4, 3e-4, 5e-4, 8e-4, 1e-3, 3e-3, 8e-3, 2e-2],
            methods: Method::CLASSICAL.to_vec(),
            seeds: vec![0],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(invalid(format!("sampling rates must lie in (0, 1], got {r}")));
        }
        if let Some(l) = self.noise_levels.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(invalid(format!("noise levels must be non-negative, got {l}")));
        }
        if self.rates.is_empty() || self.noise_levels.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(invalid("sweep needs at least one rate, noise level, method and seed"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rates.len() * self.noise_levels.len() * self.methods.len() * self.seeds.len()
    }
}

/// One aggregated sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub sr: f64,
    pub noise_level: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub n: usize,
    pub extractor_mode: String,
    pub seed: u64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image scores of `recon` on `images` at noise level `noise_level`.
/// Image `i` draws its noise from stream `i` of `noise_seed`.
pub fn score_images(recon: &Reconstructor, images: &[Image], noise_level: f64, noise_seed: u64) -> Result<Vec<QualityScore>> {
    let sigma = noise_level * recon.basis().n() as f64;
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let x_hat = recon.measure_and_reconstruct(x, sigma, &mut image_rng(noise_seed, i))?;
            Ok(QualityScore::compare(x, &x_hat)?)
        })
        .collect()
}

pub fn aggregate(
    method: Method,
    sr: f64,
    noise_level: f64,
    seed: u64,
    extractor_mode: &str,
    scores: &[QualityScore],
) -> SweepRow {
    let psnr: Vec<f64> = scores.iter().map(|s| s.psnr_db).collect();
    let ssim: Vec<f64> = scores.iter().map(|s| s.ssim).collect();
    let (mean_psnr, std_psnr) = mean_std(&psnr);
    let (mean_ssim, std_ssim) = mean_std(&ssim);
    SweepRow {
        method: method.name().to_string(),
        sr,
        noise_level,
        mean_psnr,
        std_psnr,
        mean_ssim,
        std_ssim,
        n: scores.len(),
        extractor_mode: extractor_mode.to_string(),
        seed,
    }
}

/// Noise stream base for a sweep cell.
fn cell_noise_seed(seed: u64, level_index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(level_index as u64)
}

/// Supplies a generator for the neural rows, given the cell's basis and seed.
/// Returns the generator and the extractor mode it was trained with.
pub type GeneratorSource<'a> = dyn FnMut(&ScanningBasis, u64) -> Result<(Generator, String)> + 'a;

/// Scores every (method, rate, noise level, seed) cell on `test`, handing
/// each row to `sink` as soon as it is complete. One basis is drawn per
/// (rate, seed) and shared by all methods and noise levels.
pub fn run_sweep(
    test: &[Image],
    spec: &SweepSpec,
    mut neural: Option<&mut GeneratorSource<'_>>,
    mut sink: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let first = test.first().ok_or_else(|| invalid("sweep test split is empty"))?;
    let n = first.len();
    let mut rows = Vec::with_capacity(spec.cells());
    for &seed in &spec.seeds {
        for &sr in &spec.rates {
            let phi = build_scanning_basis(patterns_for(sr, n), n, seed)?;
            for &method in &spec.methods {
                let (generator, mode) = if method == Method::Gan {
                    let source = neural.as_mut().ok_or_else(|| invalid("gan rows need a checkpoint or training data"))?;
                    let (g, mode) = source(&phi, seed)?;
                    (Some(g), mode)
                } else {
                    (None, "n/a".to_string())
                };
                let recon = Reconstructor::new(method, &phi, generator.as_ref())?;
                for (li, &level) in spec.noise_levels.iter().enumerate() {
                    let scores = score_images(&recon, test, level, cell_noise_seed(seed, li))?;
                    let row = aggregate(method, sr, level, seed, &mode, &scores);
                    sink(&row)?;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

/// Appends sweep rows to a CSV stream, flushing after every row so partial
/// results survive an abort.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        Self { writer: csv::Writer::from_writer(out) }
    }

    pub fn push(&mut self, row: &SweepRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| invalid(format!("csv: {e}")))?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer.into_inner().map_err(|e| invalid(format!("csv: {}", e.error())))
    }
}

/// One line of the per-image JSON report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityRecord {
    pub image: String,
    pub method: String,
    pub sr: f64,
    pub noise_level: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl QualityRecord {
    pub fn new(image: impl Into<String>, method: Method, sr: f64, noise_level: f64, score: &QualityScore) -> Self {
        Self {
            image: image.into(),
            method: method.name().to_string(),
            sr,
            noise_level,
            psnr_db: score.psnr_db,
            ssim: score.ssim,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record fields are plain numbers and strings")
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub source: PathBuf,
    pub image: Image,
    /// Wall-clock reconstruction time.
    pub seconds: f64,
}

/// Acquires and reconstructs every decodable frame of `dir` in
/// lexicographic order. Frame `i` draws noise from stream `i` of `seed`.
pub fn reconstruct_frames(dir: &Path, recon: &Reconstructor, noise_level: f64, seed: u64) -> Result<Vec<Frame>> {
    if !dir.is_dir() {
        return Err(invalid(format!("frame directory {} does not exist", dir.display())));
    }
    let side = square_side(recon.basis().n())?;
    let sigma = noise_level * recon.basis().n() as f64;
    let mut frames = Vec::new();
    for path in list_files(dir)? {
        let x = match load_image(&path, side, side) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping frame: {e}");
                continue;
            }
        };
        let y = acquire(&x, recon.basis(), sigma, &mut image_rng(seed, frames.len()))?;
        let start = Instant::now();
        let image = recon.reconstruct(&y)?;
        frames.push(Frame { source: path, image, seconds: start.elapsed().as_secs_f64() });
    }
    if frames.is_empty() {
        return Err(invalid(format!("no decodable frames in {}", dir.display())));
    }
    Ok(frames)
}

/// Acquisition and reconstruction time per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingModel {
    pub dmd_rate: f64,
    pub patterns: usize,
    pub acquisition_s: f64,
    pub reconstruction_s: f64,
    pub total_s: f64,
    pub fps: f64,
}

impl TimingModel {
    pub fn new(patterns: usize, dmd_rate: f64, reconstruction_s: f64) -> Result<Self> {
        if !(dmd_rate > 0.0) || patterns == 0 || !(reconstruction_s >= 0.0) {
            return Err(invalid("timing needs a positive modulation rate and pattern count"));
        }
        let acquisition_s = patterns as f64 / dmd_rate;
        let total_s = acquisition_s + reconstruction_s;
        Ok(Self { dmd_rate, patterns, acquisition_s, reconstruction_s, total_s, fps: 1.0 / total_s })
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Times `n_frames` noise-free reconstructions of `frames` (cycled) and
/// reports the median.
pub fn benchmark_timing(recon: &Reconstructor, frames: &[Image], n_frames: usize, dmd_rate: f64) -> Result<TimingModel> {
    if frames.is_empty() || n_frames == 0 {
        return Err(invalid("benchmark needs at least one frame"));
    }
    let ys: Vec<_> = frames
        .iter()
        .map(|x| acquire(x, recon.basis(), 0.0, &mut image_rng(0, 0)))
        .collect::<std::result::Result<_, _>>()?;
    let mut times = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = Instant::now();
        recon.reconstruct(&ys[i % ys.len()])?;
        times.push(start.elapsed().as_secs_f64());
    }
    TimingModel::new(recon.basis().k(), dmd_rate, median(&mut times))
}
