use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spi_core::acquisition::image_rng;
use spi_core::{acquire, build_scanning_basis, Image, QualityScore, ScanningBasis};
use spi_gan::train::train_with;
use spi_gan::{Checkpoint, Generator};
use spi_pipeline::dataset::{load_image, DatasetSpec};
use spi_pipeline::experiments::{
    benchmark_timing, reconstruct_frames, run_sweep, score_images, CsvSink, QualityRecord, Reconstructor,
};
use spi_pipeline::{load_dataset, synthetic_dataset, Error, Method, Result, Settings, Splits, SweepSpec};

#[derive(Parser)]
#[command(name = "spi", version, about = "Single-pixel imaging simulation, reconstruction and experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "SPI_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Sampling rate K/N.
    #[arg(long, global = true)]
    sr: Option<f64>,
    /// Noise level σ/N.
    #[arg(long, global = true)]
    noise_level: Option<f64>,
    /// `random` or `file:<path>`.
    #[arg(long, global = true)]
    extractor: Option<String>,
    /// Any other setting, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save a scanning basis.
    Basis {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure an image and write the measurement vector as JSON.
    Acquire {
        image: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Measure and reconstruct an image, writing a PNG and a score line.
    Recon {
        image: PathBuf,
        #[arg(long, default_value = "l2")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the refinement network and save a checkpoint.
    Train,
    /// Score a method on the test split.
    Eval {
        #[arg(long, default_value = "gan")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep methods over sampling rates and noise levels into a CSV.
    Sweep {
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct a directory of frames.
    Video {
        frames: PathBuf,
        #[arg(long, default_value = "l2")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time a method and report acquisition, reconstruction and fps.
    Bench {
        #[arg(long, default_value = "l2")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        frames: usize,
    },
}

impl Global {
    fn settings(&self) -> Result<Settings> {
        let mut overrides: Vec<(&str, String)> = Vec::new();
        if let Some(v) = self.seed {
            overrides.push(("seed", v.to_string()));
        }
        if let Some(v) = &self.out_dir {
            overrides.push(("out_dir", v.display().to_string()));
        }
        if let Some(v) = self.sr {
            overrides.push(("sr", v.to_string()));
        }
        if let Some(v) = self.noise_level {
            overrides.push(("noise_level", v.to_string()));
        }
        if let Some(v) = &self.extractor {
            overrides.push(("extractor", v.clone()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k, v.to_string()));
        }
        Settings::resolve(self.config.as_deref(), overrides)
    }
}

fn basis_for(s: &Settings) -> Result<ScanningBasis> {
    Ok(build_scanning_basis(s.patterns(), s.pixels(), s.seed)?)
}

fn splits(s: &Settings) -> Result<Splits> {
    let root = s.data_dir.clone().unwrap_or_default();
    let spec = DatasetSpec::new(root, s.size, [s.train_count, s.val_count, s.test_count], s.seed);
    match &s.data_dir {
        Some(_) => load_dataset(&spec),
        None => synthetic_dataset(&spec),
    }
}

fn load_generator(path: Option<&Path>, method: Method) -> Result<Option<Generator>> {
    match (path, method) {
        (Some(p), _) => Ok(Some(Checkpoint::load(p)?.generator)),
        (None, Method::Gan) => Err(Error::InvalidArgument("the gan method needs --checkpoint".into())),
        (None, _) => Ok(None),
    }
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = img.pixels().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::InvalidArgument("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

fn checkpoint_path(s: &Settings) -> PathBuf {
    s.out_dir.join(format!("generator-sr{}-seed{}.spig", s.sr, s.seed))
}

fn train_generator(s: &Settings, data: &Splits, phi: &ScanningBasis, save_to: Option<&Path>) -> Result<(Generator, String)> {
    let cfg = s.train_config();
    let outcome = train_with(&data.train, &data.val, phi, &cfg, |state, history| {
        if let Some(path) = save_to {
            checkpoint(s, state.generator.clone(), state.discriminator.clone(), state.extractor.mode(), history)
                .save(path)?;
        }
        Ok(())
    })?;
    if let Some(e) = &outcome.failure {
        log::warn!("training stopped early: {e}");
    }
    let mode = outcome.state.extractor.mode().to_string();
    Ok((outcome.state.generator, mode))
}

fn checkpoint(
    s: &Settings,
    generator: Generator,
    discriminator: spi_gan::Discriminator,
    mode: &str,
    history: &[spi_gan::EpochStats],
) -> Checkpoint {
    let notes = [
        ("sr", s.sr.to_string()),
        ("seed", s.seed.to_string()),
        ("noise_level", s.noise_level.to_string()),
        ("size", s.size.to_string()),
        ("learning_rate", s.learning_rate.to_string()),
        ("extractor_mode", mode.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Checkpoint { generator, discriminator, notes, history: history.to_vec() }
}

fn run(cli: Cli) -> Result<()> {
    let s = cli.global.settings()?;
    fs::create_dir_all(&s.out_dir)?;
    match cli.command {
        Command::Basis { out } => {
            let phi = basis_for(&s)?;
            let path = out.unwrap_or_else(|| s.out_dir.join(format!("basis-sr{}-seed{}.spib", s.sr, s.seed)));
            phi.save(&path)?;
            println!("{}", path.display());
        }
        Command::Acquire { image, basis } => {
            let phi = match basis {
                Some(p) => ScanningBasis::load(p)?,
                None => basis_for(&s)?,
            };
            let side = (phi.n() as f64).sqrt().round() as usize;
            let x = load_image(&image, side, side)?;
            let y = acquire(&x, &phi, s.noise_level * phi.n() as f64, &mut image_rng(s.seed, 0))?;
            let path = s.out_dir.join(format!("{}.measurements.json", stem(&image)));
            let body = serde_json::json!({
                "values": y.values,
                "noise_sigma": y.noise_sigma,
                "noise_level": y.noise_level,
            });
            fs::write(&path, body.to_string())?;
            println!("{}", path.display());
        }
        Command::Recon { image, method, checkpoint } => {
            let phi = basis_for(&s)?;
            let generator = load_generator(checkpoint.as_deref(), method)?;
            let recon = Reconstructor::new(method, &phi, generator.as_ref())?;
            let x = load_image(&image, s.size, s.size)?;
            let x_hat = recon.measure_and_reconstruct(&x, s.sigma(), &mut image_rng(s.seed, 0))?;
            let out = s.out_dir.join(format!("{}-{method}.png", stem(&image)));
            save_png(&x_hat, &out)?;
            let score = QualityScore::compare(&x, &x_hat)?;
            let line = QualityRecord::new(image.display().to_string(), method, s.sr, s.noise_level, &score).to_json_line();
            append_line(&s.out_dir.join("scores.jsonl"), &line)?;
            println!("{line}");
        }
        Command::Train => {
            let data = splits(&s)?;
            let phi = basis_for(&s)?;
            let path = checkpoint_path(&s);
            train_generator(&s, &data, &phi, Some(&path))?;
            println!("{}", path.display());
        }
        Command::Eval { method, checkpoint } => {
            let data = splits(&s)?;
            let phi = basis_for(&s)?;
            let path = checkpoint.unwrap_or_else(|| checkpoint_path(&s));
            let generator = load_generator((method == Method::Gan).then_some(path.as_path()), method)?;
            let recon = Reconstructor::new(method, &phi, generator.as_ref())?;
            let scores = score_images(&recon, &data.test, s.noise_level, s.seed)?;
            let jsonl = s.out_dir.join(format!("eval-{method}.jsonl"));
            let mut lines = String::new();
            for (i, score) in scores.iter().enumerate() {
                lines += &QualityRecord::new(format!("test/{i}"), method, s.sr, s.noise_level, score).to_json_line();
                lines.push('\n');
            }
            fs::write(&jsonl, lines)?;
            let row = spi_pipeline::experiments::aggregate(method, s.sr, s.noise_level, s.seed, "n/a", &scores);
            let mut sink = CsvSink::new(std::io::stdout());
            sink.push(&row)?;
        }
        Command::Sweep { methods, rates, levels, seeds, checkpoint } => {
            let defaults = SweepSpec::default();
            let spec = SweepSpec {
                methods: methods.unwrap_or(defaults.methods),
                rates: rates.unwrap_or(defaults.rates),
                noise_levels: levels.unwrap_or(defaults.noise_levels),
                seeds: seeds.unwrap_or(defaults.seeds),
            };
            let data = splits(&s)?;
            let loaded = match &checkpoint {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            let mut source = |phi: &ScanningBasis, seed: u64| -> Result<(Generator, String)> {
                match &loaded {
                    Some(c) => {
                        let mode = c.notes.get("extractor_mode").cloned().unwrap_or_else(|| "unknown".into());
                        Ok((c.generator.clone(), mode))
                    }
                    None => {
                        let mut cell = s.clone();
                        cell.seed = seed;
                        train_generator(&cell, &data, phi, None)
                    }
                }
            };
            let path = s.out_dir.join("sweep.csv");
            let mut sink = CsvSink::new(BufWriter::new(File::create(&path)?));
            run_sweep(&data.test, &spec, Some(&mut source), |row| sink.push(row))?;
            sink.into_inner()?.flush()?;
            println!("{}", path.display());
        }
        Command::Video { frames, method, checkpoint } => {
            let phi = basis_for(&s)?;
            let generator = load_generator(checkpoint.as_deref(), method)?;
            let recon = Reconstructor::new(method, &phi, generator.as_ref())?;
            let out = reconstruct_frames(&frames, &recon, s.noise_level, s.seed)?;
            let dir = s.out_dir.join("frames");
            fs::create_dir_all(&dir)?;
            let mut timing = String::from("frame,source,seconds\n");
            for (i, f) in out.iter().enumerate() {
                save_png(&f.image, &dir.join(format!("{i:05}.png")))?;
                timing += &format!("{i},{},{}\n", f.source.display(), f.seconds);
            }
            let path = s.out_dir.join("video_timing.csv");
            fs::write(&path, timing)?;
            println!("{} frames, timing in {}", out.len(), path.display());
        }
        Command::Bench { method, checkpoint, frames } => {
            let phi = basis_for(&s)?;
            let generator = load_generator(checkpoint.as_deref(), method)?;
            let recon = Reconstructor::new(method, &phi, generator.as_ref())?;
            let samples = spi_pipeline::synthetic::synthetic_images(frames.clamp(1, 8), s.size, s.size, s.seed)?;
            let t = benchmark_timing(&recon, &samples, frames, s.dmd_rate)?;
            let line = serde_json::to_string(&serde_json::json!({ "method": method.name(), "timing": t }))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            append_line(&s.out_dir.join("timing.jsonl"), &line)?;
            println!("{line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
