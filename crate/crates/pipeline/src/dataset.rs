//! Image folders to grayscale train/validation/test splits.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spi_core::Image;

use crate::error::{invalid, Result};
use crate::synthetic::synthetic_images;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub width: usize,
    pub height: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub luma: [f64; 3],
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, size: usize, splits: [usize; 3], seed: u64) -> Self {
        Self {
            root: root.into(),
            width: size,
            height: size,
            train: splits[0],
            val: splits[1],
            test: splits[2],
            luma: LUMA,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.width.is_power_of_two() || !self.height.is_power_of_two() {
            return Err(invalid(format!("target size must be a power of two per side, got {}x{}", self.width, self.height)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Image>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

impl Splits {
    fn from_pool(mut pool: Vec<Image>, spec: &DatasetSpec, skipped: usize) -> Result<Self> {
        if pool.len() < spec.total() {
            return Err(invalid(format!(
                "requested {} images ({} / {} / {}) but only {} are available",
                spec.total(),
                spec.train,
                spec.val,
                spec.test,
                pool.len()
            )));
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        pool.truncate(spec.total());
        let test = pool.split_off(spec.train + spec.val);
        let val = pool.split_off(spec.train);
        Ok(Self { train: pool, val, test, skipped })
    }
}

/// Converts RGB floats to luma with `weights`, resizes bilinearly to
/// `width × height` and clips to `[0, 1]`.
pub fn to_grayscale(img: &image::DynamicImage, weights: [f64; 3], width: usize, height: usize) -> Result<Image> {
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let gray: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(w, h, |x, y| {
        let p = rgb.get_pixel(x, y).0;
        Luma([(weights[0] * p[0] as f64 + weights[1] * p[1] as f64 + weights[2] * p[2] as f64) as f32])
    });
    let resized = if (w as usize, h as usize) == (width, height) {
        gray
    } else {
        imageops::resize(&gray, width as u32, height as u32, FilterType::Triangle)
    };
    let values = resized.into_raw().into_iter().map(|v| v as f64).collect();
    Ok(Image::from_clipped(width, height, values)?.0)
}

/// Decodes one file into a grayscale image of the given size.
pub fn load_image(path: &Path, width: usize, height: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    to_grayscale(&img, LUMA, width, height)
}

/// Regular files of `dir` in lexicographic order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Decodes every readable image of `dir`; returns the images with their
/// paths and the number of undecodable files.
pub fn load_folder(dir: &Path, width: usize, height: usize, weights: [f64; 3]) -> Result<(Vec<(PathBuf, Image)>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for path in list_files(dir)? {
        match image::open(&path) {
            Ok(img) => out.push((path, to_grayscale(&img, weights, width, height)?)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    if !spec.root.is_dir() {
        return Err(invalid(format!("dataset root {} is not a directory", spec.root.display())));
    }
    let (images, skipped) = load_folder(&spec.root, spec.width, spec.height, spec.luma)?;
    if skipped > 0 {
        log::warn!("{skipped} undecodable files skipped in {}", spec.root.display());
    }
    Splits::from_pool(images.into_iter().map(|(_, img)| img).collect(), spec, skipped)
}

/// Splits drawn from the synthetic scene generator instead of a folder.
pub fn synthetic_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let pool = synthetic_images(spec.total(), spec.width, spec.height, spec.seed)?;
    Splits::from_pool(pool, spec, 0)
}
