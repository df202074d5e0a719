//! Walsh pattern generation and the persisted scanning-basis format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

const BASIS_MAGIC: &[u8; 4] = b"SPIB";
const BASIS_VERSION: u32 = 1;

/// Sylvester–Hadamard matrix of the given order. Entries are ±1.
pub fn hadamard(order: usize) -> Result<DMatrix<f64>> {
    if !order.is_power_of_two() {
        return Err(invalid(format!("hadamard order must be a power of two, got {order}")));
    }
    Ok(DMatrix::from_fn(order, order, |r, c| walsh_sign(r, c)))
}

// Entry (r, c) of the Sylvester construction is (-1)^popcount(r & c).
fn walsh_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `K×N` matrix of illumination patterns. Each row is a 0/1 Walsh row scaled
/// to unit Euclidean norm.
#[derive(Debug, Clone)]
pub struct ScanningBasis {
    rows: DMatrix<f64>,
    seed: Option<u64>,
    walsh_rows: Option<Vec<usize>>,
}

/// Builds `K` randomly permuted, normalized 0/1 Walsh patterns over `N` pixels.
///
/// The permutation is drawn from a ChaCha8 stream seeded with `seed`, so the
/// result is fully determined by `(k, n, seed)`. The all-ones row may be among
/// the selected patterns.
pub fn build_scanning_basis(k: usize, n: usize, seed: u64) -> Result<ScanningBasis> {
    if !n.is_power_of_two() {
        return Err(invalid(format!("pixel count must be a power of two, got {n}")));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("measurement count must lie in [1, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(k);

    let mut rows = DMatrix::zeros(k, n);
    for (i, &walsh) in order.iter().enumerate() {
        let ones = (0..n).filter(|&c| walsh_sign(walsh, c) > 0.0).count();
        let value = 1.0 / (ones as f64).sqrt();
        for c in 0..n {
            if walsh_sign(walsh, c) > 0.0 {
                rows[(i, c)] = value;
            }
        }
    }
    Ok(ScanningBasis { rows, seed: Some(seed), walsh_rows: Some(order) })
}

impl ScanningBasis {
    /// Wraps an explicit pattern matrix after checking the basis invariants:
    /// unit-norm rows, entries in `{0, c_row}` with `c_row > 0`, distinct rows
    /// and `1 ≤ K ≤ N`.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        let (k, n) = rows.shape();
        if k == 0 || k > n {
            return Err(invalid(format!("basis must have 1 ≤ K ≤ N, got {k}x{n}")));
        }
        for r in 0..k {
            let row = rows.row(r);
            let mut level = None;
            for &v in row.iter() {
                if !v.is_finite() || v < 0.0 {
                    return Err(invalid(format!("row {r} has entry {v}")));
                }
                if v > 0.0 {
                    match level {
                        None => level = Some(v),
                        Some(c) if c != v => {
                            return Err(invalid(format!("row {r} mixes levels {c} and {v}")))
                        }
                        _ => {}
                    }
                }
            }
            let norm = row.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("row {r} has norm {norm}, expected 1")));
            }
        }
        for a in 0..k {
            for b in a + 1..k {
                if rows.row(a) == rows.row(b) {
                    return Err(invalid(format!("rows {a} and {b} are identical")));
                }
            }
        }
        Ok(Self { rows, seed: None, walsh_rows: None })
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n(&self) -> usize {
        self.rows.ncols()
    }

    pub fn sampling_rate(&self) -> f64 {
        self.k() as f64 / self.n() as f64
    }

    /// Permutation seed, when the basis was generated rather than loaded.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Indices of the selected rows in the unpermuted Sylvester matrix.
    pub fn walsh_rows(&self) -> Option<&[usize]> {
        self.walsh_rows.as_deref()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// `Φ·x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n(), "Φ·x dimension mismatch");
        (&self.rows * DVector::from_column_slice(x)).data.into()
    }

    /// `Φᵀ·y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.k(), "Φᵀ·y dimension mismatch");
        self.rows.tr_mul(&DVector::from_column_slice(y)).data.into()
    }

    /// Writes the `SPIB` format: magic, version, K, N (all u32 LE after the
    /// magic) followed by `K·N` little-endian f32 values in row-major order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BASIS_MAGIC)?;
        for v in [BASIS_VERSION, to_u32(self.k())?, to_u32(self.n())?] {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in 0..self.k() {
            for c in 0..self.n() {
                w.write_all(&(self.rows[(r, c)] as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Reads the `SPIB` format. Rows are renormalized in double precision
    /// since the stored entries are single precision.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BASIS_MAGIC {
            return Err(Error::Format(format!("bad basis magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != BASIS_VERSION {
            return Err(Error::Format(format!("unsupported basis version {version}")));
        }
        let k = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let mut buf = vec![0u8; k * n * 4];
        r.read_exact(&mut buf)?;
        let mut rows = DMatrix::from_fn(k, n, |row, col| {
            let at = (row * n + col) * 4;
            f32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as f64
        });
        for mut row in rows.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Self::from_matrix(rows)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit the u32 header field")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
