//! Closed-form minimum ℓ2-norm recovery.
//!
//! For `Θ = ΦΨ` with `K < N` the system `Θs = y` is underdetermined and the
//! smallest-norm consistent coefficient vector is `ŝ = Θᵀ(ΘΘᵀ)⁻¹y`. The Gram
//! matrix `ΘΘᵀ` is only `K×K`, so it is factored once per basis and reused for
//! every image.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::acquisition::MeasurementVector;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::walsh::ScanningBasis;

/// Diagonal jitter added to the Gram matrix before factorization.
pub const GRAM_JITTER: f64 = 1e-10;
const REFINEMENT_PASSES: usize = 2;
// Upper bound on the (diagonal-ratio) condition estimate of the jittered Gram
// matrix; anything above means the jitter, not the data, sets the solution.
const MAX_GRAM_CONDITION: f64 = 1e9;

/// Orthonormal basis `Ψ` in which the image is expanded, `x = Ψs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsifyingBasis {
    Identity { width: usize, height: usize },
    /// Separable orthonormal DCT-II; columns of `Ψ` are the 2-D cosine images.
    Dct2d { width: usize, height: usize },
}

impl SparsifyingBasis {
    pub fn identity(width: usize, height: usize) -> Self {
        Self::Identity { width, height }
    }

    pub fn dct2d(width: usize, height: usize) -> Self {
        Self::Dct2d { width, height }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity { .. } => "identity",
            Self::Dct2d { .. } => "dct2d",
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match *self {
            Self::Identity { width, height } | Self::Dct2d { width, height } => (width, height),
        }
    }

    pub fn n(&self) -> usize {
        let (w, h) = self.shape();
        w * h
    }

    /// `x = Ψs`.
    pub fn synthesize(&self, s: &[f64]) -> Vec<f64> {
        assert_eq!(s.len(), self.n());
        match *self {
            Self::Identity { .. } => s.to_vec(),
            Self::Dct2d { width, height } => {
                // x = C_Hᵀ S C_W
                let s = DMatrix::from_row_slice(height, width, s);
                let x = dct_matrix(height).transpose() * s * dct_matrix(width);
                row_major(&x)
            }
        }
    }

    /// `s = Ψᵀx`.
    pub fn analyze(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n());
        match *self {
            Self::Identity { .. } => x.to_vec(),
            Self::Dct2d { width, height } => {
                let x = DMatrix::from_row_slice(height, width, x);
                let s = dct_matrix(height) * x * dct_matrix(width).transpose();
                row_major(&s)
            }
        }
    }

    /// Dense `N×N` matrix, column `j` being `Ψe_j`. Meant for small `N`.
    pub fn materialize(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut psi = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            psi.set_column(j, &DVector::from_vec(self.synthesize(&e)));
            e[j] = 0.0;
        }
        psi
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Orthonormal DCT-II matrix, `C[k][i] = α_k cos(π(2i+1)k / 2n)`.
fn dct_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, i| {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

/// `Θ = ΦΨ` with a note of where it came from.
#[derive(Debug, Clone)]
pub struct EffectiveMatrix {
    theta: DMatrix<f64>,
    pub basis: SparsifyingBasis,
    pub phi_seed: Option<u64>,
}

impl EffectiveMatrix {
    /// Wraps an arbitrary sensing matrix; used when `Θ` does not come from a
    /// scanning basis (synthetic sparse-recovery problems, tests).
    pub fn from_matrix(theta: DMatrix<f64>, basis: SparsifyingBasis) -> Result<Self> {
        if theta.ncols() != basis.n() {
            return Err(invalid(format!(
                "matrix has {} columns but the basis dimension is {}",
                theta.ncols(),
                basis.n()
            )));
        }
        Ok(Self { theta, basis, phi_seed: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn k(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n(&self) -> usize {
        self.theta.ncols()
    }
}

pub fn effective_matrix(phi: &ScanningBasis, psi: &SparsifyingBasis) -> Result<EffectiveMatrix> {
    if phi.n() != psi.n() {
        return Err(invalid(format!("basis has {} pixels but Ψ is {}-dimensional", phi.n(), psi.n())));
    }
    let theta = match psi {
        SparsifyingBasis::Identity { .. } => phi.matrix().clone(),
        SparsifyingBasis::Dct2d { .. } => {
            // row i of ΦΨ is (Ψᵀφ_i)ᵀ
            let mut theta = DMatrix::zeros(phi.k(), phi.n());
            for (i, row) in phi.matrix().row_iter().enumerate() {
                let coeffs = psi.analyze(&row.iter().copied().collect::<Vec<_>>());
                for (j, c) in coeffs.into_iter().enumerate() {
                    theta[(i, j)] = c;
                }
            }
            theta
        }
    };
    Ok(EffectiveMatrix { theta, basis: *psi, phi_seed: phi.seed() })
}

/// Factored Gram system for repeated minimum-norm solves against one `Θ`.
#[derive(Debug, Clone)]
pub struct MinNormSolver {
    theta: DMatrix<f64>,
    gram: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl MinNormSolver {
    pub fn new(theta: &DMatrix<f64>) -> Result<Self> {
        let gram = theta * theta.transpose();
        let k = gram.nrows();
        let jittered = &gram + DMatrix::<f64>::identity(k, k) * GRAM_JITTER;
        let Some(factor) = Cholesky::new(jittered.clone()) else {
            return Err(Error::SolverFailure {
                reason: "Gram matrix is not positive definite after jitter".into(),
                condition: condition_estimate(&jittered),
            });
        };
        let diag = factor.l_dirty().diagonal();
        let ratio = diag.max() / diag.min();
        if !(ratio * ratio <= MAX_GRAM_CONDITION) {
            return Err(Error::SolverFailure {
                reason: "Gram matrix is numerically singular".into(),
                condition: condition_estimate(&jittered),
            });
        }
        Ok(Self { theta: theta.clone(), gram, factor })
    }

    pub fn k(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n(&self) -> usize {
        self.theta.ncols()
    }

    /// Solves `ΘΘᵀz = y`. The jittered factor is used as a preconditioner for
    /// a couple of refinement passes against the exact Gram matrix, which
    /// removes the bias the jitter introduces.
    pub fn solve_gram(&self, y: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(y);
        let mut z = self.factor.solve(&y);
        for _ in 0..REFINEMENT_PASSES {
            let r = &y - &self.gram * &z;
            z += self.factor.solve(&r);
        }
        z.data.into()
    }

    /// `ŝ = Θᵀ(ΘΘᵀ)⁻¹y`.
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k() {
            return Err(invalid(format!("{} measurements for a {}-row system", y.len(), self.k())));
        }
        let z = DVector::from_vec(self.solve_gram(y));
        Ok(self.theta.tr_mul(&z).data.into())
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let hi = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lo = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Minimum-norm coefficient vector for `Θs = y`.
pub fn min_norm_solve(theta: &EffectiveMatrix, y: &MeasurementVector) -> Result<Vec<f64>> {
    if y.len() != theta.k() {
        return Err(invalid(format!("{} measurements for a {}-row system", y.len(), theta.k())));
    }
    MinNormSolver::new(theta.matrix())?.solve(&y.values)
}

/// A reconstructed image plus solver bookkeeping.
#[derive(Debug, Clone)]
pub struct Recovered {
    pub image: Image,
    pub iterations: usize,
    pub converged: bool,
    /// Pixels that fell outside `[0, 1]` before clipping.
    pub clipped: usize,
}

/// Reusable ℓ2 reconstructor: factors `ΘΘᵀ` once for a fixed `Φ` and `Ψ`.
#[derive(Debug, Clone)]
pub struct L2Reconstructor {
    solver: MinNormSolver,
    psi: SparsifyingBasis,
}

impl L2Reconstructor {
    pub fn new(phi: &ScanningBasis, psi: &SparsifyingBasis) -> Result<Self> {
        let theta = effective_matrix(phi, psi)?;
        Ok(Self { solver: MinNormSolver::new(theta.matrix())?, psi: *psi })
    }

    /// Unclipped `Ψŝ`.
    pub fn reconstruct_raw(&self, y: &MeasurementVector) -> Result<Vec<f64>> {
        let s = self.solver.solve(&y.values)?;
        Ok(self.psi.synthesize(&s))
    }

    pub fn reconstruct(&self, y: &MeasurementVector) -> Result<Recovered> {
        let (w, h) = self.psi.shape();
        let (image, clipped) = Image::from_clipped(w, h, self.reconstruct_raw(y)?)?;
        Ok(Recovered { image, iterations: 0, converged: true, clipped })
    }
}

/// `x̂_noisy = Ψ·ŝ`, clipped to `[0, 1]`.
pub fn l2_reconstruct(
    phi: &ScanningBasis,
    psi: &SparsifyingBasis,
    y: &MeasurementVector,
) -> Result<Recovered> {
    if y.len() != phi.k() {
        return Err(invalid(format!("{} measurements for a {}-row basis", y.len(), phi.k())));
    }
    L2Reconstructor::new(phi, psi)?.reconstruct(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walsh::build_scanning_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_matrix(k: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        use rand_distr::{Distribution, StandardNormal};
        DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(rng))
    }

    fn svd_pinv_solve(theta: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
        let pinv = theta.clone().pseudo_inverse(1e-12).unwrap();
        pinv * DVector::from_column_slice(y)
    }

    #[test]
    fn dct_is_orthonormal() {
        let psi = SparsifyingBasis::dct2d(4, 4).materialize();
        let eye = psi.transpose() * &psi;
        assert!((eye - DMatrix::<f64>::identity(16, 16)).amax() < 1e-10);
        let psi = SparsifyingBasis::dct2d(8, 2).materialize();
        assert!((psi.transpose() * &psi - DMatrix::<f64>::identity(16, 16)).amax() < 1e-10);
    }

    #[test]
    fn analyze_inverts_synthesize() {
        let psi = SparsifyingBasis::dct2d(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
        let back = psi.analyze(&psi.synthesize(&s));
        for (a, b) in s.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_effective_matrix_is_phi() {
        let phi = build_scanning_basis(5, 16, 2).unwrap();
        let theta = effective_matrix(&phi, &SparsifyingBasis::identity(4, 4)).unwrap();
        assert_eq!(theta.matrix(), phi.matrix());
        assert_eq!(theta.phi_seed, Some(2));
    }

    #[test]
    fn dct_effective_matrix_keeps_row_norms() {
        let phi = build_scanning_basis(9, 16, 4).unwrap();
        let theta = effective_matrix(&phi, &SparsifyingBasis::dct2d(4, 4)).unwrap();
        for row in theta.matrix().row_iter() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_phi_gives_dct_matrix() {
        let phi = ScanningBasis::from_matrix(DMatrix::identity(4, 4)).unwrap();
        let psi = SparsifyingBasis::dct2d(2, 2);
        let theta = effective_matrix(&phi, &psi).unwrap();
        assert!((theta.matrix() - psi.materialize()).amax() < 1e-15);
    }

    #[test]
    fn effective_matrix_rejects_mismatch() {
        let phi = build_scanning_basis(5, 16, 2).unwrap();
        assert!(effective_matrix(&phi, &SparsifyingBasis::identity(8, 8)).is_err());
    }

    #[test]
    fn identity_system_returns_measurements() {
        let theta =
            EffectiveMatrix::from_matrix(DMatrix::identity(3, 3), SparsifyingBasis::identity(3, 1))
                .unwrap();
        let s = min_norm_solve(&theta, &MeasurementVector::exact(vec![1.0, -2.0, 0.5])).unwrap();
        for (a, b) in s.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_row_splits_evenly() {
        let theta = EffectiveMatrix::from_matrix(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            SparsifyingBasis::identity(2, 1),
        )
        .unwrap();
        let s = min_norm_solve(&theta, &MeasurementVector::exact(vec![2.0])).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_3x5_matches_pseudoinverse_and_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = gaussian_matrix(3, 5, &mut rng);
        let y: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let theta = EffectiveMatrix::from_matrix(m.clone(), SparsifyingBasis::identity(5, 1)).unwrap();
        let s = DVector::from_vec(min_norm_solve(&theta, &MeasurementVector::exact(y.clone())).unwrap());
        let oracle = svd_pinv_solve(&m, &y);
        assert!((&s - &oracle).norm() <= 1e-8 * oracle.norm());

        // Null-space perturbations only lengthen the solution.
        let svd = m.clone().svd(false, true);
        let v_t = svd.v_t.unwrap();
        for _ in 0..20 {
            let mut v = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
            for r in 0..3 {
                let basis = v_t.row(r).transpose();
                v -= &basis * basis.dot(&v);
            }
            assert!((&m * &v).norm() < 1e-10);
            assert!(s.norm() <= (&s + &v).norm());
        }
    }

    #[test]
    fn singular_gram_is_reported() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        match MinNormSolver::new(&m) {
            Err(Error::SolverFailure { condition, .. }) => assert!(condition > 1e9),
            other => panic!("expected solver failure, got {other:?}"),
        }
    }

    #[test]
    fn full_sampling_recovers_exactly() {
        let phi = build_scanning_basis(64, 64, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Image::new(8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = crate::acquisition::acquire(&x, &phi, 0.0, &mut rng).unwrap();
        for psi in [SparsifyingBasis::identity(8, 8), SparsifyingBasis::dct2d(8, 8)] {
            let rec = l2_reconstruct(&phi, &psi, &y).unwrap();
            for (a, b) in rec.image.pixels().iter().zip(x.pixels()) {
                assert!((a - b).abs() < 1e-8, "{} path", psi.kind());
            }
        }
    }

    #[test]
    fn zero_measurements_give_zero_image() {
        let phi = build_scanning_basis(10, 64, 3).unwrap();
        let rec = l2_reconstruct(&phi, &SparsifyingBasis::identity(8, 8), &MeasurementVector::exact(vec![0.0; 10]))
            .unwrap();
        assert!(rec.image.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn wrong_measurement_count_is_rejected() {
        let phi = build_scanning_basis(10, 64, 3).unwrap();
        let y = MeasurementVector::exact(vec![0.0; 9]);
        assert!(l2_reconstruct(&phi, &SparsifyingBasis::identity(8, 8), &y).is_err());
    }
}
