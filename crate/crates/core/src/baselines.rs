//! Classical iterative reconstructions used as comparison rows.

use nalgebra::{DMatrix, DVector};

use crate::acquisition::MeasurementVector;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::recovery::{EffectiveMatrix, MinNormSolver, Recovered};
use crate::walsh::ScanningBasis;

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeConfig {
    pub max_iters: usize,
    /// Relative threshold; its meaning is solver specific (normal-equation
    /// residual for CGD, iterate change for AP and ISTA).
    pub tolerance: f64,
    /// ISTA step. `None` uses `0.9 / ‖Θ‖₂²`.
    pub step_size: Option<f64>,
    /// ISTA ℓ1 weight λ₁.
    pub l1_weight: f64,
}

impl IterativeConfig {
    pub fn cgd() -> Self {
        Self { max_iters: 500, tolerance: 1e-6, step_size: None, l1_weight: 1e-3 }
    }

    pub fn ap() -> Self {
        Self::cgd()
    }

    pub fn ista() -> Self {
        Self { max_iters: 2000, ..Self::cgd() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if let Some(step) = self.step_size {
            if !(step > 0.0) || !step.is_finite() {
                return Err(invalid(format!("step size must be positive, got {step}")));
            }
        }
        if !(self.l1_weight >= 0.0) || !self.l1_weight.is_finite() {
            return Err(invalid(format!("l1 weight must be non-negative, got {}", self.l1_weight)));
        }
        Ok(())
    }
}

fn check_measurements(phi: &ScanningBasis, y: &MeasurementVector) -> Result<()> {
    if y.len() != phi.k() {
        return Err(invalid(format!("{} measurements for a {}-row basis", y.len(), phi.k())));
    }
    Ok(())
}

fn square_shape(n: usize) -> Result<(usize, usize)> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(invalid(format!("cannot infer a square image from {n} pixels")));
    }
    Ok((side, side))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Trace of one CGD solve, kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct CgdTrace {
    pub x: Vec<f64>,
    /// `‖Φᵀ(y − Φx_t)‖` for `t = 0..=iterations`.
    pub normal_residuals: Vec<f64>,
    pub converged: bool,
}

/// Conjugate-direction solve of `ΦᵀΦx = Φᵀy` from `x₀ = 0`, without clipping.
///
/// Uses the conjugate-residual recurrence, whose search directions are
/// `(ΦᵀΦ)²`-conjugate and which minimizes `‖Φᵀ(y − Φx)‖` over the growing
/// Krylov space, so the recorded residuals never increase.
pub fn cgd_solve(phi: &ScanningBasis, y: &MeasurementVector, cfg: &IterativeConfig) -> Result<CgdTrace> {
    cfg.validate()?;
    check_measurements(phi, y)?;
    let normal = |v: &[f64]| phi.apply_transpose(&phi.apply(v));
    let n = phi.n();
    let b = phi.apply_transpose(&y.values);
    let b_norm = norm(&b);
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut residuals = vec![b_norm];
    if b_norm == 0.0 {
        return Ok(CgdTrace { x, normal_residuals: residuals, converged: true });
    }
    let mut ar = normal(&r);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let ap_sq = dot(&ap, &ap);
        if ap_sq == 0.0 || rar == 0.0 {
            break;
        }
        let alpha = rar / ap_sq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r);
        residuals.push(res);
        if res <= cfg.tolerance * b_norm {
            converged = true;
            break;
        }
        ar = normal(&r);
        let rar_next = dot(&r, &ar);
        let beta = rar_next / rar;
        rar = rar_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    Ok(CgdTrace { x, normal_residuals: residuals, converged })
}

pub fn cgd_reconstruct(
    phi: &ScanningBasis,
    y: &MeasurementVector,
    cfg: &IterativeConfig,
) -> Result<Recovered> {
    let (w, h) = square_shape(phi.n())?;
    let trace = cgd_solve(phi, y, cfg)?;
    let iterations = trace.normal_residuals.len() - 1;
    let (image, clipped) = Image::from_clipped(w, h, trace.x)?;
    Ok(Recovered { image, iterations, converged: trace.converged, clipped })
}

/// Alternating projections between the measurement-consistent affine set
/// `{x : Φx = y}` and the box `[0, 1]^N`.
#[derive(Debug, Clone)]
pub struct AlternatingProjection<'a> {
    phi: &'a ScanningBasis,
    solver: MinNormSolver,
    y: Vec<f64>,
}

impl<'a> AlternatingProjection<'a> {
    pub fn new(phi: &'a ScanningBasis, y: &MeasurementVector) -> Result<Self> {
        check_measurements(phi, y)?;
        let solver = MinNormSolver::new(phi.matrix())?;
        Ok(Self { phi, solver, y: y.values.clone() })
    }

    /// `clip(x + Φᵀ(ΦΦᵀ)⁻¹(y − Φx))`.
    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        let phi_x = self.phi.apply(x);
        let gap: Vec<f64> = self.y.iter().zip(&phi_x).map(|(a, b)| a - b).collect();
        let correction = self.phi.apply_transpose(&self.solver.solve_gram(&gap));
        x.iter().zip(correction).map(|(v, c)| (v + c).clamp(0.0, 1.0)).collect()
    }
}

pub fn ap_reconstruct(
    phi: &ScanningBasis,
    y: &MeasurementVector,
    cfg: &IterativeConfig,
) -> Result<Recovered> {
    cfg.validate()?;
    let (w, h) = square_shape(phi.n())?;
    let ap = AlternatingProjection::new(phi, y)?;
    let mut x = vec![0.0; phi.n()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let next = ap.step(&x);
        iterations += 1;
        let change: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        x = next;
        if change <= cfg.tolerance * norm(&x).max(1.0) {
            converged = true;
            break;
        }
    }
    let image = Image::new(w, h, x)?;
    Ok(Recovered { image, iterations, converged, clipped: 0 })
}

/// Largest eigenvalue of `ΘᵀΘ`, i.e. `‖Θ‖₂²`, by power iteration.
pub fn spectral_norm_sq(theta: &DMatrix<f64>) -> f64 {
    let n = theta.ncols();
    // deterministic, non-degenerate start
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..500 {
        let w = theta.tr_mul(&(theta * &v));
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - estimate).abs() <= 1e-13 * next {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Iterative shrinkage-thresholding for `½‖Θs − y‖² + λ₁‖s‖₁`.
#[derive(Debug, Clone)]
pub struct Ista<'a> {
    theta: &'a DMatrix<f64>,
    y: DVector<f64>,
    step: f64,
    l1_weight: f64,
    s: DVector<f64>,
}

impl<'a> Ista<'a> {
    pub fn new(theta: &'a EffectiveMatrix, y: &MeasurementVector, cfg: &IterativeConfig) -> Result<Self> {
        cfg.validate()?;
        if y.len() != theta.k() {
            return Err(invalid(format!("{} measurements for a {}-row system", y.len(), theta.k())));
        }
        let lipschitz = spectral_norm_sq(theta.matrix());
        let bound = if lipschitz > 0.0 { 1.0 / lipschitz } else { f64::INFINITY };
        let step = match cfg.step_size {
            Some(step) => {
                // power iteration approaches ‖Θ‖² from below
                if step > bound * (1.0 + 1e-9) {
                    return Err(invalid(format!("step size {step} exceeds 1/‖Θ‖² = {bound}")));
                }
                step
            }
            None if lipschitz > 0.0 => 0.9 * bound,
            None => 1.0,
        };
        Ok(Self {
            theta: theta.matrix(),
            y: DVector::from_column_slice(&y.values),
            step,
            l1_weight: cfg.l1_weight,
            s: DVector::zeros(theta.n()),
        })
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn coefficients(&self) -> &[f64] {
        self.s.as_slice()
    }

    pub fn objective(&self) -> f64 {
        let r = self.theta * &self.s - &self.y;
        0.5 * r.norm_squared() + self.l1_weight * self.s.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// One proximal-gradient step; returns `‖s_{t+1} − s_t‖`.
    pub fn iterate(&mut self) -> f64 {
        let grad = self.theta.tr_mul(&(self.theta * &self.s - &self.y));
        let thresh = self.step * self.l1_weight;
        let mut change = 0.0;
        for (si, gi) in self.s.iter_mut().zip(grad.iter()) {
            let next = soft_threshold(*si - self.step * gi, thresh);
            change += (next - *si).powi(2);
            *si = next;
        }
        change.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SparseSolution {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs ISTA from `s₀ = 0`. The image is `Ψŝ`, left to the caller.
pub fn ista_reconstruct(
    theta: &EffectiveMatrix,
    y: &MeasurementVector,
    cfg: &IterativeConfig,
) -> Result<SparseSolution> {
    let mut ista = Ista::new(theta, y, cfg)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let change = ista.iterate();
        iterations += 1;
        let size = norm(ista.coefficients());
        if change <= cfg.tolerance * size || size == 0.0 && change == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(SparseSolution { coefficients: ista.s.data.into(), iterations, converged })
}

/// ISTA in `Θ = ΦΨ`, mapped back through `Ψ` and clipped.
pub fn ista_image(theta: &EffectiveMatrix, y: &MeasurementVector, cfg: &IterativeConfig) -> Result<Recovered> {
    let sol = ista_reconstruct(theta, y, cfg)?;
    let (w, h) = theta.basis.shape();
    let (image, clipped) = Image::from_clipped(w, h, theta.basis.synthesize(&sol.coefficients))?;
    Ok(Recovered { image, iterations: sol.iterations, converged: sol.converged, clipped })
}

/// Differential ghost imaging estimate before normalization:
/// `⟨yΦ⟩ − (⟨y⟩/⟨S⟩)⟨SΦ⟩`, with `S_i` the entry sum of pattern `i`.
pub fn dgi_estimate(phi: &ScanningBasis, y: &MeasurementVector) -> Result<Vec<f64>> {
    check_measurements(phi, y)?;
    let k = phi.k();
    if k < 2 {
        return Err(invalid(format!("differential ghost imaging needs at least 2 patterns, got {k}")));
    }
    let m = phi.matrix();
    let sums: Vec<f64> = m.row_iter().map(|r| r.sum()).collect();
    let kf = k as f64;
    let mean_y = y.values.iter().sum::<f64>() / kf;
    let mean_s = sums.iter().sum::<f64>() / kf;
    if mean_s == 0.0 {
        return Err(Error::DegenerateBasis("pattern sums average to zero".into()));
    }
    let ratio = mean_y / mean_s;
    let weights: Vec<f64> = y.values.iter().zip(&sums).map(|(yi, si)| (yi - ratio * si) / kf).collect();
    Ok(phi.apply_transpose(&weights))
}

/// DGI estimate min-max normalized onto `[0, 1]`. A flat estimate maps to 0.
pub fn dgi_reconstruct(phi: &ScanningBasis, y: &MeasurementVector) -> Result<Recovered> {
    let (w, h) = square_shape(phi.n())?;
    let est = dgi_estimate(phi, y)?;
    let lo = est.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = est.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = if span > 0.0 {
        est.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; est.len()]
    };
    Ok(Recovered { image: Image::new(w, h, pixels)?, iterations: 1, converged: true, clipped: 0 })
}
