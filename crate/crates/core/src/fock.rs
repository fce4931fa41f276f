//! Truncated Fock-space numerics.
//!
//! States live on `|0⟩..|N_c−1⟩`. Quadratures use the shot-noise convention
//! `X = a + a†`, `P = i(a† − a)`, so the vacuum has `Var(X) = Var(P) = 1`.
//! Multipartite operators index subsystems in row-major order: for dims
//! `[d_A, d_B]` the basis vector `|a⟩|b⟩` sits at `a·d_B + b`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest tolerated coherent-state norm defect before a cutoff is rejected.
pub const DEFAULT_NORM_TOLERANCE: f64 = 1e-10;

/// Looser defect bound for explicitly chosen cutoffs (e.g. `N_c = 12` at `|α| = 1`).
pub const ADEQUATE_NORM_TOLERANCE: f64 = 1e-8;

/// Cutoff floor used by [`default_cutoff`].
pub const MIN_DEFAULT_CUTOFF: usize = 12;

const HERMITIAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FockVector {
    amplitudes: DVector<C64>,
    norm_defect: f64,
}

impl FockVector {
    pub fn new(amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.len() < 2 {
            return Err(Error::invalid("Fock cutoff must be at least 2"));
        }
        let norm_defect = 1.0 - amplitudes.norm_squared();
        Ok(Self {
            amplitudes,
            norm_defect,
        })
    }

    pub fn cutoff(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    /// `1 − ⟨ψ|ψ⟩`; for coherent states this is the Poisson tail beyond the cutoff.
    pub fn norm_defect(&self) -> f64 {
        self.norm_defect
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &FockVector) -> C64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    pub fn normalized(&self) -> FockVector {
        let norm = self.amplitudes.norm();
        FockVector {
            amplitudes: self.amplitudes.unscale(norm),
            norm_defect: 0.0,
        }
    }

    pub fn to_density(&self) -> DensityOperator {
        let v = &self.amplitudes;
        DensityOperator {
            dims: vec![v.len()],
            matrix: v * v.adjoint(),
        }
    }
}

/// Truncated coherent-state coefficients `e^{−|α|²/2} α^n/√n!` and the
/// exact Poisson tail mass that the truncation drops.
pub fn coherent_amplitudes(alpha: C64, cutoff: usize) -> (DVector<C64>, f64) {
    let mut amps = DVector::zeros(cutoff);
    let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 0..cutoff {
        if n > 0 {
            c = c * alpha / (n as f64).sqrt();
        }
        amps[n] = c;
    }
    // Sum the dropped Poisson tail directly; 1 − Σ|c_n|² would cancel.
    let x = alpha.norm_sqr();
    let mut term = (-x).exp();
    for n in 1..=cutoff {
        term *= x / n as f64;
    }
    let mut tail = 0.0;
    let mut n = cutoff;
    while term > 0.0 {
        tail += term;
        n += 1;
        term *= x / n as f64;
        if n as f64 > x && term <= f64::EPSILON * tail {
            break;
        }
    }
    (amps, tail)
}

/// Coherent state `|α⟩` with the default truncation tolerance.
pub fn coherent_state(alpha: C64, cutoff: usize) -> Result<FockVector> {
    coherent_state_with_tolerance(alpha, cutoff, DEFAULT_NORM_TOLERANCE)
}

pub fn coherent_state_with_tolerance(
    alpha: C64,
    cutoff: usize,
    tolerance: f64,
) -> Result<FockVector> {
    if cutoff < 2 {
        return Err(Error::invalid("Fock cutoff must be at least 2"));
    }
    let (amplitudes, defect) = coherent_amplitudes(alpha, cutoff);
    if defect > tolerance {
        return Err(Error::CutoffTooSmall {
            cutoff,
            defect,
            tolerance,
        });
    }
    Ok(FockVector {
        amplitudes,
        norm_defect: defect,
    })
}

/// Smallest cutoff whose coherent norm defect for `|α| = max_abs_alpha`
/// is below [`DEFAULT_NORM_TOLERANCE`], never below [`MIN_DEFAULT_CUTOFF`].
pub fn default_cutoff(max_abs_alpha: f64) -> usize {
    let alpha = C64::new(max_abs_alpha.abs(), 0.0);
    let mut n = 2;
    while coherent_amplitudes(alpha, n).1 >= DEFAULT_NORM_TOLERANCE {
        n += 1;
    }
    n.max(MIN_DEFAULT_CUTOFF)
}

/// Annihilation operator on the truncated space.
pub fn annihilation(cutoff: usize) -> DMatrix<C64> {
    let mut a = DMatrix::zeros(cutoff, cutoff);
    for n in 1..cutoff {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

#[derive(Debug, Clone)]
pub struct QuadratureOps {
    pub x: DMatrix<C64>,
    pub p: DMatrix<C64>,
}

impl QuadratureOps {
    pub fn cutoff(&self) -> usize {
        self.x.nrows()
    }

    pub fn x2(&self) -> DMatrix<C64> {
        &self.x * &self.x
    }

    pub fn p2(&self) -> DMatrix<C64> {
        &self.p * &self.p
    }

    /// Symmetrized cross moment `(XP + PX)/2`.
    pub fn xp_sym(&self) -> DMatrix<C64> {
        (&self.x * &self.p + &self.p * &self.x) * C64::new(0.5, 0.0)
    }
}

pub fn quadrature_operators(cutoff: usize) -> Result<QuadratureOps> {
    if cutoff < 2 {
        return Err(Error::invalid("Fock cutoff must be at least 2"));
    }
    let a = annihilation(cutoff);
    let ad = a.adjoint();
    let x = &a + &ad;
    let p = (&ad - &a) * C64::i();
    Ok(QuadratureOps { x, p })
}

/// Expectation value `⟨ψ|O|ψ⟩` (real part).
pub fn expectation(state: &FockVector, op: &DMatrix<C64>) -> f64 {
    let v = state.amplitudes();
    v.dotc(&(op * v)).re
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    dims: Vec<usize>,
    matrix: DMatrix<C64>,
}

impl DensityOperator {
    /// Wraps a matrix, checking its shape against `dims` and Hermiticity.
    pub fn new(dims: Vec<usize>, matrix: DMatrix<C64>) -> Result<Self> {
        let total: usize = dims.iter().product();
        if dims.is_empty() || matrix.nrows() != total || matrix.ncols() != total {
            return Err(Error::Dimension(format!(
                "dims {:?} imply size {}, matrix is {}x{}",
                dims,
                total,
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let defect = hermiticity_defect(&matrix);
        if defect > HERMITIAN_TOLERANCE {
            return Err(Error::NotHermitian(defect));
        }
        Ok(Self { dims, matrix })
    }

    /// Projector onto a (possibly multipartite) pure state vector.
    pub fn from_vector(dims: Vec<usize>, v: &DVector<C64>) -> Result<Self> {
        Self::new(dims, v * v.adjoint())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.matrix)
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn expectation(&self, op: &DMatrix<C64>) -> f64 {
        (&self.matrix * op).trace().re
    }
}

/// Relative Hermiticity defect `max|ρ − ρ†| / max(1, max|ρ|)`.
pub fn hermiticity_defect(m: &DMatrix<C64>) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let scale = m.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst / scale
}

/// Largest entry modulus.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Ascending eigenvalues of a Hermitian matrix (only the lower triangle is read).
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn tensor(a: &DensityOperator, b: &DensityOperator) -> DensityOperator {
    let mut dims = a.dims.clone();
    dims.extend_from_slice(&b.dims);
    DensityOperator {
        dims,
        matrix: a.matrix.kronecker(&b.matrix),
    }
}

/// Reduced state of subsystem `keep`, tracing out all others.
pub fn partial_trace(rho: &DensityOperator, keep: usize) -> Result<DensityOperator> {
    let count = rho.dims.len();
    if keep >= count {
        return Err(Error::SubsystemOutOfRange { index: keep, count });
    }
    let before: usize = rho.dims[..keep].iter().product();
    let d = rho.dims[keep];
    let after: usize = rho.dims[keep + 1..].iter().product();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for b in 0..before {
                for a in 0..after {
                    let r = (b * d + i) * after + a;
                    let c = (b * d + j) * after + a;
                    acc += rho.matrix[(r, c)];
                }
            }
            out[(i, j)] = acc;
        }
    }
    Ok(DensityOperator {
        dims: vec![d],
        matrix: out,
    })
}

/// Partial transpose of a bipartite operator on `subsystem` (0 = A, 1 = B).
pub fn partial_transpose(rho: &DensityOperator, subsystem: usize) -> Result<DensityOperator> {
    if rho.dims.len() != 2 {
        return Err(Error::Dimension(format!(
            "partial transpose needs a bipartite operator, got dims {:?}",
            rho.dims
        )));
    }
    if subsystem > 1 {
        return Err(Error::SubsystemOutOfRange {
            index: subsystem,
            count: 2,
        });
    }
    let (da, db) = (rho.dims[0], rho.dims[1]);
    let n = da * db;
    let mut out = DMatrix::zeros(n, n);
    for a in 0..da {
        for b in 0..db {
            for a2 in 0..da {
                for b2 in 0..db {
                    let src = if subsystem == 0 {
                        (a2 * db + b, a * db + b2)
                    } else {
                        (a * db + b2, a2 * db + b)
                    };
                    out[(a * db + b, a2 * db + b2)] = rho.matrix[src];
                }
            }
        }
    }
    Ok(DensityOperator {
        dims: rho.dims.clone(),
        matrix: out,
    })
}

/// Negativity `Σ_{λ<0} |λ|` over the spectrum of `ρ^{T_A}`.
pub fn negativity_exact(rho: &DensityOperator) -> Result<f64> {
    let defect = rho.hermiticity_defect();
    if defect > HERMITIAN_TOLERANCE {
        return Err(Error::NotHermitian(defect));
    }
    let pt = partial_transpose(rho, 0)?;
    Ok(pt
        .eigenvalues()
        .into_iter()
        .filter(|&l| l < 0.0)
        .map(|l| -l)
        .sum())
}

/// Husimi function `Q(β) = ⟨β|ρ|β⟩/π` of a single-mode state.
pub fn q_function(rho: &DensityOperator, beta: C64) -> Result<f64> {
    if rho.dims.len() != 1 {
        return Err(Error::Dimension(format!(
            "Q-function needs a single-mode state, got dims {:?}",
            rho.dims
        )));
    }
    let (coh, defect) = coherent_amplitudes(beta, rho.dim());
    if defect > 1e-6 {
        log::warn!(
            "Q-function at |β|² = {:.3} is affected by truncation at cutoff {} (defect {:.1e})",
            beta.norm_sqr(),
            rho.dim(),
            defect
        );
    }
    let value = coh.dotc(&(&rho.matrix * &coh)).re / PI;
    Ok(value.max(0.0))
}
