//! Effective-entanglement certification: minimal negativity of any bipartite
//! state compatible with the source Gram matrix and the measured moments.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alphabet::{source_model, Alphabet, SourceModel};
use crate::detection::{BinnedMoments, StateMoments};
use crate::error::{Error, Result};
use crate::fock::{
    annihilation, default_cutoff, hermitian_eigenvalues, negativity_exact, DensityOperator, C64,
};
use crate::rates::{log_negativity, LogBase};
use crate::sdp::{self, presolve, SdpProblem, SolverOptions, Status, Term};

/// Negativities below this are reported as "no certified entanglement".
pub const ZERO_NEGATIVITY: f64 = 1e-6;
/// Largest constraint violation of a returned state accepted as optimal.
pub const VERIFY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Observable {
    X,
    X2,
    P,
    P2,
    /// Symmetrized `(XP + PX)/2`.
    XP,
}

impl Observable {
    pub fn as_str(&self) -> &'static str {
        match self {
            Observable::X => "X",
            Observable::X2 => "X^2",
            Observable::P => "P",
            Observable::P2 => "P^2",
            Observable::XP => "(XP+PX)/2",
        }
    }

    /// Matrix on a Fock space of dimension `cutoff`.
    ///
    /// Second moments use the truncation of the normally ordered operator,
    /// e.g. `X² = a² + a†² + 2a†a + 1`, which is exact on every retained
    /// Fock level (unlike the product of truncated `X` matrices).
    pub fn matrix(&self, cutoff: usize) -> DMatrix<C64> {
        let a = annihilation(cutoff);
        let ad = a.adjoint();
        let number_term = DMatrix::from_fn(cutoff, cutoff, |i, j| {
            if i == j {
                C64::new(2.0 * i as f64 + 1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        match self {
            Observable::X => &a + &ad,
            Observable::P => (&ad - &a) * C64::i(),
            Observable::X2 => &a * &a + &ad * &ad + number_term,
            Observable::P2 => number_term - &a * &a - &ad * &ad,
            Observable::XP => (&ad * &ad - &a * &a) * C64::i(),
        }
    }
}

/// One moment constraint: `tr[(|k⟩⟨k| ⊗ O) ρ] ∈ [lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub state: usize,
    pub observable: Observable,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct CertificationProblem {
    pub source: SourceModel,
    pub moments: Vec<StateMoments>,
    pub sigma_level: f64,
    /// Adds the `(XP + PX)/2` constraint when the covariance is known.
    pub cross_moment: bool,
}

impl CertificationProblem {
    pub fn new(source: SourceModel, moments: Vec<StateMoments>, sigma_level: f64) -> Result<Self> {
        let p = Self {
            source,
            moments,
            sigma_level,
            cross_moment: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.moments.len() != self.source.len() {
            return Err(Error::Dimension(format!(
                "{} moment sets for {} alphabet states",
                self.moments.len(),
                self.source.len()
            )));
        }
        if !(self.sigma_level >= 0.0) || !self.sigma_level.is_finite() {
            return Err(Error::invalid(format!("sigma level must be >= 0, got {}", self.sigma_level)));
        }
        for (k, m) in self.moments.iter().enumerate() {
            let vals = [m.mean_x, m.mean_p, m.var_x, m.var_p, m.se_mean, m.se_var];
            if vals.iter().any(|v| !v.is_finite()) || m.se_mean < 0.0 || m.se_var < 0.0 {
                return Err(Error::invalid(format!("moments of state {k} are not finite")));
            }
        }
        let g = self.source.gram();
        let scale = g.iter().map(|z| z.norm()).fold(1.0, f64::max);
        let min_eig = hermitian_eigenvalues(g)[0];
        if min_eig < -1e-10 * scale || crate::fock::hermiticity_defect(g) > 1e-10 {
            return Err(Error::InconsistentSource(format!(
                "Gram matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(())
    }

    /// Box bounds in unnormalized form (already multiplied by `p_k`).
    pub fn moment_bounds(&self) -> Vec<MomentBound> {
        let s = self.sigma_level;
        let priors = self.source.alphabet().priors();
        let mut out = Vec::new();
        for (k, m) in self.moments.iter().enumerate() {
            let pk = priors[k];
            let se_x2 = (m.se_var.powi(2) + 4.0 * m.mean_x.powi(2) * m.se_mean.powi(2)).sqrt();
            let se_p2 = (m.se_var.powi(2) + 4.0 * m.mean_p.powi(2) * m.se_mean.powi(2)).sqrt();
            let mut list = vec![
                (Observable::X, m.mean_x, m.se_mean),
                (Observable::X2, m.var_x + m.mean_x.powi(2), se_x2),
                (Observable::P, m.mean_p, m.se_mean),
                (Observable::P2, m.var_p + m.mean_p.powi(2), se_p2),
            ];
            if self.cross_moment {
                if let Some(c) = m.cov_xp {
                    // Gaussian estimate of the standard error of a sample covariance.
                    let n = (m.n.max(2) - 1) as f64;
                    let se_cov = if m.n > 1 {
                        ((m.var_x + 1.0) * (m.var_p + 1.0) / n).sqrt()
                    } else {
                        0.0
                    };
                    let se = (se_cov.powi(2)
                        + (m.mean_x.powi(2) + m.mean_p.powi(2)) * m.se_mean.powi(2))
                    .sqrt();
                    list.push((Observable::XP, c + m.mean_x * m.mean_p, se));
                }
            }
            for (observable, target, se) in list {
                out.push(MomentBound {
                    state: k,
                    observable,
                    lower: pk * (target - s * se),
                    upper: pk * (target + s * se),
                });
            }
        }
        out
    }
}

fn moment_terms(block_of: impl Fn(usize, usize) -> (usize, usize, usize), op: &DMatrix<C64>, scale: C64) -> Vec<Term> {
    let nc = op.nrows();
    let mut terms = Vec::new();
    for m in 0..nc {
        for mp in 0..nc {
            let o = op[(m, mp)];
            if o.norm() > 0.0 {
                // tr(Oρ) = Σ O[m][m'] ρ[m'][m]
                let (b, r, c) = block_of(mp, m);
                terms.push(Term::new(b, r, c, o * scale));
            }
        }
    }
    terms
}

fn add_bound(p: &mut SdpProblem, terms: Vec<Term>, b: &MomentBound) {
    p.add_box(terms, Some(b.lower), Some(b.upper));
}

/// Support restriction of the `ρ` variable. Each alphabet state's Fock space
/// is either kept whole or replaced by a single vector, so that
/// `ρ = V R V†` with `R` the block the solver sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    nc: usize,
    vectors: Vec<Option<DVector<C64>>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl Face {
    pub fn full(k: usize, nc: usize) -> Self {
        Self::new(nc, vec![None; k])
    }

    fn new(nc: usize, vectors: Vec<Option<DVector<C64>>>) -> Self {
        let mut offsets = Vec::with_capacity(vectors.len());
        let mut dim = 0;
        for v in &vectors {
            offsets.push(dim);
            dim += if v.is_some() { 1 } else { nc };
        }
        Self { nc, vectors, offsets, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_full(&self) -> bool {
        self.vectors.iter().all(Option::is_none)
    }

    /// States whose support is a single vector.
    pub fn restricted(&self) -> impl Iterator<Item = usize> + '_ {
        self.vectors.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(k, _)| k)
    }

    fn left(&self, a: usize, b: usize) -> (usize, C64) {
        match &self.vectors[a] {
            None => (self.offsets[a] + b, C64::new(1.0, 0.0)),
            Some(v) => (self.offsets[a], v[b]),
        }
    }

    /// Pushes the terms of `coef · ρ[(a b),(a2 b2)]` on block 0.
    fn entry(&self, a: usize, b: usize, a2: usize, b2: usize, coef: C64, out: &mut Vec<Term>) {
        let (r, lc) = self.left(a, b);
        let (c, rc) = self.left(a2, b2);
        let f = coef * lc * rc.conj();
        if f.norm() > 0.0 {
            out.push(Term::new(0, r, c, f));
        }
    }

    /// `V R V†`.
    pub fn expand(&self, r: &DMatrix<C64>) -> DMatrix<C64> {
        let n = self.vectors.len() * self.nc;
        let v = DMatrix::from_fn(n, self.dim, |row, col| {
            let (a, b) = (row / self.nc, row % self.nc);
            let (i, c) = self.left(a, b);
            if i == col {
                c
            } else {
                C64::new(0.0, 0.0)
            }
        });
        &v * r * v.adjoint()
    }
}

/// Relative tolerance on `var_x + var_p − 2` for a state to count as
/// minimum-uncertainty.
pub const FACE_TOLERANCE: f64 = 1e-9;

/// Facial reduction for exact (σ = 0) data. A state with `var_x + var_p = 2`
/// satisfies `tr[(|k⟩⟨k| ⊗ (a−β)†(a−β)) ρ] = 0` with a positive semidefinite
/// operator, so its conditional support is the kernel of that operator. On the
/// truncated space the kernel is numerical: the eigenvector of the smallest
/// eigenvalue is kept when its moments reproduce the data to `1e-6`.
pub fn minimum_uncertainty_face(problem: &CertificationProblem) -> Option<Face> {
    if problem.sigma_level != 0.0 {
        return None;
    }
    let nc = problem.source.cutoff();
    let a = annihilation(nc);
    let ops: Vec<(Observable, DMatrix<C64>)> = [Observable::X, Observable::X2, Observable::P, Observable::P2]
        .into_iter()
        .map(|o| (o, o.matrix(nc)))
        .collect();
    let mut vectors = Vec::with_capacity(problem.moments.len());
    for m in &problem.moments {
        let excess = m.var_x + m.var_p - 2.0;
        if excess.abs() > FACE_TOLERANCE * (1.0 + m.var_x.abs() + m.var_p.abs()) {
            vectors.push(None);
            continue;
        }
        let beta = m.amplitude();
        let shifted = &a - DMatrix::<C64>::identity(nc, nc) * beta;
        let q = shifted.adjoint() * &shifted;
        let eig = q.symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .expect("non-empty spectrum");
        let v: DVector<C64> = eig.eigenvectors.column(imin).into_owned();
        let targets = [
            m.mean_x,
            m.var_x + m.mean_x * m.mean_x,
            m.mean_p,
            m.var_p + m.mean_p * m.mean_p,
        ];
        let consistent = ops.iter().zip(targets).all(|((_, op), t)| {
            let val = v.dotc(&(op * &v)).re;
            (val - t).abs() <= 1e-6 * (1.0 + t.abs())
        });
        vectors.push(consistent.then_some(v));
    }
    let face = Face::new(nc, vectors);
    (!face.is_full()).then_some(face)
}

/// Full SDP over `ρ`, `σ₊`, `σ₋` on `C^K ⊗ C^{N_c}`; minimizes `tr σ₋`.
pub fn build_sdp(problem: &CertificationProblem) -> Result<SdpProblem> {
    let face = Face::full(problem.source.len(), problem.source.cutoff());
    Ok(build_on_face(problem, &face)?.0)
}

/// SDP with `ρ = V R V†` restricted to `face`. Moment rows of restricted
/// states are omitted (the face already fixes them); the returned bounds are
/// those that were added, in order.
pub fn build_on_face(problem: &CertificationProblem, face: &Face) -> Result<(SdpProblem, Vec<MomentBound>)> {
    problem.validate()?;
    let k = problem.source.len();
    let nc = problem.source.cutoff();
    let n = k * nc;
    let g = problem.source.gram();
    let mut p = SdpProblem::new(vec![face.dim(), n, n]);

    let mut tr = Vec::new();
    for a in 0..k {
        for b in 0..nc {
            face.entry(a, b, a, b, C64::new(1.0, 0.0), &mut tr);
        }
    }
    p.add_equality(tr, 1.0);

    for j in 0..k {
        for l in 0..k {
            for (part, target) in [(C64::new(1.0, 0.0), g[(j, l)].re), (-C64::i(), g[(j, l)].im)] {
                if j == l && part.im != 0.0 {
                    continue;
                }
                let mut terms = Vec::new();
                for m in 0..nc {
                    face.entry(j, m, l, m, part, &mut terms);
                }
                p.add_equality(terms, target);
            }
        }
    }

    // ρ^{T_A} = σ₊ − σ₋, with ρ^{T_A}[(a b),(a' b')] = ρ[(a' b),(a b')].
    for r in 0..n {
        for c in r..n {
            let (a, b) = (r / nc, r % nc);
            let (a2, b2) = (c / nc, c % nc);
            for coef in [C64::new(1.0, 0.0), -C64::i()] {
                if r == c && coef.im != 0.0 {
                    continue;
                }
                let mut terms = Vec::with_capacity(3);
                face.entry(a2, b, a, b2, coef, &mut terms);
                terms.push(Term::new(1, r, c, -coef));
                terms.push(Term::new(2, r, c, coef));
                p.add_equality(terms, 0.0);
            }
        }
    }

    let ops: Vec<(Observable, DMatrix<C64>)> = [Observable::X, Observable::X2, Observable::P, Observable::P2, Observable::XP]
        .into_iter()
        .map(|o| (o, o.matrix(nc)))
        .collect();
    let restricted: Vec<usize> = face.restricted().collect();
    let mut used = Vec::new();
    for b in problem.moment_bounds() {
        if restricted.contains(&b.state) {
            continue;
        }
        let op = &ops.iter().find(|(o, _)| *o == b.observable).unwrap().1;
        let mut terms = Vec::new();
        for m in 0..nc {
            for mp in 0..nc {
                let o = op[(m, mp)];
                if o.norm() > 0.0 {
                    face.entry(b.state, mp, b.state, m, o, &mut terms);
                }
            }
        }
        add_bound(&mut p, terms, &b);
        used.push(b);
    }

    p.objective = (0..n).map(|i| Term::real(2, i, i, 1.0)).collect();
    Ok((p, used))
}

/// The state forced by the data when every conditional support is a single
/// vector: `R_{kk'} = G_{kk'} / ⟨v_{k'}|v_k⟩`. `None` when an overlap vanishes.
pub fn determined_state(problem: &CertificationProblem, face: &Face) -> Option<DMatrix<C64>> {
    let k = problem.source.len();
    if face.restricted().count() != k {
        return None;
    }
    let vs: Vec<&DVector<C64>> = face.vectors.iter().map(|v| v.as_ref().unwrap()).collect();
    let g = problem.source.gram();
    let mut r = DMatrix::zeros(k, k);
    for j in 0..k {
        for l in 0..k {
            let ov = vs[l].dotc(vs[j]);
            if ov.norm() < 1e-8 {
                return None;
            }
            r[(j, l)] = g[(j, l)] / ov;
        }
    }
    Some(face.expand(&r))
}

/// Program in `σ₊`, `σ₋` alone for a fixed `ρ`: `σ₊ − σ₋ = ρ^{T_A}`.
pub fn build_fixed(rho: &DMatrix<C64>, k: usize, nc: usize) -> SdpProblem {
    let n = k * nc;
    let mut p = SdpProblem::new(vec![n, n]);
    for r in 0..n {
        for c in r..n {
            let (a, b) = (r / nc, r % nc);
            let (a2, b2) = (c / nc, c % nc);
            let pt = rho[(a2 * nc + b, a * nc + b2)];
            for coef in [C64::new(1.0, 0.0), -C64::i()] {
                if r == c && coef.im != 0.0 {
                    continue;
                }
                p.add_equality(
                    vec![Term::new(0, r, c, coef), Term::new(1, r, c, -coef)],
                    (coef * pt).re,
                );
            }
        }
    }
    p.objective = (0..n).map(|i| Term::real(1, i, i, 1.0)).collect();
    p
}

/// Order `K` of the cyclic symmetry `|k⟩ → |k+1⟩`, `|n⟩ → e^{2πin/K}|n⟩`
/// of the source, when the reduced program applies.
pub fn symmetry_order(problem: &CertificationProblem) -> Option<usize> {
    if problem.cross_moment {
        return None;
    }
    problem.source.alphabet().cyclic_order()
}

/// Data observable of state `m` that equals `O` on state 0 after undoing
/// the rotation by `2πm/K`, with its sign.
fn orbit_image(order: usize, m: usize, o: Observable) -> (Observable, f64) {
    use Observable::*;
    let quarter = (m * 4 / order) % 4;
    match (quarter, o) {
        (0, o) => (o, 1.0),
        (1, X) => (P, 1.0),
        (1, P) => (X, -1.0),
        (3, X) => (P, -1.0),
        (3, P) => (X, 1.0),
        (1 | 3, X2) => (P2, 1.0),
        (1 | 3, P2) => (X2, 1.0),
        (2, X) => (X, -1.0),
        (2, P) => (P, -1.0),
        (_, o) => (o, 1.0),
    }
}

/// State-0 bounds averaged over the symmetry orbit. Any feasible state,
/// averaged over the group, satisfies them, so the reduced program built on
/// them is a relaxation; it is exact when the data are covariant.
pub fn orbit_bounds(problem: &CertificationProblem, order: usize) -> Vec<MomentBound> {
    let all = problem.moment_bounds();
    [Observable::X, Observable::X2, Observable::P, Observable::P2]
        .into_iter()
        .map(|o| {
            let (mut lo, mut hi) = (0.0, 0.0);
            for m in 0..order {
                let (d, sign) = orbit_image(order, m, o);
                let b = all
                    .iter()
                    .find(|b| b.state == m && b.observable == d)
                    .expect("bounds exist for every state");
                let (l, h) = if sign > 0.0 { (b.lower, b.upper) } else { (-b.upper, -b.lower) };
                lo += l;
                hi += h;
            }
            let kf = order as f64;
            MomentBound {
                state: 0,
                observable: o,
                lower: lo / kf,
                upper: hi / kf,
            }
        })
        .collect()
}

/// `true` when the orbit average leaves every state's bounds unchanged.
pub fn is_covariant(problem: &CertificationProblem, order: usize) -> bool {
    let avg = orbit_bounds(problem, order);
    let all = problem.moment_bounds();
    let scale = all
        .iter()
        .flat_map(|b| [b.lower.abs(), b.upper.abs()])
        .fold(1.0, f64::max);
    (0..order).all(|m| {
        avg.iter().all(|a| {
            let (d, sign) = orbit_image(order, m, a.observable);
            let b = all.iter().find(|b| b.state == m && b.observable == d).unwrap();
            let (l, h) = if sign > 0.0 { (b.lower, b.upper) } else { (-b.upper, -b.lower) };
            (l - a.lower).abs() <= 1e-12 * scale && (h - a.upper).abs() <= 1e-12 * scale
        })
    })
}

/// Symmetry-reduced SDP. The variables are `K` blocks of size `N_c` for each
/// of `ρ`, `σ₊`, `σ₋`, one per eigenspace of the joint shift, and the moment
/// rows are the [`orbit_bounds`]. Returns `None` when the source is not
/// cyclic.
pub fn build_reduced_sdp(problem: &CertificationProblem) -> Result<Option<(SdpProblem, Vec<MomentBound>)>> {
    problem.validate()?;
    let Some(k) = symmetry_order(problem) else {
        return Ok(None);
    };
    let nc = problem.source.cutoff();
    let g = problem.source.gram();
    let kf = k as f64;
    let omega = |e: i64| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * e.rem_euclid(k as i64) as f64 / kf);
    let rho = |l: usize| l;
    let plus = |l: usize| k + l;
    let minus = |l: usize| 2 * k + l;
    let mut p = SdpProblem::new(vec![nc; 3 * k]);

    p.add_equality(
        (0..k)
            .flat_map(|l| (0..nc).map(move |n| Term::real(rho(l), n, n, 1.0)))
            .collect(),
        1.0,
    );

    // tr_B ρ is circulant: (tr_B ρ)_{d,0} = (1/K) Σ_l Σ_n ω^{(n−l)d} (ρ_l)_{nn}.
    for d in 0..k {
        for part in [C64::new(1.0, 0.0), -C64::i()] {
            if d == 0 && part.im != 0.0 {
                continue;
            }
            let terms: Vec<Term> = (0..k)
                .flat_map(|l| {
                    (0..nc).map(move |n| (l, n))
                })
                .map(|(l, n)| Term::new(rho(l), n, n, part * omega((n as i64 - l as i64) * d as i64) / kf))
                .collect();
            let target = if part.im == 0.0 { g[(d, 0)].re } else { g[(d, 0)].im };
            p.add_equality(terms, target);
        }
    }

    // (ρ^{T_A})_l has entries (ρ_{(n+m−l) mod K})_{nm}.
    for l in 0..k {
        for n in 0..nc {
            for m in n..nc {
                let src = (n + m + k - l % k) % k;
                for coef in [C64::new(1.0, 0.0), -C64::i()] {
                    if n == m && coef.im != 0.0 {
                        continue;
                    }
                    p.add_equality(
                        vec![
                            Term::new(rho(src), n, m, coef),
                            Term::new(plus(l), n, m, -coef),
                            Term::new(minus(l), n, m, coef),
                        ],
                        0.0,
                    );
                }
            }
        }
    }

    // Only state-0 moments; the others follow from the symmetry.
    let bounds = orbit_bounds(problem, k);
    for b in &bounds {
        let op = b.observable.matrix(nc);
        let mut terms = Vec::new();
        for l in 0..k {
            terms.extend(moment_terms(|r, c| (rho(l), r, c), &op, C64::new(1.0 / kf, 0.0)));
        }
        add_bound(&mut p, terms, b);
    }

    p.objective = (0..k)
        .flat_map(|l| (0..nc).map(move |n| Term::real(minus(l), n, n, 1.0)))
        .collect();
    Ok(Some((p, bounds)))
}

/// Reassembles the full `ρ` from the reduced blocks.
fn expand_reduced(blocks: &[DMatrix<C64>], k: usize, nc: usize) -> DMatrix<C64> {
    let n = k * nc;
    let kf = k as f64;
    let mut out = DMatrix::zeros(n, n);
    for (l, rho_l) in blocks.iter().take(k).enumerate() {
        let f = DMatrix::from_fn(n, nc, |row, col| {
            let (a, m) = (row / nc, row % nc);
            if m != col {
                return C64::new(0.0, 0.0);
            }
            let e = ((m as i64 - l as i64) * a as i64).rem_euclid(k as i64) as f64;
            C64::from_polar(1.0 / kf.sqrt(), 2.0 * std::f64::consts::PI * e / kf)
        });
        out += &f * rho_l * f.adjoint();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingConstraint {
    pub state: usize,
    pub observable: Observable,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub dual: f64,
}

/// Independent check of the returned state against the constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub min_eigenvalue: f64,
    pub trace_error: f64,
    pub gram_error: f64,
    /// Largest distance of a moment outside its interval.
    pub moment_violation: f64,
    /// Exact negativity of the returned state; never below the certified value.
    pub state_negativity: f64,
}

impl Verification {
    pub fn max_violation(&self) -> f64 {
        [(-self.min_eigenvalue).max(0.0), self.trace_error, self.gram_error, self.moment_violation]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub negativity_min: f64,
    pub log_negativity: f64,
    pub log_base: LogBase,
    pub status: Status,
    pub duality_gap: f64,
    /// Dual objective: a lower bound on the minimum.
    pub dual_bound: f64,
    pub iterations: usize,
    pub reduced: bool,
    /// Solved on orbit-averaged bounds of non-covariant data (a lower bound).
    pub relaxed: bool,
    pub binding_constraints: Vec<BindingConstraint>,
    pub verification: Option<Verification>,
}

impl CertificationResult {
    fn failed(status: Status, log_base: LogBase, reduced: bool) -> Self {
        Self {
            negativity_min: 0.0,
            log_negativity: 0.0,
            log_base,
            status,
            duality_gap: f64::NAN,
            dual_bound: f64::NAN,
            iterations: 0,
            reduced,
            relaxed: false,
            binding_constraints: Vec::new(),
            verification: None,
        }
    }

    /// Optimal, or near-optimal with a verified state.
    pub fn is_optimal(&self) -> bool {
        matches!(self.status, Status::Optimal | Status::NearOptimal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub log_base: LogBase,
    /// Detector efficiency treated as trusted; moments are referred back
    /// through it before certification.
    pub trusted_efficiency: Option<f64>,
    pub cross_moment: bool,
    /// Use the symmetry-reduced program when the instance allows it.
    pub use_symmetry: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 200,
            log_base: LogBase::Two,
            trusted_efficiency: None,
            cross_moment: false,
            use_symmetry: true,
        }
    }
}

/// Refers moments measured behind a trusted loss `η` back to its input.
pub fn undo_trusted_loss(m: &StateMoments, eta: f64) -> Result<StateMoments> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("trusted efficiency must be in (0, 1], got {eta}")));
    }
    let s = eta.sqrt();
    let mut out = m.clone();
    out.mean_x = m.mean_x / s;
    out.mean_p = m.mean_p / s;
    out.var_x = (m.var_x - 1.0) / eta + 1.0;
    out.var_p = (m.var_p - 1.0) / eta + 1.0;
    out.cov_xp = m.cov_xp.map(|c| c / eta);
    out.se_mean = m.se_mean / s;
    out.se_var = m.se_var / eta;
    Ok(out)
}

fn block_offsets(problem: &CertificationProblem) -> (usize, usize) {
    (problem.source.len(), problem.source.cutoff())
}

fn verify(problem: &CertificationProblem, rho: &DMatrix<C64>, bounds: &[MomentBound]) -> Result<Verification> {
    let (k, nc) = block_offsets(problem);
    let rho = rho.clone();
    let min_eigenvalue = hermitian_eigenvalues(&rho)[0];
    let trace_error = ((0..k * nc).map(|i| rho[(i, i)].re).sum::<f64>() - 1.0).abs();
    let g = problem.source.gram();
    let mut gram_error: f64 = 0.0;
    for j in 0..k {
        for l in 0..k {
            let v: C64 = (0..nc).map(|m| rho[(j * nc + m, l * nc + m)]).sum();
            gram_error = gram_error.max((v - g[(j, l)]).norm());
        }
    }
    let mut moment_violation: f64 = 0.0;
    for b in bounds {
        let v = moment_value(&rho, nc, b);
        moment_violation = moment_violation.max(b.lower - v).max(v - b.upper);
    }
    let state_negativity = negativity_exact(&DensityOperator::new(vec![k, nc], rho)?)?;
    Ok(Verification {
        min_eigenvalue,
        trace_error,
        gram_error,
        moment_violation,
        state_negativity,
    })
}

fn moment_value(rho: &DMatrix<C64>, nc: usize, b: &MomentBound) -> f64 {
    let op = b.observable.matrix(nc);
    let off = b.state * nc;
    let block = rho.view((off, off), (nc, nc));
    (op * block).trace().re
}

enum Layout {
    Face(Face),
    Reduced(usize),
    Fixed(DMatrix<C64>),
}

/// Builds and solves the certification program for one sub-channel.
///
/// Exact data on the minimum-uncertainty boundary go through facial
/// reduction; otherwise symmetric instances use the reduced program.
pub fn certify(problem: &CertificationProblem, opts: &CertifyOptions) -> Result<CertificationResult> {
    let mut problem = problem.clone();
    problem.cross_moment |= opts.cross_moment;
    if let Some(eta) = opts.trusted_efficiency {
        problem.moments = problem
            .moments
            .iter()
            .map(|m| undo_trusted_loss(m, eta))
            .collect::<Result<_>>()?;
    }
    problem.validate()?;
    let (k, nc) = block_offsets(&problem);
    let face = minimum_uncertainty_face(&problem);
    let reduced = match (&face, opts.use_symmetry) {
        (None, true) => build_reduced_sdp(&problem)?,
        _ => None,
    };
    let fixed = face.as_ref().and_then(|f| determined_state(&problem, f));
    let (sdp_problem, used, layout) = match (reduced, face) {
        _ if fixed.is_some() => {
            let rho = fixed.unwrap();
            (build_fixed(&rho, k, nc), Vec::new(), Layout::Fixed(rho))
        }
        (Some((p, used)), _) => (p, used, Layout::Reduced(k)),
        (None, face) => {
            let face = face.unwrap_or_else(|| Face::full(k, nc));
            let (p, used) = build_on_face(&problem, &face)?;
            (p, used, Layout::Face(face))
        }
    };
    let is_reduced = matches!(layout, Layout::Reduced(_));
    let (sdp_problem, report) = match presolve(&sdp_problem) {
        Ok(r) => r,
        Err(Error::InconsistentSource(msg)) => {
            log::debug!("presolve found inconsistent equalities: {msg}");
            return Ok(CertificationResult::failed(Status::Infeasible, opts.log_base, is_reduced));
        }
        Err(e) => return Err(e),
    };
    log::debug!("presolve removed {} dependent rows", report.removed.len());
    let sol = sdp::solve_with(
        &sdp_problem,
        &SolverOptions {
            tolerance: opts.tolerance,
            max_iter: opts.max_iter,
            max_dimension: sdp_problem.total_dimension().max(sdp::DEFAULT_MAX_DIMENSION),
        },
    )?;
    let mut result = CertificationResult::failed(sol.status, opts.log_base, is_reduced);
    result.relaxed = is_reduced && !is_covariant(&problem, k);
    result.duality_gap = sol.duality_gap;
    result.dual_bound = sol.dual_objective;
    result.iterations = sol.iterations;
    if !matches!(sol.status, Status::Optimal | Status::NearOptimal) {
        return Ok(result);
    }
    let rho = match &layout {
        Layout::Reduced(k) => expand_reduced(&sol.blocks, *k, nc),
        Layout::Face(face) => face.expand(&sol.blocks[0]),
        Layout::Fixed(rho) => rho.clone(),
    };
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    let checked = match layout {
        Layout::Reduced(_) => used.clone(),
        _ => problem.moment_bounds(),
    };
    let verification = verify(&problem, &rho, &checked)?;
    result.verification = Some(verification);
    if verification.max_violation() > VERIFY_TOLERANCE {
        log::warn!(
            "returned state violates constraints by {:.2e}; reporting no certified entanglement",
            verification.max_violation()
        );
        result.status = Status::NumericalFailure;
        return Ok(result);
    }
    for (b, dual) in used.iter().zip(&sol.box_duals) {
        let value = moment_value(&rho, nc, b);
        let slack = (value - b.lower).min(b.upper - value);
        if slack <= 1e-6 * (1.0 + value.abs()) || b.lower == b.upper {
            result.binding_constraints.push(BindingConstraint {
                state: b.state,
                observable: b.observable,
                value,
                lower: b.lower,
                upper: b.upper,
                dual: *dual,
            });
        }
    }
    result.negativity_min = sol.primal_objective.max(0.0);
    result.log_negativity = log_negativity(result.negativity_min, opts.log_base)?;
    Ok(result)
}

/// Certifies one bin's moments against the source model.
pub fn certify_bin(
    moments: &[StateMoments],
    source: &SourceModel,
    sigma_level: f64,
    opts: &CertifyOptions,
) -> Result<CertificationResult> {
    let problem = CertificationProblem::new(source.clone(), moments.to_vec(), sigma_level)?;
    certify(&problem, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphabetFamily {
    Two,
    Four,
}

impl AlphabetFamily {
    pub fn alphabet(&self, amplitude: f64) -> Result<Alphabet> {
        match self {
            AlphabetFamily::Two => Alphabet::two_state(amplitude),
            AlphabetFamily::Four => Alphabet::four_state(amplitude),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AlphabetFamily::Two => "two",
            AlphabetFamily::Four => "four",
        }
    }
}

/// Exact moments after a pure-loss channel with transmission `t` and
/// quadrature variance `1 + epsilon`.
pub fn ideal_moments(alphabet: &Alphabet, t: f64, epsilon: f64) -> Vec<StateMoments> {
    alphabet
        .amplitudes()
        .iter()
        .map(|&a| StateMoments::ideal(a * t.sqrt(), 1.0 + epsilon))
        .collect()
}

/// Moments of the source model's own (truncated) signal states, i.e. the
/// data a lossless, noiseless channel would produce.
pub fn source_moments(source: &SourceModel) -> Vec<StateMoments> {
    let nc = source.cutoff();
    let ops: Vec<DMatrix<C64>> = [Observable::X, Observable::X2, Observable::P, Observable::P2, Observable::XP]
        .iter()
        .map(|o| o.matrix(nc))
        .collect();
    source
        .states()
        .iter()
        .map(|s| {
            let e: Vec<f64> = ops.iter().map(|o| crate::fock::expectation(s, o)).collect();
            let mut m = StateMoments::ideal(C64::new(e[0], e[2]) / 2.0, 1.0);
            m.var_x = e[1] - e[0] * e[0];
            m.var_p = e[3] - e[2] * e[2];
            m.cov_xp = Some(e[4] - e[0] * e[2]);
            m
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub amplitude: f64,
    pub negativity: f64,
    pub log_negativity: f64,
    pub status: Status,
}

/// How the Fock cutoff is chosen for each alphabet in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffRule {
    /// The default rule for the largest amplitude, plus `extra`.
    Auto { extra: usize },
    Fixed(usize),
}

impl Default for CutoffRule {
    fn default() -> Self {
        CutoffRule::Auto { extra: 0 }
    }
}

pub fn cutoff_for(alphabet: &Alphabet, rule: CutoffRule) -> usize {
    match rule {
        CutoffRule::Auto { extra } => default_cutoff(alphabet.max_abs_amplitude()) + extra,
        CutoffRule::Fixed(n) => n,
    }
}

/// Minimal negativity for ideal moments (equal variances `1 + ε`) over a
/// grid of amplitudes.
pub fn theoretical_curve(
    family: AlphabetFamily,
    t: f64,
    epsilon: f64,
    amplitudes: &[f64],
    cutoff: CutoffRule,
    opts: &CertifyOptions,
) -> Result<Vec<CurvePoint>> {
    if amplitudes.is_empty() {
        return Err(Error::invalid("amplitude grid is empty"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("transmission must be in (0, 1], got {t}")));
    }
    amplitudes
        .iter()
        .map(|&amp| curve_point(family, t, epsilon, amp, cutoff, opts))
        .collect()
}

fn curve_point(
    family: AlphabetFamily,
    t: f64,
    epsilon: f64,
    amplitude: f64,
    cutoff: CutoffRule,
    opts: &CertifyOptions,
) -> Result<CurvePoint> {
    let alphabet = family.alphabet(amplitude)?;
    let source = source_model(&alphabet, cutoff_for(&alphabet, cutoff))?;
    let r = certify_bin(&ideal_moments(&alphabet, t, epsilon), &source, 0.0, opts)?;
    Ok(CurvePoint {
        amplitude,
        negativity: r.negativity_min,
        log_negativity: r.log_negativity,
        status: r.status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub family: AlphabetFamily,
    pub epsilon: f64,
    pub max_negativity: f64,
    pub argmax_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub transmission: f64,
    pub rows: Vec<ComparisonRow>,
    /// Smallest ε at which the maximum over amplitudes drops below
    /// [`ZERO_NEGATIVITY`], refined by bisection; `None` if never reached.
    pub thresholds: Vec<(AlphabetFamily, Option<f64>)>,
}

/// Bisection steps used to refine each ε threshold.
pub const THRESHOLD_BISECTIONS: usize = 12;

/// Smallest ε at which the maximum over amplitude drops below
/// [`ZERO_NEGATIVITY`]. `curves[i]` is the curve at `epsilons[i]` (ascending);
/// the first crossing is refined by bisection.
///
/// Negativity is non-increasing in ε at each amplitude, so a bisection step
/// only visits amplitudes still positive at the lower bracket and stops at
/// the first positive one.
pub fn epsilon_threshold(
    family: AlphabetFamily,
    t: f64,
    epsilons: &[f64],
    curves: &[Vec<CurvePoint>],
    cutoff: CutoffRule,
    opts: &CertifyOptions,
) -> Result<Option<f64>> {
    if epsilons.len() != curves.len() {
        return Err(Error::Dimension(format!("{} epsilons, {} curves", epsilons.len(), curves.len())));
    }
    let below = |c: &[CurvePoint]| curve_max(c).is_none_or(|(m, _)| m < ZERO_NEGATIVITY);
    let Some(j) = curves.iter().position(|c| below(c)) else {
        return Ok(None);
    };
    if j == 0 {
        return Ok(Some(epsilons[0]));
    }
    let mut alive: Vec<&CurvePoint> = curves[j - 1].iter().filter(|p| p.negativity >= ZERO_NEGATIVITY).collect();
    alive.sort_by(|a, b| b.negativity.total_cmp(&a.negativity));
    let mut alive: Vec<f64> = alive.iter().map(|p| p.amplitude).collect();
    let (mut lo, mut hi) = (epsilons[j - 1], epsilons[j]);
    for _ in 0..THRESHOLD_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let mut positive = None;
        for (k, &a) in alive.iter().enumerate() {
            if curve_point(family, t, mid, a, cutoff, opts)?.negativity >= ZERO_NEGATIVITY {
                positive = Some(k);
                break;
            }
        }
        match positive {
            Some(k) => {
                // Amplitudes already zero at `mid` stay zero above it.
                alive.drain(..k);
                lo = mid;
            }
            None => hi = mid,
        }
    }
    Ok(Some(hi))
}

/// Maximum over amplitude of each theoretical curve on the ε grid, for both
/// alphabets, with the zero-negativity ε threshold of each.
pub fn compare_alphabets(
    t: f64,
    epsilons: &[f64],
    amplitudes: &[f64],
    cutoff: CutoffRule,
    opts: &CertifyOptions,
) -> Result<Comparison> {
    if epsilons.is_empty() {
        return Err(Error::invalid("epsilon grid is empty"));
    }
    if epsilons.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("epsilon grid must be strictly increasing"));
    }
    let mut rows = Vec::new();
    let mut thresholds = Vec::new();
    for family in [AlphabetFamily::Two, AlphabetFamily::Four] {
        let mut curves = Vec::new();
        for &eps in epsilons {
            let curve = theoretical_curve(family, t, eps, amplitudes, cutoff, opts)?;
            let (max, arg) = curve_max(&curve).expect("grid is non-empty");
            rows.push(ComparisonRow {
                family,
                epsilon: eps,
                max_negativity: max.max(0.0),
                argmax_amplitude: arg,
            });
            curves.push(curve);
        }
        let threshold = epsilon_threshold(family, t, epsilons, &curves, cutoff, opts)?;
        thresholds.push((family, threshold));
    }
    Ok(Comparison {
        transmission: t,
        rows,
        thresholds,
    })
}

/// Largest negativity on a curve and its amplitude; the first point wins ties.
pub fn curve_max(curve: &[CurvePoint]) -> Option<(f64, f64)> {
    curve.iter().fold(None, |best, p| match best {
        Some((m, _)) if p.negativity <= m => best,
        _ => Some((p.negativity, p.amplitude)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCertification {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub prob: f64,
    pub sigma: f64,
    pub result: CertificationResult,
}

/// Certifies every (bin, σ) pair on a pool of `workers` threads; the output
/// is sorted by bin, then σ, independent of scheduling.
pub fn certify_all(
    binned: &BinnedMoments,
    source: &SourceModel,
    sigma_levels: &[f64],
    opts: &CertifyOptions,
    workers: usize,
) -> Result<Vec<BinCertification>> {
    use rayon::prelude::*;
    if binned.n_states != source.len() {
        return Err(Error::Dimension(format!(
            "moments for {} states, alphabet has {}",
            binned.n_states,
            source.len()
        )));
    }
    let jobs: Vec<(usize, f64)> = (0..binned.bins.len())
        .flat_map(|i| sigma_levels.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let mut out: Vec<BinCertification> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| {
                let b = &binned.bins[i];
                let result = certify_bin(&b.states, source, s, opts)?;
                Ok(BinCertification {
                    bin: b.bin,
                    lo: b.lo,
                    hi: b.hi,
                    prob: b.prob,
                    sigma: s,
                    result,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    out.sort_by(|a, b| a.bin.cmp(&b.bin).then(a.sigma.total_cmp(&b.sigma)));
    Ok(out)
}

/// `true` when every bin's values are non-increasing in σ (within `tol`).
/// A non-optimal lower level places no constraint on the levels above it.
pub fn sigma_nested(results: &[BinCertification], tol: f64) -> bool {
    results.windows(2).all(|w| {
        if w[0].bin != w[1].bin || !w[0].result.is_optimal() || !w[1].result.is_optimal() {
            return true;
        }
        w[1].result.negativity_min <= w[0].result.negativity_min + tol
    })
}

pub const RESULTS_HEADER: [&str; 8] = [
    "bin_lo",
    "bin_hi",
    "prob",
    "sigma",
    "negativity",
    "log_negativity",
    "status",
    "gap",
];

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub prob: f64,
    pub sigma: f64,
    pub negativity: f64,
    pub log_negativity: f64,
    pub status: String,
    pub gap: f64,
}

impl From<&BinCertification> for ResultRow {
    fn from(c: &BinCertification) -> Self {
        Self {
            bin_lo: c.lo,
            bin_hi: c.hi,
            prob: c.prob,
            sigma: c.sigma,
            negativity: c.result.negativity_min,
            log_negativity: c.result.log_negativity,
            status: c.result.status.as_str().to_string(),
            gap: c.result.duality_gap,
        }
    }
}

pub fn write_results_csv<W: Write>(mut w: W, rows: &[ResultRow], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RESULTS_HEADER)?;
    for r in rows {
        csv.write_record([
            r.bin_lo.to_string(),
            r.bin_hi.to_string(),
            r.prob.to_string(),
            r.sigma.to_string(),
            r.negativity.to_string(),
            r.log_negativity.to_string(),
            r.status.clone(),
            r.gap.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected results header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad value in column {}", RESULTS_HEADER[j]),
                })
        };
        let status = rec.get(6).unwrap_or("").to_string();
        if Status::parse(&status).is_none() {
            return Err(Error::Parse {
                line,
                message: format!("unknown status {status:?}"),
            });
        }
        rows.push(ResultRow {
            bin_lo: num(0)?,
            bin_hi: num(1)?,
            prob: num(2)?,
            sigma: num(3)?,
            negativity: num(4)?,
            log_negativity: num(5)?,
            status,
            gap: num(7)?,
        });
    }
    Ok(rows)
}
