//! Dense semidefinite programming over complex Hermitian blocks.
//!
//! Problems are stated with real-valued linear functionals on Hermitian
//! block variables: a [`Term`] `(block, row, col, coef)` contributes
//! `Re(coef · X[row, col])`. Equalities and (possibly one-sided) box
//! constraints are supported; boxes get non-negative slack variables.
//!
//! The solver is a homogeneous self-dual interior-point method with
//! Nesterov–Todd scaling and Mehrotra predictor-corrector steps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use faer::linalg::solvers::Solve;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{hermitian_eigenvalues, C64};

pub const DEFAULT_TOLERANCE: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Cap on the summed block dimension.
pub const DEFAULT_MAX_DIMENSION: usize = 400;
const REGULARIZATION: f64 = 1e-12;
const STEP_FACTOR: f64 = 0.99;
const REFINEMENT_STEPS: usize = 3;
pub const NEAR_OPTIMAL_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub coef: C64,
}

impl Term {
    pub fn new(block: usize, row: usize, col: usize, coef: C64) -> Self {
        Self { block, row, col, coef }
    }

    pub fn real(block: usize, row: usize, col: usize, coef: f64) -> Self {
        Self::new(block, row, col, C64::new(coef, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub terms: Vec<Term>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SdpProblem {
    pub blocks: Vec<usize>,
    pub objective: Vec<Term>,
    pub equalities: Vec<(Vec<Term>, f64)>,
    pub boxes: Vec<BoxConstraint>,
}

/// Evaluates `Σ Re(coef · X[row, col])`.
pub fn evaluate(terms: &[Term], blocks: &[DMatrix<C64>]) -> f64 {
    terms
        .iter()
        .map(|t| (t.coef * blocks[t.block][(t.row, t.col)]).re)
        .sum()
}

impl SdpProblem {
    pub fn new(blocks: Vec<usize>) -> Self {
        Self {
            blocks,
            ..Default::default()
        }
    }

    pub fn add_equality(&mut self, terms: Vec<Term>, rhs: f64) {
        self.equalities.push((terms, rhs));
    }

    pub fn add_box(&mut self, terms: Vec<Term>, lower: Option<f64>, upper: Option<f64>) {
        self.boxes.push(BoxConstraint { terms, lower, upper });
    }

    pub fn total_dimension(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn validate(&self, max_dimension: usize) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::Dimension("every block needs positive size".into()));
        }
        if self.total_dimension() > max_dimension {
            return Err(Error::Dimension(format!(
                "total block dimension {} exceeds the cap {max_dimension}",
                self.total_dimension()
            )));
        }
        let check = |terms: &[Term]| -> Result<()> {
            for t in terms {
                let n = *self.blocks.get(t.block).ok_or_else(|| {
                    Error::Dimension(format!("term refers to block {} of {}", t.block, self.blocks.len()))
                })?;
                if t.row >= n || t.col >= n {
                    return Err(Error::Dimension(format!(
                        "term ({}, {}) outside block {} of size {n}",
                        t.row, t.col, t.block
                    )));
                }
                if !t.coef.re.is_finite() || !t.coef.im.is_finite() {
                    return Err(Error::invalid("non-finite coefficient"));
                }
            }
            Ok(())
        };
        check(&self.objective)?;
        for (terms, rhs) in &self.equalities {
            check(terms)?;
            if !rhs.is_finite() {
                return Err(Error::invalid("non-finite right-hand side"));
            }
        }
        for b in &self.boxes {
            check(&b.terms)?;
            if b.lower.is_none() && b.upper.is_none() {
                return Err(Error::invalid("box constraint without bounds"));
            }
            if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                if !(lo <= hi) {
                    return Err(Error::invalid(format!("box bounds {lo} > {hi}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    /// Stalled, but the best iterate meets the tolerance relaxed by
    /// [`NEAR_OPTIMAL_FACTOR`].
    NearOptimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Optimal => "optimal",
            Status::NearOptimal => "near_optimal",
            Status::Infeasible => "infeasible",
            Status::IterationLimit => "iteration_limit",
            Status::NumericalFailure => "numerical_failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "optimal" => Status::Optimal,
            "near_optimal" => Status::NearOptimal,
            "infeasible" => Status::Infeasible,
            "iteration_limit" => Status::IterationLimit,
            "numerical_failure" => Status::NumericalFailure,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateKind {
    /// No point satisfies the constraints.
    Primal,
    /// The objective is unbounded below (the dual is infeasible).
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    /// Residual norm of the normalized certificate.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: Status,
    pub blocks: Vec<DMatrix<C64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Multipliers of the equality constraints, in input order.
    pub equality_duals: Vec<f64>,
    /// Net multipliers of the box constraints (lower plus upper side).
    pub box_duals: Vec<f64>,
    pub certificate: Option<Certificate>,
}

impl SdpSolution {
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| hermitian_eigenvalues(b)[0])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_dimension: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
            max_dimension: DEFAULT_MAX_DIMENSION,
        }
    }
}

/// Solves with the given tolerance and iteration cap.
pub fn solve(problem: &SdpProblem, tol: f64, max_iter: usize) -> Result<SdpSolution> {
    solve_with(
        problem,
        &SolverOptions {
            tolerance: tol,
            max_iter,
            ..Default::default()
        },
    )
}

// ---------------------------------------------------------------------------
// Standard form

#[derive(Debug, Clone, Copy)]
struct Entry {
    r: usize,
    c: usize,
    v: C64,
}

/// One row `⟨F, X⟩ + aᵀx = b` with Hermitian sparse `F` stored entry-wise.
#[derive(Debug, Clone, Default)]
struct Row {
    blocks: Vec<(usize, Vec<Entry>)>,
    lp: Vec<(usize, f64)>,
    b: f64,
}

/// Hermitian sparse matrix of a functional, keyed by (block, r, c).
fn hermitian_entries(terms: &[Term]) -> BTreeMap<(usize, usize, usize), C64> {
    let mut map = BTreeMap::new();
    for t in terms {
        if t.row == t.col {
            *map.entry((t.block, t.row, t.row)).or_insert(C64::new(0.0, 0.0)) += t.coef.re;
        } else {
            *map.entry((t.block, t.col, t.row)).or_insert(C64::new(0.0, 0.0)) += t.coef / 2.0;
            *map.entry((t.block, t.row, t.col)).or_insert(C64::new(0.0, 0.0)) += t.coef.conj() / 2.0;
        }
    }
    map.retain(|_, v| v.norm() > 0.0);
    map
}

fn row_from(terms: &[Term], lp: Vec<(usize, f64)>, b: f64) -> Row {
    let mut blocks: Vec<(usize, Vec<Entry>)> = Vec::new();
    for ((blk, r, c), v) in hermitian_entries(terms) {
        match blocks.last_mut() {
            Some((b0, e)) if *b0 == blk => e.push(Entry { r, c, v }),
            _ => blocks.push((blk, vec![Entry { r, c, v }])),
        }
    }
    Row { blocks, lp, b }
}

impl Row {
    fn norm(&self) -> f64 {
        let s: f64 = self
            .blocks
            .iter()
            .flat_map(|(_, e)| e.iter().map(|e| e.v.norm_sqr()))
            .sum::<f64>()
            + self.lp.iter().map(|(_, a)| a * a).sum::<f64>();
        s.sqrt()
    }

    fn scale(&mut self, s: f64) {
        for (_, e) in &mut self.blocks {
            for x in e {
                x.v /= s;
            }
        }
        for (_, a) in &mut self.lp {
            *a /= s;
        }
        self.b /= s;
    }

    /// `⟨F, X⟩ + aᵀx`.
    fn apply(&self, v: &Point) -> f64 {
        let mut acc = 0.0;
        for (blk, es) in &self.blocks {
            let x = &v.s[*blk];
            for e in es {
                acc += (e.v * x[(e.c, e.r)]).re;
            }
        }
        for (l, a) in &self.lp {
            acc += a * v.l[*l];
        }
        acc
    }
}

/// Element of the product cone space: Hermitian blocks plus an LP vector.
#[derive(Debug, Clone)]
struct Point {
    s: Vec<DMatrix<C64>>,
    l: DVector<f64>,
}

impl Point {
    fn zeros(dims: &[usize], n_lp: usize) -> Self {
        Self {
            s: dims.iter().map(|&n| DMatrix::zeros(n, n)).collect(),
            l: DVector::zeros(n_lp),
        }
    }

    fn identity(dims: &[usize], n_lp: usize) -> Self {
        Self {
            s: dims.iter().map(|&n| DMatrix::identity(n, n)).collect(),
            l: DVector::from_element(n_lp, 1.0),
        }
    }

    fn dot(&self, o: &Point) -> f64 {
        let mut acc = self.l.dot(&o.l);
        for (a, b) in self.s.iter().zip(&o.s) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum::<f64>();
        }
        acc
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, alpha: f64, o: &Point) {
        for (a, b) in self.s.iter_mut().zip(&o.s) {
            a.zip_apply(b, |x, y| *x += y * alpha);
        }
        self.l.axpy(alpha, &o.l, 1.0);
    }

    fn scaled(&self, alpha: f64) -> Point {
        let mut p = self.clone();
        for a in &mut p.s {
            *a *= C64::new(alpha, 0.0);
        }
        p.l *= alpha;
        p
    }

    fn symmetrize(&mut self) {
        for a in &mut self.s {
            let h = (a.clone() + a.adjoint()) * C64::new(0.5, 0.0);
            *a = h;
        }
    }

    fn is_finite(&self) -> bool {
        self.l.iter().all(|x| x.is_finite())
            && self.s.iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

struct StandardForm {
    dims: Vec<usize>,
    n_lp: usize,
    rows: Vec<Row>,
    /// Row normalization factors, `y_original = y / scale`.
    row_scale: Vec<f64>,
    c: Point,
    c_scale: f64,
    /// For each block, the rows touching it.
    by_block: Vec<Vec<usize>>,
    /// Row indices of each equality, and of each box (lower, upper).
    eq_rows: Vec<usize>,
    box_rows: Vec<(Option<usize>, Option<usize>)>,
}

impl StandardForm {
    fn new(p: &SdpProblem) -> Self {
        let mut rows = Vec::new();
        let mut eq_rows = Vec::new();
        let mut box_rows = Vec::new();
        let mut n_lp = 0;
        for (terms, rhs) in &p.equalities {
            eq_rows.push(rows.len());
            rows.push(row_from(terms, Vec::new(), *rhs));
        }
        for bx in &p.boxes {
            match (bx.lower, bx.upper) {
                (Some(lo), Some(hi)) if lo == hi => {
                    box_rows.push((Some(rows.len()), None));
                    rows.push(row_from(&bx.terms, Vec::new(), lo));
                }
                (lo, hi) => {
                    let mut pair = (None, None);
                    if let Some(lo) = lo {
                        pair.0 = Some(rows.len());
                        rows.push(row_from(&bx.terms, vec![(n_lp, -1.0)], lo));
                        n_lp += 1;
                    }
                    if let Some(hi) = hi {
                        pair.1 = Some(rows.len());
                        rows.push(row_from(&bx.terms, vec![(n_lp, 1.0)], hi));
                        n_lp += 1;
                    }
                    box_rows.push(pair);
                }
            }
        }
        let mut row_scale = Vec::with_capacity(rows.len());
        for r in &mut rows {
            let s = r.norm();
            let s = if s > 0.0 { s } else { 1.0 };
            r.scale(s);
            row_scale.push(s);
        }
        let mut c = Point::zeros(&p.blocks, n_lp);
        for ((blk, r, cc), v) in hermitian_entries(&p.objective) {
            c.s[blk][(r, cc)] += v;
        }
        let cn = c.norm();
        let c_scale = if cn > 0.0 { cn } else { 1.0 };
        c = c.scaled(1.0 / c_scale);
        let mut by_block = vec![Vec::new(); p.blocks.len()];
        for (i, r) in rows.iter().enumerate() {
            for (blk, _) in &r.blocks {
                by_block[*blk].push(i);
            }
        }
        Self {
            dims: p.blocks.clone(),
            n_lp,
            rows,
            row_scale,
            c,
            c_scale,
            by_block,
            eq_rows,
            box_rows,
        }
    }

    fn m(&self) -> usize {
        self.rows.len()
    }

    fn b(&self) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.rows.iter().map(|r| r.b))
    }

    fn a_op(&self, v: &Point) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.rows.iter().map(|r| r.apply(v)))
    }

    fn at_op(&self, y: &DVector<f64>) -> Point {
        let mut out = Point::zeros(&self.dims, self.n_lp);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            if yi == 0.0 {
                continue;
            }
            for (blk, es) in &r.blocks {
                let m = &mut out.s[*blk];
                for e in es {
                    m[(e.r, e.c)] += e.v * yi;
                }
            }
            for (l, a) in &r.lp {
                out.l[*l] += a * yi;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Nesterov–Todd scaling

struct BlockScaling {
    g: DMatrix<C64>,
    ginv: DMatrix<C64>,
    w: DMatrix<C64>,
    d: DVector<f64>,
}

struct Scaling {
    blocks: Vec<BlockScaling>,
    /// LP block: `w = x/z`.
    lp_w: DVector<f64>,
}

fn cholesky_lower(m: &DMatrix<C64>) -> Option<DMatrix<C64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.unpack())
}

fn nt_scaling(x: &Point, z: &Point) -> Option<Scaling> {
    let mut blocks = Vec::with_capacity(x.s.len());
    for (xb, zb) in x.s.iter().zip(&z.s) {
        let l = cholesky_lower(xb)?;
        let r = cholesky_lower(zb)?;
        let svd = (r.adjoint() * &l).svd(true, true);
        let vt = svd.v_t?;
        let s = svd.singular_values;
        if s.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let n = s.len();
        let v = vt.adjoint();
        let mut lv = &l * &v;
        let mut sv = vt.clone();
        for j in 0..n {
            let r = s[j].sqrt();
            lv.column_mut(j).apply(|z| *z /= r);
            sv.row_mut(j).apply(|z| *z *= r);
        }
        let linv = l.clone().solve_lower_triangular(&DMatrix::identity(n, n))?;
        let ginv = sv * linv;
        let w = &lv * lv.adjoint();
        blocks.push(BlockScaling {
            g: lv,
            ginv,
            w,
            d: s,
        });
    }
    let lp_w = x.l.zip_map(&z.l, |a, b| a / b);
    Some(Scaling { blocks, lp_w })
}

impl Scaling {
    /// `W V W` per block, `w ∘ v` on the LP part.
    fn apply_w(&self, v: &Point) -> Point {
        Point {
            s: self
                .blocks
                .iter()
                .zip(&v.s)
                .map(|(sc, m)| &sc.w * m * &sc.w)
                .collect(),
            l: self.lp_w.component_mul(&v.l),
        }
    }
}

/// Largest step `α ≤ cap` keeping `D + α Δ̃` positive semidefinite, where `Δ̃`
/// is the scaled direction.
fn max_step_scaled(d: &DVector<f64>, dt: &DMatrix<C64>) -> f64 {
    let n = d.len();
    let m = DMatrix::from_fn(n, n, |i, j| dt[(i, j)] / (d[i] * d[j]).sqrt());
    let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let lmin = hermitian_eigenvalues(&h)[0];
    if lmin < 0.0 {
        -1.0 / lmin
    } else {
        f64::INFINITY
    }
}

fn max_step_lp(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Schur complement

struct Schur {
    llt: faer::linalg::solvers::Llt<f64>,
}

impl Schur {
    fn build(sf: &StandardForm, sc: &Scaling) -> Option<Self> {
        let m = sf.m();
        let mut mat = faer::Mat::<f64>::zeros(m, m);
        for (blk, rows) in sf.by_block.iter().enumerate() {
            let w = &sc.blocks[blk].w;
            let n = w.nrows();
            // Position of each touching row's entries for this block.
            let entries: Vec<&[Entry]> = rows
                .iter()
                .map(|&i| {
                    sf.rows[i]
                        .blocks
                        .iter()
                        .find(|(b, _)| *b == blk)
                        .map(|(_, e)| e.as_slice())
                        .unwrap()
                })
                .collect();
            let mut bmat = DMatrix::<C64>::zeros(n, n);
            for (a, &i) in rows.iter().enumerate() {
                // B = W F_i W from the sparse entries of F_i.
                bmat.fill(C64::new(0.0, 0.0));
                for e in entries[a] {
                    let wc = w.column(e.r);
                    let wr = w.row(e.c);
                    for q in 0..n {
                        let f = wr[q] * e.v;
                        if f == C64::new(0.0, 0.0) {
                            continue;
                        }
                        let mut col = bmat.column_mut(q);
                        col.axpy(f, &wc, C64::new(1.0, 0.0));
                    }
                }
                for (bb, &j) in rows.iter().enumerate().skip(a) {
                    let mut acc = 0.0;
                    for e in entries[bb] {
                        acc += (e.v * bmat[(e.c, e.r)]).re;
                    }
                    mat[(i, j)] += acc;
                    if i != j {
                        mat[(j, i)] += acc;
                    }
                }
            }
        }
        // LP contribution Σ_l a_il a_jl w_l.
        let mut lp_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sf.n_lp];
        for (i, r) in sf.rows.iter().enumerate() {
            for &(l, a) in &r.lp {
                lp_rows[l].push((i, a));
            }
        }
        for (l, list) in lp_rows.iter().enumerate() {
            for &(i, a) in list {
                for &(j, b) in list {
                    mat[(i, j)] += a * b * sc.lp_w[l];
                }
            }
        }
        let max_diag = (0..m).map(|i| mat[(i, i)]).fold(0.0f64, f64::max).max(1.0);
        let mut reg = 0.0;
        for attempt in 0..5 {
            if attempt == 1 {
                reg = REGULARIZATION * max_diag;
            }
            let mut shifted = mat.clone();
            for i in 0..m {
                shifted[(i, i)] += reg;
            }
            if let Ok(llt) = shifted.llt(faer::Side::Lower) {
                return Some(Self { llt });
            }
            reg *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut b = faer::Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.llt.solve_in_place(&mut b);
        DVector::from_fn(rhs.len(), |i, _| b[(i, 0)])
    }
}

// ---------------------------------------------------------------------------
// Interior-point iteration

struct Iterate {
    x: Point,
    z: Point,
    y: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    dx: Point,
    dz: Point,
    dy: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

struct Residuals {
    rp: DVector<f64>,
    rd: Point,
    rg: f64,
}

struct Kkt<'a> {
    sf: &'a StandardForm,
    sc: Scaling,
    schur: Schur,
    b: DVector<f64>,
    wcw: Point,
    u: DVector<f64>,
    q: DVector<f64>,
    c_wcw: f64,
}

impl Kkt<'_> {
    fn solve_direction(&self, it: &Iterate, res: &Residuals, gamma: f64, rc: &Point, rtk: f64) -> Direction {
        let sf = self.sf;
        let mut t = rc.clone();
        t.axpy(-gamma, &self.sc.apply_w(&res.rd));
        let p = self.schur.solve(&(&res.rp * gamma - sf.a_op(&t)));
        let bu = &self.b - &self.u;
        let num = gamma * res.rg - bu.dot(&p) + sf.c.dot(&t) + rtk / it.tau;
        let den = bu.dot(&self.q) + self.c_wcw + it.kappa / it.tau;
        let dtau = num / den;
        let mut dy = &p + &self.q * dtau;
        let aty = sf.at_op(&dy);
        let mut dx = t;
        dx.axpy(-dtau, &self.wcw);
        dx.axpy(1.0, &self.sc.apply_w(&aty));
        let mut dz = res.rd.scaled(gamma);
        dz.axpy(dtau, &sf.c);
        dz.axpy(-1.0, &aty);
        // Refinement of the primal equation A dx = γ r_p + Δτ b; the update
        // (W Aᵀδ W, δ, −Aᵀδ) leaves the other two block equations intact.
        let target = &res.rp * gamma + &self.b * dtau;
        for _ in 0..REFINEMENT_STEPS {
            let err = &target - sf.a_op(&dx);
            if !(err.norm() > 1e-14 * (1.0 + target.norm())) {
                break;
            }
            let delta = self.schur.solve(&err);
            let atd = sf.at_op(&delta);
            dx.axpy(1.0, &self.sc.apply_w(&atd));
            dz.axpy(-1.0, &atd);
            dy += delta;
        }
        let dkappa = (rtk - it.kappa * dtau) / it.tau;
        Direction { dx, dz, dy, dtau, dkappa }
    }

    fn max_step(&self, it: &Iterate, d: &Direction) -> f64 {
        let mut a = f64::INFINITY;
        for (k, sc) in self.sc.blocks.iter().enumerate() {
            let dxt = &sc.ginv * &d.dx.s[k] * sc.ginv.adjoint();
            let dzt = sc.g.adjoint() * &d.dz.s[k] * &sc.g;
            a = a.min(max_step_scaled(&sc.d, &dxt)).min(max_step_scaled(&sc.d, &dzt));
        }
        a = a.min(max_step_lp(&it.x.l, &d.dx.l)).min(max_step_lp(&it.z.l, &d.dz.l));
        if d.dtau < 0.0 {
            a = a.min(-it.tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            a = a.min(-it.kappa / d.dkappa);
        }
        a
    }

    /// Right-hand side of the scaled complementarity equation for the
    /// combined step.
    fn corrector_rc(&self, it: &Iterate, aff: &Direction, sigma_mu: f64) -> (Point, f64) {
        let mut rc = Point::zeros(&self.sf.dims, self.sf.n_lp);
        for (k, sc) in self.sc.blocks.iter().enumerate() {
            let dxt = &sc.ginv * &aff.dx.s[k] * sc.ginv.adjoint();
            let dzt = sc.g.adjoint() * &aff.dz.s[k] * &sc.g;
            let corr = (&dxt * &dzt + &dzt * &dxt) * C64::new(0.5, 0.0);
            let n = sc.d.len();
            let rt = DMatrix::from_fn(n, n, |p, q| {
                let diag = if p == q { sigma_mu - sc.d[p] * sc.d[p] } else { 0.0 };
                (C64::new(diag, 0.0) - corr[(p, q)]) * (2.0 / (sc.d[p] + sc.d[q]))
            });
            rc.s[k] = &sc.g * rt * sc.g.adjoint();
        }
        for l in 0..self.sf.n_lp {
            let (x, z) = (it.x.l[l], it.z.l[l]);
            rc.l[l] = (sigma_mu - x * z - aff.dx.l[l] * aff.dz.l[l]) / z;
        }
        let rtk = sigma_mu - it.tau * it.kappa - aff.dtau * aff.dkappa;
        (rc, rtk)
    }
}

fn step(it: &mut Iterate, d: &Direction, alpha: f64) {
    it.x.axpy(alpha, &d.dx);
    it.z.axpy(alpha, &d.dz);
    it.y.axpy(alpha, &d.dy, 1.0);
    it.tau += alpha * d.dtau;
    it.kappa += alpha * d.dkappa;
    it.x.symmetrize();
    it.z.symmetrize();
}

/// Solves `min ⟨C, X⟩` subject to the problem's constraints and `X ⪰ 0`.
pub fn solve_with(problem: &SdpProblem, opts: &SolverOptions) -> Result<SdpSolution> {
    problem.validate(opts.max_dimension)?;
    let sf = StandardForm::new(problem);
    let m = sf.m();
    let b = sf.b();
    let nu = sf.dims.iter().sum::<usize>() as f64 + sf.n_lp as f64 + 1.0;
    let b_norm = b.norm();
    let c_norm = sf.c.norm();
    let tol = opts.tolerance;

    let mut it = Iterate {
        x: Point::identity(&sf.dims, sf.n_lp),
        z: Point::identity(&sf.dims, sf.n_lp),
        y: DVector::zeros(m),
        tau: 1.0,
        kappa: 1.0,
    };

    let mut status = Status::IterationLimit;
    let mut certificate = None;
    let mut iterations = 0;
    let mut metrics;
    let mut best: Option<(f64, (f64, f64, f64), (Point, DVector<f64>, f64))> = None;

    loop {
        let ax = sf.a_op(&it.x);
        let aty = sf.at_op(&it.y);
        let cx = sf.c.dot(&it.x);
        let by = b.dot(&it.y);
        let rp = &b * it.tau - &ax;
        let mut rd = sf.c.scaled(it.tau);
        rd.axpy(-1.0, &aty);
        rd.axpy(-1.0, &it.z);
        let rg = it.kappa + cx - by;

        let pres = (&ax / it.tau - &b).norm() / (1.0 + b_norm);
        let dres = rd.norm() / it.tau / (1.0 + c_norm);
        let pobj = cx / it.tau;
        let dobj = by / it.tau;
        let gap = (pobj - dobj).abs() * sf.c_scale;
        metrics = (pres, dres, gap);
        let score = pres.max(dres).max(gap / (pobj.abs() * sf.c_scale).max(1.0));
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, metrics, (it.x.clone(), it.y.clone(), it.tau)));
        }
        log::trace!(
            "ipm {iterations:3}: pres {pres:.2e} dres {dres:.2e} gap {gap:.2e} tau {:.2e} kappa {:.2e}",
            it.tau,
            it.kappa
        );
        if pres <= tol && dres <= tol && gap <= tol * (pobj.abs() * sf.c_scale).max(1.0) {
            status = Status::Optimal;
            break;
        }
        // Infeasibility certificates from the homogeneous embedding.
        if by > 0.0 {
            let mut r = aty.clone();
            r.axpy(1.0, &it.z);
            let norm = r.norm() / by;
            if norm <= tol && it.tau < tol * it.kappa.max(1.0) * 1e3 {
                status = Status::Infeasible;
                certificate = Some(Certificate { kind: CertificateKind::Primal, norm });
                break;
            }
        }
        if cx < 0.0 {
            let norm = ax.norm() / -cx;
            if norm <= tol && it.tau < tol * it.kappa.max(1.0) * 1e3 {
                status = Status::Infeasible;
                certificate = Some(Certificate { kind: CertificateKind::Dual, norm });
                break;
            }
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let Some(sc) = nt_scaling(&it.x, &it.z) else {
            status = Status::NumericalFailure;
            break;
        };
        let Some(schur) = Schur::build(&sf, &sc) else {
            status = Status::NumericalFailure;
            break;
        };
        let wcw = sc.apply_w(&sf.c);
        let u = sf.a_op(&wcw);
        let q = schur.solve(&(&u + &b));
        let c_wcw = sf.c.dot(&wcw);
        let kkt = Kkt { sf: &sf, sc, schur, b: b.clone(), wcw, u, q, c_wcw };
        let res = Residuals { rp, rd, rg };

        let mu = (it.x.dot(&it.z) + it.tau * it.kappa) / nu;
        let aff = kkt.solve_direction(&it, &res, 1.0, &it.x.scaled(-1.0), -it.tau * it.kappa);
        let alpha_aff = kkt.max_step(&it, &aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);
        let (rc, rtk) = kkt.corrector_rc(&it, &aff, sigma * mu);
        let dir = kkt.solve_direction(&it, &res, 1.0 - sigma, &rc, rtk);
        if !dir.dx.is_finite() || !dir.dz.is_finite() || !dir.dtau.is_finite() {
            status = Status::NumericalFailure;
            break;
        }
        let alpha = (STEP_FACTOR * kkt.max_step(&it, &dir)).min(1.0);
        if alpha < 1e-10 {
            status = Status::NumericalFailure;
            break;
        }
        step(&mut it, &dir, alpha);
        if !(it.tau > 0.0) || !(it.kappa > 0.0) {
            status = Status::NumericalFailure;
            break;
        }
    }

    if matches!(status, Status::IterationLimit | Status::NumericalFailure) {
        if let Some((score, m, (x, y, tau))) = best {
            if score <= NEAR_OPTIMAL_FACTOR * tol {
                status = Status::NearOptimal;
                metrics = m;
                it.x = x;
                it.y = y;
                it.tau = tau;
            }
        }
    }
    let tau = it.tau;
    let blocks: Vec<DMatrix<C64>> = it.x.s.iter().map(|m| m / C64::new(tau, 0.0)).collect();
    let y: Vec<f64> = it
        .y
        .iter()
        .zip(&sf.row_scale)
        .map(|(y, s)| y / tau / s * sf.c_scale)
        .collect();
    let primal_objective = evaluate(&problem.objective, &blocks);
    let dual_objective = b.dot(&it.y) / tau * sf.c_scale;
    let equality_duals = sf.eq_rows.iter().map(|&i| y[i]).collect();
    let box_duals = sf
        .box_rows
        .iter()
        .map(|(lo, hi)| lo.map_or(0.0, |i| y[i]) + hi.map_or(0.0, |i| y[i]))
        .collect();
    Ok(SdpSolution {
        status,
        blocks,
        primal_objective,
        dual_objective,
        duality_gap: (primal_objective - dual_objective).abs(),
        primal_residual: metrics.0,
        dual_residual: metrics.1,
        iterations,
        equality_duals,
        box_duals,
        certificate,
    })
}

// ---------------------------------------------------------------------------
// Presolve

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PresolveReport {
    /// Indices of equalities removed as linear combinations of the others.
    pub removed: Vec<usize>,
    /// Largest right-hand-side inconsistency among removed rows.
    pub max_inconsistency: f64,
}

/// Drops equality constraints that are linear combinations of the others.
///
/// Uses a pivoted Cholesky factorization of the equality rows' Gram matrix.
/// Fails when a dependent row's right-hand side disagrees with the
/// combination by more than `1e-8` relative.
pub fn presolve(problem: &SdpProblem) -> Result<(SdpProblem, PresolveReport)> {
    let rows: Vec<BTreeMap<(usize, usize, usize), C64>> = problem
        .equalities
        .iter()
        .map(|(t, _)| hermitian_entries(t))
        .collect();
    let m = rows.len();
    if m == 0 {
        return Ok((problem.clone(), PresolveReport::default()));
    }
    let mut by_key: BTreeMap<(usize, usize, usize), Vec<(usize, C64)>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        for (k, v) in r {
            by_key.entry(*k).or_default().push((i, *v));
        }
    }
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for list in by_key.values() {
        for &(i, a) in list {
            for &(j, b) in list {
                gram[(i, j)] += (a * b.conj()).re;
            }
        }
    }
    // Pivoted Cholesky: L Lᵀ restricted to the selected pivots.
    let max_diag = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let thresh = 1e-10 * max_diag.max(f64::MIN_POSITIVE);
    let mut diag: Vec<f64> = (0..m).map(|i| gram[(i, i)]).collect();
    let mut l_cols: Vec<DVector<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut active = vec![true; m];
    loop {
        let Some((p, &dp)) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| active[*i])
            .max_by(|a, b| a.1.total_cmp(b.1))
        else {
            break;
        };
        if dp <= thresh {
            break;
        }
        let mut col = DVector::from_fn(m, |i, _| gram[(i, p)]);
        for lc in &l_cols {
            let f = lc[p];
            col.axpy(-f, lc, 1.0);
        }
        col /= dp.sqrt();
        for i in 0..m {
            diag[i] -= col[i] * col[i];
        }
        active[p] = false;
        pivots.push(p);
        l_cols.push(col);
    }
    let mut keep: Vec<usize> = pivots.clone();
    keep.sort_unstable();
    let removed: Vec<usize> = (0..m).filter(|i| !keep.contains(i)).collect();
    let mut max_inconsistency: f64 = 0.0;
    if !removed.is_empty() {
        let gk = DMatrix::from_fn(keep.len(), keep.len(), |a, b| gram[(keep[a], keep[b])]);
        let chol = nalgebra::Cholesky::new(gk)
            .ok_or_else(|| Error::InconsistentSource("presolve Gram factorization failed".into()))?;
        let bk = DVector::from_fn(keep.len(), |a, _| problem.equalities[keep[a]].1);
        let bscale = bk.amax().max(1.0);
        for &d in &removed {
            let g = DVector::from_fn(keep.len(), |a, _| gram[(keep[a], d)]);
            let coeff = chol.solve(&g);
            let mismatch = (coeff.dot(&bk) - problem.equalities[d].1).abs();
            max_inconsistency = max_inconsistency.max(mismatch / bscale);
        }
        if max_inconsistency > 1e-8 {
            return Err(Error::InconsistentSource(format!(
                "dependent equality constraints disagree by {max_inconsistency:.3e}"
            )));
        }
    }
    let mut reduced = problem.clone();
    reduced.equalities = keep.iter().map(|&i| problem.equalities[i].clone()).collect();
    Ok((reduced, PresolveReport { removed, max_inconsistency }))
}

// ---------------------------------------------------------------------------
// Text dump

const DUMP_MAGIC: &str = "cvee-sdp 1";

fn write_terms(out: &mut String, terms: &[Term]) {
    for t in terms {
        let _ = writeln!(out, "{} {} {} {:e} {:e}", t.block, t.row, t.col, t.coef.re, t.coef.im);
    }
}

fn bound(b: Option<f64>, inf: &str) -> String {
    b.map_or(inf.to_string(), |v| format!("{v:e}"))
}

/// Serializes a problem as text.
///
/// ```text
/// cvee-sdp 1
/// blocks <n_1> ... <n_k>
/// objective <count>
/// <block> <row> <col> <re> <im>      (one line per term)
/// eq <count> <rhs>
/// ...terms
/// box <count> <lower|-inf> <upper|inf>
/// ...terms
/// ```
///
/// A term contributes `Re((re + i·im) · X[row, col])`. Lines starting with
/// `#` are comments.
pub fn dump(problem: &SdpProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DUMP_MAGIC}");
    let dims: Vec<String> = problem.blocks.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(out, "blocks {}", dims.join(" "));
    let _ = writeln!(out, "objective {}", problem.objective.len());
    write_terms(&mut out, &problem.objective);
    for (terms, rhs) in &problem.equalities {
        let _ = writeln!(out, "eq {} {rhs:e}", terms.len());
        write_terms(&mut out, terms);
    }
    for bx in &problem.boxes {
        let _ = writeln!(
            out,
            "box {} {} {}",
            bx.terms.len(),
            bound(bx.lower, "-inf"),
            bound(bx.upper, "inf")
        );
        write_terms(&mut out, &bx.terms);
    }
    out
}

/// Parses the format written by [`dump`].
pub fn parse_dump<R: BufRead>(reader: R) -> Result<SdpProblem> {
    let mut lines = Vec::new();
    for (i, l) in reader.lines().enumerate() {
        let l = l?;
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        lines.push((i + 1, t.split_whitespace().map(String::from).collect::<Vec<_>>()));
    }
    let perr = |line: usize, message: String| Error::Parse { line, message };
    let num = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| perr(line, format!("bad number {s:?}: {e}")))
    };
    let int = |line: usize, s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|e| perr(line, format!("bad integer {s:?}: {e}")))
    };
    let bound = |line: usize, s: &str| -> Result<Option<f64>> {
        match s {
            "inf" | "-inf" => Ok(None),
            _ => num(line, s).map(Some),
        }
    };

    let mut cur = lines.iter();
    let (n0, head) = cur.next().ok_or_else(|| perr(0, "empty input".into()))?;
    if head.join(" ") != DUMP_MAGIC {
        return Err(perr(*n0, format!("expected {DUMP_MAGIC:?}")));
    }
    let (n1, blocks) = cur.next().ok_or_else(|| perr(*n0, "missing blocks line".into()))?;
    if blocks.first().map(String::as_str) != Some("blocks") {
        return Err(perr(*n1, "expected `blocks`".into()));
    }
    let mut p = SdpProblem::new(blocks[1..].iter().map(|s| int(*n1, s)).collect::<Result<_>>()?);

    while let Some((n, hdr)) = cur.next() {
        let n = *n;
        let field = |i: usize| -> Result<&str> {
            hdr.get(i).map(String::as_str).ok_or_else(|| perr(n, "header too short".into()))
        };
        let count = int(n, field(1)?)?;
        let mut terms = Vec::with_capacity(count);
        for _ in 0..count {
            let (tn, f) = cur.next().ok_or_else(|| perr(n, "truncated term list".into()))?;
            if f.len() != 5 {
                return Err(perr(*tn, "a term needs 5 fields".into()));
            }
            terms.push(Term::new(
                int(*tn, &f[0])?,
                int(*tn, &f[1])?,
                int(*tn, &f[2])?,
                C64::new(num(*tn, &f[3])?, num(*tn, &f[4])?),
            ));
        }
        match hdr[0].as_str() {
            "objective" => p.objective = terms,
            "eq" => p.add_equality(terms, num(n, field(2)?)?),
            "box" => p.add_box(terms, bound(n, field(2)?)?, bound(n, field(3)?)?),
            other => return Err(perr(n, format!("unknown section {other:?}"))),
        }
    }
    p.validate(usize::MAX)?;
    Ok(p)
}
