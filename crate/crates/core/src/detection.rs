//! Heterodyne measurement simulation, record ingestion, shot-noise
//! normalization, transmission binning and Q-function estimation.
//!
//! Normalized heterodyne outcomes have vacuum variance 2 per quadrature. A
//! state variance is the outcome variance minus that extra vacuum unit, so
//! it is directly comparable with homodyne SNU.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::channel::{
    propagate, BeamGeometry, ChannelParams, TransmissionHistogram, TransmissionSampler,
};
use crate::error::{Error, Result};
use crate::fock::C64;

/// Vacuum variance of one normalized heterodyne quadrature.
pub const HETERODYNE_VACUUM_VARIANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub k: usize,
    pub signal_x: f64,
    pub signal_p: f64,
    pub vacuum_x: f64,
    pub vacuum_p: f64,
    pub monitor_t: f64,
}

/// Where per-slot transmissions come from.
#[derive(Debug, Clone)]
pub enum TransmissionSource {
    Fixed(f64),
    Beam(BeamGeometry),
    /// Bin chosen by its probability, uniform within the bin. Outside mass is ignored.
    Histogram(TransmissionHistogram),
    Samples(Vec<f64>),
}

// Independent streams for transmissions and outcomes, both derived from one seed.
const TRANSMISSION_STREAM: u64 = 0x5EED_7A45;

/// Draws `n` transmissions from `source`, deterministic per seed.
pub fn simulate_transmissions(source: &TransmissionSource, n: usize, seed: u64) -> Result<Vec<f64>> {
    let seed = seed ^ TRANSMISSION_STREAM;
    match source {
        TransmissionSource::Fixed(t) => {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::invalid(format!("transmission {t} outside [0, 1]")));
            }
            Ok(vec![*t; n])
        }
        TransmissionSource::Beam(g) => {
            let mut s = TransmissionSampler::new(g, seed)?;
            Ok((0..n).map(|_| s.next_transmission()).collect())
        }
        TransmissionSource::Histogram(h) => {
            let pick = WeightedIndex::new(h.counts())
                .map_err(|e| Error::invalid(format!("histogram cannot be sampled: {e}")))?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let (lo, hi) = h.bin(pick.sample(&mut rng));
                    (lo + (hi - lo) * rng.random::<f64>()).clamp(0.0, 1.0)
                })
                .collect())
        }
        TransmissionSource::Samples(v) => {
            if v.is_empty() {
                return Err(Error::invalid("empty transmission sample list"));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Ok((0..n).map(|_| v[rng.random_range(0..v.len())]).collect())
        }
    }
}

/// Forward model of the receiver: one record per call, outcomes drawn from a
/// seeded stream.
#[derive(Debug, Clone)]
pub struct RecordSimulator {
    amplitudes: Vec<C64>,
    pick: WeightedIndex<f64>,
    params: ChannelParams,
    raw_scale: f64,
    rng: ChaCha20Rng,
}

impl RecordSimulator {
    /// `raw_scale` multiplies every outcome, with an extra `√T` because the
    /// local oscillator travels the same channel.
    pub fn new(alphabet: &Alphabet, params: &ChannelParams, raw_scale: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        if !(raw_scale > 0.0) || !raw_scale.is_finite() {
            return Err(Error::invalid(format!("raw scale must be positive, got {raw_scale}")));
        }
        let pick = WeightedIndex::new(alphabet.priors())
            .map_err(|e| Error::invalid(format!("priors cannot be sampled: {e}")))?;
        Ok(Self {
            amplitudes: alphabet.amplitudes().to_vec(),
            pick,
            params: *params,
            raw_scale,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    pub fn record(&mut self, t: f64) -> Result<SlotRecord> {
        let k = self.pick.sample(&mut self.rng);
        let (a, v) = propagate(self.amplitudes[k], 1.0, t, &self.params)?;
        let scale = self.raw_scale * t.sqrt();
        let sd = (v + 1.0).sqrt();
        let vac_sd = HETERODYNE_VACUUM_VARIANCE.sqrt();
        let mut n = || -> f64 { StandardNormal.sample(&mut self.rng) };
        let signal_x = scale * (2.0 * a.re + sd * n());
        let signal_p = scale * (2.0 * a.im + sd * n());
        let vacuum_x = scale * vac_sd * n();
        let vacuum_p = scale * vac_sd * n();
        Ok(SlotRecord {
            k,
            signal_x,
            signal_p,
            vacuum_x,
            vacuum_p,
            monitor_t: t,
        })
    }
}

/// Simulates `n_slots` records.
pub fn simulate_records(
    alphabet: &Alphabet,
    source: &TransmissionSource,
    params: &ChannelParams,
    n_slots: usize,
    raw_scale: f64,
    seed: u64,
) -> Result<Vec<SlotRecord>> {
    if n_slots == 0 {
        return Err(Error::invalid("n_slots must be positive"));
    }
    let ts = simulate_transmissions(source, n_slots, seed)?;
    let mut sim = RecordSimulator::new(alphabet, params, raw_scale, seed)?;
    ts.into_iter().map(|t| sim.record(t)).collect()
}

/// Maps raw Stokes differences onto raw quadratures, `x = S₁/√|⟨S₃⟩|`.
pub fn stokes_to_quadrature(s1: f64, s2: f64, lo_calibration: f64) -> Result<(f64, f64)> {
    if lo_calibration == 0.0 || !lo_calibration.is_finite() {
        return Err(Error::invalid("local-oscillator calibration must be non-zero"));
    }
    let c = lo_calibration.abs().sqrt();
    Ok((s1 / c, s2 / c))
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) -> f64 {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
        d
    }

    fn var(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Streaming sufficient statistics for one (bin, state) cell.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellAccumulator {
    sx: Running,
    sp: Running,
    vx: Running,
    vp: Running,
    co_xp: f64,
    t_sum: f64,
}

impl CellAccumulator {
    pub fn push(&mut self, signal_x: f64, signal_p: f64, vacuum_x: f64, vacuum_p: f64, t: f64) {
        let dx = self.sx.push(signal_x);
        self.sp.push(signal_p);
        self.co_xp += dx * (signal_p - self.sp.mean);
        self.vx.push(vacuum_x);
        self.vp.push(vacuum_p);
        self.t_sum += t;
    }

    pub fn len(&self) -> u64 {
        self.sx.n
    }

    pub fn is_empty(&self) -> bool {
        self.sx.n == 0
    }

    pub fn moments(&self) -> Result<StateMoments> {
        let n = self.sx.n;
        if n < 2 {
            return Err(Error::DegenerateVacuum(format!("{n} vacuum samples")));
        }
        let (rvx, rvp) = (self.vx.var(), self.vp.var());
        if !(rvx > 0.0 && rvp > 0.0) {
            return Err(Error::DegenerateVacuum(format!(
                "raw vacuum variances ({rvx:.3e}, {rvp:.3e})"
            )));
        }
        let cx2 = HETERODYNE_VACUUM_VARIANCE / rvx;
        let cp2 = HETERODYNE_VACUUM_VARIANCE / rvp;
        let out_x = cx2 * self.sx.var();
        let out_p = cp2 * self.sp.var();
        let nf = n as f64;
        let ratio = (2.0 / (nf - 1.0) + 2.0 / (nf - 1.0)).sqrt();
        Ok(StateMoments {
            mean_x: cx2.sqrt() * self.sx.mean,
            mean_p: cp2.sqrt() * self.sp.mean,
            var_x: out_x - 1.0,
            var_p: out_p - 1.0,
            cov_xp: Some((cx2 * cp2).sqrt() * self.co_xp / (nf - 1.0)),
            n,
            se_mean: (out_x.max(out_p) / nf).sqrt(),
            se_var: out_x.max(out_p) * ratio,
            raw_vacuum_var_x: Some(rvx),
            raw_vacuum_var_p: Some(rvp),
            mean_t: Some(self.t_sum / nf),
        })
    }
}

/// Conditional moments of one signal state, in SNU.
///
/// `se_mean` and `se_var` are the larger of the two quadratures' standard
/// errors; the variance error folds in the vacuum estimate as well, giving
/// `V_out·√(2/(n−1) + 2/(n−1))` for outcome variance `V_out`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMoments {
    pub mean_x: f64,
    pub mean_p: f64,
    pub var_x: f64,
    pub var_p: f64,
    /// Symmetrized covariance `⟨ΔXΔP⟩`; absent when read back from CSV.
    pub cov_xp: Option<f64>,
    pub n: u64,
    pub se_mean: f64,
    pub se_var: f64,
    pub raw_vacuum_var_x: Option<f64>,
    pub raw_vacuum_var_p: Option<f64>,
    pub mean_t: Option<f64>,
}

impl StateMoments {
    /// Amplitude estimate `(mean_x + i mean_p)/2`.
    pub fn amplitude(&self) -> C64 {
        C64::new(self.mean_x, self.mean_p) / 2.0
    }

    /// Exact moments of a Gaussian state with amplitude `alpha` and equal
    /// quadrature variances; standard errors left at zero.
    pub fn ideal(alpha: C64, variance: f64) -> Self {
        Self {
            mean_x: 2.0 * alpha.re,
            mean_p: 2.0 * alpha.im,
            var_x: variance,
            var_p: variance,
            cov_xp: Some(0.0),
            n: 0,
            se_mean: 0.0,
            se_var: 0.0,
            raw_vacuum_var_x: None,
            raw_vacuum_var_p: None,
            mean_t: None,
        }
    }

    fn physical(&self) -> bool {
        self.var_x > -0.5 && self.var_p > -0.5
    }
}

/// Normalizes signal outcomes against their paired vacuum references.
pub fn normalize(signal: &[(f64, f64)], vacuum: &[(f64, f64)]) -> Result<StateMoments> {
    if signal.len() != vacuum.len() {
        return Err(Error::Dimension(format!(
            "{} signal vs {} vacuum samples",
            signal.len(),
            vacuum.len()
        )));
    }
    let mut acc = CellAccumulator::default();
    for (s, v) in signal.iter().zip(vacuum) {
        acc.push(s.0, s.1, v.0, v.1, 0.0);
    }
    acc.moments()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMoments {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub prob: f64,
    pub states: Vec<StateMoments>,
}

impl BinMoments {
    /// Mean transmission of the records in the bin, or the bin centre.
    pub fn transmission(&self) -> f64 {
        let (sum, n) = self
            .states
            .iter()
            .filter_map(|s| s.mean_t.map(|t| (t * s.n as f64, s.n)))
            .fold((0.0, 0), |(a, b), (t, n)| (a + t, b + n));
        if n > 0 {
            sum / n as f64
        } else {
            0.5 * (self.lo + self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinnedMoments {
    pub n_states: usize,
    pub bins: Vec<BinMoments>,
    /// Records whose transmission fell outside every bin.
    pub out_of_range: u64,
    /// Records with a state label outside the alphabet.
    pub bad_labels: u64,
    /// Retained bins dropped for missing or degenerate data, with the reason.
    pub dropped: Vec<(usize, String)>,
}

/// Accumulates records into (bin, state) cells without storing them.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    histogram: TransmissionHistogram,
    n_states: usize,
    cells: Vec<CellAccumulator>,
    out_of_range: u64,
    bad_labels: u64,
}

impl MomentAccumulator {
    pub fn new(histogram: &TransmissionHistogram, n_states: usize) -> Self {
        Self {
            histogram: histogram.clone(),
            n_states,
            cells: vec![CellAccumulator::default(); histogram.len() * n_states],
            out_of_range: 0,
            bad_labels: 0,
        }
    }

    pub fn push(&mut self, r: &SlotRecord) {
        if r.k >= self.n_states {
            self.bad_labels += 1;
            return;
        }
        match self.histogram.bin_index(r.monitor_t) {
            Some(b) => self.cells[b * self.n_states + r.k].push(
                r.signal_x,
                r.signal_p,
                r.vacuum_x,
                r.vacuum_p,
                r.monitor_t,
            ),
            None => self.out_of_range += 1,
        }
    }

    pub fn finish(self) -> BinnedMoments {
        let mut out = BinnedMoments {
            n_states: self.n_states,
            out_of_range: self.out_of_range,
            bad_labels: self.bad_labels,
            ..Default::default()
        };
        for b in self.histogram.retained_indices() {
            let cells = &self.cells[b * self.n_states..(b + 1) * self.n_states];
            let states: Result<Vec<_>> = cells.iter().map(|c| c.moments()).collect();
            match states {
                Ok(states) if states.iter().all(|s| s.physical()) => {
                    let (lo, hi) = self.histogram.bin(b);
                    out.bins.push(BinMoments {
                        bin: b,
                        lo,
                        hi,
                        prob: self.histogram.probability(b),
                        states,
                    });
                }
                Ok(_) => out.dropped.push((b, "variance below −0.5 SNU".into())),
                Err(e) => out.dropped.push((b, e.to_string())),
            }
        }
        if out.out_of_range > 0 {
            log::warn!("{} records outside every transmission bin", out.out_of_range);
        }
        out
    }
}

/// Sorts records into the retained bins of `histogram` and estimates
/// per-state moments in each.
pub fn bin_records(records: &[SlotRecord], histogram: &TransmissionHistogram, n_states: usize) -> BinnedMoments {
    let mut acc = MomentAccumulator::new(histogram, n_states);
    for r in records {
        acc.push(r);
    }
    acc.finish()
}

/// Simulates and bins in one pass without materializing records. Produces
/// the same moments as `bin_records(simulate_records(..))` with the same seed,
/// given the histogram built from `simulate_transmissions(source, n_slots, seed)`.
pub fn simulate_binned(
    alphabet: &Alphabet,
    transmissions: &[f64],
    histogram: &TransmissionHistogram,
    params: &ChannelParams,
    raw_scale: f64,
    seed: u64,
) -> Result<BinnedMoments> {
    let mut sim = RecordSimulator::new(alphabet, params, raw_scale, seed)?;
    let mut acc = MomentAccumulator::new(histogram, alphabet.len());
    for &t in transmissions {
        acc.push(&sim.record(t)?);
    }
    Ok(acc.finish())
}

/// Normalized heterodyne outcomes `(x, p)` in SNU for the records of one
/// state, or all states when `state` is `None`. Each state is scaled by its
/// own paired vacuum references.
pub fn normalized_outcomes(records: &[SlotRecord], state: Option<usize>) -> Result<Vec<(f64, f64)>> {
    let n_states = records.iter().map(|r| r.k + 1).max().unwrap_or(0);
    let mut vac = vec![(Running::default(), Running::default()); n_states];
    for r in records {
        vac[r.k].0.push(r.vacuum_x);
        vac[r.k].1.push(r.vacuum_p);
    }
    let scale: Vec<Option<(f64, f64)>> = vac
        .iter()
        .map(|(x, p)| {
            let (vx, vp) = (x.var(), p.var());
            (vx > 0.0 && vp > 0.0).then(|| {
                (
                    (HETERODYNE_VACUUM_VARIANCE / vx).sqrt(),
                    (HETERODYNE_VACUUM_VARIANCE / vp).sqrt(),
                )
            })
        })
        .collect();
    records
        .iter()
        .filter(|r| state.is_none_or(|k| r.k == k))
        .map(|r| {
            let (cx, cp) = scale[r.k]
                .ok_or_else(|| Error::DegenerateVacuum(format!("state {} vacuum references", r.k)))?;
            Ok((cx * r.signal_x, cp * r.signal_p))
        })
        .collect()
}

/// Square grid in `β = (x + ip)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    pub center: (f64, f64),
    pub half_width: f64,
    pub bins_per_axis: usize,
}

impl Default for QGrid {
    fn default() -> Self {
        Self {
            center: (0.0, 0.0),
            half_width: 3.0,
            bins_per_axis: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QField {
    pub grid: QGrid,
    /// Row-major over (Re β, Im β).
    pub values: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_samples: u64,
    /// Fraction of samples that fell outside the grid.
    pub outside_fraction: f64,
}

impl QField {
    pub fn bin_width(&self) -> f64 {
        2.0 * self.grid.half_width / self.grid.bins_per_axis as f64
    }

    pub fn bin_center(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.bin_width();
        (
            self.grid.center.0 - self.grid.half_width + (i as f64 + 0.5) * h,
            self.grid.center.1 - self.grid.half_width + (j as f64 + 0.5) * h,
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.bins_per_axis + j]
    }

    /// `∑ Q dβ²` over the grid.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.bin_width().powi(2)
    }

    /// Largest bin value and its indices.
    pub fn max_bin(&self) -> (f64, usize, usize) {
        let (idx, v) = self
            .values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        (v, idx / self.grid.bins_per_axis, idx % self.grid.bins_per_axis)
    }

    /// Peak height from a count-weighted least-squares fit of a quadratic to
    /// `ln Q` over bins within `radius` of the largest bin. When the fit has
    /// no interior maximum (flat or saddle-shaped tops), the largest fitted
    /// value over those bins is used; the raw maximum only when the fit fails.
    pub fn peak(&self, radius: f64) -> f64 {
        let (raw, i0, j0) = self.max_bin();
        let (cx, cy) = self.bin_center(i0, j0);
        let n = self.grid.bins_per_axis;
        let mut ata = nalgebra::Matrix6::<f64>::zeros();
        let mut atb = nalgebra::Vector6::<f64>::zeros();
        let mut disc = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let c = self.counts[i * n + j];
                if c == 0 {
                    continue;
                }
                let (x, y) = self.bin_center(i, j);
                let (dx, dy) = (x - cx, y - cy);
                if dx.hypot(dy) > radius {
                    continue;
                }
                let row = nalgebra::Vector6::new(1.0, dx, dy, dx * dx, dx * dy, dy * dy);
                // Poisson counts: Var(ln Q) ≈ 1/count.
                let w = c as f64;
                ata += w * row * row.transpose();
                atb += w * row * self.value(i, j).ln();
                disc.push(row);
            }
        }
        if disc.len() < 6 {
            return raw;
        }
        let Some(c) = ata.cholesky().map(|ch| ch.solve(&atb)) else {
            return raw;
        };
        let on_disc = || disc.iter().map(|r| r.dot(&c)).fold(f64::NEG_INFINITY, f64::max).exp();
        let h = nalgebra::Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
        let g = nalgebra::Vector2::new(c[1], c[2]);
        if !(h[(0, 0)] < 0.0 && h.determinant() > 0.0) {
            return on_disc();
        }
        let Some(hinv) = h.try_inverse() else {
            return on_disc();
        };
        let s = -(hinv * g);
        if s.norm() > radius {
            return on_disc();
        }
        (c[0] + 0.5 * g.dot(&s)).exp()
    }
}

/// Histogram estimate of the Q-function from normalized heterodyne outcomes,
/// scaled so that the total mass (including outside samples) is one.
pub fn estimate_q(outcomes: &[(f64, f64)], grid: QGrid) -> Result<QField> {
    if outcomes.is_empty() {
        return Err(Error::invalid("no outcomes for the Q estimate"));
    }
    if grid.bins_per_axis == 0 || !(grid.half_width > 0.0) {
        return Err(Error::invalid("Q grid needs positive size"));
    }
    let n = grid.bins_per_axis;
    let h = 2.0 * grid.half_width / n as f64;
    let (x0, y0) = (grid.center.0 - grid.half_width, grid.center.1 - grid.half_width);
    let mut counts = vec![0u64; n * n];
    let mut outside = 0u64;
    for &(x, p) in outcomes {
        let (bx, by) = (x / 2.0, p / 2.0);
        let i = ((bx - x0) / h).floor();
        let j = ((by - y0) / h).floor();
        if i < 0.0 || j < 0.0 || i >= n as f64 || j >= n as f64 {
            outside += 1;
        } else {
            counts[i as usize * n + j as usize] += 1;
        }
    }
    let total = outcomes.len() as f64;
    let outside_fraction = outside as f64 / total;
    if outside_fraction > 1e-3 {
        log::warn!("Q grid misses {:.2}% of samples", 100.0 * outside_fraction);
    }
    let values = counts.iter().map(|&c| c as f64 / (total * h * h)).collect();
    Ok(QField {
        grid,
        values,
        counts,
        n_samples: outcomes.len() as u64,
        outside_fraction,
    })
}

/// `1/π`, the largest value any Q-function can take.
pub const Q_MAX: f64 = 1.0 / PI;

pub const RECORD_HEADER: &str = "k,signal_x,signal_p,vacuum_x,vacuum_p,monitor_T";

pub fn write_records<W: Write>(mut w: W, records: &[SlotRecord], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "# {RECORD_HEADER}")?;
    for r in records {
        write_record(&mut w, r)?;
    }
    Ok(())
}

/// One record line, for writers that stream records as they are produced.
pub fn write_record<W: Write>(mut w: W, r: &SlotRecord) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{}",
        r.k, r.signal_x, r.signal_p, r.vacuum_x, r.vacuum_p, r.monitor_t
    )?;
    Ok(())
}

fn parse_record(line: &str) -> Option<SlotRecord> {
    let mut it = line.split(',').map(str::trim);
    let k = it.next()?.parse().ok()?;
    let mut f = || -> Option<f64> { it.next()?.parse::<f64>().ok().filter(|v| v.is_finite()) };
    let r = SlotRecord {
        k,
        signal_x: f()?,
        signal_p: f()?,
        vacuum_x: f()?,
        vacuum_p: f()?,
        monitor_t: f()?,
    };
    if it.next().is_some() || !(0.0..=1.0).contains(&r.monitor_t) {
        return None;
    }
    Some(r)
}

/// Streams records from text; unparseable lines are counted, never fatal.
pub struct RecordReader<R> {
    lines: std::io::Lines<R>,
    pub bad_lines: usize,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            bad_lines: 0,
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<SlotRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            let s = line.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            match parse_record(s) {
                Some(r) => return Some(Ok(r)),
                None => self.bad_lines += 1,
            }
        }
    }
}

/// Reads all records; returns them with the count of skipped lines.
pub fn read_records<R: BufRead>(reader: R) -> Result<(Vec<SlotRecord>, usize)> {
    let mut rr = RecordReader::new(reader);
    let records = rr.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((records, rr.bad_lines))
}

pub const MOMENTS_HEADER: [&str; 11] = [
    "bin_lo", "bin_hi", "prob", "state", "mean_x", "mean_p", "var_x", "var_p", "n", "se_mean", "se_var",
];

pub fn write_moments_csv<W: Write>(mut w: W, moments: &BinnedMoments, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(MOMENTS_HEADER)?;
    for b in &moments.bins {
        for (k, s) in b.states.iter().enumerate() {
            csv.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.prob.to_string(),
                k.to_string(),
                s.mean_x.to_string(),
                s.mean_p.to_string(),
                s.var_x.to_string(),
                s.var_p.to_string(),
                s.n.to_string(),
                s.se_mean.to_string(),
                s.se_var.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MomentRow {
    bin_lo: f64,
    bin_hi: f64,
    prob: f64,
    state: usize,
    mean_x: f64,
    mean_p: f64,
    var_x: f64,
    var_p: f64,
    n: u64,
    se_mean: f64,
    se_var: f64,
}

/// Reads a moments table. Bins are numbered in order of appearance.
pub fn read_moments_csv<R: std::io::Read>(reader: R) -> Result<BinnedMoments> {
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = BinnedMoments::default();
    for (line, row) in csv.deserialize::<MomentRow>().enumerate() {
        let row = row?;
        let fresh = out
            .bins
            .last()
            .is_none_or(|b| b.lo != row.bin_lo || b.hi != row.bin_hi);
        if fresh {
            out.bins.push(BinMoments {
                bin: out.bins.len(),
                lo: row.bin_lo,
                hi: row.bin_hi,
                prob: row.prob,
                states: Vec::new(),
            });
        }
        let b = out.bins.last_mut().unwrap();
        if row.state != b.states.len() {
            return Err(Error::Parse {
                line: line + 2,
                message: format!("state {} out of order in bin [{}, {}]", row.state, row.bin_lo, row.bin_hi),
            });
        }
        b.states.push(StateMoments {
            mean_x: row.mean_x,
            mean_p: row.mean_p,
            var_x: row.var_x,
            var_p: row.var_p,
            cov_xp: None,
            n: row.n,
            se_mean: row.se_mean,
            se_var: row.se_var,
            raw_vacuum_var_x: None,
            raw_vacuum_var_p: None,
            mean_t: None,
        });
    }
    let k = out.bins.first().map_or(0, |b| b.states.len());
    if out.bins.iter().any(|b| b.states.len() != k) {
        return Err(Error::invalid("bins carry different numbers of states"));
    }
    out.n_states = k;
    Ok(out)
}

/// Drops precision-only fields so that in-memory moments match what a CSV
/// round trip yields.
pub fn as_exported(moments: &BinnedMoments) -> BinnedMoments {
    let mut m = moments.clone();
    for (i, b) in m.bins.iter_mut().enumerate() {
        b.bin = i;
        for s in &mut b.states {
            s.cov_xp = None;
            s.raw_vacuum_var_x = None;
            s.raw_vacuum_var_p = None;
            s.mean_t = None;
        }
    }
    m.out_of_range = 0;
    m.bad_labels = 0;
    m.dropped.clear();
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_parsing() {
        assert!(parse_record("0,1,2,3,4,0.5").is_some());
        assert!(parse_record("0,1,2,3,4,1.5").is_none());
        assert!(parse_record("0,1,2,3,4").is_none());
        assert!(parse_record("0,1,2,3,4,0.5,7").is_none());
        assert!(parse_record("x,1,2,3,4,0.5").is_none());
        assert!(parse_record("0,nan,2,3,4,0.5").is_none());
    }

    #[test]
    fn running_variance() {
        let mut r = Running::default();
        for x in [1.0, 2.0, 4.0] {
            r.push(x);
        }
        assert!((r.mean - 7.0 / 3.0).abs() < 1e-15);
        assert!((r.var() - 7.0 / 3.0).abs() < 1e-14);
    }
}
