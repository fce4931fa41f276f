//! Fading loss channels: transmission histograms, a beam-wander generator and
//! propagation of coherent-state moments through loss and excess noise.

use std::f64::consts::PI;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseAt {
    Sender,
    #[default]
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub detector_efficiency: f64,
    /// Excess noise in SNU.
    pub excess_noise: f64,
    /// Fraction of the received light split off to the transmission monitor.
    #[serde(default)]
    pub monitor_tap: f64,
    #[serde(default)]
    pub noise_at: NoiseAt,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            detector_efficiency: 0.83,
            excess_noise: 0.01,
            monitor_tap: 0.0,
            noise_at: NoiseAt::Receiver,
        }
    }
}

impl ChannelParams {
    pub fn lossless() -> Self {
        Self {
            detector_efficiency: 1.0,
            excess_noise: 0.0,
            monitor_tap: 0.0,
            noise_at: NoiseAt::Receiver,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.detector_efficiency;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::invalid(format!(
                "detector efficiency must lie in (0, 1], got {eta}"
            )));
        }
        if !(self.excess_noise >= 0.0) || !self.excess_noise.is_finite() {
            return Err(Error::invalid(format!(
                "excess noise must be finite and non-negative, got {}",
                self.excess_noise
            )));
        }
        if !(0.0..0.04).contains(&self.monitor_tap) {
            return Err(Error::invalid(format!(
                "monitor tap must lie in [0, 0.04), got {}",
                self.monitor_tap
            )));
        }
        Ok(())
    }

    /// Overall power transmission seen by the detector for channel transmission `t`.
    pub fn effective_transmission(&self, t: f64) -> f64 {
        t * (1.0 - self.monitor_tap) * self.detector_efficiency
    }
}

/// Propagates a coherent amplitude and a quadrature variance (SNU) through a
/// pure-loss channel of transmission `t` followed by the detector.
pub fn propagate(amplitude: C64, variance: f64, t: f64, params: &ChannelParams) -> Result<(C64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("transmission {t} outside [0, 1]")));
    }
    if !(variance >= 1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "variance {variance} is below the vacuum level"
        )));
    }
    params.validate()?;
    let g = params.effective_transmission(t);
    let var = match params.noise_at {
        NoiseAt::Receiver => 1.0 + g * (variance - 1.0) + params.excess_noise,
        NoiseAt::Sender => 1.0 + g * (variance - 1.0 + params.excess_noise),
    };
    Ok((amplitude * g.sqrt(), var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionHistogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    sums: Vec<f64>,
    retained: Vec<bool>,
    total: u64,
    /// Samples falling below the lowest edge.
    outside_count: u64,
    outside_sum: f64,
    min_count: u64,
}

impl TransmissionHistogram {
    /// Builds a histogram directly from bin edges and counts, e.g. when read back
    /// from a file. Per-bin sums default to the bin centres.
    pub fn from_counts(edges: Vec<f64>, counts: Vec<u64>, outside_count: u64, min_count: u64) -> Result<Self> {
        if edges.len() != counts.len() + 1 || counts.is_empty() {
            return Err(Error::Dimension(format!(
                "{} edges for {} bins",
                edges.len(),
                counts.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        let total = counts.iter().sum::<u64>() + outside_count;
        if total == 0 {
            return Err(Error::invalid("histogram holds no samples"));
        }
        let sums = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * 0.5 * (edges[i] + edges[i + 1]))
            .collect();
        let retained = counts.iter().map(|&c| c >= min_count && c > 0).collect();
        // Outside samples are only known to lie below the first edge.
        let outside_sum = outside_count as f64 * edges[0];
        Ok(Self {
            edges,
            counts,
            sums,
            retained,
            total,
            outside_count,
            outside_sum,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn outside_count(&self) -> u64 {
        self.outside_count
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_retained(&self, i: usize) -> bool {
        self.retained[i]
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.retained[i]).collect()
    }

    /// Fraction of all samples in bin `i`. Never renormalized by filtering.
    pub fn probability(&self, i: usize) -> f64 {
        self.counts[i] as f64 / self.total as f64
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.probability(i)).collect()
    }

    pub fn outside_mass(&self) -> f64 {
        self.outside_count as f64 / self.total as f64
    }

    pub fn retained_mass(&self) -> f64 {
        self.retained_indices()
            .into_iter()
            .map(|i| self.probability(i))
            .sum()
    }

    /// Mean transmission of the samples in bin `i`.
    pub fn bin_mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    /// Mean over every sample, including those outside the bins.
    pub fn mean(&self) -> f64 {
        (self.sums.iter().sum::<f64>() + self.outside_sum) / self.total as f64
    }

    /// Bin holding `t`; the top edge belongs to the last bin.
    pub fn bin_index(&self, t: f64) -> Option<usize> {
        let n = self.len();
        if !(t >= self.edges[0]) || t > self.edges[n] {
            return None;
        }
        let i = self.edges.partition_point(|&e| e <= t);
        Some(i.saturating_sub(1).min(n - 1))
    }

    /// Re-applies the retention rule with a new minimum count.
    pub fn with_min_count(mut self, min_count: u64) -> Self {
        self.min_count = min_count;
        self.retained = self.counts.iter().map(|&c| c >= min_count && c > 0).collect();
        self
    }
}

fn check_samples(samples: &[f64], bin_width: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no transmission samples"));
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width}")));
    }
    if let Some(t) = samples.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("transmission sample {t} outside [0, 1]")));
    }
    Ok(())
}

fn extent(samples: &[f64]) -> (f64, f64) {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Grid index of the bin whose closed top edge covers `t`.
fn top_index(t: f64, w: f64) -> i64 {
    let mut i = (t / w).floor() as i64;
    while i as f64 * w > t {
        i -= 1;
    }
    while ((i + 1) as f64 * w) < t {
        i += 1;
    }
    i
}

/// Histogram on the grid `i·bin_width` spanning every sample.
pub fn empirical_histogram(samples: &[f64], bin_width: f64, min_count: u64) -> Result<TransmissionHistogram> {
    check_samples(samples, bin_width)?;
    let (lo, hi) = extent(samples);
    let mut first = (lo / bin_width).floor() as i64;
    while first as f64 * bin_width > lo {
        first -= 1;
    }
    let last = top_index(hi, bin_width).max(first);
    build(samples, bin_width, first, (last - first + 1) as usize, min_count)
}

/// Histogram with exactly `n_bins` grid bins, the top one holding the largest
/// sample. Samples below the lowest edge are counted as outside mass.
pub fn empirical_histogram_top(
    samples: &[f64],
    bin_width: f64,
    n_bins: usize,
    min_count: u64,
) -> Result<TransmissionHistogram> {
    check_samples(samples, bin_width)?;
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let last = top_index(extent(samples).1, bin_width);
    build(samples, bin_width, last + 1 - n_bins as i64, n_bins, min_count)
}

fn build(samples: &[f64], w: f64, first: i64, n_bins: usize, min_count: u64) -> Result<TransmissionHistogram> {
    let edges: Vec<f64> = (0..=n_bins).map(|i| (first + i as i64) as f64 * w).collect();
    let mut h = TransmissionHistogram {
        edges,
        counts: vec![0; n_bins],
        sums: vec![0.0; n_bins],
        retained: Vec::new(),
        total: samples.len() as u64,
        outside_count: 0,
        outside_sum: 0.0,
        min_count,
    };
    for &t in samples {
        match h.bin_index(t) {
            Some(j) => {
                h.counts[j] += 1;
                h.sums[j] += t;
            }
            None => {
                h.outside_count += 1;
                h.outside_sum += t;
            }
        }
    }
    Ok(h.with_min_count(min_count))
}

pub const HISTOGRAM_HEADER: [&str; 5] = ["bin_lo", "bin_hi", "count", "prob", "retained"];

/// Writes the histogram as CSV. The outside count and retention threshold
/// go in a `# outside_count=… min_count=…` line ahead of the header.
pub fn write_histogram_csv<W: std::io::Write>(mut w: W, h: &TransmissionHistogram, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "# outside_count={} min_count={}", h.outside_count, h.min_count)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(HISTOGRAM_HEADER)?;
    for i in 0..h.len() {
        let (lo, hi) = h.bin(i);
        csv.write_record([
            lo.to_string(),
            hi.to_string(),
            h.counts[i].to_string(),
            h.probability(i).to_string(),
            (h.retained[i] as u8).to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a histogram written by [`write_histogram_csv`]. Per-bin sums are not
/// stored, so bin means fall back to the bin centres.
pub fn read_histogram_csv<R: BufRead>(reader: R) -> Result<TransmissionHistogram> {
    let mut outside = None;
    let mut min_count = None;
    let mut edges: Vec<f64> = Vec::new();
    let mut counts = Vec::new();
    let mut header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        let bad = |message: String| Error::Parse { line: i + 1, message };
        if let Some(c) = s.strip_prefix('#') {
            for kv in c.split_whitespace() {
                match kv.split_once('=') {
                    Some(("outside_count", v)) => outside = v.parse::<u64>().ok(),
                    Some(("min_count", v)) => min_count = v.parse::<u64>().ok(),
                    _ => {}
                }
            }
            continue;
        }
        if s.is_empty() {
            continue;
        }
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if !header {
            if fields != HISTOGRAM_HEADER {
                return Err(bad(format!("unexpected histogram header {s:?}")));
            }
            header = true;
            continue;
        }
        if fields.len() != HISTOGRAM_HEADER.len() {
            return Err(bad(format!("expected {} fields", HISTOGRAM_HEADER.len())));
        }
        let num = |j: usize| fields[j].parse::<f64>().map_err(|_| bad(format!("bad {}", HISTOGRAM_HEADER[j])));
        let (lo, hi) = (num(0)?, num(1)?);
        match edges.last() {
            None => edges.push(lo),
            Some(&e) if e == lo => {}
            Some(_) => return Err(bad("bins are not contiguous".into())),
        }
        edges.push(hi);
        counts.push(fields[2].parse::<u64>().map_err(|_| bad("bad count".into()))?);
    }
    let (Some(outside), Some(min_count)) = (outside, min_count) else {
        return Err(Error::Parse {
            line: 1,
            message: "missing outside_count/min_count line".into(),
        });
    };
    TransmissionHistogram::from_counts(edges, counts, outside, min_count)
}

/// Reads one transmission value per line. Blank lines and `#` comments are
/// skipped; unparseable lines are counted and returned alongside the values.
pub fn read_transmission_samples<R: BufRead>(reader: R) -> Result<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    let mut bad = 0;
    for line in reader.lines() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => out.push(t),
            _ => bad += 1,
        }
    }
    Ok((out, bad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    /// `1/e²` intensity radius at the receiver.
    pub beam_radius: f64,
    pub aperture_radius: f64,
    /// Per-axis standard deviation of the beam-centre wander.
    pub jitter_sigma: f64,
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beam radius", self.beam_radius),
            ("aperture radius", self.aperture_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::invalid(format!(
                "jitter must be non-negative, got {}",
                self.jitter_sigma
            )));
        }
        Ok(())
    }

    /// Transmission of the centred beam, `1 − exp(−2a²/w²)`.
    pub fn peak_transmission(&self) -> f64 {
        -(-2.0 * (self.aperture_radius / self.beam_radius).powi(2)).exp_m1()
    }

    /// Chooses the jitter so that the mean transmission equals `target`.
    pub fn with_mean_transmission(self, target: f64) -> Result<Self> {
        self.validate()?;
        let peak = self.peak_transmission();
        if !(target > 0.0 && target < peak) {
            return Err(Error::invalid(format!(
                "mean transmission {target} not reachable below the peak {peak:.6}"
            )));
        }
        let table = TransmissionTable::new(&self, 16.0 * (self.beam_radius + self.aperture_radius))?;
        let (mut lo, mut hi) = (0.0, 4.0 * (self.beam_radius + self.aperture_radius));
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if table.mean_under_jitter(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self {
            jitter_sigma: 0.5 * (lo + hi),
            ..self
        })
    }
}

const GL_ORDER: usize = 8;

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn composite_gl(nodes: &(Vec<f64>, Vec<f64>), a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for k in 0..panels {
        let c = a + (k as f64 + 0.5) * h;
        for (x, w) in nodes.0.iter().zip(&nodes.1) {
            acc += w * f(c + 0.5 * h * x);
        }
    }
    acc * 0.5 * h
}

fn aperture_integral(g: &BeamGeometry, r: f64, rho_panels: usize, phi_panels: usize, nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
    let w2 = g.beam_radius * g.beam_radius;
    let norm = 2.0 / (PI * w2);
    // Polar coordinates about the aperture centre; the integrand is even in φ.
    let outer = composite_gl(nodes, 0.0, g.aperture_radius, rho_panels, |rho| {
        let radial = (-2.0 * (rho - r).powi(2) / w2).exp();
        if radial == 0.0 {
            return 0.0;
        }
        let inner = composite_gl(nodes, 0.0, PI, phi_panels, |phi| {
            (-4.0 * rho * r * (1.0 - phi.cos()) / w2).exp()
        });
        rho * radial * inner
    });
    (2.0 * norm * outer).clamp(0.0, 1.0)
}

/// Fraction of a Gaussian beam's power collected by a circular aperture whose
/// centre is displaced by `r` from the beam axis.
pub fn beam_wander_transmission(geometry: &BeamGeometry, r: f64) -> Result<f64> {
    geometry.validate()?;
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("offset must be non-negative, got {r}")));
    }
    let nodes = gauss_legendre(GL_ORDER);
    let base = (4.0 * geometry.aperture_radius / geometry.beam_radius).ceil().max(2.0) as usize;
    let mut rho_panels = base;
    let mut phi_panels = 4;
    let mut prev = aperture_integral(geometry, r, rho_panels, phi_panels, &nodes);
    for _ in 0..8 {
        rho_panels *= 2;
        phi_panels *= 2;
        let next = aperture_integral(geometry, r, rho_panels, phi_panels, &nodes);
        if (next - prev).abs() <= 1e-11 {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Integration(format!(
        "aperture integral at offset {r} did not settle (last change above 1e-11)"
    )))
}

/// `T(r)` tabulated on a uniform grid for fast sampling.
#[derive(Debug, Clone)]
struct TransmissionTable {
    step: f64,
    values: Vec<f64>,
}

const TABLE_POINTS: usize = 2048;

impl TransmissionTable {
    fn new(g: &BeamGeometry, r_max: f64) -> Result<Self> {
        let step = r_max / (TABLE_POINTS - 1) as f64;
        let values = (0..TABLE_POINTS)
            .map(|i| beam_wander_transmission(g, i as f64 * step))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { step, values })
    }

    fn eval(&self, r: f64) -> f64 {
        let x = r / self.step;
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let f = x - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    /// `E[T]` for a Rayleigh-distributed offset of scale `sigma`.
    fn mean_under_jitter(&self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return self.values[0];
        }
        let nodes = gauss_legendre(GL_ORDER);
        let r_max = (self.step * (self.values.len() - 1) as f64).min(12.0 * sigma);
        let pdf_mass = -(-r_max * r_max / (2.0 * sigma * sigma)).exp_m1();
        let body = composite_gl(&nodes, 0.0, r_max, 256, |r| {
            self.eval(r) * r / (sigma * sigma) * (-r * r / (2.0 * sigma * sigma)).exp()
        });
        body + (1.0 - pdf_mass) * *self.values.last().unwrap()
    }
}

/// Draws `n` transmissions from isotropic Gaussian beam-centre wander.
pub fn sample_transmissions(geometry: &BeamGeometry, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut sampler = TransmissionSampler::new(geometry, seed)?;
    Ok((0..n).map(|_| sampler.next_transmission()).collect())
}

/// Seeded stream of beam-wander transmissions.
#[derive(Debug, Clone)]
pub struct TransmissionSampler {
    sigma: f64,
    table: TransmissionTable,
    rng: ChaCha20Rng,
}

impl TransmissionSampler {
    pub fn new(geometry: &BeamGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let r_max = 10.0 * geometry.jitter_sigma + 4.0 * (geometry.beam_radius + geometry.aperture_radius);
        Ok(Self {
            sigma: geometry.jitter_sigma,
            table: TransmissionTable::new(geometry, r_max)?,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    pub fn next_transmission(&mut self) -> f64 {
        let dx: f64 = StandardNormal.sample(&mut self.rng);
        let dy: f64 = StandardNormal.sample(&mut self.rng);
        self.table.eval(self.sigma * dx.hypot(dy))
    }

    /// Expected transmission under the configured jitter.
    pub fn mean(&self) -> f64 {
        self.table.mean_under_jitter(self.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn bin_index_edges() {
        let h = empirical_histogram(&[0.1, 0.25, 0.3], 0.1, 1).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h.bin_index(0.1), Some(0));
        assert_eq!(h.bin_index(0.3), Some(1));
        assert_eq!(h.counts(), &[1, 2]);
        assert_eq!(h.bin_index(0.05), None);
        assert_eq!(h.bin_index(0.45), None);
    }

    #[test]
    fn table_interpolation_is_accurate() {
        let g = BeamGeometry {
            beam_radius: 1.0,
            aperture_radius: 1.0,
            jitter_sigma: 0.5,
        };
        let t = TransmissionTable::new(&g, 6.0).unwrap();
        for r in [0.123, 0.77, 1.91, 3.3] {
            let exact = beam_wander_transmission(&g, r).unwrap();
            assert!((t.eval(r) - exact).abs() < 1e-6);
        }
    }
}
