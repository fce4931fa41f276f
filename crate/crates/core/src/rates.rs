//! Aggregation of per-bin logarithmic negativity into transfer rates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::TransmissionHistogram;
use crate::error::{Error, Result};

/// Base of the logarithm in `E_N = log(2N + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "e")]
    E,
}

impl LogBase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "2" => Some(LogBase::Two),
            "e" => Some(LogBase::E),
            _ => None,
        }
    }
}

impl fmt::Display for LogBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogBase::Two => "2",
            LogBase::E => "e",
        })
    }
}

/// `log(2N + 1)` in the given base.
pub fn log_negativity(negativity: f64, base: LogBase) -> Result<f64> {
    if !(negativity >= 0.0) || !negativity.is_finite() {
        return Err(Error::invalid(format!(
            "negativity must be finite and non-negative, got {negativity}"
        )));
    }
    let v = (2.0 * negativity).ln_1p();
    Ok(match base {
        LogBase::Two => v / std::f64::consts::LN_2,
        LogBase::E => v,
    })
}

/// Per-bin input to [`aggregate`]: bin bounds, σ-level and log-negativity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRate {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub sigma: f64,
    pub log_negativity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRate {
    pub sigma: f64,
    /// `(probability, log-negativity)` per retained bin, in bin order.
    pub per_bin: Vec<(f64, f64)>,
    /// Log-negativity units per second.
    pub total_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub state_rate: f64,
    pub log_base: LogBase,
    pub levels: Vec<SigmaRate>,
}

impl RateReport {
    pub fn total(&self, sigma: f64) -> Option<f64> {
        self.levels.iter().find(|l| l.sigma == sigma).map(|l| l.total_rate)
    }

    /// Totals are non-increasing in σ.
    pub fn is_sigma_ordered(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].total_rate <= w[0].total_rate * (1.0 + 1e-12) + 1e-12)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "state rate {:.6e} /s, log base {}\n",
            self.state_rate, self.log_base
        );
        for l in &self.levels {
            s.push_str(&format!(
                "sigma {}: {} bins, total {:.6e} log-neg units/s ({:.4} M)\n",
                l.sigma,
                l.per_bin.len(),
                l.total_rate,
                l.total_rate / 1e6
            ));
        }
        s
    }
}

fn same_edge(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs())
}

/// `state_rate · Σ_i p_i E_N,i` per σ-level, with `p_i` the unrenormalized
/// histogram probabilities of the retained bins. Retained bins without a
/// result contribute zero; results for unknown or unretained bins are an error.
pub fn aggregate(results: &[BinRate], histogram: &TransmissionHistogram, state_rate: f64) -> Result<RateReport> {
    aggregate_with_base(results, histogram, state_rate, LogBase::Two)
}

pub fn aggregate_with_base(
    results: &[BinRate],
    histogram: &TransmissionHistogram,
    state_rate: f64,
    log_base: LogBase,
) -> Result<RateReport> {
    if !(state_rate >= 0.0) || !state_rate.is_finite() {
        return Err(Error::invalid(format!("state rate must be non-negative, got {state_rate}")));
    }
    let mut by_sigma: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in results {
        if !(r.log_negativity >= 0.0) {
            return Err(Error::invalid(format!("negative log-negativity {}", r.log_negativity)));
        }
        let bin = (0..histogram.len())
            .find(|&i| {
                let (lo, hi) = histogram.bin(i);
                same_edge(lo, r.bin_lo) && same_edge(hi, r.bin_hi)
            })
            .ok_or_else(|| Error::KeyMismatch(format!("no histogram bin [{}, {}]", r.bin_lo, r.bin_hi)))?;
        if !histogram.is_retained(bin) {
            return Err(Error::KeyMismatch(format!(
                "bin [{}, {}] is not retained",
                r.bin_lo, r.bin_hi
            )));
        }
        let level = by_sigma.entry(r.sigma.to_bits()).or_default();
        if level.insert(bin, r.log_negativity).is_some() {
            return Err(Error::KeyMismatch(format!(
                "duplicate result for bin [{}, {}] at sigma {}",
                r.bin_lo, r.bin_hi, r.sigma
            )));
        }
    }
    let mut levels: Vec<SigmaRate> = by_sigma
        .into_iter()
        .map(|(bits, bins)| {
            let per_bin: Vec<(f64, f64)> = bins
                .iter()
                .map(|(&i, &e)| (histogram.probability(i), e))
                .collect();
            let weighted: f64 = per_bin.iter().map(|(p, e)| p * e).sum();
            SigmaRate {
                sigma: f64::from_bits(bits),
                per_bin,
                total_rate: state_rate * weighted,
            }
        })
        .collect();
    levels.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    Ok(RateReport {
        state_rate,
        log_base,
        levels,
    })
}

pub const RATE_HEADER: [&str; 4] = ["sigma", "bins", "weighted_log_negativity", "total_rate"];

pub fn write_rate_csv<W: std::io::Write>(mut w: W, report: &RateReport, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "# log_base={} state_rate={}", report.log_base, report.state_rate)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RATE_HEADER)?;
    for l in &report.levels {
        let weighted: f64 = l.per_bin.iter().map(|(p, e)| p * e).sum();
        csv.write_record([
            l.sigma.to_string(),
            l.per_bin.len().to_string(),
            weighted.to_string(),
            l.total_rate.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
