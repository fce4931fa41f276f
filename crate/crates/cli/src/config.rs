//! Run configuration: a single TOML file, validated before any computation.

use std::path::{Path, PathBuf};

use cvee::alphabet::Alphabet;
use cvee::certify::{AlphabetFamily, CertifyOptions, CutoffRule};
use cvee::channel::{BeamGeometry, ChannelParams, NoiseAt};
use cvee::fock::C64;
use cvee::rates::LogBase;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub alphabet: AlphabetSpec,
    pub channel: ChannelSpec,
    #[serde(default)]
    pub detection: DetectionSpec,
    #[serde(default)]
    pub certify: CertifySpec,
    #[serde(default)]
    pub rate: RateSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphabetKind {
    Two,
    Four,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphabetSpec {
    pub kind: AlphabetKind,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub priors: Option<Vec<f64>>,
    /// Measured `[re, im]` amplitudes used in place of the nominal ones.
    #[serde(default)]
    pub calibration: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransmissionSpec {
    Fixed {
        value: f64,
    },
    Beam {
        beam_radius: f64,
        aperture_radius: f64,
        #[serde(default)]
        jitter_sigma: Option<f64>,
        /// Calibrates the jitter to this mean transmission.
        #[serde(default)]
        mean: Option<f64>,
    },
    /// One transmission per line, resampled per slot.
    Empirical {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub transmission: TransmissionSpec,
    #[serde(default = "default_eta")]
    pub detector_efficiency: f64,
    #[serde(default = "default_eps")]
    pub excess_noise: f64,
    #[serde(default)]
    pub noise_at: NoiseAt,
    #[serde(default)]
    pub monitor_tap: f64,
}

fn default_eta() -> f64 {
    0.83
}

fn default_eps() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSpec {
    pub n_slots: usize,
    pub bin_width: f64,
    /// Fixed bin count anchored at the largest sample; all samples otherwise.
    #[serde(default)]
    pub n_bins: Option<usize>,
    #[serde(default)]
    pub min_count: u64,
    #[serde(default = "one")]
    pub raw_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for DetectionSpec {
    fn default() -> Self {
        Self {
            n_slots: 1_000_000,
            bin_width: 0.009,
            n_bins: None,
            min_count: 0,
            raw_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    /// Explicit Fock cutoff; the default rule when absent.
    #[serde(default)]
    pub cutoff: Option<usize>,
    #[serde(default = "default_sigma")]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub log_base: LogBase,
    #[serde(default)]
    pub trusted_loss: bool,
    #[serde(default)]
    pub cross_moment: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "yes")]
    pub symmetry: bool,
}

fn default_sigma() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 3.0]
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200
}

fn yes() -> bool {
    true
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self {
            cutoff: None,
            sigma: default_sigma(),
            log_base: LogBase::Two,
            trusted_loss: false,
            cross_moment: false,
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
            symmetry: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub state_rate: f64,
}

impl Default for RateSpec {
    fn default() -> Self {
        Self { state_rate: 2.22e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_sweep_t")]
    pub transmission: f64,
    pub epsilons: Vec<f64>,
    pub amplitudes: AmplitudeGrid,
    #[serde(default = "both_families")]
    pub families: Vec<AlphabetFamily>,
    /// Added to the default cutoff rule for every amplitude.
    #[serde(default)]
    pub extra_cutoff: usize,
    #[serde(default = "yes")]
    pub thresholds: bool,
}

fn default_sweep_t() -> f64 {
    0.63
}

fn both_families() -> Vec<AlphabetFamily> {
    vec![AlphabetFamily::Two, AlphabetFamily::Four]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplitudeGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl AmplitudeGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + self.step * i as f64).collect()
    }
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{path}: {msg}"))
}

fn check_range(path: &str, v: f64, lo: f64, hi: f64) -> Result<(), CliError> {
    if !(lo..=hi).contains(&v) {
        return Err(invalid(path, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path)?;
        // Relative data paths are taken from the config's directory.
        if let TransmissionSpec::Empirical { file } = &mut cfg.channel.transmission {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let a = &self.alphabet;
        match a.kind {
            AlphabetKind::Two | AlphabetKind::Four => {
                let amp = a.amplitude.ok_or_else(|| invalid("alphabet.amplitude", "required"))?;
                check_range("alphabet.amplitude", amp, 0.0, 10.0)?;
                if a.priors.is_some() {
                    return Err(invalid("alphabet.priors", "only allowed with kind = \"custom\""));
                }
            }
            AlphabetKind::Custom => {
                if a.calibration.is_none() {
                    return Err(invalid("alphabet.calibration", "required for kind = \"custom\""));
                }
                if a.amplitude.is_some() {
                    return Err(invalid("alphabet.amplitude", "not used with kind = \"custom\""));
                }
            }
        }
        if let Some(c) = &a.calibration {
            let expected = match a.kind {
                AlphabetKind::Two => Some(2),
                AlphabetKind::Four => Some(4),
                AlphabetKind::Custom => None,
            };
            if expected.is_some_and(|n| n != c.len()) {
                return Err(invalid("alphabet.calibration", format!("expected {} amplitudes", expected.unwrap())));
            }
        }
        self.alphabet().map_err(|e| invalid("alphabet", e))?;

        let ch = &self.channel;
        match &ch.transmission {
            TransmissionSpec::Fixed { value } => check_range("channel.transmission.value", *value, 0.0, 1.0)?,
            TransmissionSpec::Beam {
                jitter_sigma, mean, ..
            } => {
                if jitter_sigma.is_some() == mean.is_some() {
                    return Err(invalid("channel.transmission", "give exactly one of jitter_sigma and mean"));
                }
                self.geometry()?;
            }
            TransmissionSpec::Empirical { .. } => {}
        }
        self.channel_params().validate().map_err(|e| invalid("channel", e))?;

        let d = &self.detection;
        if d.n_slots == 0 {
            return Err(invalid("detection.n_slots", "must be positive"));
        }
        if !(d.bin_width > 0.0 && d.bin_width <= 1.0) {
            return Err(invalid("detection.bin_width", format!("{} outside (0, 1]", d.bin_width)));
        }
        if d.n_bins == Some(0) {
            return Err(invalid("detection.n_bins", "must be positive"));
        }
        if !(d.raw_scale > 0.0) || !d.raw_scale.is_finite() {
            return Err(invalid("detection.raw_scale", "must be positive"));
        }

        let c = &self.certify;
        check_sigmas("certify.sigma", &c.sigma)?;
        if let Some(n) = c.cutoff {
            if !(2..=40).contains(&n) {
                return Err(invalid("certify.cutoff", format!("{n} outside [2, 40]")));
            }
        }
        check_range("certify.tolerance", c.tolerance, 1e-14, 1e-2)?;
        if c.max_iter == 0 {
            return Err(invalid("certify.max_iter", "must be positive"));
        }
        if !(self.rate.state_rate > 0.0) || !self.rate.state_rate.is_finite() {
            return Err(invalid("rate.state_rate", "must be positive"));
        }
        if let Some(s) = &self.sweep {
            check_range("sweep.transmission", s.transmission, 1e-6, 1.0)?;
            if s.epsilons.is_empty() || s.epsilons.windows(2).any(|w| !(w[1] > w[0])) || s.epsilons[0] < 0.0 {
                return Err(invalid("sweep.epsilons", "need a non-empty, increasing, non-negative list"));
            }
            let g = &s.amplitudes;
            if !(g.start > 0.0 && g.stop >= g.start && g.step > 0.0) {
                return Err(invalid("sweep.amplitudes", "need 0 < start <= stop and step > 0"));
            }
            if g.values().len() > 1000 {
                return Err(invalid("sweep.amplitudes", "more than 1000 grid points"));
            }
            if s.families.is_empty() {
                return Err(invalid("sweep.families", "empty"));
            }
        }
        Ok(())
    }

    /// Alphabet used for both simulation and the source model.
    pub fn alphabet(&self) -> cvee::Result<Alphabet> {
        let a = &self.alphabet;
        let nominal = match a.kind {
            AlphabetKind::Two => Some(Alphabet::two_state(a.amplitude.unwrap_or(0.0))?),
            AlphabetKind::Four => Some(Alphabet::four_state(a.amplitude.unwrap_or(0.0))?),
            AlphabetKind::Custom => None,
        };
        match (&a.calibration, nominal) {
            (None, Some(n)) => Ok(n),
            (Some(c), nominal) => {
                let amps: Vec<C64> = c.iter().map(|z| C64::new(z[0], z[1])).collect();
                let priors = match (&a.priors, nominal) {
                    (Some(p), _) => p.clone(),
                    (None, Some(n)) => n.priors().to_vec(),
                    (None, None) => vec![1.0 / amps.len() as f64; amps.len()],
                };
                Alphabet::calibrated(amps, priors)
            }
            (None, None) => Err(cvee::Error::InvalidArgument("custom alphabet without calibration".into())),
        }
    }

    pub fn geometry(&self) -> Result<BeamGeometry, CliError> {
        let TransmissionSpec::Beam {
            beam_radius,
            aperture_radius,
            jitter_sigma,
            mean,
        } = self.channel.transmission
        else {
            return Err(invalid("channel.transmission", "not a beam model"));
        };
        let g = BeamGeometry {
            beam_radius,
            aperture_radius,
            jitter_sigma: jitter_sigma.unwrap_or(0.0),
        };
        g.validate().map_err(|e| invalid("channel.transmission", e))?;
        match mean {
            Some(m) => g.with_mean_transmission(m).map_err(|e| invalid("channel.transmission.mean", e)),
            None => Ok(g),
        }
    }

    pub fn channel_params(&self) -> ChannelParams {
        ChannelParams {
            detector_efficiency: self.channel.detector_efficiency,
            excess_noise: self.channel.excess_noise,
            monitor_tap: self.channel.monitor_tap,
            noise_at: self.channel.noise_at,
        }
    }

    pub fn certify_options(&self) -> CertifyOptions {
        let c = &self.certify;
        CertifyOptions {
            tolerance: c.tolerance,
            max_iter: c.max_iter,
            log_base: c.log_base,
            trusted_efficiency: c.trusted_loss.then_some(self.channel.detector_efficiency),
            cross_moment: c.cross_moment,
            use_symmetry: c.symmetry,
        }
    }

    pub fn cutoff_rule(&self) -> CutoffRule {
        match self.certify.cutoff {
            Some(n) => CutoffRule::Fixed(n),
            None => CutoffRule::default(),
        }
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn check_sigmas(path: &str, sigmas: &[f64]) -> Result<(), CliError> {
    if sigmas.is_empty() {
        return Err(invalid(path, "empty"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(invalid(path, format!("sigma level {s} must be finite and non-negative")));
    }
    if sigmas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid(path, "levels must be strictly increasing"));
    }
    Ok(())
}

/// Parses `--sigma 0,1,2,3`.
pub fn parse_sigmas(s: &str) -> Result<Vec<f64>, CliError> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Validation(format!("--sigma: cannot parse {s:?}")))?;
    check_sigmas("--sigma", &v)?;
    Ok(v)
}
