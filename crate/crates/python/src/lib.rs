//! Python bindings: `import cvee`.

use cvee::alphabet::{self, Alphabet};
use cvee::certify::{self, BinCertification, CertificationResult, CertifyOptions};
use cvee::channel::{self, BeamGeometry, ChannelParams, NoiseAt, TransmissionHistogram};
use cvee::detection::{self, BinnedMoments, StateMoments};
use cvee::fock;
use cvee::rates::{self, BinRate, LogBase};
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: cvee::Error) -> PyErr {
    use cvee::Error::*;
    match e {
        Dimension(_) | InvalidArgument(_) | KeyMismatch(_) | Parse { .. } | Csv(_) | CutoffTooSmall { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn base(s: &str) -> PyResult<LogBase> {
    LogBase::parse(s).ok_or_else(|| PyValueError::new_err(format!("log base must be \"2\" or \"e\", got {s:?}")))
}

#[pyclass(name = "Alphabet", module = "cvee", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAlphabet(Alphabet);

#[pymethods]
impl PyAlphabet {
    #[staticmethod]
    fn two_state(alpha: f64) -> PyResult<Self> {
        Alphabet::two_state(alpha).map(Self).map_err(err)
    }

    #[staticmethod]
    fn four_state(alpha: f64) -> PyResult<Self> {
        Alphabet::four_state(alpha).map(Self).map_err(err)
    }

    /// Arbitrary amplitudes with their priors.
    #[staticmethod]
    fn calibrated(amplitudes: Vec<Complex64>, priors: Vec<f64>) -> PyResult<Self> {
        Alphabet::calibrated(amplitudes, priors).map(Self).map_err(err)
    }

    #[getter]
    fn amplitudes(&self) -> Vec<Complex64> {
        self.0.amplitudes().to_vec()
    }

    #[getter]
    fn priors(&self) -> Vec<f64> {
        self.0.priors().to_vec()
    }

    /// Prior-weighted overlaps `√(p_j p_k) <a_k|a_j>` from the closed form.
    fn gram(&self) -> Vec<Vec<Complex64>> {
        let g = self.0.gram_analytic();
        (0..g.nrows()).map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect()).collect()
    }

    fn default_cutoff(&self) -> usize {
        fock::default_cutoff(self.0.max_abs_amplitude())
    }

    /// Exact negativity of the truncated source purification.
    #[pyo3(signature = (cutoff=None))]
    fn source_negativity(&self, cutoff: Option<usize>) -> PyResult<f64> {
        let nc = cutoff.unwrap_or_else(|| self.default_cutoff());
        let source = alphabet::source_model(&self.0, nc).map_err(err)?;
        fock::negativity_exact(&source.purification()).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Alphabet(amplitudes={:?}, priors={:?})", self.0.amplitudes(), self.0.priors())
    }
}

#[pyclass(name = "StateMoments", module = "cvee", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyStateMoments {
    mean_x: f64,
    mean_p: f64,
    var_x: f64,
    var_p: f64,
    cov_xp: Option<f64>,
    n: u64,
    se_mean: f64,
    se_var: f64,
}

impl From<&StateMoments> for PyStateMoments {
    fn from(m: &StateMoments) -> Self {
        Self {
            mean_x: m.mean_x,
            mean_p: m.mean_p,
            var_x: m.var_x,
            var_p: m.var_p,
            cov_xp: m.cov_xp,
            n: m.n,
            se_mean: m.se_mean,
            se_var: m.se_var,
        }
    }
}

impl From<&PyStateMoments> for StateMoments {
    fn from(m: &PyStateMoments) -> Self {
        let mut s = StateMoments::ideal(Complex64::new(m.mean_x, m.mean_p) / 2.0, 1.0);
        s.var_x = m.var_x;
        s.var_p = m.var_p;
        s.cov_xp = m.cov_xp;
        s.n = m.n;
        s.se_mean = m.se_mean;
        s.se_var = m.se_var;
        s
    }
}

#[pymethods]
impl PyStateMoments {
    #[new]
    #[pyo3(signature = (mean_x, mean_p, var_x, var_p, cov_xp=None, n=0, se_mean=0.0, se_var=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mean_x: f64,
        mean_p: f64,
        var_x: f64,
        var_p: f64,
        cov_xp: Option<f64>,
        n: u64,
        se_mean: f64,
        se_var: f64,
    ) -> Self {
        Self { mean_x, mean_p, var_x, var_p, cov_xp, n, se_mean, se_var }
    }

    fn __repr__(&self) -> String {
        format!(
            "StateMoments(mean_x={}, mean_p={}, var_x={}, var_p={}, n={})",
            self.mean_x, self.mean_p, self.var_x, self.var_p, self.n
        )
    }
}

#[pyclass(name = "ChannelParams", module = "cvee", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PyChannelParams {
    detector_efficiency: f64,
    excess_noise: f64,
    monitor_tap: f64,
    noise_at: String,
}

impl PyChannelParams {
    fn params(&self) -> PyResult<ChannelParams> {
        let noise_at = match self.noise_at.as_str() {
            "receiver" => NoiseAt::Receiver,
            "sender" => NoiseAt::Sender,
            other => return Err(PyValueError::new_err(format!("noise_at must be receiver or sender, got {other:?}"))),
        };
        let p = ChannelParams {
            detector_efficiency: self.detector_efficiency,
            excess_noise: self.excess_noise,
            monitor_tap: self.monitor_tap,
            noise_at,
        };
        p.validate().map_err(err)?;
        Ok(p)
    }
}

#[pymethods]
impl PyChannelParams {
    #[new]
    #[pyo3(signature = (detector_efficiency=0.83, excess_noise=0.01, monitor_tap=0.0, noise_at="receiver".to_string()))]
    fn new(detector_efficiency: f64, excess_noise: f64, monitor_tap: f64, noise_at: String) -> PyResult<Self> {
        let s = Self { detector_efficiency, excess_noise, monitor_tap, noise_at };
        s.params()?;
        Ok(s)
    }

    /// Output amplitude and quadrature variance at transmission `t`.
    fn propagate(&self, amplitude: Complex64, variance: f64, t: f64) -> PyResult<(Complex64, f64)> {
        channel::propagate(amplitude, variance, t, &self.params()?).map_err(err)
    }
}

#[pyclass(name = "CertificationResult", module = "cvee", frozen)]
struct PyCertificationResult(CertificationResult);

#[pymethods]
impl PyCertificationResult {
    #[getter]
    fn negativity(&self) -> f64 {
        self.0.negativity_min
    }

    #[getter]
    fn log_negativity(&self) -> f64 {
        self.0.log_negativity
    }

    #[getter]
    fn status(&self) -> &'static str {
        self.0.status.as_str()
    }

    #[getter]
    fn duality_gap(&self) -> f64 {
        self.0.duality_gap
    }

    #[getter]
    fn dual_bound(&self) -> f64 {
        self.0.dual_bound
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn reduced(&self) -> bool {
        self.0.reduced
    }

    #[getter]
    fn relaxed(&self) -> bool {
        self.0.relaxed
    }

    fn is_optimal(&self) -> bool {
        self.0.is_optimal()
    }

    /// Independent check of the returned state, or `None` if no state.
    fn verification<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(v) = &self.0.verification else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("min_eigenvalue", v.min_eigenvalue)?;
        d.set_item("trace_error", v.trace_error)?;
        d.set_item("gram_error", v.gram_error)?;
        d.set_item("moment_violation", v.moment_violation)?;
        d.set_item("state_negativity", v.state_negativity)?;
        Ok(Some(d))
    }

    fn __repr__(&self) -> String {
        format!(
            "CertificationResult(negativity={}, status={}, gap={:e})",
            self.0.negativity_min,
            self.0.status.as_str(),
            self.0.duality_gap
        )
    }
}

#[pyclass(name = "Histogram", module = "cvee", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyHistogram(TransmissionHistogram);

#[pymethods]
impl PyHistogram {
    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.0.edges().to_vec()
    }

    #[getter]
    fn counts(&self) -> Vec<u64> {
        self.0.counts().to_vec()
    }

    #[getter]
    fn retained(&self) -> Vec<bool> {
        self.0.retained().to_vec()
    }

    fn probabilities(&self) -> Vec<f64> {
        self.0.probabilities()
    }

    fn retained_mass(&self) -> f64 {
        self.0.retained_mass()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "BinnedMoments", module = "cvee", frozen)]
struct PyBinnedMoments(BinnedMoments);

#[pymethods]
impl PyBinnedMoments {
    /// `(lo, hi, prob, [StateMoments])` per bin.
    fn bins(&self) -> Vec<(f64, f64, f64, Vec<PyStateMoments>)> {
        self.0
            .bins
            .iter()
            .map(|b| (b.lo, b.hi, b.prob, b.states.iter().map(PyStateMoments::from).collect()))
            .collect()
    }

    #[getter]
    fn dropped(&self) -> Vec<(usize, String)> {
        self.0.dropped.clone()
    }

    fn __len__(&self) -> usize {
        self.0.bins.len()
    }
}

fn options(tolerance: f64, max_iter: usize, log_base: &str, trusted_efficiency: Option<f64>, cross_moment: bool, use_symmetry: bool) -> PyResult<CertifyOptions> {
    Ok(CertifyOptions {
        tolerance,
        max_iter,
        log_base: base(log_base)?,
        trusted_efficiency,
        cross_moment,
        use_symmetry,
    })
}

/// Minimum negativity consistent with the moments of each signal state.
#[pyfunction]
#[pyo3(signature = (alphabet, moments, sigma=0.0, cutoff=None, tolerance=1e-8, max_iter=200, log_base="2", trusted_efficiency=None, cross_moment=false, use_symmetry=true))]
#[allow(clippy::too_many_arguments)]
fn certify_bin(
    py: Python<'_>,
    alphabet: &PyAlphabet,
    moments: Vec<PyStateMoments>,
    sigma: f64,
    cutoff: Option<usize>,
    tolerance: f64,
    max_iter: usize,
    log_base: &str,
    trusted_efficiency: Option<f64>,
    cross_moment: bool,
    use_symmetry: bool,
) -> PyResult<PyCertificationResult> {
    let opts = options(tolerance, max_iter, log_base, trusted_efficiency, cross_moment, use_symmetry)?;
    let nc = cutoff.unwrap_or_else(|| alphabet.default_cutoff());
    let moments: Vec<StateMoments> = moments.iter().map(StateMoments::from).collect();
    let a = alphabet.0.clone();
    py.detach(move || {
        let source = alphabet::source_model(&a, nc)?;
        certify::certify_bin(&moments, &source, sigma, &opts)
    })
    .map(PyCertificationResult)
    .map_err(err)
}

/// Certifies every bin at every σ-level. Returns
/// `(lo, hi, prob, sigma, CertificationResult)` sorted by bin, then σ.
#[pyfunction]
#[pyo3(signature = (alphabet, binned, sigmas, cutoff=None, workers=1, log_base="2"))]
fn certify_all(
    py: Python<'_>,
    alphabet: &PyAlphabet,
    binned: &PyBinnedMoments,
    sigmas: Vec<f64>,
    cutoff: Option<usize>,
    workers: usize,
    log_base: &str,
) -> PyResult<Vec<(f64, f64, f64, f64, PyCertificationResult)>> {
    let opts = CertifyOptions { log_base: base(log_base)?, ..CertifyOptions::default() };
    let nc = cutoff.unwrap_or_else(|| alphabet.default_cutoff());
    let a = alphabet.0.clone();
    let out: Vec<BinCertification> = py
        .detach(|| {
            let source = alphabet::source_model(&a, nc)?;
            certify::certify_all(&binned.0, &source, &sigmas, &opts, workers)
        })
        .map_err(err)?;
    Ok(out
        .into_iter()
        .map(|c| (c.lo, c.hi, c.prob, c.sigma, PyCertificationResult(c.result)))
        .collect())
}

/// Noise-model moments of each state after transmission `t`.
#[pyfunction]
#[pyo3(signature = (alphabet, t, excess_noise=0.0))]
fn ideal_moments(alphabet: &PyAlphabet, t: f64, excess_noise: f64) -> Vec<PyStateMoments> {
    certify::ideal_moments(&alphabet.0, t, excess_noise).iter().map(PyStateMoments::from).collect()
}

#[pyfunction]
#[pyo3(signature = (negativity, log_base="2"))]
fn log_negativity(negativity: f64, log_base: &str) -> PyResult<f64> {
    rates::log_negativity(negativity, base(log_base)?).map_err(err)
}

/// Transmission samples from a wandering Gaussian beam on a circular
/// aperture. Give either `jitter` or a target `mean`.
#[pyfunction]
#[pyo3(signature = (n, seed, beam_radius=1.0, aperture_radius=1.0, jitter=None, mean=None))]
fn sample_transmissions(
    py: Python<'_>,
    n: usize,
    seed: u64,
    beam_radius: f64,
    aperture_radius: f64,
    jitter: Option<f64>,
    mean: Option<f64>,
) -> PyResult<Vec<f64>> {
    let g = BeamGeometry { beam_radius, aperture_radius, jitter_sigma: jitter.unwrap_or(0.0) };
    let g = match (jitter, mean) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("give jitter or mean, not both")),
        (None, Some(m)) => g.with_mean_transmission(m).map_err(err)?,
        _ => g,
    };
    py.detach(|| channel::sample_transmissions(&g, n, seed)).map_err(err)
}

/// Fixed-width histogram; bins below `min_count` are not retained. With
/// `n_bins`, the grid is anchored at the largest sample.
#[pyfunction]
#[pyo3(signature = (samples, bin_width, min_count, n_bins=None))]
fn histogram(samples: Vec<f64>, bin_width: f64, min_count: u64, n_bins: Option<usize>) -> PyResult<PyHistogram> {
    match n_bins {
        Some(n) => channel::empirical_histogram_top(&samples, bin_width, n, min_count),
        None => channel::empirical_histogram(&samples, bin_width, min_count),
    }
    .map(PyHistogram)
    .map_err(err)
}

/// Simulated detection at the given transmissions, binned into moments.
#[pyfunction]
#[pyo3(signature = (alphabet, transmissions, histogram, channel, seed, raw_scale=1.0))]
fn simulate_binned(
    py: Python<'_>,
    alphabet: &PyAlphabet,
    transmissions: Vec<f64>,
    histogram: &PyHistogram,
    channel: &PyChannelParams,
    seed: u64,
    raw_scale: f64,
) -> PyResult<PyBinnedMoments> {
    let params = channel.params()?;
    py.detach(|| detection::simulate_binned(&alphabet.0, &transmissions, &histogram.0, &params, raw_scale, seed))
        .map(PyBinnedMoments)
        .map_err(err)
}

/// Total rate per σ from `(lo, hi, sigma, log_negativity)` rows. Returns
/// `{sigma: rate}` in log-negativity units per second.
#[pyfunction]
#[pyo3(signature = (rows, histogram, state_rate, log_base="2"))]
fn aggregate(rows: Vec<(f64, f64, f64, f64)>, histogram: &PyHistogram, state_rate: f64, log_base: &str) -> PyResult<Vec<(f64, f64)>> {
    let rates: Vec<BinRate> = rows
        .into_iter()
        .map(|(bin_lo, bin_hi, sigma, log_negativity)| BinRate { bin_lo, bin_hi, sigma, log_negativity })
        .collect();
    let report = rates::aggregate_with_base(&rates, &histogram.0, state_rate, base(log_base)?).map_err(err)?;
    Ok(report.levels.iter().map(|l| (l.sigma, l.total_rate)).collect())
}

#[pymodule]
#[pyo3(name = "cvee")]
fn cvee_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyAlphabet>()?;
    m.add_class::<PyStateMoments>()?;
    m.add_class::<PyChannelParams>()?;
    m.add_class::<PyCertificationResult>()?;
    m.add_class::<PyHistogram>()?;
    m.add_class::<PyBinnedMoments>()?;
    m.add_function(wrap_pyfunction!(certify_bin, m)?)?;
    m.add_function(wrap_pyfunction!(certify_all, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_moments, m)?)?;
    m.add_function(wrap_pyfunction!(log_negativity, m)?)?;
    m.add_function(wrap_pyfunction!(sample_transmissions, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_binned, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    Ok(())
}
