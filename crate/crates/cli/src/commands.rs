use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cvee::alphabet::{source_model, SourceModel};
use cvee::certify::{
    certify_all, curve_max, cutoff_for, epsilon_threshold, read_results_csv, theoretical_curve, write_results_csv,
    AlphabetFamily, BinCertification, CurvePoint, CutoffRule, ResultRow,
};
use cvee::channel::{
    empirical_histogram, empirical_histogram_top, propagate, read_histogram_csv, read_transmission_samples,
    write_histogram_csv, TransmissionHistogram,
};
use cvee::detection::{
    as_exported, estimate_q, normalized_outcomes, read_moments_csv, read_records, simulate_binned,
    simulate_transmissions, write_moments_csv, write_record, BinMoments, BinnedMoments, MomentAccumulator,
    QGrid, RecordReader, RecordSimulator, StateMoments, TransmissionSource, RECORD_HEADER,
};
use cvee::rates::{aggregate_with_base, write_rate_csv, BinRate, LogBase, RateReport};
use cvee::sdp::Status;

use crate::config::{RunConfig, TransmissionSpec};
use crate::{CliError, Completion, VERSION};

pub const RECORDS_FILE: &str = "records.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const RATE_FILE: &str = "rate.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const SUBCHANNELS_FILE: &str = "subchannels.csv";
pub const Q_FILE: &str = "q_function.csv";
pub const REPORT_FILE: &str = "report.txt";

type CliResult<T> = Result<T, CliError>;

/// Header lines carried by every output file.
pub fn header(cfg: Option<&RunConfig>) -> Vec<String> {
    let id = match cfg {
        Some(c) => format!("config_sha256={} seed={}", c.hash(), c.seed),
        None => "config_sha256=none".to_string(),
    };
    vec![format!("cvee {VERSION}"), id]
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Computation(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Computation(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>) -> CliResult<()> {
    w.flush().map_err(|e| CliError::Computation(e.to_string()))
}

fn io(e: std::io::Error) -> CliError {
    CliError::Computation(e.to_string())
}

fn transmission_source(cfg: &RunConfig) -> CliResult<TransmissionSource> {
    Ok(match &cfg.channel.transmission {
        TransmissionSpec::Fixed { value } => TransmissionSource::Fixed(*value),
        TransmissionSpec::Beam { .. } => TransmissionSource::Beam(cfg.geometry()?),
        TransmissionSpec::Empirical { file } => {
            let (samples, bad) = read_transmission_samples(open(file)?)?;
            if bad > 0 {
                eprintln!("warning: skipped {bad} unparseable lines in {}", file.display());
            }
            TransmissionSource::Samples(samples)
        }
    })
}

fn histogram(cfg: &RunConfig, transmissions: &[f64]) -> CliResult<TransmissionHistogram> {
    let d = &cfg.detection;
    Ok(match d.n_bins {
        Some(n) => empirical_histogram_top(transmissions, d.bin_width, n, d.min_count)?,
        None => empirical_histogram(transmissions, d.bin_width, d.min_count)?,
    })
}

fn source(cfg: &RunConfig) -> CliResult<SourceModel> {
    let alphabet = cfg.alphabet()?;
    let nc = cutoff_for(&alphabet, cfg.cutoff_rule());
    Ok(source_model(&alphabet, nc)?)
}

fn is_optimal(status: &str) -> bool {
    matches!(Status::parse(status), Some(Status::Optimal | Status::NearOptimal))
}

fn completion(all_optimal: bool) -> Completion {
    if all_optimal {
        Completion::Success
    } else {
        Completion::NonOptimal
    }
}

fn write_histogram(cfg: &RunConfig, out: &Path, h: &TransmissionHistogram) -> CliResult<()> {
    let mut w = create(&out.join(HISTOGRAM_FILE))?;
    write_histogram_csv(&mut w, h, &header(Some(cfg)))?;
    finish(w)
}

fn write_moments(cfg: &RunConfig, out: &Path, m: &BinnedMoments) -> CliResult<()> {
    let mut w = create(&out.join(MOMENTS_FILE))?;
    write_moments_csv(&mut w, m, &header(Some(cfg)))?;
    finish(w)
}

fn log_dropped(m: &BinnedMoments) {
    for (b, why) in &m.dropped {
        eprintln!("warning: bin {b} dropped: {why}");
    }
}

/// Writes `records.csv` and `histogram.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<Completion> {
    let alphabet = cfg.alphabet()?;
    let d = &cfg.detection;
    let ts = simulate_transmissions(&transmission_source(cfg)?, d.n_slots, cfg.seed)?;
    let h = histogram(cfg, &ts)?;
    let mut sim = RecordSimulator::new(&alphabet, &cfg.channel_params(), d.raw_scale, cfg.seed)?;
    let mut w = create(&out.join(RECORDS_FILE))?;
    for c in header(Some(cfg)) {
        writeln!(w, "# {c}").map_err(io)?;
    }
    writeln!(w, "# {RECORD_HEADER}").map_err(io)?;
    for &t in &ts {
        write_record(&mut w, &sim.record(t)?)?;
    }
    finish(w)?;
    write_histogram(cfg, out, &h)?;
    eprintln!(
        "simulated {} slots; {} bins, retained mass {:.4}",
        d.n_slots,
        h.len(),
        h.retained_mass()
    );
    Ok(Completion::Success)
}

/// Bins a record file into `moments.csv`. The histogram is rebuilt from the
/// records' monitor transmissions with the configured binning.
pub fn ingest(cfg: &RunConfig, records: &Path, out: &Path) -> CliResult<Completion> {
    let n_states = cfg.alphabet()?.len();
    let mut ts = Vec::new();
    let mut reader = RecordReader::new(open(records)?);
    for r in reader.by_ref() {
        ts.push(r?.monitor_t);
    }
    if reader.bad_lines > 0 {
        eprintln!("warning: skipped {} unparseable record lines", reader.bad_lines);
    }
    let h = histogram(cfg, &ts)?;
    drop(ts);
    let mut acc = MomentAccumulator::new(&h, n_states);
    for r in RecordReader::new(open(records)?) {
        acc.push(&r?);
    }
    let m = acc.finish();
    if m.bad_labels > 0 {
        eprintln!("warning: {} records with unknown state labels", m.bad_labels);
    }
    log_dropped(&m);
    write_moments(cfg, out, &as_exported(&m))?;
    eprintln!("binned into {} retained bins", m.bins.len());
    Ok(Completion::Success)
}

/// Noise-free moments of the configured channel at transmission `t`.
pub fn expected_moments(cfg: &RunConfig, t: f64) -> CliResult<BinnedMoments> {
    let alphabet = cfg.alphabet()?;
    let params = cfg.channel_params();
    let states = alphabet
        .amplitudes()
        .iter()
        .map(|&a| {
            let (b, v) = propagate(a, 1.0, t, &params)?;
            Ok(StateMoments::ideal(b, v))
        })
        .collect::<cvee::Result<Vec<_>>>()?;
    Ok(BinnedMoments {
        n_states: alphabet.len(),
        bins: vec![BinMoments {
            bin: 0,
            lo: t,
            hi: t,
            prob: 1.0,
            states,
        }],
        ..Default::default()
    })
}

fn certify_moments(cfg: &RunConfig, m: &BinnedMoments, workers: usize) -> CliResult<Vec<BinCertification>> {
    let src = source(cfg)?;
    if m.n_states != src.len() {
        return Err(CliError::Validation(format!(
            "moments hold {} states, the alphabet has {}",
            m.n_states,
            src.len()
        )));
    }
    Ok(certify_all(m, &src, &cfg.certify.sigma, &cfg.certify_options(), workers)?)
}

fn write_results(cfg: &RunConfig, out: &Path, results: &[BinCertification]) -> CliResult<Vec<ResultRow>> {
    let rows: Vec<ResultRow> = results.iter().map(ResultRow::from).collect();
    let mut comments = header(Some(cfg));
    comments.push(format!("log_base={}", cfg.certify.log_base));
    let mut w = create(&out.join(RESULTS_FILE))?;
    write_results_csv(&mut w, &rows, &comments)?;
    finish(w)?;
    Ok(rows)
}

pub enum CertifyInput<'a> {
    Moments(&'a Path),
    /// Noise-free model moments at this transmission.
    Expected(f64),
}

/// Writes `results.csv`.
pub fn certify(cfg: &RunConfig, input: CertifyInput, out: &Path, workers: usize) -> CliResult<Completion> {
    let m = match input {
        CertifyInput::Moments(p) => read_moments_csv(open(p)?)?,
        CertifyInput::Expected(t) => expected_moments(cfg, t)?,
    };
    let results = certify_moments(cfg, &m, workers)?;
    let rows = write_results(cfg, out, &results)?;
    for r in &rows {
        eprintln!(
            "[{:.4}, {:.4}] sigma {}: N = {:.6} ({})",
            r.bin_lo, r.bin_hi, r.sigma, r.negativity, r.status
        );
    }
    Ok(completion(rows.iter().all(|r| is_optimal(&r.status))))
}

fn rate_report(rows: &[ResultRow], h: &TransmissionHistogram, state_rate: f64, base: LogBase) -> CliResult<RateReport> {
    let rates: Vec<BinRate> = rows
        .iter()
        .map(|r| BinRate {
            bin_lo: r.bin_lo,
            bin_hi: r.bin_hi,
            sigma: r.sigma,
            log_negativity: r.log_negativity,
        })
        .collect();
    Ok(aggregate_with_base(&rates, h, state_rate, base)?)
}

fn write_rate(cfg: Option<&RunConfig>, out: &Path, report: &RateReport) -> CliResult<()> {
    let mut w = create(&out.join(RATE_FILE))?;
    write_rate_csv(&mut w, report, &header(cfg))?;
    finish(w)
}

/// Log base recorded in a results file, if any.
fn results_log_base(path: &Path) -> CliResult<Option<LogBase>> {
    for line in open(path)?.lines() {
        let line = line.map_err(io)?;
        let Some(c) = line.strip_prefix('#') else { break };
        if let Some(v) = c.trim().strip_prefix("log_base=") {
            return Ok(LogBase::parse(v.trim()));
        }
    }
    Ok(None)
}

pub struct RateArgs<'a> {
    pub results: &'a Path,
    pub histogram: &'a Path,
    pub state_rate: Option<f64>,
    pub log_base: Option<LogBase>,
}

/// Writes `rate.csv` and prints the summary.
pub fn rate(cfg: Option<&RunConfig>, args: RateArgs, out: &Path) -> CliResult<Completion> {
    let rows = read_results_csv(open(args.results)?)?;
    let h = read_histogram_csv(open(args.histogram)?)?;
    let state_rate = args
        .state_rate
        .or(cfg.map(|c| c.rate.state_rate))
        .ok_or_else(|| CliError::Validation("--state-rate is required without --config".into()))?;
    if !(state_rate > 0.0) || !state_rate.is_finite() {
        return Err(CliError::Validation(format!("state rate {state_rate} must be positive")));
    }
    let recorded = results_log_base(args.results)?;
    let base = args
        .log_base
        .or(cfg.map(|c| c.certify.log_base))
        .or(recorded)
        .unwrap_or_default();
    if recorded.is_some_and(|r| r != base) {
        return Err(CliError::Validation(format!(
            "results were computed with log base {}, not {base}",
            recorded.unwrap()
        )));
    }
    let report = rate_report(&rows, &h, state_rate, base)?;
    write_rate(cfg, out, &report)?;
    print!("{}", report.summary());
    Ok(completion(rows.iter().all(|r| is_optimal(&r.status))))
}

/// End-to-end run without a record file: histogram, moments, results, rate.
/// Output files equal those of `simulate`, `ingest`, `certify` and `rate`.
pub fn run(cfg: &RunConfig, out: &Path, workers: usize) -> CliResult<Completion> {
    let alphabet = cfg.alphabet()?;
    let d = &cfg.detection;
    let ts = simulate_transmissions(&transmission_source(cfg)?, d.n_slots, cfg.seed)?;
    let h = histogram(cfg, &ts)?;
    write_histogram(cfg, out, &h)?;
    let m = simulate_binned(&alphabet, &ts, &h, &cfg.channel_params(), d.raw_scale, cfg.seed)?;
    drop(ts);
    log_dropped(&m);
    let m = as_exported(&m);
    write_moments(cfg, out, &m)?;
    let results = certify_moments(cfg, &m, workers)?;
    let rows = write_results(cfg, out, &results)?;
    // Probabilities as read back from the histogram file.
    let report = rate_report(&rows, &h, cfg.rate.state_rate, cfg.certify.log_base)?;
    write_rate(Some(cfg), out, &report)?;
    print!("{}", report.summary());
    Ok(completion(rows.iter().all(|r| is_optimal(&r.status))))
}

/// Theoretical curves over the amplitude grid for each family and ε, with
/// maxima and zero-negativity thresholds.
pub fn sweep(cfg: &RunConfig, out: &Path, workers: usize) -> CliResult<Completion> {
    use rayon::prelude::*;
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no [sweep] section".into()))?;
    let amps = s.amplitudes.values();
    let rule = match cfg.certify.cutoff {
        Some(n) => CutoffRule::Fixed(n + s.extra_cutoff),
        None => CutoffRule::Auto { extra: s.extra_cutoff },
    };
    let opts = cfg.certify_options();
    let jobs: Vec<(AlphabetFamily, f64)> = s
        .families
        .iter()
        .flat_map(|&f| s.epsilons.iter().map(move |&e| (f, e)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Computation(e.to_string()))?;
    let curves: Vec<Vec<CurvePoint>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(f, e)| theoretical_curve(f, s.transmission, e, &amps, rule, &opts))
            .collect::<cvee::Result<_>>()
    })?;

    let comments = header(Some(cfg));
    let mut w = create(&out.join(CURVES_FILE))?;
    let mut all_optimal = true;
    {
        let mut csv = csv_writer(&mut w, &comments, &["family", "epsilon", "amplitude", "negativity", "log_negativity", "status"])?;
        for (&(f, e), curve) in jobs.iter().zip(&curves) {
            for p in curve {
                all_optimal &= matches!(p.status, Status::Optimal | Status::NearOptimal);
                csv.write_record([
                    f.as_str().to_string(),
                    e.to_string(),
                    p.amplitude.to_string(),
                    p.negativity.to_string(),
                    p.log_negativity.to_string(),
                    p.status.to_string(),
                ])
                .map_err(cvee::Error::from)?;
            }
        }
        csv.flush().map_err(io)?;
    }
    finish(w)?;

    let mut w = create(&out.join(COMPARISON_FILE))?;
    {
        let mut csv = csv_writer(&mut w, &comments, &["family", "epsilon", "max_negativity", "argmax_amplitude"])?;
        for (&(f, e), curve) in jobs.iter().zip(&curves) {
            let (max, arg) = curve_max(curve).expect("grid is non-empty");
            let max = max.max(0.0);
            csv.write_record([f.as_str().to_string(), e.to_string(), max.to_string(), arg.to_string()])
                .map_err(cvee::Error::from)?;
        }
        csv.flush().map_err(io)?;
    }
    finish(w)?;

    if s.thresholds {
        let mut w = create(&out.join(THRESHOLDS_FILE))?;
        {
            let mut csv = csv_writer(&mut w, &comments, &["family", "epsilon_threshold"])?;
            for &f in &s.families {
                let mine: Vec<Vec<CurvePoint>> = jobs
                    .iter()
                    .zip(&curves)
                    .filter(|((g, _), _)| *g == f)
                    .map(|(_, c)| c.clone())
                    .collect();
                let t = epsilon_threshold(f, s.transmission, &s.epsilons, &mine, rule, &opts)?;
                let text = t.map_or("none".to_string(), |t| t.to_string());
                eprintln!("{} states: epsilon threshold {text}", f.as_str());
                csv.write_record([f.as_str().to_string(), text]).map_err(cvee::Error::from)?;
            }
            csv.flush().map_err(io)?;
        }
        finish(w)?;
    }
    Ok(completion(all_optimal))
}

fn csv_writer<'a, W: Write>(
    w: &'a mut W,
    comments: &[String],
    columns: &[&str],
) -> CliResult<csv::Writer<&'a mut W>> {
    for c in comments {
        writeln!(w, "# {c}").map_err(io)?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(columns).map_err(cvee::Error::from)?;
    Ok(csv)
}

/// Consolidated summary of a run directory, plus per-sub-channel and
/// Q-function tables when their inputs are present.
pub fn report(dir: &Path) -> CliResult<Completion> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", dir.display())));
    }
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let mut text = format!("cvee {VERSION} report for {}\n", dir.display());
    let mut all_optimal = true;
    let mut found = 0;

    if path(HISTOGRAM_FILE).exists() {
        found += 1;
        let h = read_histogram_csv(open(&path(HISTOGRAM_FILE))?)?;
        let (lo, hi) = (h.edges()[0], h.edges()[h.len()]);
        text.push_str(&format!(
            "\n[transmission histogram]\nbins {} over [{lo:.4}, {hi:.4}], retained {} (mass {:.4}), outside mass {:.4}\n",
            h.len(),
            h.retained_indices().len(),
            h.retained_mass(),
            h.outside_mass()
        ));
    }
    if path(MOMENTS_FILE).exists() {
        found += 1;
        let m = read_moments_csv(open(&path(MOMENTS_FILE))?)?;
        let n: u64 = m.bins.iter().flat_map(|b| &b.states).map(|s| s.n).sum();
        text.push_str(&format!(
            "\n[moments]\n{} bins x {} states, {n} samples\n",
            m.bins.len(),
            m.n_states
        ));
    }
    if path(RESULTS_FILE).exists() {
        found += 1;
        let rows = read_results_csv(open(&path(RESULTS_FILE))?)?;
        all_optimal &= rows.iter().all(|r| is_optimal(&r.status));
        text.push_str("\n[certification]\n");
        let mut by_sigma: BTreeMap<u64, Vec<&ResultRow>> = BTreeMap::new();
        for r in &rows {
            by_sigma.entry(r.sigma.to_bits()).or_default().push(r);
        }
        let mut sigmas: Vec<f64> = by_sigma.keys().map(|&b| f64::from_bits(b)).collect();
        sigmas.sort_by(f64::total_cmp);
        for s in &sigmas {
            let level = &by_sigma[&s.to_bits()];
            let ok = level.iter().filter(|r| is_optimal(&r.status)).count();
            let max = level.iter().map(|r| r.negativity).fold(0.0, f64::max);
            text.push_str(&format!(
                "sigma {s}: {} bins, {ok} optimal, max N {max:.5}\n",
                level.len()
            ));
        }
        for r in rows.iter().filter(|r| !is_optimal(&r.status)) {
            text.push_str(&format!(
                "  non-optimal: [{:.4}, {:.4}] sigma {} {}\n",
                r.bin_lo, r.bin_hi, r.sigma, r.status
            ));
        }
        write_subchannels(dir, &rows, &sigmas)?;
    }
    if path(RATE_FILE).exists() {
        found += 1;
        text.push_str("\n[rate]\n");
        for line in open(&path(RATE_FILE))?.lines() {
            let line = line.map_err(io)?;
            if !line.starts_with("# cvee") && !line.starts_with("# config_sha256") {
                text.push_str(&line);
                text.push('\n');
            }
        }
    }
    if path(COMPARISON_FILE).exists() {
        found += 1;
        text.push_str("\n[theoretical curves: max over amplitude]\n");
        append_table(&mut text, &path(COMPARISON_FILE))?;
    }
    if path(THRESHOLDS_FILE).exists() {
        found += 1;
        text.push_str("\n[zero-negativity thresholds]\n");
        append_table(&mut text, &path(THRESHOLDS_FILE))?;
    }
    if path(RECORDS_FILE).exists() {
        found += 1;
        let (records, _) = read_records(open(&path(RECORDS_FILE))?)?;
        let q = estimate_q(&normalized_outcomes(&records, None)?, QGrid::default())?;
        let mut w = create(&path(Q_FILE))?;
        {
            let mut csv = csv_writer(&mut w, &[format!("cvee {VERSION}")], &["re_beta", "im_beta", "q"])?;
            let n = q.grid.bins_per_axis;
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = q.bin_center(i, j);
                    csv.write_record([x.to_string(), y.to_string(), q.value(i, j).to_string()])
                        .map_err(cvee::Error::from)?;
                }
            }
            csv.flush().map_err(io)?;
        }
        finish(w)?;
        text.push_str(&format!(
            "\n[Q function]\n{} samples, peak {:.4} (1/pi = {:.4})\n",
            records.len(),
            q.peak(0.5),
            std::f64::consts::FRAC_1_PI
        ));
    }
    if found == 0 {
        return Err(CliError::Validation(format!("no run outputs in {}", dir.display())));
    }
    let mut w = create(&path(REPORT_FILE))?;
    w.write_all(text.as_bytes()).map_err(io)?;
    finish(w)?;
    print!("{text}");
    Ok(completion(all_optimal))
}

fn append_table(text: &mut String, path: &Path) -> CliResult<()> {
    for line in open(path)?.lines() {
        let line = line.map_err(io)?;
        if !line.starts_with('#') {
            text.push_str(&line.replace(',', "\t"));
            text.push('\n');
        }
    }
    Ok(())
}

/// One row per bin with the negativity at each σ-level.
fn write_subchannels(dir: &Path, rows: &[ResultRow], sigmas: &[f64]) -> CliResult<()> {
    let mut bins: Vec<(f64, f64, f64)> = Vec::new();
    for r in rows {
        if !bins.iter().any(|b| b.0 == r.bin_lo && b.1 == r.bin_hi) {
            bins.push((r.bin_lo, r.bin_hi, r.prob));
        }
    }
    let mut columns = vec!["bin_lo".to_string(), "bin_hi".to_string(), "prob".to_string()];
    columns.extend(sigmas.iter().map(|s| format!("negativity_sigma{s}")));
    columns.extend(sigmas.iter().map(|s| format!("log_negativity_sigma{s}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut w = create(&dir.join(SUBCHANNELS_FILE))?;
    {
        let mut csv = csv_writer(&mut w, &[format!("cvee {VERSION}")], &cols)?;
        for (lo, hi, p) in bins {
            let find = |s: f64| rows.iter().find(|r| r.bin_lo == lo && r.bin_hi == hi && r.sigma == s);
            let mut rec = vec![lo.to_string(), hi.to_string(), p.to_string()];
            rec.extend(sigmas.iter().map(|&s| find(s).map_or(String::new(), |r| r.negativity.to_string())));
            rec.extend(sigmas.iter().map(|&s| find(s).map_or(String::new(), |r| r.log_negativity.to_string())));
            csv.write_record(rec).map_err(cvee::Error::from)?;
        }
        csv.flush().map_err(io)?;
    }
    finish(w)
}
