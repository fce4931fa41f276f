//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cvee::alphabet::{source_model, Alphabet};
use cvee::certify::*;
use cvee::channel::{empirical_histogram_top, sample_transmissions, BeamGeometry, ChannelParams, TransmissionHistogram};
use cvee::detection::*;
use cvee::fock::{coherent_state, default_cutoff, negativity_exact, C64};
use cvee::rates::{aggregate, BinRate, RateReport};
use cvee::sdp::{evaluate, solve, SdpProblem, Status, Term};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed <= limit {
        Ok(String::new())
    } else {
        Err(format!("runtime {elapsed:.1?} exceeds {limit:?}"))
    }
}

// Fixture shared by criteria 7, 8, 9 and 11.
const ETA: f64 = 0.83;
const EPSILON: f64 = 0.01;
const STATE_RATE: f64 = 2.22e6;
const N_SLOTS: usize = 40_000_000;
const MIN_COUNT: u64 = 310_000;
const SIGMAS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
/// Total at σ = 0 from the first validated run of this fixture.
const PINNED_TOTAL_RATE: f64 = 2.223_070e6;

fn geometry() -> BeamGeometry {
    BeamGeometry {
        beam_radius: 1.0,
        aperture_radius: 1.0,
        jitter_sigma: 0.3,
    }
    .with_mean_transmission(0.761)
    .expect("reachable mean")
}

fn params() -> ChannelParams {
    ChannelParams {
        detector_efficiency: ETA,
        excess_noise: EPSILON,
        ..Default::default()
    }
}

struct Fixture {
    transmissions: Vec<f64>,
    histogram: TransmissionHistogram,
}

fn fixture() -> Fixture {
    let transmissions = sample_transmissions(&geometry(), N_SLOTS, 7).unwrap();
    let histogram = empirical_histogram_top(&transmissions, 0.009, 35, MIN_COUNT).unwrap();
    Fixture {
        transmissions,
        histogram,
    }
}

fn crit1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for a in [0.5, 1.0, 1.5] {
        let nc = default_cutoff(a);
        let plus = coherent_state(C64::new(a, 0.0), nc).unwrap();
        let minus = coherent_state(C64::new(-a, 0.0), nc).unwrap();
        worst = worst.max((plus.inner(&minus).norm() - (-2.0 * a * a).exp()).abs());
    }
    ensure!(worst < 1e-10, "overlap error {worst:.2e}");
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max overlap error {worst:.1e}"))
}

fn crit2() -> Outcome {
    let start = Instant::now();
    let vac = Alphabet::calibrated(vec![C64::new(0.0, 0.0)], vec![1.0]).unwrap();
    let recs = simulate_records(&vac, &TransmissionSource::Fixed(1.0), &ChannelParams::lossless(), 270_000, 1.0, 21).unwrap();
    let q = estimate_q(&normalized_outcomes(&recs, None).unwrap(), QGrid::default()).unwrap();
    let vac_peak = q.peak(0.5);
    let rel = (vac_peak * std::f64::consts::PI - 1.0).abs();
    ensure!(rel < 0.02, "vacuum peak {vac_peak:.4} off 1/pi by {:.1}%", 100.0 * rel);

    // Post-channel amplitude 0.9: |α|²·T·η = 0.81.
    let four = Alphabet::four_state(1.0).unwrap();
    let t = 0.81 / ETA;
    let recs = simulate_records(&four, &TransmissionSource::Fixed(t), &params(), 270_000, 1.0, 22).unwrap();
    let q = estimate_q(&normalized_outcomes(&recs, None).unwrap(), QGrid::default()).unwrap();
    let mix_peak = q.peak(0.5);
    ensure!((mix_peak - 0.14).abs() <= 0.01, "mixture peak {mix_peak:.4}");
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("vacuum peak {vac_peak:.4} (1/pi = {:.4}), mixture peak {mix_peak:.4}", 1.0 / std::f64::consts::PI))
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DMatrix<C64> {
    let g = DMatrix::from_fn(n, rank, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let m = &g * g.adjoint();
    let t = m.trace();
    m / t
}

fn random_problem(rng: &mut ChaCha8Rng) -> SdpProblem {
    let dims: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=6)).collect();
    let x0: Vec<_> = dims.iter().map(|&n| random_state(rng, n, n)).collect();
    let mut p = SdpProblem::new(dims.clone());
    let terms = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Term> {
        (0..k)
            .map(|_| {
                let b = rng.random_range(0..dims.len());
                let c = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                Term::new(b, rng.random_range(0..dims[b]), rng.random_range(0..dims[b]), c)
            })
            .collect()
    };
    for (b, &n) in dims.iter().enumerate() {
        p.add_equality((0..n).map(|i| Term::real(b, i, i, 1.0)).collect(), 1.0);
    }
    for _ in 0..rng.random_range(1..6) {
        let t = terms(rng, 4);
        let v = evaluate(&t, &x0);
        p.add_equality(t, v);
    }
    for _ in 0..rng.random_range(0..4) {
        let t = terms(rng, 3);
        let v = evaluate(&t, &x0);
        let w = rng.random::<f64>() * 0.2;
        p.add_box(t, Some(v - w), Some(v + w));
    }
    for (b, &n) in dims.iter().enumerate() {
        let c = random_state(rng, n, 2);
        for r in 0..n {
            for cc in 0..n {
                p.objective.push(Term::new(b, cc, r, c[(r, cc)]));
            }
        }
    }
    p
}

fn crit3() -> Outcome {
    let start = Instant::now();
    let mut bell = DMatrix::<C64>::zeros(4, 4);
    for (r, c) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
        bell[(r, c)] = C64::new(0.5, 0.0);
    }
    let s = solve(&build_fixed(&bell, 2, 2), 1e-9, 200).map_err(|e| e.to_string())?;
    ensure!(s.status == Status::Optimal, "Bell status {}", s.status);
    let err = (s.primal_objective - 0.5).abs();
    ensure!(err < 1e-6 && s.duality_gap < 1e-7, "Bell {} gap {:.1e}", s.primal_objective, s.duality_gap);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..20 {
        let p = random_problem(&mut rng);
        let s = solve(&p, 1e-7, 200).map_err(|e| e.to_string())?;
        ensure!(s.status == Status::Optimal, "instance {k}: {}", s.status);
        ensure!(s.min_eigenvalue() >= -1e-7, "instance {k}: not PSD");
        ensure!(s.primal_residual < 1e-6 && s.dual_residual < 1e-6, "instance {k}: residuals");
        ensure!(s.duality_gap <= 1e-7 * s.primal_objective.abs().max(1.0), "instance {k}: gap {:.1e}", s.duality_gap);
        for (t, rhs) in &p.equalities {
            ensure!((evaluate(t, &s.blocks) - rhs).abs() < 1e-6, "instance {k}: equality violated");
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("Bell N = {:.9}, gap {:.1e}; 20 random instances certified", s.primal_objective, s.duality_gap))
}

fn oracle_cases(cutoff: usize) -> Result<Vec<(String, f64, f64)>, String> {
    let mut out = Vec::new();
    for (name, family) in [("two", AlphabetFamily::Two), ("four", AlphabetFamily::Four)] {
        for a in [0.5, 1.0] {
            let alphabet = family.alphabet(a).unwrap();
            let source = source_model(&alphabet, cutoff).unwrap();
            let exact = negativity_exact(&source.purification()).unwrap();
            let r = certify_bin(&ideal_moments(&alphabet, 1.0, 0.0), &source, 0.0, &CertifyOptions::default())
                .map_err(|e| e.to_string())?;
            ensure!(r.is_optimal(), "{name}-state {a}: {}", r.status);
            out.push((format!("{name}@{a}"), r.negativity_min, exact));
        }
    }
    Ok(out)
}

fn crit4() -> Outcome {
    let start = Instant::now();
    let cases = oracle_cases(12)?;
    let worst = cases.iter().map(|(_, n, e)| (n - e).abs()).fold(0.0, f64::max);
    for (name, n, e) in &cases {
        ensure!((n - e).abs() < 1e-5, "{name}: certified {n:.8} vs exact {e:.8}");
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("max |N_min - N_exact| = {worst:.1e} over 4 cases"))
}

fn amplitude_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

struct Crit5 {
    max_two: f64,
    max_four: f64,
    threshold_two: Option<f64>,
    threshold_four: Option<f64>,
}

fn crit5_values(rule: CutoffRule) -> Result<Crit5, String> {
    let amps = amplitude_grid(0.2, 2.0, 0.1);
    let eps = [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0];
    let c = compare_alphabets(0.63, &eps, &amps, rule, &CertifyOptions::default()).map_err(|e| e.to_string())?;
    let max = |f: AlphabetFamily| c.rows.iter().find(|r| r.family == f && r.epsilon == 0.01).unwrap().max_negativity;
    let thr = |f: AlphabetFamily| c.thresholds.iter().find(|t| t.0 == f).unwrap().1;
    Ok(Crit5 {
        max_two: max(AlphabetFamily::Two),
        max_four: max(AlphabetFamily::Four),
        threshold_two: thr(AlphabetFamily::Two),
        threshold_four: thr(AlphabetFamily::Four),
    })
}

fn crit5(v: &Crit5) -> Outcome {
    ensure!(v.max_four > v.max_two, "max at eps 0.01: four {:.4} <= two {:.4}", v.max_four, v.max_two);
    let t2 = v.threshold_two.ok_or("two-state threshold not reached on the grid")?;
    // A four-state threshold beyond the grid is larger than any reached one.
    ensure!(v.threshold_four.is_none_or(|t4| t4 > t2), "thresholds four {:?} <= two {t2}", v.threshold_four);
    Ok(format!(
        "max N at eps 0.01: four {:.4} > two {:.4}; eps threshold four {} > two {t2:.4}",
        v.max_four,
        v.max_two,
        v.threshold_four.map_or("beyond grid".into(), |t| format!("{t:.4}"))
    ))
}

fn crit6_curve(rule: CutoffRule) -> Result<Vec<CurvePoint>, String> {
    let amps = amplitude_grid(0.5, 1.5, 0.05);
    theoretical_curve(AlphabetFamily::Four, 0.63, EPSILON, &amps, rule, &CertifyOptions::default())
        .map_err(|e| e.to_string())
}

fn argmax(curve: &[CurvePoint]) -> (f64, f64) {
    curve
        .iter()
        .fold((f64::NAN, -1.0), |(a, m), p| if p.negativity > m { (p.amplitude, p.negativity) } else { (a, m) })
}

fn crit6(curve: &[CurvePoint]) -> Outcome {
    let (a, m) = argmax(curve);
    ensure!((0.8..=1.2).contains(&a), "argmax {a:.2} (N = {m:.4})");
    Ok(format!("argmax amplitude {a:.2}, N = {m:.4}"))
}

/// Noise-free moments for each retained bin at its mean transmission.
fn crit7_values(f: &Fixture, cutoff: usize) -> Result<Vec<(f64, f64)>, String> {
    let alphabet = Alphabet::four_state(1.0).unwrap();
    let source = source_model(&alphabet, cutoff).unwrap();
    let p = params();
    let mut out = Vec::new();
    for i in f.histogram.retained_indices() {
        let t = f.histogram.bin_mean(i).unwrap();
        let moments: Vec<StateMoments> = alphabet
            .amplitudes()
            .iter()
            .map(|&a| {
                let (b, v) = cvee::channel::propagate(a, 1.0, t, &p).unwrap();
                StateMoments::ideal(b, v)
            })
            .collect();
        let r = certify_bin(&moments, &source, 0.0, &CertifyOptions::default()).map_err(|e| e.to_string())?;
        ensure!(r.is_optimal(), "bin {i}: {}", r.status);
        out.push((t, r.negativity_min));
    }
    Ok(out)
}

fn crit7(values: &[(f64, f64)]) -> Outcome {
    for w in values.windows(2) {
        ensure!(
            w[1].1 >= w[0].1 - 1e-6,
            "N drops from {:.5} at T={:.4} to {:.5} at T={:.4}",
            w[0].1,
            w[0].0,
            w[1].1,
            w[1].0
        );
    }
    let (first, last) = (values[0], values[values.len() - 1]);
    Ok(format!(
        "{} bins, N from {:.4} (T={:.3}) to {:.4} (T={:.3})",
        values.len(),
        first.1,
        first.0,
        last.1,
        last.0
    ))
}

fn run_pipeline(f: &Fixture) -> Result<(Vec<BinCertification>, RateReport), String> {
    let alphabet = Alphabet::four_state(1.0).unwrap();
    let binned = simulate_binned(&alphabet, &f.transmissions, &f.histogram, &params(), 1.0, 11).map_err(|e| e.to_string())?;
    let source = source_model(&alphabet, default_cutoff(1.0)).unwrap();
    let results = certify_all(&binned, &source, &SIGMAS, &CertifyOptions::default(), 1).map_err(|e| e.to_string())?;
    let report = aggregate(&bin_rates(&results), &f.histogram, STATE_RATE).map_err(|e| e.to_string())?;
    Ok((results, report))
}

fn bin_rates(results: &[BinCertification]) -> Vec<BinRate> {
    results
        .iter()
        .map(|r| BinRate {
            bin_lo: r.lo,
            bin_hi: r.hi,
            sigma: r.sigma,
            log_negativity: r.result.log_negativity,
        })
        .collect()
}

fn crit8(results: &[BinCertification]) -> Outcome {
    let bins = results.iter().map(|r| r.bin).collect::<std::collections::BTreeSet<_>>();
    for &b in &bins {
        let levels: Vec<&BinCertification> = results.iter().filter(|r| r.bin == b).collect();
        ensure!(levels.iter().all(|r| r.result.is_optimal()), "bin {b}: non-optimal level");
        for w in levels.windows(2) {
            ensure!(
                w[1].result.negativity_min <= w[0].result.negativity_min + 1e-6,
                "bin {b}: N({}) = {:.5} > N({}) = {:.5}",
                w[1].sigma,
                w[1].result.negativity_min,
                w[0].sigma,
                w[0].result.negativity_min
            );
        }
    }
    ensure!(sigma_nested(results, 1e-6), "sigma_nested disagrees");
    Ok(format!("{} bins x {} levels nested", bins.len(), SIGMAS.len()))
}

fn crit9(f: &Fixture, report: &RateReport, elapsed: Duration) -> Outcome {
    let mean = f.histogram.mean();
    let retained = f.histogram.retained_mass();
    ensure!((mean - 0.761).abs() < 1e-3, "histogram mean {mean:.4}");
    ensure!((retained - 0.92).abs() < 0.01, "retained mass {retained:.4}");
    let total = report.total(0.0).ok_or("no sigma 0 level")?;
    ensure!((1e6..=3e6).contains(&total), "total {:.4} M", total / 1e6);
    ensure!(report.is_sigma_ordered(), "totals not ordered in sigma");
    let drift = (total - PINNED_TOTAL_RATE).abs() / PINNED_TOTAL_RATE;
    ensure!(drift < 1e-4, "total {total:.6e} drifted {drift:.1e} from pinned {PINNED_TOTAL_RATE:.6e}");
    within(elapsed, Duration::from_secs(900))?;
    let bands: Vec<String> = report.levels.iter().map(|l| format!("{:.3}", l.total_rate / 1e6)).collect();
    Ok(format!(
        "mean T {mean:.4}, retained {retained:.4}, totals [{}] M log-neg/s for sigma 0..3 ({elapsed:.0?})",
        bands.join(", ")
    ))
}

fn crit10() -> Outcome {
    let transmissions = sample_transmissions(&geometry(), 400_000, 5).unwrap();
    let histogram = empirical_histogram_top(&transmissions, 0.009, 35, 2_000).unwrap();
    let alphabet = Alphabet::four_state(1.0).unwrap();
    let source = source_model(&alphabet, default_cutoff(1.0)).unwrap();
    // Solves must resolve N well below the 1e-9 comparison.
    let opts = CertifyOptions {
        tolerance: 1e-11,
        ..Default::default()
    };
    let run = |scale: f64| -> Result<(BinnedMoments, Vec<BinCertification>, RateReport), String> {
        let binned = simulate_binned(&alphabet, &transmissions, &histogram, &params(), scale, 9).map_err(|e| e.to_string())?;
        let mut top = binned.clone();
        let keep = top.bins.len().saturating_sub(3);
        top.bins.drain(..keep);
        let results = certify_all(&top, &source, &[1.0, 2.0], &opts, 1).map_err(|e| e.to_string())?;
        let report = aggregate(&bin_rates(&results), &histogram, STATE_RATE).map_err(|e| e.to_string())?;
        Ok((binned, results, report))
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
    let (m0, c0, r0) = run(1.0)?;
    ensure!(c0.iter().any(|c| c.result.negativity_min > 0.0), "fixture certifies nothing");
    let mut worst: f64 = 0.0;
    for scale in [1e-3, 37.5, 4.2e4] {
        let (m, c, r) = run(scale)?;
        for (a, b) in m0.bins.iter().zip(&m.bins) {
            for (x, y) in a.states.iter().zip(&b.states) {
                for (u, v) in [
                    (x.mean_x, y.mean_x),
                    (x.mean_p, y.mean_p),
                    (x.var_x, y.var_x),
                    (x.var_p, y.var_p),
                    (x.se_mean, y.se_mean),
                    (x.se_var, y.se_var),
                ] {
                    ensure!(close(u, v), "scale {scale}: moment {u} vs {v}");
                }
            }
        }
        for (a, b) in c0.iter().zip(&c) {
            worst = worst.max((a.result.negativity_min - b.result.negativity_min).abs());
            ensure!(
                close(a.result.negativity_min, b.result.negativity_min),
                "scale {scale}: N {} vs {}",
                a.result.negativity_min,
                b.result.negativity_min
            );
        }
        for (a, b) in r0.levels.iter().zip(&r.levels) {
            ensure!(close(a.total_rate, b.total_rate), "scale {scale}: rate {} vs {}", a.total_rate, b.total_rate);
        }
    }
    Ok(format!("raw scales 1e-3, 37.5, 4.2e4: max N shift {worst:.1e}"))
}

fn rel_shift(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn crit11(c5: &Crit5, c6: &[CurvePoint], c7: &[(f64, f64)], f: &Fixture) -> Outcome {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut track = |what: String, a: f64, b: f64| {
        let s = rel_shift(a, b);
        if s > worst.0 {
            worst = (s, what);
        }
    };
    for ((name, n, _), (_, m, _)) in oracle_cases(12)?.iter().zip(oracle_cases(16)?) {
        track(format!("crit 4 {name}"), *n, m);
    }
    let wide = crit5_values(CutoffRule::Auto { extra: 4 })?;
    track("crit 5 two-state max".into(), c5.max_two, wide.max_two);
    track("crit 5 four-state max".into(), c5.max_four, wide.max_four);
    match (c5.threshold_two, wide.threshold_two) {
        (Some(a), Some(b)) => track("crit 5 two-state threshold".into(), a, b),
        (a, b) => ensure!(a == b, "two-state threshold {a:?} vs {b:?}"),
    }
    match (c5.threshold_four, wide.threshold_four) {
        (Some(a), Some(b)) => track("crit 5 four-state threshold".into(), a, b),
        (a, b) => ensure!(a == b, "four-state threshold {a:?} vs {b:?}"),
    }
    let c6_wide = crit6_curve(CutoffRule::Auto { extra: 4 })?;
    ensure!(argmax(c6).0 == argmax(&c6_wide).0, "argmax moved");
    for (p, q) in c6.iter().zip(&c6_wide) {
        track(format!("crit 6 amplitude {:.2}", p.amplitude), p.negativity, q.negativity);
    }
    for ((t, n), (_, m)) in c7.iter().zip(crit7_values(f, default_cutoff(1.0) + 4)?) {
        track(format!("crit 7 T={t:.3}"), *n, m);
    }
    ensure!(worst.0 < 0.01, "{} shifted by {:.2}%", worst.1, 100.0 * worst.0);
    Ok(format!("largest shift {:.2e} ({})", worst.0, worst.1))
}

fn report(id: usize, name: &str, outcome: std::thread::Result<Outcome>, failures: &mut Vec<usize>) {
    let outcome = outcome.unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(msg) => println!("PASS  [{id:>2}] {name}: {msg}"),
        Err(msg) => {
            println!("FAIL  [{id:>2}] {name}: {msg}");
            failures.push(id);
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

fn main() {
    // `cargo test` passes harness flags; listing must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        report(id, name, catch_unwind(AssertUnwindSafe(f)), &mut failures);
    };
    run(1, "coherent-state algebra", &crit1);
    run(2, "Q-function peaks", &crit2);
    run(3, "SDP solver certificates", &crit3);
    run(4, "oracle equivalence", &crit4);

    let start = Instant::now();
    let c5 = guarded(|| crit5_values(CutoffRule::default()));
    let c5_time = start.elapsed();
    run(5, "alphabet comparison at T=0.63", &|| {
        let v = c5.as_ref().map_err(|e| e.clone())?;
        crit5(v).map(|m| format!("{m} ({c5_time:.0?})"))
    });
    let c6 = guarded(|| crit6_curve(CutoffRule::default()));
    run(6, "optimal amplitude", &|| crit6(c6.as_ref().map_err(|e| e.clone())?));

    let fix = fixture();
    let c7 = guarded(|| crit7_values(&fix, default_cutoff(1.0)));
    run(7, "sub-channel monotonicity", &|| crit7(c7.as_ref().map_err(|e| e.clone())?));

    let start = Instant::now();
    let pipeline = guarded(|| run_pipeline(&fix));
    let elapsed = start.elapsed();
    run(8, "sigma nesting", &|| crit8(&pipeline.as_ref().map_err(|e| e.clone())?.0));
    run(9, "rate pipeline", &|| crit9(&fix, &pipeline.as_ref().map_err(|e| e.clone())?.1, elapsed));
    run(10, "normalization invariance", &crit10);
    run(11, "cutoff stability", &|| {
        let c5 = c5.as_ref().map_err(|e| e.clone())?;
        let c6 = c6.as_ref().map_err(|e| e.clone())?;
        let c7 = c7.as_ref().map_err(|e| e.clone())?;
        crit11(c5, c6, c7, &fix)
    });

    if failures.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed {failures:?}");
        std::process::exit(1);
    }
}
