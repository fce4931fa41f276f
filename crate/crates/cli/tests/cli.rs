use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvee::alphabet::{source_model, Alphabet};
use cvee::certify::read_results_csv;
use cvee::fock::negativity_exact;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[alphabet]
kind = "four"
amplitude = 1.0

[channel]
detector_efficiency = 0.83
excess_noise = 0.01

[channel.transmission]
model = "beam"
beam_radius = 1.0
aperture_radius = 1.0
mean = 0.761

[detection]
n_slots = 60000
bin_width = 0.009
n_bins = 12
min_count = 4000

[certify]
sigma = [1, 2]
"#;

const ANALYTIC: &str = r#"
[alphabet]
kind = "two"
amplitude = 0.5

[channel]
detector_efficiency = 1.0
excess_noise = 0.0

[channel.transmission]
model = "fixed"
value = 1.0

[certify]
cutoff = 12
sigma = [0]
"#;

fn cvee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvee")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let o = cvee(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&a.join("records.csv")), read(&b.join("records.csv")));
    assert_eq!(read(&a.join("histogram.csv")), read(&b.join("histogram.csv")));
    let o = cvee(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert!(o.status.success());
    assert_ne!(read(&a.join("records.csv")), read(&c.join("records.csv")));
}

#[test]
fn pipeline_equals_single_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (p, r) = (dir.path().join("piped"), dir.path().join("run"));
    for cmd in ["simulate", "ingest", "certify", "rate"] {
        let o = cvee(&[cmd, "--config", s(&cfg), "--out", s(&p)]);
        assert!(matches!(o.status.code(), Some(0 | 3)), "{cmd}: {}", stderr(&o));
    }
    let o = cvee(&["run", "--config", s(&cfg), "--out", s(&r)]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    for f in ["histogram.csv", "moments.csv", "results.csv", "rate.csv"] {
        assert_eq!(read(&p.join(f)), read(&r.join(f)), "{f} differs");
    }
    let rows = read_results_csv(&read(&r.join("results.csv"))[..]).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().any(|r| r.negativity > 0.0));
}

#[test]
fn outputs_carry_version_and_config_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    let o = cvee(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    let mut hashes = Vec::new();
    for f in ["histogram.csv", "moments.csv", "results.csv", "rate.csv"] {
        let text = String::from_utf8(read(&out.join(f))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# cvee {}", env!("CARGO_PKG_VERSION")));
        let id = lines.next().unwrap();
        assert!(id.starts_with("# config_sha256=") && id.ends_with(" seed=3"), "{id}");
        hashes.push(id.to_string());
    }
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    // The sigma override changes the effective config, hence the hash.
    let other = dir.path().join("o2");
    let o = cvee(&["run", "--config", s(&cfg), "--out", s(&other), "--sigma", "2"]);
    assert!(matches!(o.status.code(), Some(0 | 3)));
    let text = String::from_utf8(read(&other.join("results.csv"))).unwrap();
    assert_ne!(text.lines().nth(1).unwrap(), hashes[0]);
}

#[test]
fn analytic_fixture_matches_exact_negativity() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", ANALYTIC);
    let out = dir.path().join("o");
    let o = cvee(&["certify", "--config", s(&cfg), "--out", s(&out), "--expected", "1.0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_results_csv(&read(&out.join("results.csv"))[..]).unwrap();
    let source = source_model(&Alphabet::two_state(0.5).unwrap(), 12).unwrap();
    let exact = negativity_exact(&source.purification()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].negativity - exact).abs() < 1e-5, "{} vs {exact}", rows[0].negativity);
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("min_count = 4000", "min_count = 4000\nbin_widht = 0.01"));
    let o = cvee(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bin_widht") && err.contains("line"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn bad_values_name_their_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("detector_efficiency = 0.83", "detector_efficiency = 1.3"));
    let o = cvee(&["simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("channel"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "d.toml", SMALL);
    for args in [
        vec!["run", "--config", s(&cfg), "--sigma", "2,1"],
        vec!["run", "--config", s(&cfg), "--log-base", "10"],
        vec!["run", "--config", s(&cfg), "--workers", "0"],
        vec!["run"],
    ] {
        assert_eq!(cvee(&args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn non_optimal_bins_exit_three_with_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", ANALYTIC);
    // Variances below the vacuum level admit no state.
    let moments = "bin_lo,bin_hi,prob,state,mean_x,mean_p,var_x,var_p,n,se_mean,se_var\n\
                   0.5,0.6,1,0,0.7,0,0.8,0.8,1000,0.001,0.001\n\
                   0.5,0.6,1,1,-0.7,0,0.8,0.8,1000,0.001,0.001\n";
    let m = dir.path().join("m.csv");
    std::fs::write(&m, moments).unwrap();
    let out = dir.path().join("o");
    let o = cvee(&["certify", "--config", s(&cfg), "--moments", s(&m), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let rows = read_results_csv(&read(&out.join("results.csv"))[..]).unwrap();
    assert_eq!(rows[0].status, "infeasible");
}

#[test]
fn unwritable_output_is_a_computation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", ANALYTIC);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = cvee(&["certify", "--config", s(&cfg), "--expected", "1.0", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn rate_without_config_and_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    let o = cvee(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    let o = cvee(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 3)));

    let o = cvee(&["rate", "--out", s(&out), "--state-rate", "1e6"]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    let text = String::from_utf8(read(&out.join("rate.csv"))).unwrap();
    assert!(text.contains("config_sha256=none") && text.contains("state_rate=1000000"));
    let o = cvee(&["rate", "--out", s(&out), "--log-base", "e", "--state-rate", "1e6"]);
    assert_eq!(o.status.code(), Some(1), "log base differs from the results");

    let o = cvee(&["report", "--run", s(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    let report = String::from_utf8(read(&out.join("report.txt"))).unwrap();
    for section in ["[transmission histogram]", "[moments]", "[certification]", "[rate]", "[Q function]"] {
        assert!(report.contains(section), "missing {section}");
    }
    assert!(out.join("subchannels.csv").exists() && out.join("q_function.csv").exists());
    assert_eq!(cvee(&["report", "--run", s(&dir.path().join("nothing"))]).status.code(), Some(1));
}

#[test]
fn sweep_writes_curves_and_thresholds() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{ANALYTIC}\n[sweep]\ntransmission = 0.63\nepsilons = [0.01, 3.0]\namplitudes = {{ start = 0.5, stop = 1.0, step = 0.5 }}\n"
    )
    .replace("cutoff = 12\n", "");
    let cfg = write_config(dir.path(), "s.toml", &text);
    let out = dir.path().join("o");
    let o = cvee(&["sweep", "--config", s(&cfg), "--out", s(&out), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let curves = String::from_utf8(read(&out.join("curves.csv"))).unwrap();
    assert_eq!(curves.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 2 * 2);
    let cmp = String::from_utf8(read(&out.join("comparison.csv"))).unwrap();
    let max = |fam: &str| -> f64 {
        cmp.lines()
            .find(|l| l.starts_with(&format!("{fam},0.01,")))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(max("four") > max("two"));
    let thr = String::from_utf8(read(&out.join("thresholds.csv"))).unwrap();
    assert!(thr.contains("two,") && thr.contains("four,"));
}
