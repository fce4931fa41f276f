use cvee::channel::TransmissionHistogram;
use cvee::rates::*;
use cvee::Error;
use proptest::prelude::*;

fn hist(counts: Vec<u64>, outside: u64, min_count: u64) -> TransmissionHistogram {
    let edges = (0..=counts.len()).map(|i| 0.5 + 0.01 * i as f64).collect();
    TransmissionHistogram::from_counts(edges, counts, outside, min_count).unwrap()
}

fn rate(h: &TransmissionHistogram, i: usize, sigma: f64, e: f64) -> BinRate {
    let (bin_lo, bin_hi) = h.bin(i);
    BinRate {
        bin_lo,
        bin_hi,
        sigma,
        log_negativity: e,
    }
}

#[test]
fn log_negativity_values() {
    assert_eq!(log_negativity(0.0, LogBase::Two).unwrap(), 0.0);
    assert!((log_negativity(0.5, LogBase::Two).unwrap() - 1.0).abs() < 1e-15);
    assert!((log_negativity(0.49, LogBase::Two).unwrap() - 0.985_500_430_3).abs() < 1e-9);
    assert!((log_negativity(0.5, LogBase::E).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn log_negativity_rejects_bad_input() {
    assert!(log_negativity(-1e-3, LogBase::Two).is_err());
    assert!(log_negativity(f64::NAN, LogBase::Two).is_err());
    assert!(log_negativity(f64::INFINITY, LogBase::E).is_err());
}

#[test]
fn log_base_text() {
    assert_eq!(LogBase::parse("2"), Some(LogBase::Two));
    assert_eq!(LogBase::parse("e"), Some(LogBase::E));
    assert_eq!(LogBase::parse("10"), None);
    assert_eq!(LogBase::E.to_string(), "e");
}

#[test]
fn single_bin_at_state_rate() {
    let h = hist(vec![100], 0, 0);
    let report = aggregate(&[rate(&h, 0, 0.0, 1.0)], &h, 2.22e6).unwrap();
    assert!((report.total(0.0).unwrap() - 2.22e6).abs() < 1e-6);
}

#[test]
fn unretained_mass_stays_in_denominator() {
    // 8 % of samples fall outside, one bin is below min_count.
    let h = hist(vec![2, 40, 50], 8, 5);
    let rs = [rate(&h, 1, 0.0, 1.0), rate(&h, 2, 0.0, 0.5)];
    let report = aggregate(&rs, &h, 1.0).unwrap();
    assert!((report.total(0.0).unwrap() - (0.40 + 0.25)).abs() < 1e-15);
}

#[test]
fn missing_bins_contribute_zero() {
    let h = hist(vec![50, 50], 0, 0);
    let report = aggregate(&[rate(&h, 1, 0.0, 2.0)], &h, 1.0).unwrap();
    assert_eq!(report.levels[0].per_bin.len(), 1);
    assert!((report.total(0.0).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn key_mismatches_are_errors() {
    let h = hist(vec![2, 40, 50], 8, 5);
    let foreign = BinRate {
        bin_lo: 0.1,
        bin_hi: 0.2,
        sigma: 0.0,
        log_negativity: 1.0,
    };
    assert!(matches!(aggregate(&[foreign], &h, 1.0), Err(Error::KeyMismatch(_))));
    assert!(matches!(aggregate(&[rate(&h, 0, 0.0, 1.0)], &h, 1.0), Err(Error::KeyMismatch(_))));
    let dup = [rate(&h, 1, 0.0, 1.0), rate(&h, 1, 0.0, 1.0)];
    assert!(matches!(aggregate(&dup, &h, 1.0), Err(Error::KeyMismatch(_))));
    assert!(aggregate(&[rate(&h, 1, 0.0, -0.1)], &h, 1.0).is_err());
    assert!(aggregate(&[], &h, -1.0).is_err());
}

#[test]
fn levels_sorted_by_sigma() {
    let h = hist(vec![50, 50], 0, 0);
    let rs = [
        rate(&h, 0, 2.0, 0.2),
        rate(&h, 0, 0.0, 0.8),
        rate(&h, 1, 1.0, 0.5),
        rate(&h, 1, 0.0, 0.9),
    ];
    let report = aggregate(&rs, &h, 1.0).unwrap();
    let sigmas: Vec<f64> = report.levels.iter().map(|l| l.sigma).collect();
    assert_eq!(sigmas, vec![0.0, 1.0, 2.0]);
    assert!(report.is_sigma_ordered());
}

#[test]
fn rate_csv_layout() {
    let h = hist(vec![50, 50], 0, 0);
    let rs = [rate(&h, 0, 0.0, 1.0), rate(&h, 1, 0.0, 1.0), rate(&h, 0, 1.0, 0.5)];
    let report = aggregate_with_base(&rs, &h, 2.0, LogBase::E).unwrap();
    let mut buf = Vec::new();
    write_rate_csv(&mut buf, &report, &["tool=x".into()]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# tool=x");
    assert_eq!(lines[1], "# log_base=e state_rate=2");
    assert_eq!(lines[2], "sigma,bins,weighted_log_negativity,total_rate");
    assert_eq!(lines[3], "0,2,1,2");
    assert_eq!(lines[4], "1,1,0.25,0.5");
}

proptest! {
    #[test]
    fn matches_naive_summation(
        counts in prop::collection::vec(0u64..1000, 1..40),
        outside in 0u64..500,
        es in prop::collection::vec(0.0f64..3.0, 40),
        state_rate in 1.0f64..1e7,
    ) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let h = hist(counts.clone(), outside, 1);
        let rs: Vec<BinRate> = h.retained_indices().into_iter().map(|i| rate(&h, i, 0.0, es[i])).collect();
        let report = aggregate(&rs, &h, state_rate).unwrap();
        let total = (counts.iter().sum::<u64>() + outside) as f64;
        let mut naive = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if c >= 1 {
                naive += (c as f64 / total) * es[i];
            }
        }
        naive *= state_rate;
        let got = report.total(0.0).unwrap_or(0.0);
        prop_assert!((got - naive).abs() <= 1e-12 * naive.max(1.0));
    }

    #[test]
    fn linear_in_state_rate(
        es in prop::collection::vec(0.0f64..3.0, 5),
        c in 0.5f64..8.0,
    ) {
        let h = hist(vec![10, 20, 30, 40, 50], 7, 0);
        let rs: Vec<BinRate> = (0..5).map(|i| rate(&h, i, 0.0, es[i])).collect();
        let a = aggregate(&rs, &h, 1.0).unwrap().total(0.0).unwrap();
        let b = aggregate(&rs, &h, c).unwrap().total(0.0).unwrap();
        prop_assert!((b - c * a).abs() <= 1e-12 * (c * a).max(1e-300));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn nested_inputs_give_ordered_report(
        base in prop::collection::vec(0.0f64..3.0, 4),
        cuts in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let h = hist(vec![5, 6, 7, 8], 0, 0);
        let mut rs = Vec::new();
        for i in 0..4 {
            let mut e = base[i];
            for s in 0..4 {
                rs.push(rate(&h, i, s as f64, e));
                if s < 3 {
                    e *= cuts[i * 3 + s];
                }
            }
        }
        let report = aggregate(&rs, &h, 2.22e6).unwrap();
        prop_assert!(report.is_sigma_ordered());
    }
}
