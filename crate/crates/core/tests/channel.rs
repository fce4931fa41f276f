use cvee::channel::*;
use cvee::fock::C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn geometry() -> BeamGeometry {
    BeamGeometry {
        beam_radius: 1.0,
        aperture_radius: 0.8,
        jitter_sigma: 0.4,
    }
}

#[test]
fn constant_samples_single_bin() {
    let h = empirical_histogram(&[0.8; 100], 0.009, 10).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h.retained_indices(), vec![0]);
    assert!((h.probability(0) - 1.0).abs() < 1e-15);
    assert_eq!(h.outside_mass(), 0.0);
}

#[test]
fn histogram_mean_is_sample_mean() {
    let s = sample_transmissions(&geometry(), 20_000, 3).unwrap();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let h = empirical_histogram(&s, 0.009, 50).unwrap();
    assert!((h.mean() - mean).abs() < 1e-12);
    let top = empirical_histogram_top(&s, 0.009, 10, 50).unwrap();
    assert!((top.mean() - mean).abs() < 1e-12);
    let mass: f64 = top.probabilities().iter().sum::<f64>() + top.outside_mass();
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn filtering_keeps_probabilities() {
    let s = sample_transmissions(&geometry(), 20_000, 4).unwrap();
    let all = empirical_histogram(&s, 0.01, 0).unwrap();
    let filtered = all.clone().with_min_count(400);
    assert!(filtered.retained_mass() < all.retained_mass());
    for i in filtered.retained_indices() {
        assert_eq!(filtered.probability(i), all.probability(i));
        assert!(filtered.counts()[i] >= 400);
    }
}

#[test]
fn histogram_rejects_bad_input() {
    assert!(empirical_histogram(&[], 0.01, 0).is_err());
    assert!(empirical_histogram(&[0.5], 0.0, 0).is_err());
    assert!(empirical_histogram(&[1.2], 0.01, 0).is_err());
}

#[test]
fn reads_sample_file() {
    let text = "# header\n0.5\n\n0.75\nbogus\n1.5\n";
    let (v, bad) = read_transmission_samples(text.as_bytes()).unwrap();
    assert_eq!(v, vec![0.5, 0.75]);
    assert_eq!(bad, 2);
}

#[test]
fn centred_transmission_matches_closed_form() {
    for (w, a) in [(1.0, 0.5), (1.0, 1.0), (0.7, 1.3)] {
        let g = BeamGeometry { beam_radius: w, aperture_radius: a, jitter_sigma: 0.0 };
        let t = beam_wander_transmission(&g, 0.0).unwrap();
        let exact = 1.0 - (-2.0 * a * a / (w * w)).exp();
        assert!((t - exact).abs() < 1e-10, "{t} vs {exact}");
    }
}

#[test]
fn transmission_limits() {
    let wide = BeamGeometry { beam_radius: 1.0, aperture_radius: 10.0, jitter_sigma: 0.0 };
    assert!(beam_wander_transmission(&wide, 0.0).unwrap() > 1.0 - 1e-12);
    let g = geometry();
    assert!(beam_wander_transmission(&g, 20.0).unwrap() < 1e-12);
    let mut prev = 1.0;
    for i in 0..40 {
        let t = beam_wander_transmission(&g, i as f64 * 0.1).unwrap();
        assert!(t <= prev + 1e-12);
        prev = t;
    }
    assert!(beam_wander_transmission(&g, -1.0).is_err());
}

#[test]
fn transmission_matches_monte_carlo() {
    // Photon positions drawn from the Gaussian intensity profile, per-axis σ = w/2.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [(1.0, 0.8, 0.6), (1.3, 1.0, 1.1), (0.8, 1.2, 0.3)];
    for (w, a, r) in cases {
        let g = BeamGeometry { beam_radius: w, aperture_radius: a, jitter_sigma: 0.0 };
        let n = 2_000_000;
        let spot = Normal::new(0.0, w / 2.0).unwrap();
        let inside = (0..n)
            .filter(|_| {
                let x: f64 = r + spot.sample(&mut rng);
                let y: f64 = spot.sample(&mut rng);
                x * x + y * y <= a * a
            })
            .count();
        let mc = inside as f64 / n as f64;
        let t = beam_wander_transmission(&g, r).unwrap();
        assert!((t - mc).abs() < 1e-3, "w={w} a={a} r={r}: {t} vs {mc}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let a = sample_transmissions(&geometry(), 1000, 9).unwrap();
    let b = sample_transmissions(&geometry(), 1000, 9).unwrap();
    let c = sample_transmissions(&geometry(), 1000, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_jitter_is_constant() {
    let g = BeamGeometry { jitter_sigma: 0.0, ..geometry() };
    let s = sample_transmissions(&g, 500, 1).unwrap();
    assert!(s.iter().all(|&t| t == s[0]));
    assert!((s[0] - g.peak_transmission()).abs() < 1e-10);
}

#[test]
fn sample_mean_matches_integral() {
    let g = geometry();
    let n = 100_000;
    let s = sample_transmissions(&g, n, 5).unwrap();
    let mean = s.iter().sum::<f64>() / n as f64;
    let sd = (s.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    // Independent oracle: offset density r/σ² e^{−r²/2σ²} times T(r), midpoint rule.
    let sigma = g.jitter_sigma;
    let steps = 4000;
    let h = 8.0 * sigma / steps as f64;
    let expect: f64 = (0..steps)
        .map(|i| {
            let r = (i as f64 + 0.5) * h;
            beam_wander_transmission(&g, r).unwrap() * r / (sigma * sigma) * (-r * r / (2.0 * sigma * sigma)).exp() * h
        })
        .sum();
    assert!((mean - expect).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {expect}");
}

#[test]
fn jitter_calibration_hits_target_mean() {
    let g = BeamGeometry { beam_radius: 1.0, aperture_radius: 1.0, jitter_sigma: 0.0 }
        .with_mean_transmission(0.761)
        .unwrap();
    let s = sample_transmissions(&g, 200_000, 2).unwrap();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    assert!((mean - 0.761).abs() < 2e-3);
    assert!(g.with_mean_transmission(0.99).is_err());
}

#[test]
fn propagate_examples() {
    let lossless = ChannelParams::lossless();
    let (a, _) = propagate(C64::new(1.0, 0.0), 1.0, 0.812, &lossless).unwrap();
    assert!((a.re - 0.901).abs() < 1e-3);
    let (a, v) = propagate(C64::new(0.3, -0.7), 1.3, 1.0, &lossless).unwrap();
    assert_eq!((a, v), (C64::new(0.3, -0.7), 1.3));
    let p = ChannelParams { detector_efficiency: 0.83, excess_noise: 0.0, ..lossless };
    let (_, v) = propagate(C64::new(0.0, 0.0), 1.01, 0.5, &p).unwrap();
    assert!((v - 1.00415).abs() < 1e-12);
    assert!(propagate(C64::new(0.0, 0.0), 1.0, 1.1, &p).is_err());
    assert!(propagate(C64::new(0.0, 0.0), 0.5, 0.5, &p).is_err());
}

#[test]
fn noise_placement() {
    let rx = ChannelParams { detector_efficiency: 0.8, excess_noise: 0.1, monitor_tap: 0.0, noise_at: NoiseAt::Receiver };
    let tx = ChannelParams { noise_at: NoiseAt::Sender, ..rx };
    let (_, vr) = propagate(C64::new(1.0, 0.0), 1.0, 0.5, &rx).unwrap();
    let (_, vs) = propagate(C64::new(1.0, 0.0), 1.0, 0.5, &tx).unwrap();
    assert!((vr - 1.1).abs() < 1e-15);
    assert!((vs - 1.04).abs() < 1e-15);
}

#[test]
fn propagate_agrees_with_sampled_beam_splitter() {
    let (t, eta, v0) = (0.5, 0.83, 1.01);
    let p = ChannelParams { detector_efficiency: eta, excess_noise: 0.0, ..ChannelParams::lossless() };
    let (_, v) = propagate(C64::new(0.0, 0.0), v0, t, &p).unwrap();
    let g: f64 = t * eta;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 400_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            let vac: f64 = StandardNormal.sample(&mut rng);
            g.sqrt() * v0.sqrt() * x + (1.0 - g).sqrt() * vac
        })
        .collect();
    let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
    assert!((var - v).abs() < 3.0 * v * (2.0 / n as f64).sqrt());
}

#[test]
fn histogram_file_round_trip() {
    let ts = sample_transmissions(&geometry(), 20_000, 3).unwrap();
    let h = empirical_histogram_top(&ts, 0.009, 35, 300).unwrap();
    let mut buf = Vec::new();
    write_histogram_csv(&mut buf, &h, &["run 1".to_string()]).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("# run 1\n# outside_count="));
    let back = read_histogram_csv(&buf[..]).unwrap();
    assert_eq!(back.edges(), h.edges());
    assert_eq!(back.counts(), h.counts());
    assert_eq!(back.retained(), h.retained());
    assert_eq!(back.outside_count(), h.outside_count());
    assert_eq!(back.min_count(), h.min_count());
    for i in 0..h.len() {
        assert_eq!(back.probability(i), h.probability(i));
    }
}

#[test]
fn histogram_file_rejects_damage() {
    let ok = "# outside_count=1 min_count=2\nbin_lo,bin_hi,count,prob,retained\n0.5,0.6,3,0.75,1\n";
    assert!(read_histogram_csv(ok.as_bytes()).is_ok());
    for bad in [
        ok.replace("# outside_count=1 min_count=2\n", ""),
        ok.replace("bin_lo,", "lo,"),
        ok.replace(",3,", ",x,"),
        format!("{ok}0.7,0.8,1,0.25,0\n"),
    ] {
        assert!(read_histogram_csv(bad.as_bytes()).is_err(), "{bad}");
    }
}

proptest! {
    #[test]
    fn coherent_inputs_gain_only_excess_noise(t in 0.0..=1.0f64, eta in 0.05..=1.0f64, eps in 0.0..2.0f64, re in -2.0..2.0f64, im in -2.0..2.0f64) {
        let p = ChannelParams { detector_efficiency: eta, excess_noise: eps, ..ChannelParams::lossless() };
        let (_, v) = propagate(C64::new(re, im), 1.0, t, &p).unwrap();
        prop_assert!((v - 1.0 - eps).abs() < 1e-14);
    }

    #[test]
    fn pure_loss_composes(t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64, v in 1.0..5.0f64, re in -2.0..2.0f64) {
        let p = ChannelParams::lossless();
        let (a1, v1) = propagate(C64::new(re, 0.5), v, t1, &p).unwrap();
        let (a2, v2) = propagate(a1, v1, t2, &p).unwrap();
        let (a, vv) = propagate(C64::new(re, 0.5), v, t1 * t2, &p).unwrap();
        prop_assert!((a2 - a).norm() < 1e-12);
        prop_assert!((v2 - vv).abs() < 1e-12);
    }
}
