//! Signal alphabets and the source-replacement picture.
//!
//! Alice's ensemble `{p_k, |α_k⟩}` is replaced by the bipartite state
//! `Σ_k √p_k |k⟩_A |α_k⟩_B`. Its A-marginal is the prior-weighted Gram matrix,
//! which is what effective-entanglement certification holds fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    coherent_state_with_tolerance, hermitian_eigenvalues, DensityOperator, FockVector, C64,
    ADEQUATE_NORM_TOLERANCE,
};

const PRIOR_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    amplitudes: Vec<C64>,
    priors: Vec<f64>,
}

impl Alphabet {
    /// `{+α, −α}` with equal priors.
    pub fn two_state(alpha: f64) -> Result<Self> {
        check_amplitude(alpha)?;
        Ok(Self {
            amplitudes: vec![C64::new(alpha, 0.0), C64::new(-alpha, 0.0)],
            priors: vec![0.5; 2],
        })
    }

    /// `{α, iα, −α, −iα}` with equal priors.
    pub fn four_state(alpha: f64) -> Result<Self> {
        check_amplitude(alpha)?;
        Ok(Self {
            amplitudes: vec![
                C64::new(alpha, 0.0),
                C64::new(0.0, alpha),
                C64::new(-alpha, 0.0),
                C64::new(0.0, -alpha),
            ],
            priors: vec![0.25; 4],
        })
    }

    /// Arbitrary amplitudes, e.g. per-state calibrated values.
    pub fn calibrated(amplitudes: Vec<C64>, priors: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::invalid("alphabet needs at least one state"));
        }
        if amplitudes.len() != priors.len() {
            return Err(Error::invalid(format!(
                "{} amplitudes but {} priors",
                amplitudes.len(),
                priors.len()
            )));
        }
        if let Some(p) = priors.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(format!("prior {p} is not a probability")));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > PRIOR_SUM_TOLERANCE {
            return Err(Error::invalid(format!("priors sum to {total}, not 1")));
        }
        if amplitudes.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::invalid("non-finite amplitude"));
        }
        Ok(Self { amplitudes, priors })
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn max_abs_amplitude(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Gram matrix from the closed-form overlap, `G_jk = √(p_j p_k) ⟨α_k|α_j⟩`.
    pub fn gram_analytic(&self) -> DMatrix<C64> {
        let k = self.len();
        DMatrix::from_fn(k, k, |j, l| {
            coherent_overlap(self.amplitudes[l], self.amplitudes[j])
                * (self.priors[j] * self.priors[l]).sqrt()
        })
    }

    /// Returns `K` when the alphabet is `α_k = e^{2πik/K} α_0` with uniform
    /// priors and `K ∈ {1, 2, 4}`, the cases whose rotation maps quadrature
    /// moments onto quadrature moments.
    pub fn cyclic_order(&self) -> Option<usize> {
        let k = self.len();
        if !matches!(k, 1 | 2 | 4) {
            return None;
        }
        let uniform = 1.0 / k as f64;
        if self.priors.iter().any(|p| (p - uniform).abs() > 1e-14) {
            return None;
        }
        let omega = C64::from_polar(1.0, 2.0 * std::f64::consts::PI / k as f64);
        let a0 = self.amplitudes[0];
        let scale = a0.norm().max(1e-300);
        let mut expect = a0;
        for a in &self.amplitudes {
            if (a - expect).norm() > 1e-12 * scale.max(1.0) {
                return None;
            }
            expect *= omega;
        }
        Some(k)
    }
}

fn check_amplitude(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "amplitude must be a finite non-negative real, got {alpha}"
        )));
    }
    Ok(())
}

/// `⟨a|b⟩ = exp(−|a|²/2 − |b|²/2 + a* b)`.
pub fn coherent_overlap(a: C64, b: C64) -> C64 {
    (a.conj() * b - (a.norm_sqr() + b.norm_sqr()) / 2.0).exp()
}

#[derive(Debug, Clone)]
pub struct SourceModel {
    alphabet: Alphabet,
    cutoff: usize,
    states: Vec<FockVector>,
    gram: DMatrix<C64>,
    purification: DVector<C64>,
}

impl SourceModel {
    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabet.is_empty()
    }

    /// Normalized truncated signal states `|α_k⟩`.
    pub fn states(&self) -> &[FockVector] {
        &self.states
    }

    pub fn gram(&self) -> &DMatrix<C64> {
        &self.gram
    }

    pub fn purification_vector(&self) -> &DVector<C64> {
        &self.purification
    }

    pub fn purification(&self) -> DensityOperator {
        DensityOperator::from_vector(vec![self.len(), self.cutoff], &self.purification)
            .expect("purification is a valid pure state")
    }
}

/// Builds the source model on a Fock space of dimension `cutoff`.
///
/// The signal states are truncated and renormalized, and the Gram matrix is
/// formed from those vectors so that `tr_B |Ψ⟩⟨Ψ| = G` holds to rounding.
pub fn source_model(alphabet: &Alphabet, cutoff: usize) -> Result<SourceModel> {
    let k = alphabet.len();
    let states = alphabet
        .amplitudes()
        .iter()
        .map(|&a| coherent_state_with_tolerance(a, cutoff, ADEQUATE_NORM_TOLERANCE))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|s| s.normalized())
        .collect::<Vec<_>>();
    let priors = alphabet.priors();
    let gram = DMatrix::from_fn(k, k, |j, l| {
        states[l].inner(&states[j]) * (priors[j] * priors[l]).sqrt()
    });
    let min_ev = hermitian_eigenvalues(&gram)[0];
    if min_ev < -1e-12 {
        return Err(Error::InconsistentSource(format!(
            "Gram matrix has eigenvalue {min_ev:.3e}"
        )));
    }
    let mut purification = DVector::zeros(k * cutoff);
    for (j, s) in states.iter().enumerate() {
        let w = priors[j].sqrt();
        for n in 0..cutoff {
            purification[j * cutoff + n] = s.amplitudes()[n] * w;
        }
    }
    Ok(SourceModel {
        alphabet: alphabet.clone(),
        cutoff,
        states,
        gram,
        purification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{max_abs, negativity_exact, partial_trace};
    use proptest::prelude::*;

    #[test]
    fn two_state_zero_is_vacuum_pair() {
        let a = Alphabet::two_state(0.0).unwrap();
        assert!(a.amplitudes().iter().all(|z| z.norm() == 0.0));
        let g = a.gram_analytic();
        assert!(g.iter().all(|z| (z - C64::new(0.5, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn two_state_gram_off_diagonal() {
        let g = Alphabet::two_state(1.0).unwrap().gram_analytic();
        assert!((g[(0, 1)].re - (-2.0f64).exp() / 2.0).abs() < 1e-15);
        assert!((g[(0, 1)].re - 0.06767).abs() < 1e-5);
    }

    #[test]
    fn four_state_geometry() {
        let a = Alphabet::four_state(1.0).unwrap();
        for (k, z) in a.amplitudes().iter().enumerate() {
            assert!((z.norm() - 1.0).abs() < 1e-15);
            let angle = z.arg().rem_euclid(2.0 * std::f64::consts::PI);
            let expect = k as f64 * std::f64::consts::FRAC_PI_2;
            assert!((angle - expect).abs() < 1e-12);
        }
        assert_eq!(a.cyclic_order(), Some(4));
        assert_eq!(Alphabet::two_state(0.7).unwrap().cyclic_order(), Some(2));
    }

    #[test]
    fn four_state_zero_gram_is_rank_one() {
        let g = Alphabet::four_state(0.0).unwrap().gram_analytic();
        assert!(g.iter().all(|z| (z - C64::new(0.25, 0.0)).norm() < 1e-15));
        let ev = hermitian_eigenvalues(&g);
        assert!(ev[..3].iter().all(|l| l.abs() < 1e-14));
        assert!((ev[3] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn four_state_gram_spectrum_matches_poisson_sectors() {
        let alpha = 1.0f64;
        let g = Alphabet::four_state(alpha).unwrap().gram_analytic();
        // λ_j = e^{-|α|²} Σ_{n ≡ j mod 4} |α|^{2n}/n!
        let mut sectors = [0.0f64; 4];
        let mut term = (-alpha * alpha).exp();
        for n in 0..60 {
            if n > 0 {
                term *= alpha * alpha / n as f64;
            }
            sectors[n % 4] += term;
        }
        sectors.sort_by(|a, b| a.total_cmp(b));
        let ev = hermitian_eigenvalues(&g);
        for (l, s) in ev.iter().zip(sectors.iter()) {
            assert!((l - s).abs() < 1e-13, "{l} vs {s}");
        }
    }

    #[test]
    fn calibrated_accepts_measured_amplitudes() {
        let amps = vec![
            C64::new(0.88, 0.0),
            C64::new(0.0, 0.92),
            C64::new(-0.87, 0.0),
            C64::new(0.0, -0.92),
        ];
        let a = Alphabet::calibrated(amps, vec![0.25; 4]).unwrap();
        assert_eq!(a.cyclic_order(), None);
        let src = source_model(&a, 14).unwrap();
        assert!(hermitian_eigenvalues(src.gram())[0] > -1e-14);
    }

    #[test]
    fn calibrated_rejects_bad_input() {
        let amps = vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)];
        assert!(Alphabet::calibrated(amps.clone(), vec![1.0]).is_err());
        assert!(Alphabet::calibrated(amps.clone(), vec![1.5, -0.5]).is_err());
        assert!(Alphabet::calibrated(amps, vec![0.5, 0.6]).is_err());
        assert!(Alphabet::two_state(-1.0).is_err());
    }

    #[test]
    fn degenerate_prior_has_no_entanglement() {
        let amps = vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)];
        let a = Alphabet::calibrated(amps, vec![1.0, 0.0]).unwrap();
        let src = source_model(&a, 14).unwrap();
        let ev = hermitian_eigenvalues(src.gram());
        assert!(ev[0].abs() < 1e-15 && (ev[1] - 1.0).abs() < 1e-12);
        assert!(negativity_exact(&src.purification()).unwrap() < 1e-12);
    }

    #[test]
    fn two_state_small_amplitude_is_entangled() {
        let src = source_model(&Alphabet::two_state(0.5).unwrap(), 12).unwrap();
        let n = negativity_exact(&src.purification()).unwrap();
        // Pure state: N = ((Σ√λ)² − 1)/2 with λ the Gram spectrum.
        let ev = hermitian_eigenvalues(src.gram());
        let s: f64 = ev.iter().map(|l| l.max(0.0).sqrt()).sum();
        assert!(n > 0.0);
        assert!((n - (s * s - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn purification_negativity_grows_with_amplitude() {
        let cutoff = crate::fock::default_cutoff(2.0);
        for make in [Alphabet::two_state, Alphabet::four_state] {
            let mut last = -1.0;
            for i in 0..=10 {
                let alpha = 0.2 * i as f64;
                let src = source_model(&make(alpha).unwrap(), cutoff).unwrap();
                let n = negativity_exact(&src.purification()).unwrap();
                if i == 0 {
                    assert!(n < 1e-12);
                }
                assert!(n >= last - 1e-12, "alpha {alpha}: {n} < {last}");
                last = n;
            }
        }
    }

    fn arb_amplitude() -> impl Strategy<Value = C64> {
        (-1.2f64..1.2, -1.2f64..1.2).prop_map(|(re, im)| C64::new(re, im))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn marginal_of_purification_is_gram(
            amps in proptest::collection::vec(arb_amplitude(), 1..5),
            weights in proptest::collection::vec(0.05f64..1.0, 5),
        ) {
            let w = &weights[..amps.len()];
            let total: f64 = w.iter().sum();
            let mut priors: Vec<f64> = w.iter().map(|x| x / total).collect();
            let rest: f64 = priors[1..].iter().sum();
            priors[0] = 1.0 - rest;
            let a = Alphabet::calibrated(amps, priors).unwrap();
            let src = source_model(&a, 20).unwrap();
            let marginal = partial_trace(&src.purification(), 0).unwrap();
            prop_assert!(max_abs(&(marginal.matrix() - src.gram())) < 1e-10);
            prop_assert!(max_abs(&(src.gram() - a.gram_analytic())) < 1e-7);
            prop_assert!(hermitian_eigenvalues(src.gram())[0] > -1e-12);
            prop_assert!((src.gram().trace().re - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gram_magnitudes_ignore_global_phase(
            amps in proptest::collection::vec(arb_amplitude(), 2..5),
            phi in 0.0f64..6.3,
        ) {
            let k = amps.len();
            let rot: Vec<C64> = amps.iter().map(|a| a * C64::from_polar(1.0, phi)).collect();
            let g1 = Alphabet::calibrated(amps, vec![1.0 / k as f64; k]).unwrap().gram_analytic();
            let g2 = Alphabet::calibrated(rot, vec![1.0 / k as f64; k]).unwrap().gram_analytic();
            for (x, y) in g1.iter().zip(g2.iter()) {
                prop_assert!((x.norm() - y.norm()).abs() < 1e-12);
            }
        }
    }
}
