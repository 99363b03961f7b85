//! Closed-form expectation of Hoyer sparsity for stationary neurons.
//!
//! Model: each input-gradient component is drawn iid from the symmetric
//! density `f(x) = |x|^(alpha-1) exp(-|x|^(2/(p-1))) / ((p-1) Gamma(tau/2))`
//! with `tau = alpha (p - 1)`. The stationary weight vector of a neuron is
//! the most-activated direction for such a gradient, i.e. proportional to
//! the signed `1/(p-1)` power of it, and the expected Hoyer sparsity of
//! that weight vector has a closed form in `(d, tau)` alone: the powering
//! maps the component density to `|v|^(tau-1) exp(-v^2)`, where `p` no
//! longer appears.

use crate::error::{LpssError, Result};
use crate::geometry::{self, LpConstraint};
use crate::metrics::hoyer_sparsity;
use crate::special::{ln_beta, ln_gamma};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// The three angular integrals behind the closed form, in log space:
/// `integral of sin^(tau-1+s) cos^(k tau-1+c)` over `[0, pi/2]` for
/// `(s, c) = (0, 0)`, `(1, 0)`, `(0, 1)` respectively. Each reduces to half
/// a Beta function.
#[derive(Debug, Clone, Copy)]
pub struct OmegaTriplet {
    pub ln_plain: f64,
    pub ln_extra_sin: f64,
    pub ln_extra_cos: f64,
}

/// Log-space Beta reductions of the k-th angular triplet.
pub fn ln_omega_triplet(k: usize, tau: f64) -> Result<OmegaTriplet> {
    if k == 0 {
        return Err(LpssError::Domain("omega index k starts at 1".into()));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(LpssError::Domain(format!(
            "omega integrals require tau > 0, got {tau}"
        )));
    }
    let kt = k as f64 * tau;
    let half_ln = 2.0_f64.ln();
    Ok(OmegaTriplet {
        ln_plain: ln_beta(tau / 2.0, kt / 2.0)? - half_ln,
        ln_extra_sin: ln_beta((tau + 1.0) / 2.0, kt / 2.0)? - half_ln,
        ln_extra_cos: ln_beta(tau / 2.0, (kt + 1.0) / 2.0)? - half_ln,
    })
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln xi_(d-1)`: the nested angular integral of the L1 norm over the
/// positive orthant of the unit L2-sphere, under the `tau` measure, built
/// by the two-term recursion over the omega triplets.
pub fn ln_xi(d: usize, tau: f64) -> Result<f64> {
    if d < 2 {
        return Err(LpssError::Domain(format!(
            "xi recursion requires dimension >= 2, got {d}"
        )));
    }
    let t1 = ln_omega_triplet(1, tau)?;
    let mut ln_xi = log_sum_exp(t1.ln_extra_sin, t1.ln_extra_cos);
    let mut ln_pi = t1.ln_plain;
    for k in 2..d {
        let t = ln_omega_triplet(k, tau)?;
        ln_xi = log_sum_exp(ln_xi + t.ln_extra_cos, ln_pi + t.ln_extra_sin);
        ln_pi += t.ln_plain;
    }
    Ok(ln_xi)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Expected Hoyer sparsity of stationary weight vectors under the gamma
/// gradient hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct GammaHoyerModel {
    d: usize,
    constraint: LpConstraint,
    alpha: f64,
}

impl GammaHoyerModel {
    pub fn new(d: usize, p: f64, alpha: f64) -> Result<Self> {
        if d < 2 {
            return Err(LpssError::Domain(format!(
                "model needs input dimension >= 2, got {d}"
            )));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(LpssError::Domain(format!(
                "shape parameter alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            d,
            constraint: LpConstraint::new(p)?,
            alpha,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> f64 {
        self.constraint.p()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `tau = alpha (p - 1)`, the only distribution parameter the closed
    /// form depends on.
    pub fn tau(&self) -> f64 {
        self.alpha * (self.constraint.p() - 1.0)
    }

    /// Density of a single gradient component.
    ///
    /// At `x = 0` the value is 0, finite, or infinite depending on whether
    /// `alpha` is above, at, or below 1; all three are faithful pointwise
    /// limits of the integrable density.
    pub fn gradient_pdf(&self, x: f64) -> Result<f64> {
        let p = self.constraint.p();
        let ln_norm = (p - 1.0).ln() + ln_gamma(self.tau() / 2.0)?;
        if x == 0.0 {
            return Ok(match self.alpha {
                a if a > 1.0 => 0.0,
                a if a == 1.0 => (-ln_norm).exp(),
                _ => f64::INFINITY,
            });
        }
        let ax = x.abs();
        let ln_f = (self.alpha - 1.0) * ax.ln() - ax.powf(2.0 / (p - 1.0)) - ln_norm;
        Ok(ln_f.exp())
    }

    /// Closed-form `E[H]`, assembled in log space:
    /// `sqrt(d)/(sqrt(d)-1) - 2^(d-1) Gamma(d tau / 2) xi_(d-1)
    ///  / ((sqrt(d)-1) Gamma(tau/2)^d)`.
    pub fn expected_hoyer(&self) -> Result<f64> {
        let d = self.d;
        let tau = self.tau();
        let sqrt_d = (d as f64).sqrt();
        let ln_term = (d as f64 - 1.0) * 2.0_f64.ln()
            + ln_gamma(d as f64 * tau / 2.0)?
            - d as f64 * ln_gamma(tau / 2.0)?
            + ln_xi(d, tau)?
            - (sqrt_d - 1.0).ln();
        let value = sqrt_d / (sqrt_d - 1.0) - ln_term.exp();
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(LpssError::Numerics(format!(
                "expected hoyer sparsity fell outside [0, 1]: {value} \
                 (d = {d}, tau = {tau})"
            )));
        }
        Ok(value)
    }

    /// One iid gradient vector: `u ~ Gamma(tau/2, 1)`, `|x| = u^((p-1)/2)`,
    /// uniform sign. This is an exact sampler for `gradient_pdf`.
    pub fn sample_gradient(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let gamma = Gamma::new(self.tau() / 2.0, 1.0).map_err(|e| {
            LpssError::Domain(format!("gamma sampler rejected shape {}: {e}", self.tau() / 2.0))
        })?;
        let half_pm1 = (self.constraint.p() - 1.0) / 2.0;
        Ok((0..self.d)
            .map(|_| {
                let u: f64 = gamma.sample(rng);
                let mag = u.powf(half_pm1);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect())
    }

    /// Monte Carlo estimate of `E[H]` through the same code path the
    /// trained network uses: sample a gradient, take its most-activated
    /// weight on the Lp-sphere, measure Hoyer sparsity.
    pub fn mc_expected_hoyer(&self, samples: usize, seed: u64) -> Result<McEstimate> {
        if samples < 100 {
            return Err(LpssError::Domain(format!(
                "need at least 100 samples for a standard error, got {samples}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut count = 0usize;
        while count < samples {
            let g = self.sample_gradient(&mut rng)?;
            // Zero draws have probability zero but can underflow into
            // existence for tiny tau; redraw from the same stream.
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let w = geometry::most_activated_weight(&g, self.constraint.p())?;
            let h = hoyer_sparsity(w.components())?;
            count += 1;
            let delta = h - mean;
            mean += delta / count as f64;
            m2 += delta * (h - mean);
        }
        let var = m2 / (samples as f64 - 1.0);
        Ok(McEstimate {
            mean,
            stderr: (var / samples as f64).sqrt(),
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn model_validation() {
        assert!(GammaHoyerModel::new(1, 2.0, 1.0).is_err());
        assert!(GammaHoyerModel::new(4, 1.0, 1.0).is_err());
        assert!(GammaHoyerModel::new(4, 2.0, 0.0).is_err());
        assert!(GammaHoyerModel::new(4, 2.0, -1.0).is_err());
        let m = GammaHoyerModel::new(4, 3.0, 0.5).unwrap();
        assert_close(m.tau(), 1.0, 1e-15);
    }

    #[test]
    fn omega_triplet_closed_forms() {
        // tau = 1, k = 1: all three reduce to elementary integrals.
        let t = ln_omega_triplet(1, 1.0).unwrap();
        // integral sin^0 cos^0 = pi/2.
        assert_close(t.ln_plain.exp(), std::f64::consts::FRAC_PI_2, 1e-12);
        // integral sin = 1, integral cos = 1.
        assert_close(t.ln_extra_sin.exp(), 1.0, 1e-12);
        assert_close(t.ln_extra_cos.exp(), 1.0, 1e-12);

        // tau = 2, k = 1: integral sin cos = 1/2, sin^2 cos = 1/3,
        // sin cos^2 = 1/3.
        let t = ln_omega_triplet(1, 2.0).unwrap();
        assert_close(t.ln_plain.exp(), 0.5, 1e-12);
        assert_close(t.ln_extra_sin.exp(), 1.0 / 3.0, 1e-12);
        assert_close(t.ln_extra_cos.exp(), 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn omega_triplet_rejects_bad_inputs() {
        assert!(ln_omega_triplet(0, 1.0).is_err());
        assert!(ln_omega_triplet(1, 0.0).is_err());
        assert!(ln_omega_triplet(1, -2.0).is_err());
    }

    #[test]
    fn xi_matches_hand_computation() {
        // d = 2, tau = 1: xi_1 = 1 + 1 = 2.
        assert_close(ln_xi(2, 1.0).unwrap().exp(), 2.0, 1e-12);
        // d = 2, tau = 2: xi_1 = 1/3 + 1/3.
        assert_close(ln_xi(2, 2.0).unwrap().exp(), 2.0 / 3.0, 1e-12);
    }

    #[test]
    fn xi_stays_finite_at_depth() {
        // Raw xi underflows long before d = 1024; the log form must not.
        let v = ln_xi(1024, 0.5).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn expected_hoyer_analytic_d2() {
        // d = 2, tau = 1 collapses to (sqrt 2 - 4/pi) / (sqrt 2 - 1).
        let m = GammaHoyerModel::new(2, 2.0, 1.0).unwrap();
        let expect = (2.0_f64.sqrt() - 4.0 / std::f64::consts::PI)
            / (2.0_f64.sqrt() - 1.0);
        assert_close(m.expected_hoyer().unwrap(), expect, 1e-12);
        assert_close(expect, 0.340_341_385_323_720_2, 1e-12);
    }

    #[test]
    fn expected_hoyer_depends_only_on_tau() {
        // Same tau through different (p, alpha) splits must agree exactly.
        let a = GammaHoyerModel::new(9, 1.2, 5.0).unwrap();
        let b = GammaHoyerModel::new(9, 3.0, 0.5).unwrap();
        assert_close(a.tau(), 1.0, 1e-12);
        assert_close(b.tau(), 1.0, 1e-12);
        assert_close(
            a.expected_hoyer().unwrap(),
            b.expected_hoyer().unwrap(),
            1e-12,
        );
    }

    #[test]
    fn expected_hoyer_monotone_in_tau() {
        // Heavier concentration near zero (small tau) means sparser
        // stationary weights.
        let m = |tau: f64| {
            GammaHoyerModel::new(16, 2.0, tau)
                .unwrap()
                .expected_hoyer()
                .unwrap()
        };
        let hs: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|&t| m(t)).collect();
        for pair in hs.windows(2) {
            assert!(pair[0] > pair[1], "expected strictly decreasing: {hs:?}");
        }
    }

    #[test]
    fn expected_hoyer_large_d_in_range() {
        for d in [100, 400, 1024] {
            let m = GammaHoyerModel::new(d, 1.2, 1.0).unwrap();
            let h = m.expected_hoyer().unwrap();
            assert!((0.0..=1.0).contains(&h), "d = {d} gave {h}");
        }
    }

    #[test]
    fn pdf_zero_behavior_tracks_alpha() {
        let above = GammaHoyerModel::new(2, 2.0, 1.5).unwrap();
        assert_eq!(above.gradient_pdf(0.0).unwrap(), 0.0);
        // alpha = 1, p = 2: 1 / Gamma(1/2) = 1/sqrt(pi).
        let at = GammaHoyerModel::new(2, 2.0, 1.0).unwrap();
        assert_close(
            at.gradient_pdf(0.0).unwrap(),
            0.564_189_583_547_756_3,
            1e-12,
        );
        let below = GammaHoyerModel::new(2, 2.0, 0.5).unwrap();
        assert!(below.gradient_pdf(0.0).unwrap().is_infinite());
    }

    #[test]
    fn pdf_symmetric() {
        let m = GammaHoyerModel::new(2, 1.5, 2.0).unwrap();
        for x in [0.1, 0.7, 1.3, 4.0] {
            assert_close(
                m.gradient_pdf(x).unwrap(),
                m.gradient_pdf(-x).unwrap(),
                1e-15,
            );
        }
    }

    #[test]
    fn mc_agrees_with_closed_form_d2() {
        let m = GammaHoyerModel::new(2, 2.0, 1.0).unwrap();
        let cf = m.expected_hoyer().unwrap();
        let est = m.mc_expected_hoyer(20_000, 7).unwrap();
        assert!(
            (est.mean - cf).abs() <= 4.0 * est.stderr,
            "mc {} +- {} vs closed form {cf}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn mc_is_deterministic_per_seed() {
        let m = GammaHoyerModel::new(4, 1.5, 1.0).unwrap();
        let a = m.mc_expected_hoyer(500, 3).unwrap();
        let b = m.mc_expected_hoyer(500, 3).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        let c = m.mc_expected_hoyer(500, 4).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn mc_rejects_small_sample_counts() {
        let m = GammaHoyerModel::new(4, 1.5, 1.0).unwrap();
        assert!(m.mc_expected_hoyer(99, 0).is_err());
    }
}
