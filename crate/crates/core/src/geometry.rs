//! Lp-sphere geometry: signed power maps, Lp norms, sphere normalization,
//! the dual-normalized gradient, and the most-activated weight.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any number of threads.

use crate::error::{LpssError, Result};

/// Exponents outside this window make the dual exponent unreliable in f64.
pub const P_MIN: f64 = 1.01;
pub const P_MAX: f64 = 16.0;

/// Above this exponent, signed powers go through explicit log-magnitude
/// arithmetic to keep small components accurate.
const LOG_SPACE_EXPONENT: f64 = 8.0;

/// A sphere exponent `p` paired with its Hoelder dual `q = p / (p - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpConstraint {
    p: f64,
    q: f64,
}

impl LpConstraint {
    /// Validates `p` and derives the dual exponent.
    ///
    /// `p` must lie in `[1.01, 16]`: closer to 1 the dual exponent blows up
    /// past what f64 powers resolve, and large `p` flattens the sphere into
    /// a box with the same effect.
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || p < P_MIN || p > P_MAX {
            return Err(LpssError::Domain(format!(
                "sphere exponent p must lie in [{P_MIN}, {P_MAX}], got {p}"
            )));
        }
        Ok(Self { p, q: p / (p - 1.0) })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

/// A vector normalized onto the unit Lp-sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    components: Vec<f64>,
}

impl WeightVector {
    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.components
    }
}

/// Dual exponent `q = p / (p - 1)`.
pub fn dual_exponent(p: f64) -> Result<f64> {
    if !p.is_finite() || p <= 1.0 {
        return Err(LpssError::Domain(format!(
            "dual exponent requires p > 1, got {p}"
        )));
    }
    Ok(p / (p - 1.0))
}

/// Componentwise signed power: `out_k = sign(v_k) * |v_k|^t`.
///
/// `sign(0) * 0^t` is defined as 0 for `t > 0`, so masked-out (zero) entries
/// stay zero. `t <= 0` with a zero component is a division by zero in
/// disguise and is rejected.
pub fn signed_power(v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !t.is_finite() {
        return Err(LpssError::Domain(format!(
            "signed power exponent must be finite, got {t}"
        )));
    }
    if t <= 0.0 && v.iter().any(|&x| x == 0.0) {
        return Err(LpssError::Domain(format!(
            "signed power with exponent {t} <= 0 hit a zero component"
        )));
    }
    Ok(v.iter().map(|&x| signed_power_scalar(x, t)).collect())
}

#[inline]
pub(crate) fn signed_power_scalar(x: f64, t: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mag = if t > LOG_SPACE_EXPONENT {
        // exp(t ln|x|) keeps large exponents honest down to the underflow
        // floor; plain powf loses accuracy first.
        (t * x.abs().ln()).exp()
    } else {
        x.abs().powf(t)
    };
    mag.copysign(x)
}

/// Lp norm with max-factoring so `|v_k|^p` can neither overflow nor
/// underflow to zero prematurely: `||v||_p = m * (sum |v_k/m|^p)^(1/p)`.
pub fn lp_norm(v: &[f64], p: f64) -> f64 {
    debug_assert!(p >= 1.0, "lp_norm requires p >= 1");
    let m = v.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let sum: f64 = v.iter().map(|&x| (x.abs() / m).powf(p)).sum();
    m * sum.powf(1.0 / p)
}

/// `v / ||v||_p`, placing `v` on the unit Lp-sphere.
pub fn normalize_lp(v: &[f64], p: f64) -> Result<WeightVector> {
    let norm = lp_norm(v, p);
    if norm == 0.0 {
        return Err(LpssError::Degenerate(
            "cannot normalize the zero vector".into(),
        ));
    }
    if !norm.is_finite() {
        return Err(LpssError::Numerics(format!(
            "non-finite Lp norm {norm} during normalization"
        )));
    }
    Ok(WeightVector {
        components: v.iter().map(|&x| x / norm).collect(),
    })
}

/// The dual-rescaled gradient `[g / lambda]^[q-1]` with `lambda = ||g||_q`.
///
/// Its Lp norm is 1 for every nonzero `g` (the identity `(q-1)p = q`), so a
/// step of size `eta` moves the weight by a fixed amount no matter how small
/// the raw gradient is. A zero gradient carries no direction and is reported
/// as degenerate; callers skip the update for that neuron.
pub fn normalized_gradient(g: &[f64], constraint: &LpConstraint) -> Result<Vec<f64>> {
    let q = constraint.q();
    let m = g.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
    if m == 0.0 {
        return Err(LpssError::Degenerate(
            "zero gradient has no direction".into(),
        ));
    }
    if !m.is_finite() {
        return Err(LpssError::Numerics(
            "non-finite gradient component".into(),
        ));
    }
    // Factor the max out first: the direction then depends on g only
    // through the ratios g_k / max|g|, so a common positive scale on g
    // cancels before any power is taken, and |g_k / lambda| <= 1 means the
    // powers below can only underflow, never overflow.
    let s: f64 = g.iter().map(|&x| (x.abs() / m).powf(q)).sum();
    let v = s.powf(1.0 / q);
    let t = q - 1.0;
    Ok(g.iter()
        .map(|&x| signed_power_scalar(x / m / v, t))
        .collect())
}

/// The unit-Lp-norm vector maximizing `w . x`: the signed `1/(p-1)` power of
/// `x`, normalized.
pub fn most_activated_weight(x: &[f64], p: f64) -> Result<WeightVector> {
    if !p.is_finite() || p <= 1.0 {
        return Err(LpssError::Domain(format!(
            "most-activated weight requires p > 1, got {p}"
        )));
    }
    let m = x.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    if m == 0.0 {
        return Err(LpssError::Degenerate(
            "zero input has no most-activated direction".into(),
        ));
    }
    // Factor out the max before powering: only components that are
    // genuinely negligible relative to the largest can underflow.
    let t = 1.0 / (p - 1.0);
    let z: Vec<f64> = x.iter().map(|&v| signed_power_scalar(v / m, t)).collect();
    normalize_lp(&z, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn constraint_duality_identities() {
        for p in [1.01, 1.07, 1.2, 1.5, 2.0, 3.0, 16.0] {
            let c = LpConstraint::new(p).unwrap();
            assert_close(1.0 / c.p() + 1.0 / c.q(), 1.0, 1e-12);
            assert_close((c.p() - 1.0) * (c.q() - 1.0), 1.0, 1e-12);
        }
    }

    #[test]
    fn constraint_rejects_bad_exponents() {
        for p in [1.0, 0.0, -2.0, 1.005, 16.5, f64::NAN, f64::INFINITY] {
            assert!(LpConstraint::new(p).is_err(), "p = {p} should be rejected");
        }
    }

    #[test]
    fn dual_exponent_values() {
        assert_close(dual_exponent(2.0).unwrap(), 2.0, 0.0);
        assert_close(dual_exponent(1.5).unwrap(), 3.0, 1e-15);
        assert_close(dual_exponent(1.07).unwrap(), 107.0 / 7.0, 1e-12);
        assert!(dual_exponent(1.0).is_err());
        assert!(dual_exponent(0.5).is_err());
    }

    #[test]
    fn signed_power_examples() {
        assert_eq!(signed_power(&[2.0, -3.0], 2.0).unwrap(), vec![4.0, -9.0]);
        let v = [0.3, -1.7, 0.0, 5.0];
        assert_eq!(signed_power(&v, 1.0).unwrap(), v.to_vec());
        assert_eq!(
            signed_power(&[0.5, -0.5], 2.0).unwrap(),
            vec![0.25, -0.25]
        );
    }

    #[test]
    fn signed_power_zero_stays_zero() {
        let out = signed_power(&[0.0, 2.0], 0.5).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn signed_power_rejects_nonpositive_exponent_at_zero() {
        assert!(signed_power(&[0.0, 1.0], -1.0).is_err());
        assert!(signed_power(&[1.0, 0.0], 0.0).is_err());
        // Fine when no component is zero.
        assert!(signed_power(&[1.0, 2.0], -1.0).is_ok());
    }

    #[test]
    fn lp_norm_examples() {
        assert_close(lp_norm(&[3.0, 4.0], 2.0), 5.0, 1e-15);
        assert_close(lp_norm(&[1.0, -1.0], 1.0), 2.0, 1e-15);
        assert_close(lp_norm(&[1.0, 1.0], 1.5), 2.0_f64.powf(2.0 / 3.0), 1e-14);
        assert_eq!(lp_norm(&[0.0, 0.0], 2.0), 0.0);
    }

    #[test]
    fn lp_norm_overflow_safety() {
        // Raw |x|^p would overflow; max-factoring must not.
        let big = lp_norm(&[1e200, 1e200], 4.0);
        assert_close(big, 1e200 * 2.0_f64.powf(0.25), 1e186);
        let tiny = lp_norm(&[1e-200, 1e-200], 4.0);
        assert!(tiny > 0.0);
    }

    #[test]
    fn normalize_lp_examples() {
        let w = normalize_lp(&[3.0, 4.0], 2.0).unwrap();
        assert_close(w.components()[0], 0.6, 1e-15);
        assert_close(w.components()[1], 0.8, 1e-15);
        assert!(normalize_lp(&[0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn normalize_lp_random_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..1000 {
            let d = rng.gen_range(1..=64);
            let p = *[1.1, 2.0, 3.0].choose(&mut rng).unwrap();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if lp_norm(&v, p) == 0.0 {
                continue;
            }
            let w = normalize_lp(&v, p).unwrap();
            assert_close(lp_norm(w.components(), p), 1.0, 1e-12);
        }
    }

    #[test]
    fn normalized_gradient_is_plain_normalization_at_p2() {
        let c = LpConstraint::new(2.0).unwrap();
        let g = [3.0, -4.0];
        let d = normalized_gradient(&g, &c).unwrap();
        assert_close(d[0], 0.6, 1e-15);
        assert_close(d[1], -0.8, 1e-15);
    }

    #[test]
    fn normalized_gradient_unit_p_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for &d in &[2usize, 10, 100] {
            for &p in &[1.05, 1.5, 2.0, 4.0] {
                let c = LpConstraint::new(p).unwrap();
                for _ in 0..50 {
                    let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    if lp_norm(&g, c.q()) == 0.0 {
                        continue;
                    }
                    let delta = normalized_gradient(&g, &c).unwrap();
                    assert_close(lp_norm(&delta, p), 1.0, 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalized_gradient_scale_invariant() {
        let c = LpConstraint::new(1.5).unwrap();
        let g = [0.3, -0.8, 0.1];
        let base = normalized_gradient(&g, &c).unwrap();
        for scale in [1e-8, 1.0, 1e8] {
            let scaled: Vec<f64> = g.iter().map(|&x| x * scale).collect();
            let d = normalized_gradient(&scaled, &c).unwrap();
            for (a, b) in d.iter().zip(&base) {
                assert_close(*a, *b, 1e-15);
            }
        }
    }

    #[test]
    fn normalized_gradient_bitwise_scale_invariance() {
        // Components sharing one significand: scaling by any positive c
        // multiplies every component by the same rounded factor, so the
        // max-ratio form must reproduce the direction bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let p = rng.gen_range(1.05..6.0);
            let c = LpConstraint::new(p).unwrap();
            let t: f64 = rng.gen_range(1.0..2.0);
            let d = rng.gen_range(2..=12);
            let g: Vec<f64> = (0..d)
                .map(|_| {
                    let k = rng.gen_range(-12..=12);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * t * 2.0_f64.powi(k)
                })
                .collect();
            let base = normalized_gradient(&g, &c).unwrap();
            for scale in [1e-8, 1.0, 1e8] {
                let scaled: Vec<f64> = g.iter().map(|&x| x * scale).collect();
                let other = normalized_gradient(&scaled, &c).unwrap();
                for (a, b) in base.iter().zip(&other) {
                    assert_eq!(a.to_bits(), b.to_bits(), "scale {scale}");
                }
            }
        }
    }

    #[test]
    fn normalized_gradient_zero_is_degenerate() {
        let c = LpConstraint::new(1.5).unwrap();
        assert!(normalized_gradient(&[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn most_activated_weight_examples() {
        let w = most_activated_weight(&[3.0, 4.0], 2.0).unwrap();
        assert_close(w.components()[0], 0.6, 1e-15);
        assert_close(w.components()[1], 0.8, 1e-15);

        let w = most_activated_weight(&[1.0, 1.0], 1.5).unwrap();
        let expect = 2.0_f64.powf(-2.0 / 3.0);
        assert_close(w.components()[0], expect, 1e-14);
        assert_close(w.components()[1], expect, 1e-14);

        assert!(most_activated_weight(&[0.0, 0.0], 1.5).is_err());
    }

    #[test]
    fn most_activated_weight_beats_angular_grid() {
        // Brute-force oracle: sweep directions on the L_1.3 circle and
        // check no grid point activates harder than the closed form.
        let p = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let x = [rng.gen_range(-1.0..1.0_f64), rng.gen_range(-1.0..1.0_f64)];
            if x[0] == 0.0 && x[1] == 0.0 {
                continue;
            }
            let w = most_activated_weight(&x, p).unwrap();
            let best = w.components()[0] * x[0] + w.components()[1] * x[1];
            let n = 100_000;
            let mut grid_best = f64::NEG_INFINITY;
            for k in 0..n {
                let phi = 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
                let dir = [phi.cos(), phi.sin()];
                let norm = lp_norm(&dir, p);
                let cand = (dir[0] * x[0] + dir[1] * x[1]) / norm;
                grid_best = grid_best.max(cand);
            }
            assert!(
                best >= grid_best - 1e-6,
                "grid found a better activation: {grid_best} > {best}"
            );
        }
    }

    #[test]
    fn most_activated_weight_grid_3d() {
        let p = 1.7;
        let x = [0.4, -0.9, 0.2];
        let w = most_activated_weight(&x, p).unwrap();
        let best: f64 = w.components().iter().zip(&x).map(|(a, b)| a * b).sum();
        let n = 200;
        let mut grid_best = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                let phi = 2.0 * std::f64::consts::PI * (j as f64) / n as f64;
                let dir = [
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                ];
                let norm = lp_norm(&dir, p);
                if norm == 0.0 {
                    continue;
                }
                let cand = dir.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / norm;
                grid_best = grid_best.max(cand);
            }
        }
        assert!(best >= grid_best - 1e-6);
    }

    proptest! {
        #[test]
        fn prop_hoelder_inequality(
            seed in 0u64..2000,
            p in 1.05f64..8.0,
            d in 2usize..32,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = LpConstraint::new(p).unwrap();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let dot: f64 = v.iter().zip(&g).map(|(a, b)| a * b).sum();
            let bound = lp_norm(&v, c.p()) * lp_norm(&g, c.q());
            prop_assert!(dot.abs() <= bound + 1e-12 * bound.max(1.0));
        }

        #[test]
        fn prop_signed_power_roundtrip(
            seed in 0u64..2000,
            a in 0.2f64..5.0,
            d in 1usize..16,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..d)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.1..3.0);
                    if rng.gen::<bool>() { x } else { -x }
                })
                .collect();
            let forward = signed_power(&v, a).unwrap();
            let back = signed_power(&forward, 1.0 / a).unwrap();
            for (orig, rt) in v.iter().zip(&back) {
                prop_assert!((orig - rt).abs() < 1e-10 * orig.abs().max(1.0));
            }
        }

        #[test]
        fn prop_normalized_gradient_positive_scale_invariance(
            seed in 0u64..2000,
            p in 1.05f64..8.0,
            scale in 1e-6f64..1e6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = LpConstraint::new(p).unwrap();
            let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            prop_assume!(lp_norm(&g, c.q()) > 1e-12);
            let base = normalized_gradient(&g, &c).unwrap();
            let scaled: Vec<f64> = g.iter().map(|&x| x * scale).collect();
            let other = normalized_gradient(&scaled, &c).unwrap();
            for (a, b) in base.iter().zip(&other) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
