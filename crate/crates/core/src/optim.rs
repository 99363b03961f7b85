//! Constrained update rules: the plain spherical step, its momentum
//! variant working through a dual variable, classical bias descent,
//! learning-rate schedules, and two per-neuron diagnostics (the safe
//! step-size bound and the stationarity residual).
//!
//! All functions operate on a single neuron's active sub-vector; masking
//! and layer iteration live in the network code.

use crate::error::{LpssError, Result};
use crate::geometry::{lp_norm, normalized_gradient, signed_power, LpConstraint};
use serde::{Deserialize, Serialize};

/// Which norm renormalizes the bracket `(1-eta) w - eta Delta` in the plain
/// step. `P` keeps the weight on the Lp-sphere exactly and is the default;
/// `Q` reproduces the alternative dual-norm formulation, which lands on the
/// p-sphere only when p = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketNorm {
    #[default]
    P,
    Q,
}

/// One plain spherical step on a neuron's active weights, in place:
/// `w <- [(1-eta) w - eta Delta(g)] / rho`.
///
/// A zero gradient carries no direction: the neuron is left untouched and
/// the degenerate error tells the caller it was skipped.
pub fn lpsgd_step(
    w: &mut [f64],
    g: &[f64],
    eta: f64,
    constraint: &LpConstraint,
    bracket: BracketNorm,
) -> Result<()> {
    debug_assert_eq!(w.len(), g.len());
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(LpssError::Domain(format!(
            "step size must be positive and finite, got {eta}"
        )));
    }
    let delta = normalized_gradient(g, constraint)?;
    let mut bracket_vec: Vec<f64> = w
        .iter()
        .zip(&delta)
        .map(|(&wi, &di)| (1.0 - eta) * wi - eta * di)
        .collect();
    let norm_exp = match bracket {
        BracketNorm::P => constraint.p(),
        BracketNorm::Q => constraint.q(),
    };
    let rho = lp_norm(&bracket_vec, norm_exp);
    if rho == 0.0 {
        return Err(LpssError::Degenerate(
            "update annihilated the weight vector".into(),
        ));
    }
    for b in &mut bracket_vec {
        *b /= rho;
    }
    w.copy_from_slice(&bracket_vec);
    Ok(())
}

/// One momentum step on a neuron, in place. The dual variable `v` lives on
/// the unit q-sphere and the weight is its signed `q-1` power, which sits
/// on the unit p-sphere by the exponent identity `(q-1) p = q`:
///
/// ```text
/// mu <- gamma mu + g
/// v  <- [(1-eta) v - eta mu / ||mu||_q] / ||.||_q
/// w  <- v^[q-1]
/// ```
///
/// The momentum accumulation always commits, even when the decayed `mu`
/// ends up with no direction; in that case the degenerate error reports
/// the neuron as skipped and `v`, `w` stay unchanged.
pub fn lpsgdm_step(
    v: &mut [f64],
    w: &mut [f64],
    mu: &mut [f64],
    g: &[f64],
    eta: f64,
    gamma: f64,
    constraint: &LpConstraint,
) -> Result<()> {
    debug_assert_eq!(v.len(), w.len());
    debug_assert_eq!(v.len(), g.len());
    debug_assert_eq!(v.len(), mu.len());
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(LpssError::Domain(format!(
            "step size must be positive and finite, got {eta}"
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(LpssError::Domain(format!(
            "momentum coefficient must lie in [0, 1), got {gamma}"
        )));
    }
    for (m, &gi) in mu.iter_mut().zip(g) {
        *m = gamma * *m + gi;
    }
    let q = constraint.q();
    let lambda = lp_norm(mu, q);
    if lambda == 0.0 {
        return Err(LpssError::Degenerate(
            "zero momentum has no direction".into(),
        ));
    }
    let mut next_v: Vec<f64> = v
        .iter()
        .zip(mu.iter())
        .map(|(&vi, &mi)| (1.0 - eta) * vi - eta * (mi / lambda))
        .collect();
    let rho = lp_norm(&next_v, q);
    if rho == 0.0 {
        return Err(LpssError::Degenerate(
            "update annihilated the dual variable".into(),
        ));
    }
    for nv in &mut next_v {
        *nv /= rho;
    }
    let next_w = signed_power(&next_v, q - 1.0)?;
    v.copy_from_slice(&next_v);
    w.copy_from_slice(&next_w);
    debug_assert!((lp_norm(v, q) - 1.0).abs() < 1e-9);
    debug_assert!((lp_norm(w, constraint.p()) - 1.0).abs() < 1e-9);
    Ok(())
}

/// Dual variable matching a weight vector: `v = w^[p-1]`, which has unit
/// q-norm whenever `w` has unit p-norm. Used at initialization and after
/// any mask edit that renormalizes `w`.
pub fn dual_from_weights(w: &[f64], constraint: &LpConstraint) -> Result<Vec<f64>> {
    signed_power(w, constraint.p() - 1.0)
}

/// Classical momentum descent for a bias term, in place:
/// `mu_b <- gamma mu_b + g`, `b <- b - eta mu_b`. With `gamma = 0` this is
/// plain gradient descent.
pub fn bias_step(b: &mut f64, mu_b: &mut f64, g: f64, eta: f64, gamma: f64) {
    *mu_b = gamma * *mu_b + g;
    *b -= eta * *mu_b;
}

/// Step-size bound diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrBound {
    Finite(f64),
    /// Denominator vanished: the weight is at a stationary configuration
    /// (or the gradient is zero) and no finite bound applies.
    Unbounded,
}

/// The largest provably risk-decreasing step size for a beta-smooth risk:
/// `2 (||g||_q - g.w c) / (beta ||c w - Delta||_p^2)` with
/// `c = (w^[p-1]).Delta`. Diagnostic only; callers decide what to do with
/// it and nothing here ever clips a configured rate.
pub fn lr_bound(
    w: &[f64],
    g: &[f64],
    constraint: &LpConstraint,
    beta: f64,
) -> Result<LrBound> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(LpssError::Domain(format!(
            "smoothness constant must be positive, got {beta}"
        )));
    }
    let delta = match normalized_gradient(g, constraint) {
        Ok(d) => d,
        Err(LpssError::Degenerate(_)) => return Ok(LrBound::Unbounded),
        Err(e) => return Err(e),
    };
    let w_pow = signed_power(w, constraint.p() - 1.0)?;
    let c: f64 = w_pow.iter().zip(&delta).map(|(a, b)| a * b).sum();
    let g_dot_w: f64 = g.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    let numerator = lp_norm(g, constraint.q()) - g_dot_w * c;
    let diff: Vec<f64> = w
        .iter()
        .zip(&delta)
        .map(|(&wi, &di)| c * wi - di)
        .collect();
    let denominator = beta * lp_norm(&diff, constraint.p()).powi(2);
    if denominator <= f64::MIN_POSITIVE {
        return Ok(LrBound::Unbounded);
    }
    Ok(LrBound::Finite(2.0 * numerator / denominator))
}

/// Norm of the constrained-flow right-hand side,
/// `|| w (w^[p-1]).Delta - Delta ||_2`: zero exactly at the spherical
/// stationary points, defined as 0 for a zero gradient.
pub fn stationarity_residual(
    w: &[f64],
    g: &[f64],
    constraint: &LpConstraint,
) -> Result<f64> {
    let delta = match normalized_gradient(g, constraint) {
        Ok(d) => d,
        Err(LpssError::Degenerate(_)) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    let w_pow = signed_power(w, constraint.p() - 1.0)?;
    let c: f64 = w_pow.iter().zip(&delta).map(|(a, b)| a * b).sum();
    let rhs: Vec<f64> = w
        .iter()
        .zip(&delta)
        .map(|(&wi, &di)| c * wi - di)
        .collect();
    Ok(lp_norm(&rhs, 2.0))
}

/// Learning-rate schedule shapes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrKind {
    /// `initial * factor^floor(epoch / every_n_epochs)`.
    StepDecay {
        initial: f64,
        factor: f64,
        every_n_epochs: u32,
    },
    /// Linear base -> peak -> base over each period of epochs.
    Triangular { base: f64, peak: f64, period: u32 },
    /// Step function through listed `(epoch, rate)` breakpoints.
    Piecewise { points: Vec<(u32, f64)> },
}

/// A schedule plus the flag that divides the emitted rate by batch size
/// (the published runs quote the basic rate; the practiced one is divided).
///
/// Serialization flattens the shape into the same object, so the JSON is
/// `{"kind": "step_decay", "initial": ..., "divide_by_batch_size": ...}`.
/// Deserialization is a manual field allowlist because serde cannot
/// combine `flatten` with `deny_unknown_fields`: every key must belong to
/// the named shape, and a key from a different shape is rejected too.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LrSchedule {
    #[serde(flatten)]
    pub kind: LrKind,
    #[serde(default)]
    pub divide_by_batch_size: bool,
}

impl<'de> Deserialize<'de> for LrSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            kind: String,
            initial: Option<f64>,
            factor: Option<f64>,
            every_n_epochs: Option<u32>,
            base: Option<f64>,
            peak: Option<f64>,
            period: Option<u32>,
            points: Option<Vec<(u32, f64)>>,
            #[serde(default)]
            divide_by_batch_size: bool,
        }

        let raw = Raw::deserialize(de)?;
        let present = [
            ("initial", raw.initial.is_some()),
            ("factor", raw.factor.is_some()),
            ("every_n_epochs", raw.every_n_epochs.is_some()),
            ("base", raw.base.is_some()),
            ("peak", raw.peak.is_some()),
            ("period", raw.period.is_some()),
            ("points", raw.points.is_some()),
        ];
        let mut allowed: Vec<&str> = vec!["kind", "divide_by_batch_size"];
        let kind = match raw.kind.as_str() {
            "step_decay" => {
                allowed.extend(["initial", "factor", "every_n_epochs"]);
                LrKind::StepDecay {
                    initial: raw
                        .initial
                        .ok_or_else(|| D::Error::custom("step_decay needs `initial`"))?,
                    factor: raw
                        .factor
                        .ok_or_else(|| D::Error::custom("step_decay needs `factor`"))?,
                    every_n_epochs: raw
                        .every_n_epochs
                        .ok_or_else(|| D::Error::custom("step_decay needs `every_n_epochs`"))?,
                }
            }
            "triangular" => {
                allowed.extend(["base", "peak", "period"]);
                LrKind::Triangular {
                    base: raw
                        .base
                        .ok_or_else(|| D::Error::custom("triangular needs `base`"))?,
                    peak: raw
                        .peak
                        .ok_or_else(|| D::Error::custom("triangular needs `peak`"))?,
                    period: raw
                        .period
                        .ok_or_else(|| D::Error::custom("triangular needs `period`"))?,
                }
            }
            "piecewise" => {
                allowed.push("points");
                LrKind::Piecewise {
                    points: raw
                        .points
                        .ok_or_else(|| D::Error::custom("piecewise needs `points`"))?,
                }
            }
            other => {
                return Err(D::Error::custom(format!(
                    "unknown schedule kind {other:?}; expected step_decay, triangular, or piecewise"
                )))
            }
        };
        for (field, is_set) in present {
            if is_set && !allowed.contains(&field) {
                return Err(D::Error::custom(format!(
                    "field `{field}` does not belong to the {} schedule",
                    raw.kind
                )));
            }
        }
        Ok(LrSchedule {
            kind,
            divide_by_batch_size: raw.divide_by_batch_size,
        })
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LpssError::Config(msg));
        match &self.kind {
            LrKind::StepDecay {
                initial,
                factor,
                every_n_epochs,
            } => {
                if !(*initial > 0.0) || !initial.is_finite() {
                    return bad(format!("step_decay initial rate must be > 0, got {initial}"));
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return bad(format!(
                        "step_decay factor must be in (0, 1] for a non-increasing envelope, got {factor}"
                    ));
                }
                if *every_n_epochs == 0 {
                    return bad("step_decay every_n_epochs must be >= 1".into());
                }
            }
            LrKind::Triangular { base, peak, period } => {
                if !(*base > 0.0) || !(*peak >= *base) || !peak.is_finite() {
                    return bad(format!(
                        "triangular needs 0 < base <= peak, got base {base}, peak {peak}"
                    ));
                }
                if *period < 2 {
                    return bad("triangular period must be >= 2 epochs".into());
                }
            }
            LrKind::Piecewise { points } => {
                if points.is_empty() {
                    return bad("piecewise schedule needs at least one point".into());
                }
                for window in points.windows(2) {
                    if window[1].0 <= window[0].0 {
                        return bad(format!(
                            "piecewise epochs must strictly increase, got {} then {}",
                            window[0].0, window[1].0
                        ));
                    }
                }
                for &(epoch, rate) in points {
                    if !(rate > 0.0) || !rate.is_finite() {
                        return bad(format!(
                            "piecewise rate at epoch {epoch} must be > 0, got {rate}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rate for an epoch (0-based). Queried once per epoch and applied to
    /// every step within it.
    pub fn rate(&self, epoch: u32, batch_size: usize) -> f64 {
        let base = match &self.kind {
            LrKind::StepDecay {
                initial,
                factor,
                every_n_epochs,
            } => initial * factor.powi((epoch / every_n_epochs) as i32),
            LrKind::Triangular { base, peak, period } => {
                let phase = (epoch % period) as f64;
                let half = *period as f64 / 2.0;
                let ramp = 1.0 - (phase / half - 1.0).abs();
                base + (peak - base) * ramp
            }
            LrKind::Piecewise { points } => points
                .iter()
                .take_while(|(e, _)| *e <= epoch)
                .last()
                .unwrap_or(&points[0])
                .1,
        };
        if self.divide_by_batch_size {
            base / batch_size as f64
        } else {
            base
        }
    }
}

/// `R(w) = 1/2 ||A w - b||_2^2` restricted to the unit Lp-sphere: the
/// convex test problem for the step-size bound and residual diagnostics.
#[derive(Debug, Clone)]
pub struct QuadraticSphereProblem {
    /// Row-major `dim x dim` matrix.
    a: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
}

impl QuadraticSphereProblem {
    /// Builds `A = Q1 diag(s) Q2^T` from seeded random rotations, so the
    /// spectrum (and hence the smoothness constant) is chosen exactly, and
    /// a target `b = A x*` with `||x*||_2 > 1` so the optimum does not sit
    /// on the sphere.
    pub fn with_spectrum(seed: u64, singular_values: &[f64]) -> Result<Self> {
        use rand::SeedableRng;
        let dim = singular_values.len();
        if dim < 2 {
            return Err(LpssError::Domain(
                "quadratic test problem needs dimension >= 2".into(),
            ));
        }
        if singular_values.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(LpssError::Domain(
                "singular values must be positive and finite".into(),
            ));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q1 = random_orthogonal(dim, &mut rng);
        let q2 = random_orthogonal(dim, &mut rng);
        // A = Q1 diag(s) Q2^T.
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for (k, &s) in singular_values.iter().enumerate() {
                    acc += q1[i * dim + k] * s * q2[j * dim + k];
                }
                a[i * dim + j] = acc;
            }
        }
        use rand::Rng;
        let x_star: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = 1.5 / lp_norm(&x_star, 2.0).max(1e-6);
        let x_star: Vec<f64> = x_star.iter().map(|&x| x * scale).collect();
        let mut b = vec![0.0; dim];
        for i in 0..dim {
            b[i] = (0..dim).map(|j| a[i * dim + j] * x_star[j]).sum();
        }
        Ok(Self { a, b, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn risk(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row: f64 = (0..self.dim).map(|j| self.a[i * self.dim + j] * w[j]).sum();
            let r = row - self.b[i];
            acc += r * r;
        }
        0.5 * acc
    }

    /// `A^T (A w - b)`.
    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut residual = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row: f64 = (0..self.dim).map(|j| self.a[i * self.dim + j] * w[j]).sum();
            residual[i] = row - self.b[i];
        }
        let mut g = vec![0.0; self.dim];
        for j in 0..self.dim {
            g[j] = (0..self.dim).map(|i| self.a[i * self.dim + j] * residual[i]).sum();
        }
        g
    }

    /// Largest eigenvalue of `A^T A` by power iteration: the exact
    /// smoothness constant of the risk in the L2 sense, and a valid one
    /// for any p <= 2 since `||u||_2 <= ||u||_p` there.
    pub fn beta_l2(&self) -> f64 {
        let mut z = vec![1.0; self.dim];
        let mut lambda = 0.0;
        for _ in 0..500 {
            // z <- A^T (A z), normalized.
            let mut az = vec![0.0; self.dim];
            for i in 0..self.dim {
                az[i] = (0..self.dim).map(|j| self.a[i * self.dim + j] * z[j]).sum();
            }
            let mut ataz = vec![0.0; self.dim];
            for j in 0..self.dim {
                ataz[j] = (0..self.dim).map(|i| self.a[i * self.dim + j] * az[i]).sum();
            }
            let norm = lp_norm(&ataz, 2.0);
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            for (zi, &ai) in z.iter_mut().zip(&ataz) {
                *zi = ai / norm;
            }
        }
        lambda
    }
}

/// One state of the step-size-bound trace on the quadratic test problem.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticTraceRow {
    pub iter: usize,
    pub risk: f64,
    pub residual: f64,
    /// Safe step-size bound at this state; `None` where no finite bound
    /// applies (stationary point or vanished gradient).
    pub bound: Option<f64>,
}

/// Runs plain spherical steps with `eta = bound_multiple` times the
/// current safe bound, recording risk, residual, and bound at every state
/// including the final one. The walk stops early when the bound stops
/// being a positive finite number, since no further step is defined.
pub fn quadratic_trace(
    problem: &QuadraticSphereProblem,
    constraint: &LpConstraint,
    w0: &[f64],
    steps: usize,
    bound_multiple: f64,
) -> Result<Vec<QuadraticTraceRow>> {
    if !(bound_multiple > 0.0) || !bound_multiple.is_finite() {
        return Err(LpssError::Domain(format!(
            "bound multiple must be positive and finite, got {bound_multiple}"
        )));
    }
    let beta = problem.beta_l2();
    let mut w = w0.to_vec();
    let mut rows = Vec::with_capacity(steps + 1);
    for iter in 0..=steps {
        let g = problem.grad(&w);
        let residual = stationarity_residual(&w, &g, constraint)?;
        let bound = match lr_bound(&w, &g, constraint, beta)? {
            LrBound::Finite(b) => Some(b),
            LrBound::Unbounded => None,
        };
        rows.push(QuadraticTraceRow {
            iter,
            risk: problem.risk(&w),
            residual,
            bound,
        });
        if iter == steps {
            break;
        }
        match bound {
            Some(b) if b > 0.0 => {
                lpsgd_step(&mut w, &g, bound_multiple * b, constraint, BracketNorm::P)?
            }
            _ => break,
        }
    }
    Ok(rows)
}

fn random_orthogonal(dim: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    // Gram-Schmidt on a seeded Gaussian matrix; re-draws on near-dependence
    // are unnecessary at these dimensions.
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for k in 0..dim {
        for prev in 0..k {
            let dot: f64 = (0..dim).map(|i| cols[k][i] * cols[prev][i]).sum();
            for i in 0..dim {
                cols[k][i] -= dot * cols[prev][i];
            }
        }
        let norm = lp_norm(&cols[k], 2.0);
        for x in &mut cols[k] {
            *x /= norm;
        }
    }
    let mut out = vec![0.0; dim * dim];
    for (k, col) in cols.iter().enumerate() {
        for i in 0..dim {
            out[i * dim + k] = col[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_lp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn c(p: f64) -> LpConstraint {
        LpConstraint::new(p).unwrap()
    }

    #[test]
    fn lpsgd_hand_example() {
        // p = 2, w = [1, 0], g = [0, 1], eta = 0.1:
        // bracket [0.9, -0.1], rho = sqrt(0.82).
        let mut w = vec![1.0, 0.0];
        lpsgd_step(&mut w, &[0.0, 1.0], 0.1, &c(2.0), BracketNorm::P).unwrap();
        let rho = 0.82_f64.sqrt();
        assert_close(w[0], 0.9 / rho, 1e-15);
        assert_close(w[1], -0.1 / rho, 1e-15);
        assert_close(w[0], 0.99388, 1e-5);
        assert_close(w[1], -0.11043, 1e-5);
    }

    #[test]
    fn lpsgd_fixed_point_is_exact() {
        // w = [1, 0], g = -2 w: Delta = -w, bracket = [(1-eta)+eta, 0].
        // With eta a power of two the arithmetic is exact to the bit.
        let mut w = vec![1.0, 0.0];
        lpsgd_step(&mut w, &[-2.0, 0.0], 0.25, &c(1.5), BracketNorm::P).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn lpsgd_fixed_point_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for &p in &[1.2, 2.0, 3.0] {
            let cons = c(p);
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w = normalize_lp(&raw, p).unwrap().into_vec();
            // g = -w^[p-1] makes Delta(g) = -w.
            let g: Vec<f64> = signed_power(&w, p - 1.0)
                .unwrap()
                .iter()
                .map(|x| -x)
                .collect();
            let before = w.clone();
            lpsgd_step(&mut w, &g, 0.3, &cons, BracketNorm::P).unwrap();
            for (a, b) in w.iter().zip(&before) {
                assert_close(*a, *b, 1e-14);
            }
        }
    }

    #[test]
    fn lpsgd_rejects_bad_step_and_zero_gradient() {
        let mut w = vec![1.0, 0.0];
        assert!(lpsgd_step(&mut w, &[0.0, 1.0], 0.0, &c(2.0), BracketNorm::P).is_err());
        assert!(lpsgd_step(&mut w, &[0.0, 1.0], -0.1, &c(2.0), BracketNorm::P).is_err());
        let before = w.clone();
        let err = lpsgd_step(&mut w, &[0.0, 0.0], 0.1, &c(2.0), BracketNorm::P);
        assert!(matches!(err, Err(LpssError::Degenerate(_))));
        assert_eq!(w, before);
    }

    #[test]
    fn lpsgd_keeps_p_sphere_and_q_variant_keeps_q_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for &p in &[1.1, 1.5, 2.0, 3.0] {
            let cons = c(p);
            let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut wp = normalize_lp(&raw, p).unwrap().into_vec();
            let mut wq = wp.clone();
            for _ in 0..200 {
                let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                lpsgd_step(&mut wp, &g, 0.1, &cons, BracketNorm::P).unwrap();
                lpsgd_step(&mut wq, &g, 0.1, &cons, BracketNorm::Q).unwrap();
            }
            assert_close(lp_norm(&wp, p), 1.0, 1e-12);
            assert_close(lp_norm(&wq, cons.q()), 1.0, 1e-12);
        }
    }

    #[test]
    fn bracket_norms_agree_at_p2() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let cons = c(2.0);
        let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut wp = normalize_lp(&raw, 2.0).unwrap().into_vec();
        let mut wq = wp.clone();
        for _ in 0..50 {
            let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            lpsgd_step(&mut wp, &g, 0.1, &cons, BracketNorm::P).unwrap();
            lpsgd_step(&mut wq, &g, 0.1, &cons, BracketNorm::Q).unwrap();
        }
        for (a, b) in wp.iter().zip(&wq) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn momentum_state_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for &p in &[1.1, 1.5, 3.0] {
            let cons = c(p);
            let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w = normalize_lp(&raw, p).unwrap().into_vec();
            let mut v = dual_from_weights(&w, &cons).unwrap();
            assert_close(lp_norm(&v, cons.q()), 1.0, 1e-12);
            let mut mu = vec![0.0; 10];
            for _ in 0..300 {
                let g: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
                lpsgdm_step(&mut v, &mut w, &mut mu, &g, 0.05, 0.9, &cons).unwrap();
                // w must stay the signed q-1 power of v.
                let w_from_v = signed_power(&v, cons.q() - 1.0).unwrap();
                for (a, b) in w.iter().zip(&w_from_v) {
                    assert_close(*a, *b, 1e-10);
                }
            }
            assert_close(lp_norm(&v, cons.q()), 1.0, 1e-12);
            assert_close(lp_norm(&w, p), 1.0, 1e-12);
        }
    }

    #[test]
    fn momentum_reduces_to_plain_at_p2_gamma0() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cons = c(2.0);
        let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w_plain = normalize_lp(&raw, 2.0).unwrap().into_vec();
        let mut w_m = w_plain.clone();
        let mut v = dual_from_weights(&w_m, &cons).unwrap();
        let mut mu = vec![0.0; 6];
        for _ in 0..50 {
            let g: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            lpsgd_step(&mut w_plain, &g, 0.1, &cons, BracketNorm::P).unwrap();
            lpsgdm_step(&mut v, &mut w_m, &mut mu, &g, 0.1, 0.0, &cons).unwrap();
            for (a, b) in w_plain.iter().zip(&w_m) {
                assert_close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn momentum_commits_mu_even_when_skipped() {
        let cons = c(2.0);
        let mut v = vec![1.0, 0.0];
        let mut w = v.clone();
        let mut mu = vec![0.4, -0.2];
        // gamma = 0 and zero gradient: mu decays to zero, step skipped.
        let err = lpsgdm_step(&mut v, &mut w, &mut mu, &[0.0, 0.0], 0.1, 0.0, &cons);
        assert!(matches!(err, Err(LpssError::Degenerate(_))));
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(v, vec![1.0, 0.0]);
    }

    #[test]
    fn momentum_coasts_on_zero_gradient() {
        // Nonzero mu keeps moving the weight even with g = 0.
        let cons = c(2.0);
        let mut w = vec![1.0, 0.0];
        let mut v = w.clone();
        let mut mu = vec![0.0, 0.5];
        let before = w.clone();
        lpsgdm_step(&mut v, &mut w, &mut mu, &[0.0, 0.0], 0.1, 0.9, &cons).unwrap();
        assert!(w != before);
        assert_close(mu[1], 0.45, 1e-15);
    }

    #[test]
    fn bias_step_examples() {
        let (mut b, mut mb) = (0.0, 0.0);
        bias_step(&mut b, &mut mb, 1.0, 0.1, 0.0);
        assert_close(b, -0.1, 1e-15);

        // Two steps, gamma = 0.9, g = 1 each: b = -eta (1 + 1.9).
        let (mut b, mut mb) = (0.0, 0.0);
        let eta = 0.05;
        bias_step(&mut b, &mut mb, 1.0, eta, 0.9);
        bias_step(&mut b, &mut mb, 1.0, eta, 0.9);
        assert_close(b, -2.9 * eta, 1e-12);

        // Zero gradients leave b constant.
        let (mut b, mut mb) = (0.7, 0.0);
        for _ in 0..10 {
            bias_step(&mut b, &mut mb, 0.0, 0.1, 0.9);
        }
        assert_close(b, 0.7, 1e-15);
    }

    #[test]
    fn lr_bound_on_quadratic() {
        let problem = QuadraticSphereProblem::with_spectrum(
            60,
            &[1.0, 1.2, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0],
        )
        .unwrap();
        let beta = problem.beta_l2();
        // The spectrum is chosen, so beta must come out as max(s)^2.
        assert_close(beta, 100.0, 1e-6);

        let cons = c(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = normalize_lp(&raw, 2.0).unwrap().into_vec();
        let g = problem.grad(&w);
        match lr_bound(&w, &g, &cons, beta).unwrap() {
            LrBound::Finite(bound) => assert!(bound > 0.0),
            LrBound::Unbounded => panic!("generic point must give a finite bound"),
        }
    }

    #[test]
    fn lr_bound_unbounded_cases() {
        let cons = c(2.0);
        // Zero gradient.
        assert_eq!(
            lr_bound(&[1.0, 0.0], &[0.0, 0.0], &cons, 1.0).unwrap(),
            LrBound::Unbounded
        );
        // Stationary point w = -Delta: denominator vanishes.
        assert_eq!(
            lr_bound(&[1.0, 0.0], &[-3.0, 0.0], &cons, 1.0).unwrap(),
            LrBound::Unbounded
        );
        assert!(lr_bound(&[1.0, 0.0], &[0.0, 1.0], &cons, 0.0).is_err());
    }

    #[test]
    fn stationarity_residual_cases() {
        let cons = c(2.0);
        // Zero gradient: defined as 0.
        assert_eq!(
            stationarity_residual(&[1.0, 0.0], &[0.0, 0.0], &cons).unwrap(),
            0.0
        );
        // Fixed point w = -Delta.
        assert_close(
            stationarity_residual(&[1.0, 0.0], &[-5.0, 0.0], &cons).unwrap(),
            0.0,
            1e-15,
        );
        // p = 2, w orthogonal to g: residual is exactly ||Delta||_2 = 1.
        assert_close(
            stationarity_residual(&[1.0, 0.0], &[0.0, 2.0], &cons).unwrap(),
            1.0,
            1e-15,
        );
    }

    #[test]
    fn schedules_match_published_examples() {
        let s = LrSchedule {
            kind: LrKind::StepDecay {
                initial: 0.02,
                factor: 0.3,
                every_n_epochs: 1,
            },
            divide_by_batch_size: false,
        };
        s.validate().unwrap();
        assert_close(s.rate(0, 1), 0.02, 1e-15);
        assert_close(s.rate(2, 1), 0.0018, 1e-15);

        let s = LrSchedule {
            kind: LrKind::StepDecay {
                initial: 0.02,
                factor: 0.4,
                every_n_epochs: 4,
            },
            divide_by_batch_size: false,
        };
        assert_close(s.rate(3, 1), 0.02, 1e-15);
        assert_close(s.rate(4, 1), 0.008, 1e-15);
    }

    #[test]
    fn step_decay_envelope_non_increasing() {
        let s = LrSchedule {
            kind: LrKind::StepDecay {
                initial: 0.1,
                factor: 0.5,
                every_n_epochs: 3,
            },
            divide_by_batch_size: false,
        };
        let mut last = f64::INFINITY;
        for epoch in 0..30 {
            let r = s.rate(epoch, 1);
            assert!(r > 0.0 && r <= last);
            last = r;
        }
    }

    #[test]
    fn triangular_schedule_shape() {
        let s = LrSchedule {
            kind: LrKind::Triangular {
                base: 0.01,
                peak: 0.05,
                period: 4,
            },
            divide_by_batch_size: false,
        };
        s.validate().unwrap();
        assert_close(s.rate(0, 1), 0.01, 1e-15);
        assert_close(s.rate(1, 1), 0.03, 1e-15);
        assert_close(s.rate(2, 1), 0.05, 1e-15);
        assert_close(s.rate(3, 1), 0.03, 1e-15);
        assert_close(s.rate(4, 1), 0.01, 1e-15);
    }

    #[test]
    fn piecewise_schedule_and_batch_divisor() {
        let s = LrSchedule {
            kind: LrKind::Piecewise {
                points: vec![(0, 0.1), (5, 0.02), (8, 0.5)],
            },
            divide_by_batch_size: true,
        };
        s.validate().unwrap();
        assert_close(s.rate(4, 10), 0.01, 1e-15);
        assert_close(s.rate(5, 10), 0.002, 1e-15);
        assert_close(s.rate(9, 10), 0.05, 1e-15);
    }

    #[test]
    fn schedule_validation_rejects_bad_configs() {
        let bad = LrSchedule {
            kind: LrKind::StepDecay {
                initial: 0.02,
                factor: 1.5,
                every_n_epochs: 1,
            },
            divide_by_batch_size: false,
        };
        assert!(bad.validate().is_err());
        let bad = LrSchedule {
            kind: LrKind::Piecewise {
                points: vec![(3, 0.1), (3, 0.2)],
            },
            divide_by_batch_size: false,
        };
        assert!(bad.validate().is_err());
        let bad = LrSchedule {
            kind: LrKind::Piecewise { points: vec![] },
            divide_by_batch_size: false,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quadratic_descent_decreases_risk_inside_bound() {
        let problem =
            QuadraticSphereProblem::with_spectrum(62, &[1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
        let beta = problem.beta_l2();
        let cons = c(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = normalize_lp(&raw, 2.0).unwrap().into_vec();
        let mut last = problem.risk(&w);
        let mut decreases = 0;
        for _ in 0..50 {
            let g = problem.grad(&w);
            // Past this point per-step decreases (~ residual^2) drop under
            // the rounding noise of evaluating the risk itself, and the
            // strict comparison stops being meaningful.
            if stationarity_residual(&w, &g, &cons).unwrap() < 1e-6 {
                break;
            }
            let eta = match lr_bound(&w, &g, &cons, beta).unwrap() {
                LrBound::Finite(b) => 0.5 * b,
                LrBound::Unbounded => break,
            };
            lpsgd_step(&mut w, &g, eta, &cons, BracketNorm::P).unwrap();
            let r = problem.risk(&w);
            assert!(r < last, "risk rose from {last} to {r}");
            last = r;
            decreases += 1;
        }
        assert!(decreases >= 20, "converged suspiciously fast: {decreases}");
        let g = problem.grad(&w);
        assert!(stationarity_residual(&w, &g, &cons).unwrap() < 1e-6);
    }
}
