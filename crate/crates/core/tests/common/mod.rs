//! Double-exponential quadrature used as an independent oracle for the
//! closed-form sparsity results. Deliberately has nothing in common with
//! the library's Beta-function route.

/// Tanh-sinh quadrature of `f` over the finite interval `(a, b)`.
///
/// Handles integrable endpoint singularities: the substitution pushes the
/// abscissae toward the endpoints double-exponentially fast while the
/// weights decay at the same rate. Points that collapse onto an endpoint
/// in f64 are skipped, so `f` is never evaluated at `a` or `b`.
pub fn tanh_sinh<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let t_max = 6.8;
    let mut prev = f64::NAN;
    let mut estimate = 0.0;
    for level in 0..=12u32 {
        let h = 2.0_f64.powi(-(level as i32));
        let k_max = (t_max / h).ceil() as i64;
        let mut sum = 0.0;
        for k in -k_max..=k_max {
            let t = k as f64 * h;
            let u = std::f64::consts::FRAC_PI_2 * t.sinh();
            // Abscissa as a distance from the nearer endpoint, and the
            // weight through the same exponential, so neither tanh nor
            // cosh^2 rounds the far tail away. An endpoint singularity at
            // a = 0 then keeps full relative precision down to denormals.
            let s = (-2.0 * u.abs()).exp();
            let delta = half * 2.0 * s / (1.0 + s);
            let w = std::f64::consts::FRAC_PI_2 * t.cosh() * 4.0 * s
                / ((1.0 + s) * (1.0 + s));
            if w == 0.0 || !w.is_finite() {
                continue;
            }
            let x = if u < 0.0 { a + delta } else { b - delta };
            if x <= a || x >= b {
                continue;
            }
            sum += w * f(x);
        }
        estimate = h * half * sum;
        if level >= 3 && (estimate - prev).abs() <= rel_tol * estimate.abs().max(1e-300) {
            break;
        }
        prev = estimate;
    }
    estimate
}

/// Exp-sinh quadrature of `f` over `(0, inf)`.
///
/// Requires `x f(x) -> 0` at both ends, which holds for every integrand in
/// this test suite (power-law at 0, super-exponential decay at infinity).
pub fn exp_sinh<F: Fn(f64) -> f64>(f: F, rel_tol: f64) -> f64 {
    let t_max = 6.8;
    let mut prev = f64::NAN;
    let mut estimate = 0.0;
    for level in 0..=11u32 {
        let h = 2.0_f64.powi(-(level as i32));
        let k_max = (t_max / h).ceil() as i64;
        let mut sum = 0.0;
        for k in -k_max..=k_max {
            let t = k as f64 * h;
            let u = std::f64::consts::FRAC_PI_2 * t.sinh();
            if u.abs() > 700.0 {
                // x itself would overflow or underflow.
                continue;
            }
            let x = u.exp();
            let w = x * std::f64::consts::FRAC_PI_2 * t.cosh();
            if w == 0.0 || !w.is_finite() {
                continue;
            }
            let fx = f(x);
            if fx != 0.0 {
                sum += w * fx;
            }
        }
        estimate = h * sum;
        if level >= 3 && (estimate - prev).abs() <= rel_tol * estimate.abs().max(1e-300) {
            break;
        }
        prev = estimate;
    }
    estimate
}

#[allow(dead_code)]
pub fn assert_rel_close(got: f64, want: f64, rel_tol: f64, what: &str) {
    let denom = want.abs().max(1e-300);
    let rel = (got - want).abs() / denom;
    assert!(
        rel <= rel_tol,
        "{what}: got {got}, want {want}, rel err {rel:.3e} > {rel_tol:.1e}"
    );
}
