//! Closed-form solution of the 2-dimensional linear mean ODE.
//!
//! The expectation of the state solves `x' = a x + b`. For the first
//! coordinate of a 2-dimensional system this reduces to the scalar
//! second-order equation `x'' - tau x' + delta x - rho = 0` with
//!
//! ```text
//!     tau = tr a,   delta = det a,   rho = a12 b2 - a22 b1,
//!     xbar = rho / delta,            discr = tau^2 - 4 delta,
//! ```
//!
//! and the root pattern of the characteristic polynomial decides the shape:
//!
//! * `discr > 0`: `x(t) = B1 e^{r1 t} + B2 e^{r2 t} + xbar` with
//!   `r_{1,2} = (tau -/+ sqrt(discr)) / 2`;
//! * `discr < 0`: `x(t) = e^{tau t / 2}(c1 cos(omega t) + c2 sin(omega t)) + xbar`
//!   with `omega = sqrt(-discr) / 2`;
//! * repeated roots or `delta = 0` (no constant particular solution): the
//!   closed form degenerates and evaluation falls back to adaptive
//!   Runge-Kutta integration of the system.
//!
//! Roots and coefficients are computed in cancellation-free form
//! (`r_small = delta / r_big`, `r1 * xbar = rho / r2`) so the large-`a22`
//! regime used by the certificate searches stays accurate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `|discr| < DEGENERATE_D_TOL * max(1, tau^2)` counts as a repeated root.
pub const DEGENERATE_D_TOL: f64 = 1e-10;
/// `|delta| < DEGENERATE_DELTA_TOL` leaves no constant particular solution.
pub const DEGENERATE_DELTA_TOL: f64 = 1e-10;
/// Relative tolerance of the fallback integrator used by [`CharSolution::eval`].
pub const DEGENERATE_EVAL_RTOL: f64 = 1e-10;

/// Root pattern of the characteristic polynomial, with the solution
/// coefficients fitted to the initial data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootKind {
    /// `x(t) = coef1 e^{r1 t} + coef2 e^{r2 t} + xbar`, `r1 < r2`.
    RealDistinct {
        r1: f64,
        r2: f64,
        coef1: f64,
        coef2: f64,
    },
    /// `x(t) = e^{tau t/2}(c1 cos(omega t) + c2 sin(omega t)) + xbar`.
    Complex { omega: f64, c1: f64, c2: f64 },
    /// Repeated root or `delta = 0`; evaluation integrates numerically.
    Degenerate,
}

/// Solved mean ODE for the first coordinate of a 2-dimensional system.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSolution {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub x0: f64,
    pub y0: f64,
    /// `x'(0) = a11 x0 + a12 y0 + b1`.
    pub xdot0: f64,
    pub tau: f64,
    pub delta: f64,
    pub rho: f64,
    /// `tau^2 - 4 delta`.
    pub discr: f64,
    /// Stationary value `rho / delta`; `None` when `delta` is numerically zero.
    pub xbar: Option<f64>,
    pub kind: RootKind,
}

/// Solves the mean ODE `x' = a x + b` for the first coordinate from
/// `(x0, y0)`, classifying the characteristic roots.
pub fn solve_expectation(a: [[f64; 2]; 2], b: [f64; 2], x0: f64, y0: f64) -> Result<CharSolution> {
    for v in a.iter().flatten().chain(b.iter()).chain([&x0, &y0]) {
        if !v.is_finite() {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
    }
    let tau = a[0][0] + a[1][1];
    let delta = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let rho = a[0][1] * b[1] - a[1][1] * b[0];
    let discr = tau * tau - 4.0 * delta;
    let xdot0 = a[0][0] * x0 + a[0][1] * y0 + b[0];
    let xbar = (delta.abs() >= DEGENERATE_DELTA_TOL).then(|| rho / delta);

    let degenerate =
        discr.abs() < DEGENERATE_D_TOL * 1.0_f64.max(tau * tau) || xbar.is_none();

    let kind = if degenerate {
        RootKind::Degenerate
    } else if discr > 0.0 {
        let (r1, r2) = stable_real_roots(tau, delta, discr);
        // r1 * xbar without dividing by delta: r1 rho / delta = rho / r2.
        let coef2 = (xdot0 - r1 * x0 + rho / r2) / (r2 - r1);
        let coef1 = (x0 - xbar.unwrap()) - coef2;
        RootKind::RealDistinct {
            r1,
            r2,
            coef1,
            coef2,
        }
    } else {
        let omega = (-discr).sqrt() / 2.0;
        let c1 = x0 - xbar.unwrap();
        let c2 = (xdot0 - 0.5 * tau * c1) / omega;
        RootKind::Complex { omega, c1, c2 }
    };

    Ok(CharSolution {
        a,
        b,
        x0,
        y0,
        xdot0,
        tau,
        delta,
        rho,
        discr,
        xbar,
        kind,
    })
}

/// Real roots of `r^2 - tau r + delta` with `discr = tau^2 - 4 delta > 0`,
/// computed without subtractive cancellation: the root far from zero comes
/// from the quadratic formula, the other from Vieta (`r1 r2 = delta`).
fn stable_real_roots(tau: f64, delta: f64, discr: f64) -> (f64, f64) {
    let s = discr.sqrt();
    if tau >= 0.0 {
        let r2 = 0.5 * (tau + s);
        (delta / r2, r2)
    } else {
        let r1 = 0.5 * (tau - s);
        (r1, delta / r1)
    }
}

impl CharSolution {
    /// Evaluates `x(t)` for `t >= 0`. Degenerate root patterns integrate the
    /// system numerically at relative tolerance [`DEGENERATE_EVAL_RTOL`].
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "evaluation time must be non-negative, got {t}"
            )));
        }
        match self.kind {
            RootKind::RealDistinct {
                r1,
                r2,
                coef1,
                coef2,
            } => Ok(coef1 * (r1 * t).exp() + coef2 * (r2 * t).exp() + self.xbar.unwrap_or(0.0)),
            RootKind::Complex { omega, c1, c2 } => {
                let envelope = (0.5 * self.tau * t).exp();
                Ok(envelope * (c1 * (omega * t).cos() + c2 * (omega * t).sin())
                    + self.xbar.unwrap_or(0.0))
            }
            RootKind::Degenerate => {
                let a = DMatrix::from_row_slice(2, 2, &[
                    self.a[0][0],
                    self.a[0][1],
                    self.a[1][0],
                    self.a[1][1],
                ]);
                let b = DVector::from_column_slice(&self.b);
                let x0 = DVector::from_column_slice(&[self.x0, self.y0]);
                let state = integrate_mean(&a, &b, &x0, t, DEGENERATE_EVAL_RTOL)?;
                Ok(state[0])
            }
        }
    }
}

/// Leading coefficient `B2` of the growing mode `e^{r2 t}` in the regime
/// `a11 = 0` with `discr = a22^2 + 4 a12 a21 > 0`. For large `a22` it
/// behaves like `a12 y0 / a22 + a12 (b2 + a21 x0) / a22^2`, which is the
/// quantity the diagonal-tilt search drives negative.
pub fn b2_asymptotic(
    a12: f64,
    a21: f64,
    b1: f64,
    b2: f64,
    x0: f64,
    y0: f64,
    a22: f64,
) -> Result<f64> {
    let tau = a22;
    let delta = -a12 * a21;
    let discr = tau * tau - 4.0 * delta;
    if discr <= 0.0 {
        return Err(Error::Hypothesis(format!(
            "growing-mode regime requires tau^2 - 4 delta > 0, got {discr:.6e}"
        )));
    }
    let (r1, r2) = stable_real_roots(tau, delta, discr);
    if r2 == r1 {
        return Err(Error::Hypothesis("characteristic roots coincide".into()));
    }
    if r2 == 0.0 {
        // Only possible when delta = 0 with a22 < 0: there is no growing
        // mode, so the coefficient is ill-posed.
        return Err(Error::Hypothesis(
            "largest characteristic root is zero; no growing mode".into(),
        ));
    }
    let rho = a12 * b2 - a22 * b1;
    let coef2 = (r1 * (-x0) + rho / r2 + a12 * y0 + b1) / (r2 - r1);
    if !coef2.is_finite() {
        return Err(Error::InternalConsistency(format!(
            "growing-mode coefficient is not finite (a22 = {a22})"
        )));
    }
    Ok(coef2)
}

/// Integrates `y' = a y + b` from `y(0) = x0` to time `t` with adaptive
/// step-doubling Runge-Kutta (classic fourth order, fifth-order local
/// extrapolation). Errors are measured relative to `max(1, |y|)`.
pub fn integrate_mean(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    t: f64,
    rtol: f64,
) -> Result<DVector<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "integration horizon must be non-negative, got {t}"
        )));
    }
    let f = |y: &DVector<f64>| a * y + b;
    rk4_adaptive(&f, x0.clone(), t, rtol)
}

/// Convenience wrapper evaluating [`integrate_mean`] on an increasing grid,
/// reusing each endpoint as the next start.
pub fn integrate_mean_grid(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    times: &[f64],
    rtol: f64,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(times.len());
    let mut state = x0.clone();
    let mut t_prev = 0.0;
    for &t in times {
        if t < t_prev {
            return Err(Error::InvalidInput("grid times must be increasing".into()));
        }
        state = rk4_adaptive(&|y| a * y + b, state.clone(), t - t_prev, rtol)?;
        t_prev = t;
        out.push(state.clone());
    }
    Ok(out)
}

fn rk4_step<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: &F,
    y: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (h / 2.0)));
    let k3 = f(&(y + &k2 * (h / 2.0)));
    let k4 = f(&(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn rk4_adaptive<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: &F,
    mut y: DVector<f64>,
    t_end: f64,
    rtol: f64,
) -> Result<DVector<f64>> {
    if t_end == 0.0 {
        return Ok(y);
    }
    let mut t = 0.0;
    let mut h = (t_end / 8.0).min(0.1);
    let mut iterations = 0usize;
    const MAX_ITERATIONS: usize = 1_000_000;
    while t < t_end {
        iterations += 1;
        if iterations > MAX_ITERATIONS {
            return Err(Error::SafetyCap(
                "adaptive integrator exceeded its iteration budget".into(),
            ));
        }
        h = h.min(t_end - t);
        let full = rk4_step(f, &y, h);
        let mid = rk4_step(f, &y, h / 2.0);
        let halves = rk4_step(f, &mid, h / 2.0);
        let err = (&halves - &full).amax();
        let scale = rtol * 1.0_f64.max(halves.amax());
        if !err.is_finite() {
            // Blow-up at this step size; retry smaller.
            h *= 0.25;
            if h < 1e-300 {
                return Err(Error::InternalConsistency(
                    "integration step underflowed during blow-up control".into(),
                ));
            }
            continue;
        }
        if err <= scale {
            // Local extrapolation: two half steps plus the Richardson term.
            y = &halves + (&halves - &full) / 15.0;
            t += h;
            if err > 0.0 {
                h *= 0.9 * (scale / err).powf(0.2).clamp(0.2, 5.0);
            } else {
                h *= 5.0;
            }
        } else {
            h *= 0.9 * (scale / err).powf(0.2).clamp(0.2, 5.0);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn real_distinct_example() {
        let sol = solve_expectation([[0.0, -1.0], [1.0, 3.0]], [0.0, 1.0], 1.0, 0.0).unwrap();
        assert_eq!(sol.tau, 3.0);
        assert_eq!(sol.delta, 1.0);
        assert_eq!(sol.discr, 5.0);
        assert_eq!(sol.rho, -1.0);
        assert_eq!(sol.xbar, Some(-1.0));
        match sol.kind {
            RootKind::RealDistinct { coef1, coef2, .. } => {
                assert!((coef1 + coef2 - 2.0).abs() < 1e-12);
            }
            other => panic!("expected real distinct roots, got {other:?}"),
        }
        assert!((sol.eval(0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complex_example_is_a_cosine() {
        let sol = solve_expectation([[0.0, 1.0], [-5.0, 0.0]], [0.0, 0.0], 1.0, 0.0).unwrap();
        match sol.kind {
            RootKind::Complex { omega, c1, c2 } => {
                assert!((omega - 5.0_f64.sqrt()).abs() < 1e-12);
                assert!((c1 - 1.0).abs() < 1e-12);
                assert!(c2.abs() < 1e-12);
            }
            other => panic!("expected complex roots, got {other:?}"),
        }
        let t = std::f64::consts::PI / 5.0_f64.sqrt();
        assert!((sol.eval(t).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_zero_matrix_integrates_linearly() {
        let sol = solve_expectation([[0.0, 0.0], [0.0, 0.0]], [1.0, 0.0], 0.0, 0.0).unwrap();
        assert_eq!(sol.kind, RootKind::Degenerate);
        assert!((sol.eval(2.0).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn initial_identities_hold_for_random_systems() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 300 {
            let a = [
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            ];
            let b = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let x0 = rng.gen_range(-1.0..1.0);
            let y0 = rng.gen_range(-1.0..1.0);
            let sol = solve_expectation(a, b, x0, y0).unwrap();
            match sol.kind {
                RootKind::RealDistinct {
                    r1,
                    r2,
                    coef1,
                    coef2,
                } => {
                    let xbar = sol.xbar.unwrap();
                    assert!((coef1 + coef2 + xbar - x0).abs() < 1e-10);
                    assert!((r1 * coef1 + r2 * coef2 - sol.xdot0).abs() < 1e-10);
                    assert!(r1 < r2);
                }
                RootKind::Complex { c1, .. } => {
                    let xbar = sol.xbar.unwrap();
                    assert!((c1 + xbar - x0).abs() < 1e-10);
                }
                RootKind::Degenerate => continue,
            }
            checked += 1;
        }
    }

    #[test]
    fn kind_classification_is_stable_under_tiny_perturbations() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..500 {
            let a = [
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            ];
            let sol = solve_expectation(a, [0.1, 0.2], 0.5, 0.5).unwrap();
            if sol.discr.abs() <= 1e-8 || sol.delta.abs() <= 1e-8 {
                continue;
            }
            let mut bumped = a;
            bumped[0][0] += 1e-14;
            let sol2 = solve_expectation(bumped, [0.1, 0.2], 0.5, 0.5).unwrap();
            assert_eq!(
                std::mem::discriminant(&sol.kind),
                std::mem::discriminant(&sol2.kind)
            );
        }
    }

    #[test]
    fn rejects_negative_evaluation_time() {
        let sol = solve_expectation([[0.0, -1.0], [1.0, 3.0]], [0.0, 1.0], 1.0, 0.0).unwrap();
        assert!(sol.eval(-0.5).is_err());
    }

    #[test]
    fn growing_mode_coefficient_matches_hand_value() {
        // Frozen from the defining algebra evaluated independently through
        // a direct solve of B1 + B2 = x0 - xbar, r1 B1 + r2 B2 = xdot0 and
        // cross-checked against a matrix-exponential evaluation of the mean.
        let coef = b2_asymptotic(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        assert!((coef - (-0.1226827987756233)).abs() < 1e-12, "{coef}");
        assert!(coef < 0.0);
    }

    #[test]
    fn growing_mode_zero_data_gives_zero() {
        let coef = b2_asymptotic(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0).unwrap();
        assert_eq!(coef, 0.0);
    }

    #[test]
    fn growing_mode_limit_is_coupling_times_y0() {
        for a22 in [10.0, 100.0, 1000.0] {
            let coef = b2_asymptotic(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0, a22).unwrap();
            // a22 * B2 -> a12 * y0 with a 1/a22 correction.
            assert!(
                (a22 * coef - (-1.0)).abs() < 3.0 / a22,
                "a22 = {a22}, a22 * coef = {}",
                a22 * coef
            );
        }
    }

    #[test]
    fn growing_mode_rejects_oscillatory_regime() {
        assert!(b2_asymptotic(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn integrator_matches_scalar_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let b = DVector::from_column_slice(&[0.0, 0.0]);
        let x0 = DVector::from_column_slice(&[1.0, 1.0]);
        let out = integrate_mean(&a, &b, &x0, 1.5, 1e-12).unwrap();
        assert!((out[0] - (-1.5_f64).exp()).abs() < 1e-10);
        assert!((out[1] - (-3.0_f64).exp()).abs() < 1e-10);
    }
}
