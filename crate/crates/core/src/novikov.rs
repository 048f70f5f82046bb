//! Integrability schedule and drift-feasibility checks for exponential
//! moments of the factor process.
//!
//! For the 2-dimensional canonical proportional model the pair
//!
//! ```text
//!     c1 = -2 a22 det(a) / (a12^2 + a22^2),
//!     c2 =  2 a12 det(a) / (a12^2 + a22^2),
//! ```
//!
//! is non-negative whenever `a22 < 0`, `det a > 0` and `a12 > 0`, and
//! satisfies the exact cancellations `c1 a12 + c2 a22 = 0` and
//! `c1 a11 + c2 a21 = -(c1^2 + c2^2)/2`. These constants control a step
//! function
//!
//! ```text
//!     eps(t) = min( -a11 / c,  ( -t + sqrt(t^2 + 2 c2 / (c a12)) ) / 2 ),
//! ```
//!
//! whose iteration `t_{i+1} = t_i + eps(t_i)` diverges, so the induced
//! partition covers any finite horizon in finitely many steps; on each cell
//! the relevant exponential moment stays finite, which is what makes the
//! change of measure on the whole horizon legitimate.
//!
//! The module also decides (by explicit feasibility search) whether a drift
//! block admits a strictly positive vector `c` with
//!
//! ```text
//!     sum_j c_j a_ji <= -(m/2) c_i^2     for every i <= m,
//! ```
//!
//! classifies the four 2x2 sign patterns under which such a vector always
//! exists, and computes the diagonal shift that forces the inequality with
//! the all-ones vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassTag, SdeModel};

/// Tolerance for the internal identity checks on the constants.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Hard cap on partition length; unreachable under valid hypotheses.
pub const PARTITION_CAP: usize = 10_000_000;

/// Constants of the exponential-moment bound for a 2-dimensional canonical
/// proportional model, together with the affine bound `k(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NovikovConstants {
    pub c1: f64,
    pub c2: f64,
    /// Caller-supplied exponent scale.
    pub c: f64,
    /// Constant part of `k(t) = c1 v0 + c2 y0 + c2 b2 t [b2 > 0]`.
    pub k0: f64,
    /// Slope of `k(t)`: `c2 b2` when `b2 > 0`, zero otherwise.
    pub k_slope: f64,
}

impl NovikovConstants {
    /// The affine bound `k(t)`.
    pub fn k(&self, t: f64) -> f64 {
        self.k0 + self.k_slope * t
    }
}

/// Checks the structural hypotheses shared by [`constants`], [`epsilon`]
/// and [`partition`]: 2-dimensional canonical proportional model with
/// `a22 < 0`, `det a > 0`, `a12 > 0`.
fn require_c2_hypotheses(model: &SdeModel) -> Result<()> {
    let class = model.classify();
    if class.tag != ClassTag::ProportionalCanonical || model.p != 2 {
        return Err(Error::ClassMismatch(format!(
            "schedule requires a 2-dimensional canonical proportional model, got {}",
            class.display_name()
        )));
    }
    let a = &model.a;
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    if !(a[(1, 1)] < 0.0) {
        return Err(Error::Hypothesis(format!(
            "a_22 < 0 required, got {}",
            a[(1, 1)]
        )));
    }
    if !(det > 0.0) {
        return Err(Error::Hypothesis(format!("det a > 0 required, got {det}")));
    }
    if !(a[(0, 1)] > 0.0) {
        return Err(Error::Hypothesis(format!(
            "a_12 > 0 required, got {}",
            a[(0, 1)]
        )));
    }
    Ok(())
}

/// Computes the exponential-moment constants for scale `c`, verifying both
/// closed-form identities internally.
pub fn constants(model: &SdeModel, c: f64) -> Result<NovikovConstants> {
    require_c2_hypotheses(model)?;
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!(
            "exponent scale must be positive, got {c}"
        )));
    }
    let a = &model.a;
    let (a11, a12, a21, a22) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let det = a11 * a22 - a12 * a21;
    let denom = a12 * a12 + a22 * a22;
    let c1 = -2.0 * a22 * det / denom;
    let c2 = 2.0 * a12 * det / denom;

    let scale = 1.0_f64.max(c1 * c1 + c2 * c2);
    let id1 = c1 * a12 + c2 * a22;
    let id2 = c1 * a11 + c2 * a21 + 0.5 * (c1 * c1 + c2 * c2);
    if id1.abs() > IDENTITY_TOL * scale || id2.abs() > IDENTITY_TOL * scale {
        return Err(Error::InternalConsistency(format!(
            "constant identities violated: {id1:.3e}, {id2:.3e}"
        )));
    }

    let v0 = model.x0[0];
    let y0 = model.x0[1];
    let b2 = model.b[1];
    Ok(NovikovConstants {
        c1,
        c2,
        c,
        k0: c1 * v0 + c2 * y0,
        k_slope: if b2 > 0.0 { c2 * b2 } else { 0.0 },
    })
}

/// Cancellation-free form of `(-t + sqrt(t^2 + q)) / 2` for `q > 0`.
fn half_quadratic_root(t: f64, q: f64) -> f64 {
    q / (2.0 * (t + (t * t + q).sqrt()))
}

/// The step function `eps(t)`; strictly positive and non-increasing in `t`.
/// Requires `a11 < 0` on top of the constants' hypotheses.
pub fn epsilon(model: &SdeModel, c: f64, t: f64) -> Result<f64> {
    let k = constants(model, c)?;
    let a11 = model.a[(0, 0)];
    if !(a11 < 0.0) {
        return Err(Error::Hypothesis(format!("a_11 < 0 required, got {a11}")));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "time must be non-negative, got {t}"
        )));
    }
    let q = 2.0 * k.c2 / (c * model.a[(0, 1)]);
    Ok((-a11 / c).min(half_quadratic_root(t, q)))
}

/// A covering `0 = t_0 < t_1 < ... <= t_n` of `[0, T]` produced by
/// iterating the step function; consecutive differences equal `eps(t_i)`
/// bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub times: Vec<f64>,
    pub horizon: f64,
}

impl Partition {
    /// Number of steps taken (one less than the number of points).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Iterates `t_{i+1} = t_i + eps(t_i)` from zero until the horizon is
/// covered. The step count is finite because the iteration diverges; the
/// hard cap of [`PARTITION_CAP`] steps guards against hypothesis-breaking
/// inputs slipping through.
pub fn partition(model: &SdeModel, c: f64, horizon: f64) -> Result<Partition> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let k = constants(model, c)?;
    let a11 = model.a[(0, 0)];
    if !(a11 < 0.0) {
        return Err(Error::Hypothesis(format!("a_11 < 0 required, got {a11}")));
    }
    let cap = -a11 / c;
    let q = 2.0 * k.c2 / (c * model.a[(0, 1)]);
    let mut times = vec![0.0];
    let mut t = 0.0;
    while t < horizon {
        if times.len() > PARTITION_CAP {
            return Err(Error::SafetyCap(format!(
                "partition exceeded {PARTITION_CAP} steps before covering {horizon}"
            )));
        }
        let step = cap.min(half_quadratic_root(t, q));
        t += step;
        times.push(t);
    }
    Ok(Partition { times, horizon })
}

/// Outcome of the drift-feasibility search: whether a strictly positive
/// vector satisfying all the quadratic inequalities was found, and the
/// witness when it was. `holds = false` means "not found", never "proved
/// infeasible".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddreqOutcome {
    pub holds: bool,
    pub witness: Option<Vec<f64>>,
}

/// Exact check, no tolerance: `sum_j c_j a_ji <= -(m/2) c_i^2` for all i,
/// with every entry of `c` strictly positive.
pub fn verify_addreq_witness(a: &DMatrix<f64>, c: &[f64]) -> bool {
    let m = a.nrows();
    if c.len() != m || c.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return false;
    }
    (0..m).all(|i| {
        let lhs: f64 = (0..m).map(|j| c[j] * a[(j, i)]).sum();
        lhs <= -0.5 * (m as f64) * c[i] * c[i]
    })
}

/// Given a strictly positive direction whose column sums `d_i = sum_j c_j
/// a_ji` are all negative, returns the rescaled vector `s c` with half the
/// maximal admissible `s`, which satisfies every inequality with a strict
/// margin.
fn scale_direction(a: &DMatrix<f64>, dir: &DVector<f64>) -> Option<Vec<f64>> {
    let m = a.nrows();
    let d = a.transpose() * dir;
    if (0..m).any(|i| !(d[i] < 0.0)) {
        return None;
    }
    let s_max = (0..m)
        .map(|i| 2.0 * (-d[i]) / ((m as f64) * dir[i] * dir[i]))
        .fold(f64::INFINITY, f64::min);
    if !(s_max > 0.0) || !s_max.is_finite() {
        return None;
    }
    let c: Vec<f64> = dir.iter().map(|x| 0.5 * s_max * x).collect();
    if verify_addreq_witness(a, &c) {
        Some(c)
    } else {
        None
    }
}

/// Finds a strictly positive direction with all column sums negative, or
/// gives up. Exact interval analysis decides dimensions one and two; higher
/// dimensions use a log-uniform grid over `[1e-3, 1e3]^m` refined by
/// multiplicative coordinate descent on the largest column sum.
fn feasible_direction(a: &DMatrix<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    match m {
        1 => {
            if a[(0, 0)] < 0.0 {
                Some(DVector::from_element(1, 1.0))
            } else {
                None
            }
        }
        2 => {
            // Directions (1, t), t > 0: need a11 + t a21 < 0 and
            // a12 + t a22 < 0. Each is a half-line in t; intersect.
            let half_line = |p: f64, q: f64| -> Option<(f64, f64)> {
                // Solve p + t q < 0 over t > 0 as an open interval.
                if q > 0.0 {
                    if p < 0.0 {
                        Some((0.0, -p / q))
                    } else {
                        None
                    }
                } else if q < 0.0 {
                    Some(((-p / q).max(0.0), f64::INFINITY))
                } else if p < 0.0 {
                    Some((0.0, f64::INFINITY))
                } else {
                    None
                }
            };
            let (lo1, hi1) = half_line(a[(0, 0)], a[(1, 0)])?;
            let (lo2, hi2) = half_line(a[(0, 1)], a[(1, 1)])?;
            let lo = lo1.max(lo2);
            let hi = hi1.min(hi2);
            if !(lo < hi) {
                return None;
            }
            let t = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                lo + 1.0
            };
            Some(DVector::from_column_slice(&[1.0, t]))
        }
        _ => {
            let levels: Vec<f64> = (-3..=3).map(|k| 10f64.powi(k)).collect();
            let mut best: Option<(f64, DVector<f64>)> = None;
            let mut idx = vec![0usize; m];
            loop {
                let dir = DVector::from_fn(m, |i, _| levels[idx[i]]);
                let d = a.transpose() * &dir;
                // Normalize by the direction scale so the objective is
                // comparable across grid cells.
                let score = (0..m).map(|i| d[i] / dir.amax()).fold(f64::MIN, f64::max);
                if best.as_ref().map_or(true, |(s, _)| score < *s) {
                    best = Some((score, dir));
                }
                // Advance the mixed-radix counter.
                let mut carry = 0;
                while carry < m {
                    idx[carry] += 1;
                    if idx[carry] < levels.len() {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                }
                if carry == m {
                    break;
                }
            }
            let (mut score, mut dir) = best?;
            // Multiplicative coordinate descent on the worst column sum.
            let factors = [0.5, 0.8, 1.25, 2.0];
            for _ in 0..200 {
                let mut improved = false;
                for i in 0..m {
                    for &f in &factors {
                        let mut cand = dir.clone();
                        cand[i] *= f;
                        let d = a.transpose() * &cand;
                        let s = (0..m).map(|j| d[j] / cand.amax()).fold(f64::MIN, f64::max);
                        if s < score {
                            score = s;
                            dir = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            if score < 0.0 {
                Some(dir)
            } else {
                None
            }
        }
    }
}

/// Searches for a strictly positive vector `c` with `sum_j c_j a_ji <=
/// -(m/2) c_i^2` for every `i`. Any returned witness is re-verified exactly
/// before being reported; absence of a witness is a search failure, not a
/// proof of infeasibility.
pub fn check_addreq(a: &DMatrix<f64>, m: usize) -> Result<AddreqOutcome> {
    if m == 0 {
        return Err(Error::InvalidInput("block dimension must be positive".into()));
    }
    if a.nrows() != m || a.ncols() != m {
        return Err(Error::InvalidInput(format!(
            "expected an {m}x{m} block, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let witness = feasible_direction(a).and_then(|dir| scale_direction(a, &dir));
    Ok(AddreqOutcome {
        holds: witness.is_some(),
        witness,
    })
}

/// The four 2x2 sign patterns under which the feasibility search always
/// succeeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddreqCase {
    I,
    II,
    III,
    IV,
}

impl std::fmt::Display for AddreqCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AddreqCase::I => "i",
            AddreqCase::II => "ii",
            AddreqCase::III => "iii",
            AddreqCase::IV => "iv",
        };
        f.write_str(s)
    }
}

/// Returns every sign pattern the matrix satisfies:
/// (i) off-diagonal >= 0, diagonal < 0, det > 0;
/// (ii) off-diagonal < 0, diagonal >= 0, det < 0;
/// (iii) first row < 0;
/// (iv) second row reversed < 0 (`a22 < 0`, `a21 < 0`).
pub fn classify_2x2_cases(a: &DMatrix<f64>) -> Result<Vec<AddreqCase>> {
    if a.nrows() != 2 || a.ncols() != 2 {
        return Err(Error::InvalidInput("case classification needs a 2x2 matrix".into()));
    }
    let (a11, a12, a21, a22) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let det = a11 * a22 - a12 * a21;
    let mut cases = Vec::new();
    if a12 >= 0.0 && a21 >= 0.0 && a11 < 0.0 && a22 < 0.0 && det > 0.0 {
        cases.push(AddreqCase::I);
    }
    if a12 < 0.0 && a21 < 0.0 && a11 >= 0.0 && a22 >= 0.0 && det < 0.0 {
        cases.push(AddreqCase::II);
    }
    if a11 < 0.0 && a12 < 0.0 {
        cases.push(AddreqCase::III);
    }
    if a22 < 0.0 && a21 < 0.0 {
        cases.push(AddreqCase::IV);
    }
    Ok(cases)
}

/// Diagonal shift making the drift block satisfy the feasibility
/// inequality with the all-ones vector and equality:
///
/// ```text
///     mu_i = -m/2 - a_ii - sum_{j != i, j <= m} a_ji    (i <= m),
///     mu_i = 0                                          (i > m),
/// ```
///
/// for a canonical model meeting the positivity conditions.
pub fn find_diag_shift(model: &SdeModel) -> Result<DVector<f64>> {
    let class = model.classify();
    if !class.is_canonical_feller() {
        return Err(Error::ClassMismatch(format!(
            "diagonal shift requires a canonical model meeting the positivity conditions, got {}",
            class.display_name()
        )));
    }
    let m = model.m;
    let p = model.p;
    let mut mu = DVector::zeros(p);
    for i in 0..m {
        let cross: f64 = (0..m).filter(|&j| j != i).map(|j| model.a[(j, i)]).sum();
        mu[i] = -0.5 * (m as f64) - model.a[(i, i)] - cross;
    }
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn c2_model(a: [[f64; 2]; 2], b: [f64; 2], x0: [f64; 2]) -> SdeModel {
        SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]),
            DVector::from_column_slice(&b),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DVector::from_column_slice(&x0),
        )
        .unwrap()
    }

    #[test]
    fn constants_on_unit_determinant_example() {
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.2], [1.0, 0.5]);
        let k = constants(&m, 1.0).unwrap();
        assert!((k.c1 - 1.0).abs() < 1e-14);
        assert!((k.c2 - 1.0).abs() < 1e-14);
        // k(t) = c1 v0 + c2 y0 + c2 b2 t = 1.5 + 0.2 t.
        assert!((k.k(0.0) - 1.5).abs() < 1e-14);
        assert!((k.k(2.0) - 1.9).abs() < 1e-14);
    }

    #[test]
    fn constants_on_scaled_example() {
        let m = c2_model([[-1.0, 2.0], [0.0, -2.0]], [0.0, 0.0], [1.0, 0.0]);
        let k = constants(&m, 0.5).unwrap();
        assert!((k.c1 - 1.0).abs() < 1e-14);
        assert!((k.c2 - 1.0).abs() < 1e-14);
        assert_eq!(k.k_slope, 0.0);
    }

    #[test]
    fn constants_reject_zero_a22() {
        let m = c2_model([[-1.0, 1.0], [-0.5, 0.0]], [0.0, 0.2], [1.0, 0.5]);
        assert!(matches!(constants(&m, 1.0).unwrap_err(), Error::Hypothesis(_)));
    }

    #[test]
    fn constants_identities_hold_for_random_hypothesis_matrices() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..1000 {
            let a12 = rng.gen_range(0.1..3.0);
            let a22 = rng.gen_range(-3.0..-0.1);
            let a11 = rng.gen_range(-3.0..3.0);
            // det = a11 a22 - a12 a21 > 0  <=>  a21 < a11 a22 / a12.
            let a21 = a11 * a22 / a12 - rng.gen_range(0.05..2.0);
            let m = c2_model([[a11, a12], [a21, a22]], [0.0, 0.1], [1.0, 0.0]);
            let k = constants(&m, 1.0).unwrap();
            assert!(k.c1 >= 0.0 && k.c2 >= 0.0);
            let id1 = k.c1 * a12 + k.c2 * a22;
            let id2 = k.c1 * a11 + k.c2 * a21 + 0.5 * (k.c1 * k.c1 + k.c2 * k.c2);
            let scale = 1.0_f64.max(k.c1 * k.c1 + k.c2 * k.c2);
            assert!(id1.abs() <= 1e-10 * scale);
            assert!(id2.abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn step_function_at_zero_matches_hand_value() {
        // a11 = -1, c = 2, c2 = 1, a12 = 1: eps(0) = min(1/2, sqrt(1)/2).
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        let e = epsilon(&m, 2.0, 0.0).unwrap();
        assert!((e - 0.5).abs() < 1e-14);
    }

    #[test]
    fn step_function_decays_like_reciprocal_time() {
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        // q = 2 c2/(c a12) = 1, so eps(t) ~ 1/(4t).
        let t = 1.0e6;
        let e = epsilon(&m, 2.0, t).unwrap();
        assert!((e * 4.0 * t - 1.0).abs() < 1e-3);
    }

    #[test]
    fn step_function_positive_and_non_increasing() {
        let m = c2_model([[-0.7, 1.3], [-0.4, -1.1]], [0.0, 0.4], [1.0, 0.2]);
        let mut prev = f64::INFINITY;
        for k in 0..200 {
            let t = 0.05 * k as f64;
            let e = epsilon(&m, 1.5, t).unwrap();
            assert!(e > 0.0);
            assert!(e <= prev + 1e-15);
            prev = e;
        }
    }

    #[test]
    fn step_function_solves_its_quadratic() {
        // Where the square-root arm of the min is active, eps satisfies
        // eps^2 + t eps - c2/(2 c a12) = 0.
        let m = c2_model([[-5.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        let c = 2.0;
        let k = constants(&m, c).unwrap();
        let rhs = k.c2 / (2.0 * c * m.a[(0, 1)]);
        for t in [0.0, 0.3, 1.0, 7.0, 40.0] {
            let e = epsilon(&m, c, t).unwrap();
            assert!(e < -m.a[(0, 0)] / c, "cap arm active at t = {t}");
            assert!((e * e + t * e - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn step_function_requires_negative_a11() {
        let m = c2_model([[0.0, 1.0], [-0.5, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        assert!(matches!(
            epsilon(&m, 1.0, 0.0).unwrap_err(),
            Error::Hypothesis(_)
        ));
    }

    #[test]
    fn partition_covers_unit_horizon() {
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        let p = partition(&m, 2.0, 1.0).unwrap();
        assert_eq!(p.times[0], 0.0);
        assert_eq!(p.times[1], 0.5);
        assert!(*p.times.last().unwrap() >= 1.0);
        // Differences reproduce the step function bit-for-bit.
        for i in 0..p.times.len() - 1 {
            let e = epsilon(&m, 2.0, p.times[i]).unwrap();
            assert_eq!(p.times[i + 1], p.times[i] + e);
        }
    }

    #[test]
    fn partition_single_step_when_horizon_is_short() {
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        let p = partition(&m, 2.0, 0.4).unwrap();
        assert_eq!(p.times, vec![0.0, 0.5]);
        assert_eq!(p.steps(), 1);
    }

    #[test]
    fn partition_long_horizon_grows_quadratically_without_cap() {
        let m = c2_model([[-1.0, 1.0], [0.0, -1.0]], [0.0, 0.0], [1.0, 0.0]);
        let p = partition(&m, 2.0, 100.0).unwrap();
        assert!(*p.times.last().unwrap() >= 100.0);
        // Steps scale like 2 T^2 / q with q = 1 here; allow a wide band.
        assert!(p.steps() > 1_000, "{}", p.steps());
        assert!(p.steps() < 100_000, "{}", p.steps());
    }

    #[test]
    fn addreq_one_dimensional() {
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let out = check_addreq(&neg, 1).unwrap();
        assert!(out.holds);
        assert!(verify_addreq_witness(&neg, &out.witness.unwrap()));

        let pos = DMatrix::from_row_slice(1, 1, &[1.0]);
        let out = check_addreq(&pos, 1).unwrap();
        assert!(!out.holds);
        assert!(out.witness.is_none());
    }

    #[test]
    fn addreq_mutual_excitation_with_dominant_decay() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.5, -1.0]);
        let out = check_addreq(&a, 2).unwrap();
        assert!(out.holds);
        assert!(verify_addreq_witness(&a, &out.witness.unwrap()));
    }

    #[test]
    fn addreq_identity_matrix_has_no_witness() {
        let a = DMatrix::identity(2, 2);
        assert!(!check_addreq(&a, 2).unwrap().holds);
    }

    #[test]
    fn addreq_three_dimensional_grid_route() {
        let neg = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -2.0, -0.5]));
        let out = check_addreq(&neg, 3).unwrap();
        assert!(out.holds);
        assert!(verify_addreq_witness(&neg, &out.witness.unwrap()));

        let pos = DMatrix::identity(3, 3);
        assert!(!check_addreq(&pos, 3).unwrap().holds);
    }

    #[test]
    fn case_classification_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.5, -1.0]);
        assert_eq!(classify_2x2_cases(&a).unwrap(), vec![AddreqCase::I]);

        let a = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 0.5, -1.0]);
        assert_eq!(classify_2x2_cases(&a).unwrap(), vec![AddreqCase::III]);

        let a = DMatrix::zeros(2, 2);
        assert!(classify_2x2_cases(&a).unwrap().is_empty());
    }

    #[test]
    fn every_classified_case_admits_a_witness() {
        let mut rng = StdRng::seed_from_u64(37);
        let mut counts = [0usize; 4];
        while counts.iter().any(|&c| c < 500) {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-2.0f64..2.0));
            let cases = classify_2x2_cases(&a).unwrap();
            if cases.is_empty() {
                continue;
            }
            for case in &cases {
                counts[(*case as u8) as usize] += 1;
            }
            let out = check_addreq(&a, 2).unwrap();
            assert!(out.holds, "classified {cases:?} but no witness for {a}");
            assert!(verify_addreq_witness(&a, &out.witness.unwrap()));
        }
    }

    fn feller_model_2x2(a: [[f64; 2]; 2]) -> SdeModel {
        SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]),
            DVector::from_column_slice(&[0.1, 0.1]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[1.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn diag_shift_examples() {
        let mu = find_diag_shift(&feller_model_2x2([[0.0, 0.0], [0.0, 0.0]])).unwrap();
        assert_eq!(mu.as_slice(), &[-1.0, -1.0]);

        let mu = find_diag_shift(&feller_model_2x2([[-2.0, 0.0], [0.0, -2.0]])).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 1.0]);

        // Rank-one factor structure: only the first coordinate is shifted.
        let m = SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.3, -1.0]),
            DVector::from_column_slice(&[0.1, 0.0]),
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.0, 0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]),
            DVector::from_column_slice(&[1.0, 0.0]),
        )
        .unwrap();
        let mu = find_diag_shift(&m).unwrap();
        assert_eq!(mu.as_slice(), &[-0.5, 0.0]);
    }

    #[test]
    fn diag_shift_makes_all_ones_a_witness() {
        let mut rng = StdRng::seed_from_u64(51);
        for _ in 0..200 {
            let a11 = rng.gen_range(-2.0..2.0);
            let a22 = rng.gen_range(-2.0..2.0);
            let a12 = rng.gen_range(0.0..1.5);
            let a21 = rng.gen_range(0.0..1.5);
            let model = feller_model_2x2([[a11, a12], [a21, a22]]);
            let mu = find_diag_shift(&model).unwrap();
            let mut shifted = model.a.clone();
            for i in 0..2 {
                shifted[(i, i)] += mu[i];
            }
            // All-ones satisfies the inequality up to rounding, and the
            // search then finds a strict witness on its own.
            for i in 0..2 {
                let lhs: f64 = (0..2).map(|j| shifted[(j, i)]).sum();
                assert!(lhs <= -1.0 + 1e-12);
            }
            let out = check_addreq(&shifted, 2).unwrap();
            assert!(out.holds);
            assert!(verify_addreq_witness(&shifted, &out.witness.unwrap()));
        }
    }
}
