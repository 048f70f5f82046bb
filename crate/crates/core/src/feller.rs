//! Structural non-negativity conditions and sign profiles, reported with
//! signed margins.
//!
//! For a canonical model (first `m` volatility factors are the coordinates
//! themselves) the factors stay non-negative from a non-negative start iff
//! the drift feeds the first `m` coordinates non-negatively:
//!
//! ```text
//!     for i, j <= m and k > m:
//!         a_ij >= 0 (i != j),   a_ik = 0,   b_i >= 0,
//!         alpha_k >= 0,         beta_ki >= 0.
//! ```
//!
//! Each condition is reported as a row with a signed margin (`>= 0` iff the
//! condition holds, `0` exactly at the boundary) so that callers can apply
//! their own policies. Strict conditions fail at margin zero, non-strict
//! ones hold there.
//!
//! The two *violation profiles* collect the sign hypotheses under which a
//! negative expected volatility factor can be certified for 2-dimensional
//! models; they intentionally contradict the non-negativity rows, so their
//! conjunction (`overall`) is false for every model of interest and callers
//! read the named rows instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SdeClass, SdeModel};

/// One reported condition. `margin` is the signed slack: non-negative iff
/// the condition holds for non-strict conditions, strictly positive iff it
/// holds for strict ones, and exactly zero on the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub holds: bool,
    pub margin: f64,
    /// Strict conditions fail when the margin is exactly zero.
    pub strict: bool,
}

impl Condition {
    /// Non-strict `quantity >= 0`; holds at margin zero.
    pub fn ge(name: impl Into<String>, margin: f64) -> Self {
        Condition {
            name: name.into(),
            holds: margin >= 0.0,
            margin,
            strict: false,
        }
    }

    /// Strict `quantity > 0`; fails at margin zero.
    pub fn gt(name: impl Into<String>, margin: f64) -> Self {
        Condition {
            name: name.into(),
            holds: margin > 0.0,
            margin,
            strict: true,
        }
    }

    /// Equality `quantity = 0` reported through the deviation `|quantity|`:
    /// the margin is `-|quantity|`, so it is zero exactly when the equality
    /// holds and negative otherwise.
    pub fn equality(name: impl Into<String>, abs_dev: f64) -> Self {
        Condition {
            name: name.into(),
            holds: abs_dev == 0.0,
            margin: -abs_dev,
            strict: false,
        }
    }
}

/// A bundle of condition rows plus their conjunction and the class of the
/// inspected model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FellerReport {
    /// Conjunction of all rows.
    pub overall: bool,
    pub class: SdeClass,
    pub conditions: Vec<Condition>,
}

impl FellerReport {
    fn new(class: SdeClass, conditions: Vec<Condition>) -> Self {
        FellerReport {
            overall: conditions.iter().all(|c| c.holds),
            class,
            conditions,
        }
    }

    /// Looks up a row by name.
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// `true` iff every named row exists and holds.
    pub fn all_hold(&self, names: &[&str]) -> bool {
        names
            .iter()
            .all(|n| self.condition(n).map(|c| c.holds).unwrap_or(false))
    }
}

/// The non-negativity condition rows for a canonical model. The caller is
/// responsible for having checked canonicity; [`check_canonical_feller`] is
/// the validating entry point.
pub fn eq_condition_rows(model: &SdeModel) -> Vec<Condition> {
    let (m, p) = (model.m, model.p);
    let mut rows = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if j != i {
                rows.push(Condition::ge(
                    format!("a_{}{}>=0", i + 1, j + 1),
                    model.a[(i, j)],
                ));
            }
        }
        for k in m..p {
            rows.push(Condition::equality(
                format!("a_{}{}=0", i + 1, k + 1),
                model.a[(i, k)].abs(),
            ));
        }
        rows.push(Condition::ge(format!("b_{}>=0", i + 1), model.b[i]));
    }
    for k in m..p {
        rows.push(Condition::ge(format!("alpha_{}>=0", k + 1), model.alpha[k]));
        for i in 0..m {
            rows.push(Condition::ge(
                format!("beta_{}{}>=0", k + 1, i + 1),
                model.beta[(k, i)],
            ));
        }
    }
    rows
}

/// Checks the drift/intercept non-negativity conditions for a canonical
/// model. `overall = true` means every volatility factor stays non-negative
/// from a non-negative start.
pub fn check_canonical_feller(model: &SdeModel) -> Result<FellerReport> {
    if !model.is_canonical() {
        return Err(Error::ClassMismatch(
            "non-negativity conditions are defined for canonical models only".into(),
        ));
    }
    Ok(FellerReport::new(
        model.classify(),
        eq_condition_rows(model),
    ))
}

/// Sign hypotheses for the 2-dimensional canonical model with two
/// independent factors (`m = p = 2`) under which a diagonal drift tilt
/// certifies a negative expected first factor: `a_12 < 0`, `a_21 > 0`,
/// `b_2 > 0`. The full non-negativity rows are appended for context, so
/// `overall` is false whenever the hypotheses hold; read the named rows.
pub fn check_c22_violation_profile(model: &SdeModel) -> Result<FellerReport> {
    if !(model.is_canonical() && model.p == 2 && model.m == 2) {
        return Err(Error::ClassMismatch(
            "violation profile requires a canonical 2-dimensional model with two factors".into(),
        ));
    }
    let mut rows = vec![
        Condition::gt("a_12<0", -model.a[(0, 1)]),
        Condition::gt("a_21>0", model.a[(1, 0)]),
        Condition::gt("b_2>0", model.b[1]),
    ];
    rows.extend(eq_condition_rows(model));
    Ok(FellerReport::new(model.classify(), rows))
}

/// Sign profile for the 2-dimensional canonical model with proportional
/// factors (every coordinate driven by `sqrt(|x_1|)`): `a_12 > 0` is the
/// violated non-negativity condition that makes a negative factor possible,
/// and `a_11 < 0`, `a_22 < 0`, `det a > 0` are the integrability
/// hypotheses backing the stopped tilt density (`a_22 < 0` alone suffices
/// for the positive-probability statement).
pub fn check_c2_violation_profile(model: &SdeModel) -> Result<FellerReport> {
    if !(model.is_canonical() && model.is_proportional() && model.p == 2) {
        return Err(Error::ClassMismatch(
            "violation profile requires a canonical 2-dimensional model with proportional factors"
                .into(),
        ));
    }
    let det = model.a[(0, 0)] * model.a[(1, 1)] - model.a[(0, 1)] * model.a[(1, 0)];
    let rows = vec![
        Condition::gt("a_12>0", model.a[(0, 1)]),
        Condition::gt("a_11<0", -model.a[(0, 0)]),
        Condition::gt("a_22<0", -model.a[(1, 1)]),
        Condition::gt("det_a>0", det),
        Condition::ge("b_1>=0", model.b[0]),
    ];
    Ok(FellerReport::new(model.classify(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn canonical22(a: [[f64; 2]; 2], b: [f64; 2], x0: [f64; 2]) -> SdeModel {
        SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]),
            DVector::from_column_slice(&b),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&x0),
        )
        .unwrap()
    }

    fn canonical12() -> SdeModel {
        // One genuine factor (m = 1), second factor affine in x_1.
        SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, 0.3, -1.0]),
            DVector::from_column_slice(&[0.6, 0.0]),
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.7, 0.0]),
            DVector::from_column_slice(&[1.0, 0.4]),
        )
        .unwrap()
    }

    #[test]
    fn satisfied_conditions_report_positive_margins() {
        let m = canonical22([[-1.0, 0.1], [0.1, -1.0]], [0.2, 0.3], [0.5, 0.5]);
        let report = check_canonical_feller(&m).unwrap();
        assert!(report.overall);
        assert_eq!(report.condition("a_12>=0").unwrap().margin, 0.1);
        assert_eq!(report.condition("b_2>=0").unwrap().margin, 0.3);
    }

    #[test]
    fn negative_cross_term_fails_with_margin() {
        let m = canonical22([[-1.0, -1.0], [1.0, -1.0]], [0.0, 1.0], [1.0, 0.0]);
        let report = check_canonical_feller(&m).unwrap();
        assert!(!report.overall);
        let row = report.condition("a_12>=0").unwrap();
        assert!(!row.holds);
        assert_eq!(row.margin, -1.0);
    }

    #[test]
    fn coupling_into_extra_factor_must_vanish() {
        let m = canonical12();
        let report = check_canonical_feller(&m).unwrap();
        let row = report.condition("a_12=0").unwrap();
        assert!(!row.holds);
        assert_eq!(row.margin, -0.3);
        assert!(report.condition("alpha_2>=0").unwrap().holds);
        assert!(report.condition("beta_21>=0").unwrap().holds);
    }

    #[test]
    fn boundary_margin_zero_holds_for_non_strict() {
        let m = canonical22([[-1.0, 0.0], [0.0, -1.0]], [0.0, 0.3], [0.5, 0.5]);
        let report = check_canonical_feller(&m).unwrap();
        assert!(report.overall);
        let row = report.condition("b_1>=0").unwrap();
        assert!(row.holds);
        assert_eq!(row.margin, 0.0);
    }

    #[test]
    fn non_canonical_model_is_rejected() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "sigma":[[2.0,0.0],[0.0,2.0]],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap();
        assert!(check_canonical_feller(&m).is_err());
    }

    #[test]
    fn c22_profile_reports_hypotheses() {
        let m = canonical22([[-1.0, -1.0], [1.0, -1.0]], [0.0, 1.0], [1.0, 0.0]);
        let report = check_c22_violation_profile(&m).unwrap();
        assert!(report.all_hold(&["a_12<0", "a_21>0", "b_2>0"]));
        // The appended non-negativity rows contradict the hypotheses.
        assert!(!report.overall);
        assert!(!report.condition("a_12>=0").unwrap().holds);
    }

    #[test]
    fn c22_profile_strict_at_boundary() {
        let m = canonical22([[-1.0, 0.0], [1.0, -1.0]], [0.0, 1.0], [1.0, 0.0]);
        let report = check_c22_violation_profile(&m).unwrap();
        let row = report.condition("a_12<0").unwrap();
        assert!(!row.holds);
        assert_eq!(row.margin, 0.0);
    }

    #[test]
    fn c2_profile_reports_sign_block() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[-1.0,1.0],[-0.5,-1.0]],"b":[0.0,0.5],
                "beta":[[1.0,0.0],[1.0,0.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        let report = check_c2_violation_profile(&m).unwrap();
        assert!(report.all_hold(&["a_12>0", "a_11<0", "a_22<0", "det_a>0", "b_1>=0"]));
        assert_eq!(report.condition("det_a>0").unwrap().margin, 1.5);
    }

    #[test]
    fn margins_shift_linearly_and_locally() {
        let base = canonical22([[-1.0, 0.1], [0.2, -1.0]], [0.3, 0.4], [0.5, 0.5]);
        let delta = 0.125; // exactly representable
        let mut bumped = base.clone();
        bumped.a[(0, 1)] += delta;
        let before = check_canonical_feller(&base).unwrap();
        let after = check_canonical_feller(&bumped).unwrap();
        for (x, y) in before.conditions.iter().zip(after.conditions.iter()) {
            assert_eq!(x.name, y.name);
            if x.name == "a_12>=0" {
                assert_eq!(y.margin - x.margin, delta);
            } else {
                assert_eq!(x.margin, y.margin, "unexpected change in {}", x.name);
            }
        }
    }
}
