//! Model definition, validation and classification.
//!
//! A model is the data of the affine square-root SDE
//!
//! ```text
//!     dX_t = (a X_t + b) dt + Sigma sqrt(|v(X_t)|) dW_t,   v_i(x) = alpha_i + beta_i . x,
//! ```
//!
//! together with a start point `x0`. The number `m` of genuine volatility
//! factors is the numerical rank of `beta`.
//!
//! Classification is structural:
//!
//! * *canonical* — `Sigma = I` and `v_i(x) = x_i` for the first `m` factors
//!   (`alpha_i = 0`, `beta_i = e_i`);
//! * *proportional* — all factor pairs `(alpha_i, beta_i)` coincide, so a
//!   single scalar factor drives every coordinate;
//! * the canonical + non-negativity conditions of [`crate::feller`] single
//!   out the subclass whose factors stay non-negative from a non-negative
//!   start.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feller::{self, Condition};

/// Absolute tolerance for exact structural statements (identity matrices,
/// zero intercepts, proportionality of factor rows).
pub const STRUCT_TOL: f64 = 1e-12;
/// `|det Sigma|` must exceed this for the noise map to count as invertible.
pub const SIGMA_SINGULAR_TOL: f64 = 1e-12;
/// Volatility factors at the start point may be negative by at most this.
pub const V0_TOL: f64 = 1e-12;
/// Relative singular-value threshold used for the rank of `beta`.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Sign convention used throughout the crate: `sgn(x) = -1` for `x < 0` and
/// `+1` otherwise (in particular `sgn(0) = +1`).
pub fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// An affine square-root SDE model.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeModel {
    pub p: usize,
    /// Drift matrix, `p x p`.
    pub a: DMatrix<f64>,
    /// Drift intercept.
    pub b: DVector<f64>,
    /// Invertible noise map.
    pub sigma: DMatrix<f64>,
    /// Factor intercepts.
    pub alpha: DVector<f64>,
    /// Factor loadings; row `i` is `beta_i`.
    pub beta: DMatrix<f64>,
    /// Start point; all factors must satisfy `v_i(x0) >= 0` up to [`V0_TOL`].
    pub x0: DVector<f64>,
    /// Numerical rank of `beta`.
    pub m: usize,
}

/// On-disk JSON schema. `sigma` defaults to the identity and `alpha` to the
/// zero vector when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    p: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    x0: Vec<f64>,
}

fn matrix_from_rows(name: &str, p: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.len() != p {
        return Err(Error::InvalidInput(format!(
            "field '{name}': expected {p} rows, got {}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(Error::InvalidInput(format!(
                "field '{name}', row {i}: expected {p} entries, got {}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

fn vector_from(name: &str, p: usize, v: &[f64]) -> Result<DVector<f64>> {
    if v.len() != p {
        return Err(Error::InvalidInput(format!(
            "field '{name}': expected {p} entries, got {}",
            v.len()
        )));
    }
    Ok(DVector::from_column_slice(v))
}

fn finite_check(name: &str, it: impl Iterator<Item = f64>) -> Result<()> {
    for (k, x) in it.enumerate() {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!(
                "field '{name}', entry {k}: non-finite value {x}"
            )));
        }
    }
    Ok(())
}

impl SdeModel {
    /// Builds a model from raw parts, running the full validation:
    /// dimensions, finiteness, invertibility of `Sigma`, non-negativity of
    /// every factor at `x0`, and the numerical rank of `beta`.
    pub fn new(
        p: usize,
        a: DMatrix<f64>,
        b: DVector<f64>,
        sigma: DMatrix<f64>,
        alpha: DVector<f64>,
        beta: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidInput("dimension p must be positive".into()));
        }
        for (name, mat) in [("a", &a), ("sigma", &sigma), ("beta", &beta)] {
            if mat.nrows() != p || mat.ncols() != p {
                return Err(Error::InvalidInput(format!(
                    "field '{name}': expected {p}x{p}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            finite_check(name, mat.iter().copied())?;
        }
        for (name, vec) in [("b", &b), ("alpha", &alpha), ("x0", &x0)] {
            if vec.len() != p {
                return Err(Error::InvalidInput(format!(
                    "field '{name}': expected {p} entries, got {}",
                    vec.len()
                )));
            }
            finite_check(name, vec.iter().copied())?;
        }

        let det = sigma.determinant();
        if det.abs() <= SIGMA_SINGULAR_TOL {
            return Err(Error::InvalidInput(format!(
                "sigma is numerically singular (|det| = {:.3e} <= {SIGMA_SINGULAR_TOL:.0e})",
                det.abs()
            )));
        }

        let v0 = &alpha + &beta * &x0;
        for i in 0..p {
            if v0[i] < -V0_TOL {
                return Err(Error::InvalidInput(format!(
                    "volatility factor {} is negative at x0: v_{}(x0) = {:.6e}",
                    i + 1,
                    i + 1,
                    v0[i]
                )));
            }
        }

        let m = numerical_rank(&beta);
        Ok(SdeModel {
            p,
            a,
            b,
            sigma,
            alpha,
            beta,
            x0,
            m,
        })
    }

    /// Parses and validates a model from its JSON representation.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)
            .map_err(|e| Error::InvalidInput(format!("model JSON: {e}")))?;
        let p = file.p;
        let a = matrix_from_rows("a", p, &file.a)?;
        let b = vector_from("b", p, &file.b)?;
        let sigma = match &file.sigma {
            Some(rows) => matrix_from_rows("sigma", p, rows)?,
            None => DMatrix::identity(p, p),
        };
        let alpha = match &file.alpha {
            Some(v) => vector_from("alpha", p, v)?,
            None => DVector::zeros(p),
        };
        let beta = matrix_from_rows("beta", p, &file.beta)?;
        let x0 = vector_from("x0", p, &file.x0)?;
        SdeModel::new(p, a, b, sigma, alpha, beta, x0)
    }

    /// JSON representation using the same schema accepted by
    /// [`SdeModel::from_json_str`].
    pub fn to_json_value(&self) -> serde_json::Value {
        let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..self.p)
                .map(|i| (0..self.p).map(|j| mat[(i, j)]).collect())
                .collect()
        };
        let file = ModelFile {
            p: self.p,
            a: rows(&self.a),
            b: self.b.iter().copied().collect(),
            sigma: Some(rows(&self.sigma)),
            alpha: Some(self.alpha.iter().copied().collect()),
            beta: rows(&self.beta),
            x0: self.x0.iter().copied().collect(),
        };
        serde_json::to_value(file).expect("model serialization cannot fail")
    }

    /// Evaluates the volatility factors `v(x) = alpha + beta x`.
    pub fn volatility(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.alpha + &self.beta * x
    }

    /// `true` when `Sigma = I` and the first `m` factors are the coordinates
    /// themselves (`alpha_i = 0`, `beta_i = e_i`), all up to [`STRUCT_TOL`].
    pub fn is_canonical(&self) -> bool {
        let sigma_dev = max_abs_dev_identity(&self.sigma);
        if sigma_dev > STRUCT_TOL {
            return false;
        }
        for i in 0..self.m {
            if self.alpha[i].abs() > STRUCT_TOL {
                return false;
            }
            for j in 0..self.p {
                let target = if i == j { 1.0 } else { 0.0 };
                if (self.beta[(i, j)] - target).abs() > STRUCT_TOL {
                    return false;
                }
            }
        }
        true
    }

    /// `true` when all factor pairs `(alpha_i, beta_i)` coincide up to
    /// [`STRUCT_TOL`], i.e. a single scalar factor drives every coordinate.
    pub fn is_proportional(&self) -> bool {
        for i in 1..self.p {
            if (self.alpha[i] - self.alpha[0]).abs() > STRUCT_TOL {
                return false;
            }
            for j in 0..self.p {
                if (self.beta[(i, j)] - self.beta[(0, j)]).abs() > STRUCT_TOL {
                    return false;
                }
            }
        }
        true
    }

    /// Structural classification of the model; see [`ClassTag`].
    pub fn classify(&self) -> SdeClass {
        let canonical = self.is_canonical();
        let proportional = self.is_proportional();

        let mut conditions = vec![
            Condition::equality("sigma=I", max_abs_dev_identity(&self.sigma)),
            Condition::equality("factors_canonical", self.canonical_factor_dev()),
            Condition::equality("factors_proportional", self.proportional_dev()),
        ];

        let feller_ok = if canonical {
            let rows = feller::eq_condition_rows(self);
            let ok = rows.iter().all(|c| c.holds);
            conditions.extend(rows);
            Some(ok)
        } else {
            None
        };

        let tag = match (canonical, proportional, feller_ok) {
            (true, true, _) => ClassTag::ProportionalCanonical,
            (true, false, Some(true)) => ClassTag::CanonicalFeller,
            (true, false, _) => ClassTag::Canonical,
            (false, true, _) => ClassTag::Proportional,
            (false, false, _) => ClassTag::General,
        };

        SdeClass {
            tag,
            p: self.p,
            m: self.m,
            feller: feller_ok,
            satisfied_conditions: conditions,
        }
    }

    fn canonical_factor_dev(&self) -> f64 {
        let mut dev: f64 = max_abs_dev_identity(&self.sigma);
        for i in 0..self.m {
            dev = dev.max(self.alpha[i].abs());
            for j in 0..self.p {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((self.beta[(i, j)] - target).abs());
            }
        }
        dev
    }

    fn proportional_dev(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 1..self.p {
            dev = dev.max((self.alpha[i] - self.alpha[0]).abs());
            for j in 0..self.p {
                dev = dev.max((self.beta[(i, j)] - self.beta[(0, j)]).abs());
            }
        }
        dev
    }
}

fn max_abs_dev_identity(mat: &DMatrix<f64>) -> f64 {
    let mut dev: f64 = 0.0;
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((mat[(i, j)] - target).abs());
        }
    }
    dev
}

/// Number of singular values above `RANK_REL_TOL` times the largest one.
pub fn numerical_rank(mat: &DMatrix<f64>) -> usize {
    let sv = mat.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_REL_TOL * max).count()
}

/// Structural class of a model, from least to most special.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassTag {
    /// No special structure.
    General,
    /// `Sigma = I`, first `m` factors are coordinates.
    Canonical,
    /// Canonical and all non-negativity conditions hold, so factors stay
    /// non-negative from a non-negative start.
    CanonicalFeller,
    /// All factor pairs coincide.
    Proportional,
    /// Proportional and canonical: every coordinate is driven by
    /// `sqrt(|x_1|)`.
    ProportionalCanonical,
}

/// Classification result: the most specific tag plus the individual
/// structural conditions (with margins) that were evaluated to reach it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeClass {
    pub tag: ClassTag,
    pub p: usize,
    pub m: usize,
    /// For canonical models, whether all non-negativity conditions hold;
    /// `None` otherwise.
    pub feller: Option<bool>,
    pub satisfied_conditions: Vec<Condition>,
}

impl SdeClass {
    /// Canonical with all non-negativity conditions: the class for which the
    /// tilt densities are exact martingales without further work.
    pub fn is_canonical_feller(&self) -> bool {
        self.feller == Some(true)
    }

    /// Short display such as `S_2(3)`, `C_2(2)`, `A_1(2)`, `S(2)` or `C(2)`.
    pub fn display_name(&self) -> String {
        match self.tag {
            ClassTag::General => format!("S_{}({})", self.m, self.p),
            ClassTag::Canonical => format!("C_{}({})", self.m, self.p),
            ClassTag::CanonicalFeller => format!("A_{}({})", self.m, self.p),
            ClassTag::Proportional => format!("S({})", self.p),
            ClassTag::ProportionalCanonical => format!("C({})", self.p),
        }
    }
}

impl std::fmt::Display for SdeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.display_name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn canonical_model(a: [[f64; 2]; 2], b: [f64; 2], x0: [f64; 2]) -> SdeModel {
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

    #[test]
    fn parses_with_defaults() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,1.0],[1.0,0.0]],"b":[0.1,0.2],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap();
        assert_eq!(m.sigma, DMatrix::identity(2, 2));
        assert_eq!(m.alpha, DVector::zeros(2));
        assert_eq!(m.m, 2);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,1.0]],"b":[0.1,0.2],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn rejects_singular_sigma() {
        let err = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "sigma":[[1.0,1.0],[1.0,1.0]],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("singular"), "{err}");
    }

    #[test]
    fn rejects_negative_factor_at_start() {
        let err = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,-0.5]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("v_2"), "{err}");
    }

    #[test]
    fn accepts_exact_zero_factor_at_start() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        assert_eq!(m.volatility(&m.x0)[1], 0.0);
    }

    #[test]
    fn volatility_evaluation() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "alpha":[0.5,-0.5],"beta":[[1.0,1.0],[2.0,0.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap();
        let v = m.volatility(&DVector::from_column_slice(&[1.0, 1.0]));
        assert_eq!(v[0], 2.5);
        assert_eq!(v[1], 1.5);
    }

    #[test]
    fn rank_counts_genuine_factors() {
        let full = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "beta":[[1.0,0.0],[0.0,1.0]],"x0":[1.0,1.0]}"#,
        )
        .unwrap();
        assert_eq!(full.m, 2);
        let prop = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "beta":[[1.0,0.0],[1.0,0.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        assert_eq!(prop.m, 1);
        let zero = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],"alpha":[1.0,1.0],
                "beta":[[0.0,0.0],[0.0,0.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        assert_eq!(zero.m, 0);
    }

    #[test]
    fn classify_canonical_feller() {
        let m = canonical_model([[-1.0, 0.1], [0.1, -1.0]], [0.2, 0.3], [0.5, 0.5]);
        let class = m.classify();
        assert_eq!(class.tag, ClassTag::CanonicalFeller);
        assert_eq!(class.display_name(), "A_2(2)");
        assert!(class.is_canonical_feller());
    }

    #[test]
    fn classify_canonical_with_negative_intercept() {
        let m = canonical_model([[-1.0, 0.1], [0.1, -1.0]], [0.2, -0.3], [0.5, 0.5]);
        let class = m.classify();
        assert_eq!(class.tag, ClassTag::Canonical);
        let b2 = class
            .satisfied_conditions
            .iter()
            .find(|c| c.name == "b_2>=0")
            .unwrap();
        assert!(!b2.holds);
        assert_eq!(b2.margin, -0.3);
    }

    #[test]
    fn classify_proportional_non_canonical() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[0.0,0.0],[0.0,0.0]],"b":[0.0,0.0],
                "sigma":[[2.0,0.0],[0.0,2.0]],"alpha":[0.5,0.5],
                "beta":[[1.0,0.0],[1.0,0.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        let class = m.classify();
        assert_eq!(class.tag, ClassTag::Proportional);
        assert_eq!(class.display_name(), "S(2)");
    }

    #[test]
    fn classify_proportional_canonical() {
        let m = SdeModel::from_json_str(
            r#"{"p":2,"a":[[-1.0,1.0],[-0.5,-1.0]],"b":[0.0,0.5],
                "beta":[[1.0,0.0],[1.0,0.0]],"x0":[1.0,0.0]}"#,
        )
        .unwrap();
        let class = m.classify();
        assert_eq!(class.tag, ClassTag::ProportionalCanonical);
        assert_eq!(class.display_name(), "C(2)");
        assert_eq!(class.m, 1);
    }

    #[test]
    fn json_round_trip_preserves_model() {
        let m = canonical_model([[-1.0, -1.0], [1.0, -1.0]], [0.0, 1.0], [1.0, 0.0]);
        let back = SdeModel::from_json_str(&m.to_json_value().to_string()).unwrap();
        assert_eq!(m, back);
    }
}
