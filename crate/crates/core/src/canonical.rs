//! Affine change of coordinates to canonical form for models with
//! proportional volatility factors.
//!
//! When every coordinate is driven by the same factor `v_1(x) = alpha_1 +
//! beta_1 . x` (and `Sigma` is invertible), the affine map `Xtilde = K X + l`
//! with
//!
//! ```text
//!     c   = 1 / |beta_1 Sigma|^2,
//!     K   = sqrt(c) . stack(u; M) . Sigma^{-1},   u = beta_1 Sigma / |beta_1 Sigma|,
//!     l_1 = c alpha_1,   l_j = 0 (j > 1),
//! ```
//!
//! where `M` completes `u` to an orthonormal basis, turns the model into one
//! with `Sigma = I` and every factor equal to the first coordinate:
//! `(K x + l)_1 = c v_1(x)`, and `(K Sigma) / sqrt(c)` is orthogonal, so the
//! rotated Brownian motion is again a Brownian motion. Finally coordinates
//! `j > 1` with a negative transformed coupling `a~_1j` are negated, which
//! leaves the factor untouched and makes the first drift row's off-diagonal
//! entries non-negative.
//!
//! For the 2-dimensional canonical proportional model the additional
//! substitution `Y = X_2 + b_1 / a_12` removes the first intercept entirely
//! ([`eliminate_b1`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassTag, SdeModel};

/// Unit-norm check tolerance for [`complete_orthonormal`] inputs.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Residual-norm threshold below which a basis candidate is skipped as
/// near-parallel during Gram-Schmidt completion.
pub const GS_RESIDUAL_THRESHOLD: f64 = 0.5;

/// Result of [`canonicalize`]: the affine map, its scale, the transformed
/// model and which coordinates were negated.
#[derive(Debug, Clone)]
pub struct CanonicalTransform {
    /// Linear part of the map `Xtilde = K X + l`.
    pub k: DMatrix<f64>,
    /// Affine part; only the first entry is non-zero.
    pub ell: DVector<f64>,
    /// Factor scale `c = 1 / |beta_1 Sigma|^2`; the first transformed
    /// coordinate equals `c v_1(x)`.
    pub c: f64,
    /// The transformed model (canonical, proportional).
    pub model: SdeModel,
    /// 0-based indices of coordinates that were negated (never contains 0).
    pub sign_flips: Vec<usize>,
}

impl CanonicalTransform {
    /// Inverse linear part `K^{-1} = Sigma Q^T / sqrt(c)` of the map, exact
    /// up to rounding by orthogonality of `Q = (K Sigma) / sqrt(c)`.
    pub fn k_inverse(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.k * sigma / self.c.sqrt();
        sigma * q.transpose() / self.c.sqrt()
    }

    /// JSON representation of the transform.
    pub fn to_json_value(&self) -> serde_json::Value {
        let p = self.model.p;
        let rows: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..p).map(|j| self.k[(i, j)]).collect())
            .collect();
        serde_json::json!({
            "K": rows,
            "ell": self.ell.iter().copied().collect::<Vec<f64>>(),
            "c": self.c,
            "sign_flips": self.sign_flips,
            "model": self.model.to_json_value(),
        })
    }
}

/// Completes a unit vector `u` to an orthonormal basis with `u` as the first
/// row. Standard basis vectors are orthogonalized in index order, skipping
/// candidates whose residual norm is at most [`GS_RESIDUAL_THRESHOLD`]; each
/// added row is normalized and its first non-negligible entry made positive.
/// The procedure is deterministic in `u` and always completes (a counting
/// argument over residual masses shows a stuck scan is impossible at
/// threshold 1/2).
pub fn complete_orthonormal(u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = u.len();
    if (u.norm() - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidInput(format!(
            "direction must have unit norm, got |u| = {}",
            u.norm()
        )));
    }
    let mut rows: Vec<DVector<f64>> = vec![u.clone()];
    for i in 0..p {
        if rows.len() == p {
            break;
        }
        let mut r = DVector::zeros(p);
        r[i] = 1.0;
        // Two projection passes keep the residual orthogonal to working
        // precision even for nearly-parallel candidates.
        for _ in 0..2 {
            for row in &rows {
                let proj = row.dot(&r);
                r -= row * proj;
            }
        }
        let norm = r.norm();
        if norm <= GS_RESIDUAL_THRESHOLD {
            continue;
        }
        r /= norm;
        if let Some(first) = r.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                r = -r;
            }
        }
        rows.push(r);
    }
    if rows.len() != p {
        return Err(Error::InternalConsistency(
            "orthonormal completion did not produce a full basis".into(),
        ));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

/// Brings a model with proportional volatility factors to canonical form.
/// See the module docs for the construction; the returned transform carries
/// the map, the scale `c` and the transformed model.
pub fn canonicalize(model: &SdeModel) -> Result<CanonicalTransform> {
    if !model.is_proportional() {
        return Err(Error::ClassMismatch(
            "canonicalization requires proportional volatility factors".into(),
        ));
    }
    let p = model.p;
    let beta1 = model.beta.row(0).transpose();
    let u_raw = model.sigma.transpose() * &beta1; // (beta_1 Sigma)^T
    let norm = u_raw.norm();
    if norm == 0.0 {
        return Err(Error::Hypothesis(
            "degenerate volatility: beta_1 = 0".into(),
        ));
    }
    let c = 1.0 / (norm * norm);
    let u = &u_raw / norm;

    let sigma_inv = model
        .sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("sigma is not invertible".into()))?;

    let mut q = complete_orthonormal(&u)?;
    let build = |q: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let k = q * &sigma_inv * c.sqrt();
        let k_inv = &model.sigma * q.transpose() / c.sqrt();
        (k, k_inv)
    };

    let (k0, k0_inv) = build(&q);
    let a0 = &k0 * &model.a * &k0_inv;
    let sign_flips: Vec<usize> = (1..p).filter(|&j| a0[(0, j)] < 0.0).collect();
    for &j in &sign_flips {
        for col in 0..p {
            q[(j, col)] = -q[(j, col)];
        }
    }
    let (k, k_inv) = build(&q);

    let mut ell = DVector::zeros(p);
    ell[0] = c * model.alpha[0];

    let a_t = &k * &model.a * &k_inv;
    let b_t = &k * &model.b - &a_t * &ell;
    let x0_t = &k * &model.x0 + &ell;

    let mut beta_t = DMatrix::zeros(p, p);
    for i in 0..p {
        beta_t[(i, 0)] = 1.0;
    }
    let transformed = SdeModel::new(
        p,
        a_t,
        b_t,
        DMatrix::identity(p, p),
        DVector::zeros(p),
        beta_t,
        x0_t,
    )
    .map_err(|e| {
        Error::InternalConsistency(format!("transformed model failed validation: {e}"))
    })?;

    Ok(CanonicalTransform {
        k,
        ell,
        c,
        model: transformed,
        sign_flips,
    })
}

/// Removes the first drift intercept of a 2-dimensional canonical
/// proportional model by shifting the second coordinate:
///
/// ```text
///     Y = X_2 + b_1 / a_12,
/// ```
///
/// which leaves the factor `V = X_1` and the drift matrix unchanged and
/// maps the intercept to `(0, b_2 - a_22 b_1 / a_12)`. The induced
/// parameter change is validated pathwise against direct simulation in the
/// integration tests: with shared noise the shifted model reproduces the
/// original factor path exactly.
pub fn eliminate_b1(model: &SdeModel) -> Result<SdeModel> {
    let class = model.classify();
    if class.tag != ClassTag::ProportionalCanonical || model.p != 2 {
        return Err(Error::ClassMismatch(format!(
            "intercept elimination requires a 2-dimensional canonical proportional model, got {}",
            class.display_name()
        )));
    }
    let a12 = model.a[(0, 1)];
    if a12 == 0.0 {
        return Err(Error::Hypothesis(
            "substitution undefined: a_12 = 0".into(),
        ));
    }
    let b1 = model.b[0];
    let shift = b1 / a12;
    let b2 = model.b[1] - model.a[(1, 1)] * shift;
    let x0 = DVector::from_column_slice(&[model.x0[0], model.x0[1] + shift]);
    SdeModel::new(
        2,
        model.a.clone(),
        DVector::from_column_slice(&[0.0, b2]),
        model.sigma.clone(),
        model.alpha.clone(),
        model.beta.clone(),
        x0,
    )
}

/// Serializable summary of [`CanonicalTransform`] used by the command-line
/// tool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformSummary {
    pub c: f64,
    pub sign_flips: Vec<usize>,
}
