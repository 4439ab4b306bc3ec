//! Projection of dynamics predictions onto learned velocity constraints.
//!
//! Given constraint rows `G ẋ + g = 0`, the closest feasible velocity to a
//! prediction `ẋ_pred` (minimum-norm correction in the Euclidean sense) has
//! the closed form
//!
//! ```text
//! ẋ* = ẋ_pred − Gᵀ (G Gᵀ)⁻¹ (G ẋ_pred + g)
//! ```
//!
//! i.e. the solution of the equality-constrained least-squares problem
//! `min ‖ẋ − ẋ_pred‖² s.t. G ẋ + g = 0`. Degenerate constraint rows (an
//! all-zero `G`, or a severely ill-conditioned `G Gᵀ`) are handled
//! conservatively: the all-zero case leaves the prediction untouched, and
//! ill-conditioning adds a small Tikhonov term; both raise a flag on the
//! result rather than failing.

use crate::gp::DynamicsModel;
use crate::manifold::ManifoldModel;
use nalgebra::{DMatrix, DVector};

/// Condition-number ceiling for `G Gᵀ` before Tikhonov regularization.
const MAX_CONDITION: f64 = 1e10;
/// Relative Tikhonov strength: `λ = 1e-8 · trace(G Gᵀ) / c`.
const TIKHONOV_REL: f64 = 1e-8;
/// Below this Frobenius norm, `G` counts as all-zero.
const ZERO_G_NORM: f64 = 1e-14;

/// Outcome of projecting one prediction.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// The feasible velocity `ẋ*`.
    pub projected: DVector<f64>,
    /// Constraint residual `G ẋ_pred + g` before projecting.
    pub residual_before: DVector<f64>,
    /// `‖ẋ* − ẋ_pred‖`.
    pub correction_norm: f64,
    /// Set when the constraint rows were unusable as given (all-zero `G`)
    /// or needed regularization to invert.
    pub degenerate: bool,
}

/// Project `xdot` onto the affine set `{ẋ : G ẋ + g = 0}`.
pub fn project(g_mat: &DMatrix<f64>, g_vec: &DVector<f64>, xdot: &DVector<f64>) -> ProjectionResult {
    let c = g_mat.nrows();
    let n = g_mat.ncols();
    assert_eq!(g_vec.len(), c, "constraint offset length mismatch");
    assert_eq!(xdot.len(), n, "velocity dimension mismatch");

    // No constraint rows: nothing to project onto.
    if c == 0 {
        return ProjectionResult {
            projected: xdot.clone(),
            residual_before: DVector::zeros(0),
            correction_norm: 0.0,
            degenerate: false,
        };
    }

    let residual_before = g_mat * xdot + g_vec;
    if g_mat.norm() < ZERO_G_NORM {
        return ProjectionResult {
            projected: xdot.clone(),
            residual_before,
            correction_norm: 0.0,
            degenerate: true,
        };
    }

    let mut s = g_mat * g_mat.transpose();
    let eigen = s.clone().symmetric_eigen().eigenvalues;
    let lambda_max = eigen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eigen.iter().copied().fold(f64::INFINITY, f64::min);
    let mut degenerate = false;
    if !(lambda_min > 0.0 && lambda_max / lambda_min < MAX_CONDITION) {
        let lambda = TIKHONOV_REL * s.trace() / c as f64;
        for i in 0..c {
            s[(i, i)] += lambda;
        }
        degenerate = true;
    }

    let z = match s.clone().cholesky() {
        Some(chol) => chol.solve(&residual_before),
        None => match s.lu().solve(&residual_before) {
            Some(z) => {
                degenerate = true;
                z
            }
            None => {
                // Unsalvageable rows: leave the prediction untouched.
                return ProjectionResult {
                    projected: xdot.clone(),
                    residual_before,
                    correction_norm: 0.0,
                    degenerate: true,
                };
            }
        },
    };
    let correction = g_mat.transpose() * z;
    ProjectionResult {
        projected: xdot - &correction,
        residual_before,
        correction_norm: correction.norm(),
        degenerate,
    }
}

/// Predict dynamics and project the prediction onto the learned manifold.
///
/// Returns the raw prediction alongside the projection outcome; with a
/// constraint-free manifold the projection is the identity.
pub fn predict_projected(
    model: &dyn DynamicsModel,
    manifold: &ManifoldModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, ProjectionResult) {
    let raw = model.predict_dynamics(x, u);
    let (g_mat, g_vec) = manifold.constraint_at(x);
    let result = project(&g_mat, &g_vec, &raw);
    (raw, result)
}

/// A dynamics model whose predictions are projected onto a learned
/// constraint manifold.
pub struct ProjectedDynamics<'a> {
    pub model: &'a dyn DynamicsModel,
    pub manifold: &'a ManifoldModel,
}

impl DynamicsModel for ProjectedDynamics<'_> {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        predict_projected(self.model, self.manifold, x, u).1.projected
    }
}

/// A dynamics model whose predictions are projected onto the *analytic*
/// constraint of a known system — the upper bound a learned manifold can
/// reach.
pub struct TrueProjectedDynamics<'a> {
    pub model: &'a dyn DynamicsModel,
    pub system: &'a dyn crate::systems::System,
}

impl DynamicsModel for TrueProjectedDynamics<'_> {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let raw = self.model.predict_dynamics(x, u);
        let gamma = self.system.true_constraint(x);
        let n = x.len();
        let g_mat = gamma.columns(0, n).into_owned();
        let g_vec = gamma.column(n).into_owned();
        project(&g_mat, &g_vec, &raw).projected
    }
}
