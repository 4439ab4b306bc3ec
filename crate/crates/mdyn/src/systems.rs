//! Benchmark dynamical systems with known ground truth.
//!
//! Both systems expose exact dynamics `ẋ = f(x, u)`, actuator bounds, and
//! the analytic constraint `Γ(x) = [G(x) | g(x)]` satisfied by every
//! admissible derivative, `G(x)·ẋ + g(x) = 0`. Constraints are returned in
//! the same standardized (reduced-row-echelon) form the learning pipeline
//! produces, so learned and analytic constraints compare entrywise.
//!
//! The constraint row count is the dimension of the *normal space* of
//! achievable derivatives. For the velocity-controlled unicycle that is the
//! single no-side-slip row. The planar quadrotor is underactuated: only two
//! of its six derivative components respond to the controls, so its normal
//! space has four rows — three kinematic identities (`ṗ_x = v_x`,
//! `ṗ_z = v_z`, `θ̇ = ω`, each a row with a state-dependent bias) plus the
//! thrust-direction row `cosθ·v̇_x + sinθ·v̇_z + g·sinθ = 0`.

use crate::datasets::Trajectory;
use crate::linalg::{rref, DEFAULT_RREF_TOL};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("control[{dim}] = {value} outside bounds [{lo}, {hi}]")]
    ControlOutOfBounds {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("rollout produced a non-finite state at step {step}")]
    RolloutDiverged { step: usize },
    #[error("rollout needs at least one control")]
    EmptyControls,
}

/// A simulated system with exact dynamics and known constraint structure.
pub trait System {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Number of rows of the analytic constraint (normal-space dimension).
    fn constraint_count(&self) -> usize;
    fn state_names(&self) -> Vec<&'static str>;
    fn control_names(&self) -> Vec<&'static str>;
    /// Closed actuator interval per control dimension.
    fn control_bounds(&self) -> Vec<(f64, f64)>;
    /// State coordinates the dynamics are invariant to (sparsity ground truth).
    fn invariant_state_dims(&self) -> Vec<usize>;
    /// Exact derivative `f(x, u)`; dimensions are the caller's responsibility.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Analytic constraint `[G(x) | g(x)]`, standardized via rref.
    fn true_constraint(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Validated dynamics evaluation: checks dimensions and actuator bounds.
pub fn eval_dynamics(
    sys: &dyn System,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, SystemError> {
    if x.len() != sys.state_dim() {
        return Err(SystemError::DimensionMismatch {
            what: "state",
            expected: sys.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != sys.control_dim() {
        return Err(SystemError::DimensionMismatch {
            what: "control",
            expected: sys.control_dim(),
            got: u.len(),
        });
    }
    for (dim, (&(lo, hi), &value)) in sys.control_bounds().iter().zip(u.iter()).enumerate() {
        if !(lo..=hi).contains(&value) {
            return Err(SystemError::ControlOutOfBounds {
                dim,
                value,
                lo,
                hi,
            });
        }
    }
    Ok(sys.dynamics(x, u))
}

/// Uniform sample from the actuator box.
pub fn uniform_control<R: Rng>(sys: &dyn System, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(
        sys.control_dim(),
        sys.control_bounds()
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..=hi)),
    )
}

/// One classic fourth-order Runge–Kutta step under a zero-order-hold control.
pub fn rk4_step(sys: &dyn System, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = sys.dynamics(x, u);
    let k2 = sys.dynamics(&(x + &k1 * (dt / 2.0)), u);
    let k3 = sys.dynamics(&(x + &k2 * (dt / 2.0)), u);
    let k4 = sys.dynamics(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Integrate a control sequence from `x0` and record exact derivatives at
/// every visited state.
///
/// A sequence of `T-1` controls yields `T` states. The derivative stored for
/// the final state reuses the last control (zero-order hold), so every state
/// carries a supervised `(x, u, ẋ)` sample.
pub fn rollout(
    sys: &dyn System,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    dt: f64,
) -> Result<Trajectory, SystemError> {
    if controls.is_empty() {
        return Err(SystemError::EmptyControls);
    }
    if x0.len() != sys.state_dim() {
        return Err(SystemError::DimensionMismatch {
            what: "state",
            expected: sys.state_dim(),
            got: x0.len(),
        });
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut derivs = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (step, u) in controls.iter().enumerate() {
        let x = states.last().unwrap().clone();
        derivs.push(eval_dynamics(sys, &x, u)?);
        let next = rk4_step(sys, &x, u, dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::RolloutDiverged { step });
        }
        states.push(next);
    }
    let last_u = controls.last().unwrap();
    derivs.push(eval_dynamics(sys, states.last().unwrap(), last_u)?);
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        derivs,
        dt,
    })
}

/// Velocity-controlled unicycle (differential-drive kinematics).
///
/// State `[p_x, p_y, θ]`, control `[v, ω]`:
/// `ṗ_x = v·cosθ`, `ṗ_y = v·sinθ`, `θ̇ = ω`. The lateral no-slip constraint
/// is `−sinθ·ṗ_x + cosθ·ṗ_y = 0` (zero bias).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Unicycle {
    pub v_bounds: (f64, f64),
    pub omega_bounds: (f64, f64),
}

impl Default for Unicycle {
    fn default() -> Self {
        Unicycle {
            v_bounds: (0.15, 0.6),
            omega_bounds: (-0.4, 0.4),
        }
    }
}

impl System for Unicycle {
    fn name(&self) -> &'static str {
        "unicycle"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn constraint_count(&self) -> usize {
        1
    }
    fn state_names(&self) -> Vec<&'static str> {
        vec!["p_x", "p_y", "theta"]
    }
    fn control_names(&self) -> Vec<&'static str> {
        vec!["v", "omega"]
    }
    fn control_bounds(&self) -> Vec<(f64, f64)> {
        vec![self.v_bounds, self.omega_bounds]
    }
    fn invariant_state_dims(&self) -> Vec<usize> {
        vec![0, 1]
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let theta = x[2];
        DVector::from_row_slice(&[u[0] * theta.cos(), u[0] * theta.sin(), u[1]])
    }
    fn true_constraint(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let theta = x[2];
        let raw = DMatrix::from_row_slice(1, 4, &[-theta.sin(), theta.cos(), 0.0, 0.0]);
        rref(&raw, DEFAULT_RREF_TOL).0
    }
}

/// Planar quadrotor with two rotor thrusts.
///
/// State `[p_x, p_z, θ, v_x, v_z, ω]`, control `[u_1, u_2]` (individual
/// rotor thrusts):
///
/// ```text
/// ṗ_x = v_x                v̇_x = −(u_1 + u_2)·sinθ / m
/// ṗ_z = v_z                v̇_z =  (u_1 + u_2)·cosθ / m − g
/// θ̇  = ω                   ω̇  =  (u_2 − u_1)·L / I
/// ```
///
/// The thrust-direction constraint `cosθ·v̇_x + sinθ·v̇_z + g·sinθ = 0` has a
/// nonzero, state-dependent bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarQuadrotor {
    pub mass: f64,
    pub inertia: f64,
    pub arm: f64,
    pub gravity: f64,
    /// Per-rotor thrust interval; default is hover ±10%.
    pub thrust_bounds: (f64, f64),
}

impl Default for PlanarQuadrotor {
    fn default() -> Self {
        let mass = 0.5;
        let gravity = 9.81;
        let hover = mass * gravity / 2.0;
        PlanarQuadrotor {
            mass,
            inertia: 0.04,
            arm: 0.2,
            gravity,
            thrust_bounds: (0.9 * hover, 1.1 * hover),
        }
    }
}

impl System for PlanarQuadrotor {
    fn name(&self) -> &'static str {
        "planar_quadrotor"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn constraint_count(&self) -> usize {
        4
    }
    fn state_names(&self) -> Vec<&'static str> {
        vec!["p_x", "p_z", "theta", "v_x", "v_z", "omega"]
    }
    fn control_names(&self) -> Vec<&'static str> {
        vec!["u1", "u2"]
    }
    fn control_bounds(&self) -> Vec<(f64, f64)> {
        vec![self.thrust_bounds, self.thrust_bounds]
    }
    fn invariant_state_dims(&self) -> Vec<usize> {
        vec![0, 1]
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (theta, v_x, v_z, omega) = (x[2], x[3], x[4], x[5]);
        let thrust = u[0] + u[1];
        DVector::from_row_slice(&[
            v_x,
            v_z,
            omega,
            -thrust * theta.sin() / self.mass,
            thrust * theta.cos() / self.mass - self.gravity,
            (u[1] - u[0]) * self.arm / self.inertia,
        ])
    }
    fn true_constraint(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (theta, v_x, v_z, omega) = (x[2], x[3], x[4], x[5]);
        #[rustfmt::skip]
        let raw = DMatrix::from_row_slice(4, 7, &[
            1.0, 0.0, 0.0, 0.0,         0.0,         0.0, -v_x,
            0.0, 1.0, 0.0, 0.0,         0.0,         0.0, -v_z,
            0.0, 0.0, 1.0, 0.0,         0.0,         0.0, -omega,
            0.0, 0.0, 0.0, theta.cos(), theta.sin(), 0.0, self.gravity * theta.sin(),
        ]);
        rref(&raw, DEFAULT_RREF_TOL).0
    }
}

/// Systems shipped with the crate, for config-driven construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Unicycle,
    PlanarQuadrotor,
}

impl SystemKind {
    pub fn build(self) -> Box<dyn System> {
        match self {
            SystemKind::Unicycle => Box::new(Unicycle::default()),
            SystemKind::PlanarQuadrotor => Box::new(PlanarQuadrotor::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn unicycle_dynamics_known_values() {
        let sys = Unicycle {
            v_bounds: (0.0, 2.0),
            omega_bounds: (-2.0, 2.0),
        };
        let f = eval_dynamics(&sys, &vec(&[0.0, 0.0, 0.0]), &vec(&[1.0, 0.0])).unwrap();
        assert_eq!(f, vec(&[1.0, 0.0, 0.0]));
        let f = eval_dynamics(&sys, &vec(&[3.0, -1.0, FRAC_PI_2]), &vec(&[1.0, 0.0])).unwrap();
        assert_relative_eq!(f, vec(&[0.0, 1.0, 0.0]), epsilon = 1e-12);
        let f = eval_dynamics(&sys, &vec(&[0.0, 0.0, 0.0]), &vec(&[0.0, 1.0])).unwrap();
        assert_eq!(f, vec(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn quadrotor_hover_is_an_equilibrium() {
        let sys = PlanarQuadrotor::default();
        let hover = sys.mass * sys.gravity / 2.0;
        let f = sys.dynamics(&vec(&[0.0; 6]), &vec(&[hover, hover]));
        assert_relative_eq!(f, vec(&[0.0; 6]), epsilon = 1e-12);
    }

    #[test]
    fn dynamics_reject_bad_inputs() {
        let sys = Unicycle::default();
        let err = eval_dynamics(&sys, &vec(&[0.0, 0.0]), &vec(&[0.2, 0.0])).unwrap_err();
        assert!(matches!(err, SystemError::DimensionMismatch { .. }));
        let err = eval_dynamics(&sys, &vec(&[0.0, 0.0, 0.0]), &vec(&[5.0, 0.0])).unwrap_err();
        match err {
            SystemError::ControlOutOfBounds { dim, value, hi, .. } => {
                assert_eq!(dim, 0);
                assert_eq!(value, 5.0);
                assert_eq!(hi, 0.6);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unicycle_constraint_standardized_rows() {
        let sys = Unicycle::default();
        // θ = 0: the no-slip row reduces to ṗ_y = 0.
        let g = sys.true_constraint(&vec(&[0.0, 0.0, 0.0]));
        assert_relative_eq!(
            g,
            DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]),
            epsilon = 1e-12
        );
        // θ = π/4: leading coefficient normalized to one.
        let g = sys.true_constraint(&vec(&[0.0, 0.0, FRAC_PI_4]));
        assert_relative_eq!(
            g,
            DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 0.0, 0.0]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn quadrotor_constraint_standardized_rows() {
        let sys = PlanarQuadrotor::default();
        let g = sys.true_constraint(&vec(&[0.0; 6]));
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 7, &[
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
        ]);
        assert_relative_eq!(g, expected, epsilon = 1e-12);

        // Nonzero velocities show up as biases of the kinematic rows, and the
        // thrust row carries tanθ terms after normalization.
        let theta: f64 = 0.3;
        let g = sys.true_constraint(&vec(&[1.0, 2.0, theta, 0.5, -0.25, 0.75]));
        assert_relative_eq!(g[(0, 6)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(g[(1, 6)], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g[(2, 6)], -0.75, epsilon = 1e-12);
        assert_relative_eq!(g[(3, 4)], theta.tan(), epsilon = 1e-12);
        assert_relative_eq!(g[(3, 6)], sys.gravity * theta.tan(), epsilon = 1e-12);
    }

    #[test]
    fn constraints_annihilate_admissible_derivatives() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let systems: Vec<Box<dyn System>> = vec![
            Box::new(Unicycle::default()),
            Box::new(PlanarQuadrotor::default()),
        ];
        for sys in &systems {
            for _ in 0..1000 {
                let x = DVector::from_fn(sys.state_dim(), |_, _| rng.gen_range(-2.0..2.0));
                let u = uniform_control(sys.as_ref(), &mut rng);
                let f = eval_dynamics(sys.as_ref(), &x, &u).unwrap();
                let gamma = sys.true_constraint(&x);
                let lifted = f.clone().insert_row(sys.state_dim(), 1.0);
                let residual = gamma * lifted;
                assert!(
                    residual.amax() < 1e-9,
                    "{} constraint violated: {}",
                    sys.name(),
                    residual.amax()
                );
            }
        }
    }

    #[test]
    fn dynamics_ignore_position_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let systems: Vec<Box<dyn System>> = vec![
            Box::new(Unicycle::default()),
            Box::new(PlanarQuadrotor::default()),
        ];
        for sys in &systems {
            for _ in 0..100 {
                let x = DVector::from_fn(sys.state_dim(), |_, _| rng.gen_range(-2.0..2.0));
                let u = uniform_control(sys.as_ref(), &mut rng);
                let mut shifted = x.clone();
                for &d in &sys.invariant_state_dims() {
                    shifted[d] += rng.gen_range(-10.0..10.0);
                }
                assert_eq!(sys.dynamics(&x, &u), sys.dynamics(&shifted, &u));
            }
        }
    }

    #[test]
    fn rollout_straight_line() {
        let sys = Unicycle::default();
        let controls = vec![vec(&[0.5, 0.0]); 10];
        let traj = rollout(&sys, &vec(&[0.0, 0.0, 0.0]), &controls, 0.1).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.derivs.len(), 11);
        for (t, x) in traj.states.iter().enumerate() {
            assert_relative_eq!(x[0], 0.05 * t as f64, epsilon = 1e-12);
            assert_eq!(x[1], 0.0);
            assert_eq!(x[2], 0.0);
        }
    }

    #[test]
    fn rollout_unit_circle_arc() {
        // v = ω = 0.4 traces a circle of radius 1; closed form
        // x(t) = [sin(0.4 t), 1 − cos(0.4 t), 0.4 t].
        let sys = Unicycle::default();
        let controls = vec![vec(&[0.4, 0.4]); 1000];
        let traj = rollout(&sys, &vec(&[0.0, 0.0, 0.0]), &controls, 1e-3).unwrap();
        let t: f64 = 1000.0 * 1e-3 * 0.4;
        let last = traj.states.last().unwrap();
        assert_relative_eq!(last[0], t.sin(), epsilon = 1e-3);
        assert_relative_eq!(last[1], 1.0 - t.cos(), epsilon = 1e-3);
        assert_relative_eq!(last[2], t, epsilon = 1e-3);
    }

    #[test]
    fn rollout_quadrotor_hover_stays_at_rest() {
        let sys = PlanarQuadrotor::default();
        let hover = sys.mass * sys.gravity / 2.0;
        let controls = vec![vec(&[hover, hover]); 100];
        let traj = rollout(&sys, &vec(&[0.0; 6]), &controls, 0.02).unwrap();
        for x in &traj.states {
            assert!(x.amax() < 1e-12);
        }
    }

    #[test]
    fn rollout_recorded_derivatives_are_exact() {
        let sys = Unicycle::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let controls: Vec<_> = (0..20).map(|_| uniform_control(&sys, &mut rng)).collect();
        let traj = rollout(&sys, &vec(&[0.1, -0.2, 1.3]), &controls, 0.1).unwrap();
        for t in 0..traj.states.len() {
            let u = &traj.controls[t.min(traj.controls.len() - 1)];
            assert_eq!(traj.derivs[t], sys.dynamics(&traj.states[t], u));
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Constant control keeps the held-control rollout identical to the
        // continuous system, whose endpoint is known in closed form:
        // v = ω = 1 traces x(t) = [sin t, 1 − cos t, t]. Halving the step
        // must then shrink the endpoint error ~16x (≥ 8 allows slack).
        let sys = Unicycle {
            v_bounds: (0.0, 2.0),
            omega_bounds: (-2.0, 2.0),
        };
        let endpoint_error = |steps: usize, dt: f64| {
            let controls = std::iter::repeat_with(|| vec(&[1.0, 1.0]))
                .take(steps)
                .collect::<Vec<_>>();
            let last = rollout(&sys, &vec(&[0.0, 0.0, 0.0]), &controls, dt)
                .unwrap()
                .states
                .last()
                .unwrap()
                .clone();
            let t = steps as f64 * dt;
            (last - vec(&[t.sin(), 1.0 - t.cos(), t])).norm()
        };
        let coarse = endpoint_error(10, 0.1);
        let fine = endpoint_error(20, 0.05);
        assert!(coarse > 1e-12, "coarse error {coarse} too small to compare");
        assert!(
            coarse / fine >= 8.0,
            "error ratio {} below fourth-order expectation",
            coarse / fine
        );
    }

    #[test]
    fn rollout_flags_divergence() {
        let sys = Unicycle::default();
        let controls = vec![vec(&[0.2, 0.0]); 3];
        let err = rollout(&sys, &vec(&[f64::INFINITY, 0.0, 0.0]), &controls, 0.1).unwrap_err();
        assert!(matches!(err, SystemError::RolloutDiverged { step: 0 }));
    }
}
