//! Learning sparse dynamics models and implicit motion constraints from
//! trajectory data.
//!
//! Many mobile robots obey instantaneous constraints on their state
//! derivative (no side-slip for a differential drive, thrust-aligned
//! acceleration for a quadrotor). A Gaussian-process dynamics model fitted
//! to raw trajectories knows nothing about those constraints and happily
//! violates them far from the training data. This crate implements a
//! pipeline that
//!
//! 1. learns a diagonal pseudometric over the model inputs with a
//!    contrastive (InfoNCE) objective and uses it to drop input dimensions
//!    the dynamics do not depend on ([`metric`]),
//! 2. fits independent Gaussian processes to the reduced inputs ([`gp`]),
//! 3. recovers the constraint set itself: at every visited state the model
//!    is queried under many sampled controls, the null space of the
//!    resulting derivative matrix is extracted by SVD, standardized to a
//!    canonical (reduced-row-echelon, sign-consistent) form, and finally
//!    regressed as a function of state ([`manifold`]),
//! 4. projects dynamics predictions onto the learned constraint with a
//!    closed-form equality-constrained quadratic program ([`project`]).
//!
//! Steps 1–4 compose into the evaluation harness in [`eval`] and the
//! file-based pipeline in [`pipeline`]; the `mdyn` binary is a thin
//! command-line wrapper around the latter.
//!
//! # Examples
//!
//! The `examples/` directory contains one runnable program per capability:
//!
//! ```text
//! cargo run --release --example simulate             # benchmark systems + rollouts
//! cargo run --release --example generate_data        # dataset bundles on disk
//! cargo run --release --example gp_regression        # scalar GP + marginal likelihood
//! cargo run --release --example sparsity_metric      # contrastive input selection
//! cargo run --release --example constraint_discovery # null-space constraint learning
//! cargo run --release --example project_prediction   # constrained projection
//! cargo run --release --example full_pipeline        # end-to-end comparison
//! ```
//!
//! The same flow is scriptable through the CLI:
//!
//! ```text
//! mdyn generate --config configs/unicycle.toml
//! mdyn train    --config configs/unicycle.toml
//! mdyn eval     --config configs/unicycle.toml --seeds 10
//! mdyn report   --config configs/unicycle.toml
//! ```

pub mod datasets;
pub mod eval;
pub mod gp;
pub mod linalg;
pub mod manifold;
pub mod metric;
pub mod pipeline;
pub mod project;
pub mod systems;
