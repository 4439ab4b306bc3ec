//! Recover the implicit velocity constraints of a system by probing a
//! dynamics model — here the exact dynamics, so the only error left is the
//! machinery's own.
//!
//! At each state, the model is evaluated under K sampled controls and the
//! rows [f(x,u_k)ᵀ, 1] are stacked. Whatever direction every achievable
//! velocity is forbidden to move in shows up as a near-null right singular
//! direction of that matrix; the echelon-standardized null basis *is* the
//! constraint Γ(x). For the unicycle this finds the no-side-slip row; for
//! the planar quadrotor it finds four rows, including the thrust-direction
//! constraint with its gravity bias.
//!
//! ```text
//! cargo run --example constraint_discovery
//! ```

use mdyn::gp::TrueDynamics;
use mdyn::manifold::{build_constraint_dataset, ConstraintDatasetConfig};
use mdyn::systems::SystemKind;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);

    for kind in [SystemKind::Unicycle, SystemKind::PlanarQuadrotor] {
        let sys = kind.build();
        let n = sys.state_dim();

        // Random probe states in a sensible regime for each system.
        let states: Vec<DVector<f64>> = (0..50)
            .map(|_| match kind {
                SystemKind::Unicycle => DVector::from_vec(vec![
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(1.4..1.8),
                ]),
                SystemKind::PlanarQuadrotor => DVector::from_vec(vec![
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.3..0.3),
                ]),
            })
            .collect();

        let cfg = ConstraintDatasetConfig {
            expected_constraints: Some(sys.constraint_count()),
            seed: 42,
            ..ConstraintDatasetConfig::default()
        };
        let model = TrueDynamics(sys.as_ref());
        let ds = build_constraint_dataset(&model, &states, &sys.control_bounds(), &cfg)
            .expect("extraction failed");

        println!(
            "{}: detected {} constraint row(s) at {} states ({} discarded)",
            sys.name(),
            ds.constraint_count,
            ds.states.len(),
            ds.discarded.len(),
        );

        // Compare against the analytic rows, entry by entry.
        let worst = ds
            .states
            .iter()
            .zip(&ds.gammas)
            .map(|(x, g)| (g - sys.true_constraint(x)).amax())
            .fold(0.0f64, f64::max);
        println!("  max |learned - analytic| over all states: {worst:.3e}");

        // Show one state in full.
        let x = &ds.states[0];
        println!("  at x = {:.3?}:", x.as_slice());
        let gamma = &ds.gammas[0];
        for r in 0..gamma.nrows() {
            let row: Vec<String> = (0..n + 1).map(|c| format!("{:7.3}", gamma[(r, c)])).collect();
            println!("    [{}]", row.join(", "));
        }
        // The singular-value gap that separated signal from null space.
        let sv = &ds.spectra[0];
        println!(
            "  singular values: {}\n",
            sv.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join("  "),
        );
    }
}
