//! Repair an imperfect dynamics prediction by projecting it onto the
//! constraint manifold.
//!
//! Given constraint rows G ẋ + g = 0, the closest feasible velocity to a
//! prediction p solves an equality-constrained least-squares problem with
//! the closed form  p* = p − Gᵀ(GGᵀ)⁻¹(Gp + g).  Whenever the true velocity
//! satisfies the constraint, replacing p by p* can only reduce the error —
//! the correction removes an orthogonal error component — and afterwards
//! the prediction is feasible to machine precision.
//!
//! ```text
//! cargo run --example project_prediction
//! ```

use mdyn::project::project;
use mdyn::systems::SystemKind;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let sys = SystemKind::Unicycle.build();
    let mut rng = ChaCha20Rng::seed_from_u64(3);

    println!("unicycle, corrupted predictions projected back onto the true constraint:");
    println!(
        "{:>10} {:>12} {:>12} {:>12} {:>12}",
        "", "err before", "err after", "viol before", "viol after",
    );

    let mut improved = 0usize;
    let trials = 10;
    for t in 0..trials {
        let x = DVector::from_vec(vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(1.4..1.8),
        ]);
        let u = DVector::from_vec(vec![rng.gen_range(0.15..0.6), rng.gen_range(-0.4..0.4)]);
        let truth = sys.dynamics(&x, &u);

        // A prediction with a sizeable random error.
        let noise = DVector::from_fn(truth.len(), |_, _| rng.gen_range(-0.3..0.3));
        let pred = &truth + &noise;

        let gamma = sys.true_constraint(&x);
        let n = truth.len();
        let g_mat = gamma.columns(0, n).into_owned();
        let g_vec = gamma.column(n).into_owned();

        let result = project(&g_mat, &g_vec, &pred);
        let before = (&pred - &truth).norm();
        let after = (&result.projected - &truth).norm();
        let viol_before = (&g_mat * &pred + &g_vec).norm();
        let viol_after = (&g_mat * &result.projected + &g_vec).norm();
        if after <= before {
            improved += 1;
        }
        println!(
            "  trial {t:2} {before:12.4e} {after:12.4e} {viol_before:12.4e} {viol_after:12.4e}",
        );
    }
    println!("error never increased in {improved}/{trials} trials (guaranteed)");

    // Re-projecting a feasible point is a no-op.
    let x = DVector::from_vec(vec![0.0, 0.0, 1.5]);
    let truth = sys.dynamics(&x, &DVector::from_vec(vec![0.4, 0.1]));
    let gamma = sys.true_constraint(&x);
    let (g_mat, g_vec) = (gamma.columns(0, 3).into_owned(), gamma.column(3).into_owned());
    let twice = project(&g_mat, &g_vec, &project(&g_mat, &g_vec, &truth).projected);
    println!(
        "idempotence: |project(project(f)) - f| = {:.1e}",
        (&twice.projected - &truth).norm(),
    );
}
