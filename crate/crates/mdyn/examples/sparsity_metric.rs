//! Discover which inputs the dynamics actually depend on, without labels
//! saying so.
//!
//! A diagonal pseudometric is trained contrastively on (state, control)
//! pairs: items with nearly equal derivatives are pulled together, others
//! pushed apart. Input dimensions the dynamics ignore — the positions, for
//! both bundled systems — end up with near-zero diagonal weight and are
//! dropped by the mask. The printed ratios are the suppression factors
//! relative to the largest diagonal entry.
//!
//! ```text
//! cargo run --example sparsity_metric
//! ```

use mdyn::datasets::{generate_bundle, GenerationConfig, Partition, Region};
use mdyn::metric::{extract_mask, train_pseudometric, MetricTrainConfig};
use mdyn::systems::SystemKind;
use nalgebra::DVector;

fn main() {
    let band = (
        std::f64::consts::FRAC_PI_2 - 0.2,
        std::f64::consts::FRAC_PI_2 + 0.2,
    );
    let cases = [
        (
            SystemKind::Unicycle,
            Region {
                lo: vec![-1.0, -1.0, band.0],
                hi: vec![1.0, 1.0, band.1],
            },
            Region {
                lo: vec![4.0, 4.0, band.0],
                hi: vec![6.0, 6.0, band.1],
            },
            0.1,
            10,
        ),
        (
            SystemKind::PlanarQuadrotor,
            Region {
                lo: vec![-1.0, -1.0, -0.2, -0.5, -0.5, -0.3],
                hi: vec![1.0, 1.0, 0.2, 0.5, 0.5, 0.3],
            },
            Region {
                lo: vec![4.0, 4.0, -0.2, -0.5, -0.5, -0.3],
                hi: vec![6.0, 6.0, 0.2, 0.5, 0.5, 0.3],
            },
            0.02,
            5,
        ),
    ];

    for (kind, train_region, test_region, dt, hold) in cases {
        let sys = kind.build();
        let gen = GenerationConfig {
            n_trajectories: 20,
            horizon: 50,
            dt,
            control_hold: hold,
            train_region,
            test_region,
            ood_margin: 3.0,
            noise_std: 0.0,
            test_count: 10,
            seed: 0,
        };
        let bundle = generate_bundle(sys.as_ref(), &gen).expect("generation failed");
        let samples = bundle.flatten(Partition::Training);
        let inputs: Vec<DVector<f64>> = samples
            .iter()
            .map(|s| {
                let mut v = DVector::zeros(s.state.len() + s.control.len());
                v.rows_mut(0, s.state.len()).copy_from(&s.state);
                v.rows_mut(s.state.len(), s.control.len()).copy_from(&s.control);
                v
            })
            .collect();
        let labels: Vec<DVector<f64>> = samples.iter().map(|s| s.deriv.clone()).collect();

        let cfg = MetricTrainConfig {
            steps: 2000,
            seed: 0,
            ..MetricTrainConfig::default()
        };
        let metric = train_pseudometric(&inputs, &labels, &cfg).expect("training failed");
        let mask = extract_mask(&metric.pseudometric, 0.01);

        let names: Vec<&str> = sys
            .state_names()
            .into_iter()
            .chain(sys.control_names())
            .collect();
        let max = metric
            .pseudometric
            .diag
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max);

        println!(
            "{}: InfoNCE loss {:.3} -> {:.3}",
            sys.name(),
            metric.initial_loss,
            metric.final_loss,
        );
        for (i, name) in names.iter().enumerate() {
            let d = metric.pseudometric.diag[i];
            println!(
                "  {:8} weight {:9.3e}  ({})",
                name,
                d,
                if mask.retained[i] {
                    "kept".to_string()
                } else {
                    format!("dropped, {:.0e}x below max", max / d)
                },
            );
        }
        println!();
    }
}
