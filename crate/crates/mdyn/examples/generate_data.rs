//! Generate a training/test dataset bundle, save it, and reload it.
//!
//! Training trajectories start inside a small box near the origin; test
//! triples are sampled from a far-away region with a guaranteed margin from
//! every training state, so test queries are genuinely out-of-distribution.
//!
//! ```text
//! cargo run --example generate_data [-- OUT_DIR]
//! ```

use mdyn::datasets::{
    generate_bundle, load_bundle, save_bundle, GenerationConfig, Partition, Region,
};
use mdyn::systems::SystemKind;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/example_data".into());
    let sys = SystemKind::Unicycle.build();

    let band = (
        std::f64::consts::FRAC_PI_2 - 0.2,
        std::f64::consts::FRAC_PI_2 + 0.2,
    );
    let cfg = GenerationConfig {
        n_trajectories: 20,
        horizon: 50,
        dt: 0.1,
        control_hold: 10,
        train_region: Region {
            lo: vec![-1.0, -1.0, band.0],
            hi: vec![1.0, 1.0, band.1],
        },
        test_region: Region {
            lo: vec![4.0, 4.0, band.0],
            hi: vec![6.0, 6.0, band.1],
        },
        ood_margin: 3.0,
        noise_std: 0.0,
        test_count: 200,
        seed: 0,
    };

    let bundle = generate_bundle(sys.as_ref(), &cfg).expect("generation failed");
    let training = bundle.flatten(Partition::Training);
    println!(
        "generated {} offline trajectories + 1 online ({} supervised samples), {} test triples",
        bundle.offline.len(),
        training.len(),
        bundle.test.len(),
    );

    // Verify the distribution shift: no test state comes close to training.
    let training_states = bundle.training_states();
    let dmin = bundle
        .test
        .iter()
        .map(|t| {
            training_states
                .iter()
                .map(|x| (*x - &t.state).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    println!("closest test state sits {dmin:.2} from the training set (margin 3.0)");

    let dir = std::path::Path::new(&out);
    save_bundle(&bundle, dir).expect("save failed");
    let reloaded = load_bundle(dir).expect("load failed");
    assert_eq!(reloaded.offline.len(), bundle.offline.len());
    assert_eq!(reloaded.test.len(), bundle.test.len());
    println!("bundle saved to {} and reloaded intact", dir.display());
}
