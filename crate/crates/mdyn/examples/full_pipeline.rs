//! The whole story in one run: generate data, learn the input mask, fit
//! dense and sparse dynamics GPs, discover the constraint manifold, and
//! evaluate every model on out-of-distribution queries.
//!
//! This drives the same pipeline the `mdyn` binary exposes, on a reduced
//! unicycle configuration so it finishes in a few seconds. Artifacts land
//! in `out/example_pipeline/` — rerunning resumes from the checkpoints and
//! reproduces the report byte for byte.
//!
//! ```text
//! cargo run --example full_pipeline
//! ```

use mdyn::pipeline::{run_eval, run_train, PipelineConfig};
use std::path::Path;

const CONFIG: &str = r#"
seed = 0

[system]
kind = "unicycle"

[data]
n_trajectories = 8
horizon = 30
dt = 0.1
control_hold = 10
train_region = { lo = [-1.0, -1.0, 1.3707963267948966], hi = [1.0, 1.0, 1.7707963267948966] }
test_region = { lo = [4.0, 4.0, 1.3707963267948966], hi = [6.0, 6.0, 1.7707963267948966] }
ood_margin = 3.0
noise_std = 0.0
test_count = 100

[metric]
steps = 800

[gp]
restarts = 2
max_iters = 80

[manifold]
expected_constraints = 1
max_states = 120

[manifold.metric]
steps = 800

[manifold.gp]
restarts = 2
max_iters = 80
"#;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cfg = PipelineConfig::from_toml(CONFIG).expect("config invalid");
    let out = Path::new("out/example_pipeline");

    let artifacts = run_train(&cfg, out).expect("training failed");
    println!(
        "\nmask kept {:?} of (p_x, p_y, theta, v, omega)",
        artifacts.mask.retained,
    );
    println!(
        "constraint rows detected: {} at {} states",
        artifacts.dataset.constraint_count,
        artifacts.dataset.states.len(),
    );

    let report = run_eval(&cfg, out, None).expect("evaluation failed");
    println!("\nmodel                      rmse        worst violation");
    for m in &report.models {
        println!(
            "{:22} {:12.4e} {:12.4e}",
            m.name, m.rmse_total, m.violation_max,
        );
    }
    println!(
        "\nmean distance of test queries from training data: {:.2}",
        report.ood_distance.mean,
    );
    println!("full report: {}", out.join("report.json").display());
}
