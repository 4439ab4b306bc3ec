//! Evaluation of dynamics models on held-out out-of-distribution test sets.
//!
//! [`evaluate`] scores any number of named [`DynamicsModel`]s on a bundle's
//! test partition: per-dimension and total RMSE against the exact test
//! derivatives, violation of the *analytic* constraint (how far predictions
//! drift off the true manifold), and summary statistics of how far the test
//! states sit from the training data. When a learned [`ManifoldModel`] is
//! supplied, its constraint rows are compared with the analytic rows both
//! entrywise and via row-space projectors (the projector comparison stays
//! meaningful even when the detected constraint count disagrees).
//!
//! Reports serialize to JSON; per-point residuals are exported separately
//! as CSV via [`residuals_csv`]. [`aggregate`] condenses reports from
//! repeated seeds into medians and interquartile ranges.

use crate::datasets::DatasetBundle;
use crate::gp::DynamicsModel;
use crate::linalg::right_singular_basis;
use crate::manifold::{eval_constraint, ManifoldModel};
use crate::systems::System;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bundle has no test samples")]
    EmptyTestSet,
    #[error("no models to evaluate")]
    NoModels,
    #[error("cannot aggregate: {0}")]
    BadAggregate(String),
}

/// Scores for one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    /// Root mean squared error over all test points and dimensions.
    pub rmse_total: f64,
    /// RMSE per state dimension.
    pub rmse_per_dim: Vec<f64>,
    /// Mean/max Euclidean norm of the analytic-constraint residual of the
    /// model's predictions (how far they drift off the true manifold).
    pub violation_mean: f64,
    pub violation_max: f64,
    /// Per-point, per-dimension residuals `prediction − truth`; exported to
    /// CSV rather than JSON.
    #[serde(skip)]
    pub residuals: Vec<Vec<f64>>,
}

/// Distance statistics from test states to the nearest training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Comparison of learned constraint rows against the analytic rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub detected_count: usize,
    pub true_count: usize,
    /// Largest absolute entrywise difference of standardized rows over the
    /// test states; present only when the counts match.
    pub max_abs_error: Option<f64>,
    /// Frobenius distance between row-space projectors, mean/max over test
    /// states. Well-defined regardless of count agreement.
    pub projector_error_mean: f64,
    pub projector_error_max: f64,
}

/// Everything [`evaluate`] measures on one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub seed: u64,
    pub config_hash: String,
    pub test_count: usize,
    pub state_dim: usize,
    pub ood_distance: DistanceStats,
    pub models: Vec<ModelReport>,
    pub gamma: Option<GammaReport>,
}

/// Orthogonal projector onto the row space of `m`.
///
/// Rank is read at `1e-6 · σ_max`: singular values come from a Gram-matrix
/// eigendecomposition, whose square root lifts exact zeros to
/// ≈ √(machine-ε) · σ_max ≈ 1e-8 · σ_max, so the cut must sit above that.
fn row_space_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::zeros(d, d);
    }
    let (sigmas, v) = right_singular_basis(m);
    let tol = 1e-6 * sigmas[0].max(1e-300);
    let rank = sigmas.iter().take_while(|&&s| s > tol).count();
    let vr = v.columns(0, rank);
    vr * vr.transpose()
}

/// Score `models` on the bundle's test partition.
///
/// `manifold` enables the constraint-recovery comparison; `config_hash` is
/// recorded verbatim so downstream tooling can match reports to the exact
/// configuration that produced them.
pub fn evaluate(
    sys: &dyn System,
    bundle: &DatasetBundle,
    models: &[(&str, &dyn DynamicsModel)],
    manifold: Option<&ManifoldModel>,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    if bundle.test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if models.is_empty() {
        return Err(EvalError::NoModels);
    }
    let n = bundle.meta.state_dim;
    let test = &bundle.test;

    // Distance from each test state to its nearest training state.
    let train_states = bundle.training_states();
    let mut dist_sum = 0.0;
    let mut dist_min = f64::INFINITY;
    let mut dist_max = f64::NEG_INFINITY;
    for s in test {
        let d = train_states
            .iter()
            .map(|t| (*t - &s.state).norm())
            .fold(f64::INFINITY, f64::min);
        dist_sum += d;
        dist_min = dist_min.min(d);
        dist_max = dist_max.max(d);
    }

    let mut model_reports = Vec::with_capacity(models.len());
    for (name, model) in models {
        let mut residuals = Vec::with_capacity(test.len());
        let mut sq_per_dim = vec![0.0f64; n];
        let mut violation_sum = 0.0;
        let mut violation_max = 0.0f64;
        for s in test {
            let pred = model.predict_dynamics(&s.state, &s.control);
            let res: Vec<f64> = (0..n).map(|d| pred[d] - s.deriv[d]).collect();
            for (d, r) in res.iter().enumerate() {
                sq_per_dim[d] += r * r;
            }
            let violation = eval_constraint(&sys.true_constraint(&s.state), &pred).norm();
            violation_sum += violation;
            violation_max = violation_max.max(violation);
            residuals.push(res);
        }
        let count = test.len() as f64;
        let rmse_per_dim: Vec<f64> = sq_per_dim.iter().map(|s| (s / count).sqrt()).collect();
        let rmse_total = (sq_per_dim.iter().sum::<f64>() / (count * n as f64)).sqrt();
        model_reports.push(ModelReport {
            name: name.to_string(),
            rmse_total,
            rmse_per_dim,
            violation_mean: violation_sum / count,
            violation_max,
            residuals,
        });
    }

    let gamma = manifold.map(|m| {
        let mut max_abs: Option<f64> = if m.constraint_count == sys.constraint_count() {
            Some(0.0)
        } else {
            None
        };
        let mut proj_sum = 0.0;
        let mut proj_max = 0.0f64;
        for s in test {
            let predicted = m.predict_gamma(&s.state);
            let truth = sys.true_constraint(&s.state);
            if let Some(worst) = max_abs.as_mut() {
                *worst = worst.max((&predicted - &truth).amax());
            }
            let err = (row_space_projector(&predicted) - row_space_projector(&truth)).norm();
            proj_sum += err;
            proj_max = proj_max.max(err);
        }
        GammaReport {
            detected_count: m.constraint_count,
            true_count: sys.constraint_count(),
            max_abs_error: max_abs,
            projector_error_mean: proj_sum / test.len() as f64,
            projector_error_max: proj_max,
        }
    });

    Ok(EvalReport {
        system: sys.name().to_string(),
        seed: bundle.meta.seed,
        config_hash: config_hash.to_string(),
        test_count: test.len(),
        state_dim: n,
        ood_distance: DistanceStats {
            mean: dist_sum / test.len() as f64,
            min: dist_min,
            max: dist_max,
        },
        models: model_reports,
        gamma,
    })
}

/// Render per-point residuals as CSV: one row per (test point, model),
/// columns `point,model,r0,…,r{n−1}`.
pub fn residuals_csv(report: &EvalReport) -> String {
    let mut out = String::from("point,model");
    for d in 0..report.state_dim {
        out.push_str(&format!(",r{d}"));
    }
    out.push('\n');
    for model in &report.models {
        for (i, res) in model.residuals.iter().enumerate() {
            out.push_str(&format!("{i},{}", model.name));
            for r in res {
                // Shortest f64-exact decimal, so RMSEs recompute losslessly.
                out.push_str(&format!(",{r:?}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Median and interquartile range of a model's score across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateModel {
    pub name: String,
    pub rmse_median: f64,
    pub rmse_q25: f64,
    pub rmse_q75: f64,
    pub violation_median: f64,
}

/// Cross-seed summary of repeated evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub system: String,
    pub seeds: Vec<u64>,
    pub models: Vec<AggregateModel>,
}

/// Linear-interpolation quantile of already-meaningful data (0 ≤ q ≤ 1).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Condense per-seed reports into medians and interquartile ranges.
///
/// All reports must come from the same system and list the same models in
/// the same order.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::BadAggregate("no reports".into()))?;
    for r in reports {
        if r.system != first.system {
            return Err(EvalError::BadAggregate(format!(
                "mixed systems {} and {}",
                first.system, r.system
            )));
        }
        if r.models.len() != first.models.len()
            || r.models
                .iter()
                .zip(&first.models)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(EvalError::BadAggregate(
                "reports list different models".into(),
            ));
        }
    }
    let models = (0..first.models.len())
        .map(|m| {
            let rmses: Vec<f64> = reports.iter().map(|r| r.models[m].rmse_total).collect();
            let violations: Vec<f64> = reports.iter().map(|r| r.models[m].violation_mean).collect();
            AggregateModel {
                name: first.models[m].name.clone(),
                rmse_median: quantile(&rmses, 0.5),
                rmse_q25: quantile(&rmses, 0.25),
                rmse_q75: quantile(&rmses, 0.75),
                violation_median: quantile(&violations, 0.5),
            }
        })
        .collect();
    Ok(AggregateReport {
        system: first.system.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_bundle, GenerationConfig, Region};
    use crate::gp::TrueDynamics;
    use crate::project::TrueProjectedDynamics;
    use crate::systems::Unicycle;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use std::f64::consts::FRAC_PI_2;

    fn small_bundle(seed: u64) -> (Unicycle, DatasetBundle) {
        let sys = Unicycle::default();
        let cfg = GenerationConfig {
            n_trajectories: 3,
            horizon: 15,
            dt: 0.1,
            control_hold: 5,
            train_region: Region {
                lo: vec![-1.0, -1.0, FRAC_PI_2 - 0.2],
                hi: vec![1.0, 1.0, FRAC_PI_2 + 0.2],
            },
            test_region: Region {
                lo: vec![4.0, 4.0, FRAC_PI_2 - 0.2],
                hi: vec![6.0, 6.0, FRAC_PI_2 + 0.2],
            },
            ood_margin: 3.0,
            noise_std: 0.0,
            test_count: 60,
            seed,
        };
        let bundle = generate_bundle(&sys, &cfg).unwrap();
        (sys, bundle)
    }

    #[test]
    fn exact_dynamics_score_zero() {
        let (sys, bundle) = small_bundle(1);
        let truth = TrueDynamics(&sys);
        let report = evaluate(&sys, &bundle, &[("oracle", &truth)], None, "h").unwrap();
        let m = &report.models[0];
        assert!(m.rmse_total < 1e-9, "oracle rmse {}", m.rmse_total);
        assert!(m.rmse_per_dim.iter().all(|&r| r < 1e-9));
        assert!(m.violation_max < 1e-9);
        assert_eq!(m.residuals.len(), 60);
        // Test states really are far from the training data.
        assert!(report.ood_distance.min >= 3.0);
        assert!(report.ood_distance.mean >= report.ood_distance.min);
        assert!(report.ood_distance.max >= report.ood_distance.mean);
    }

    #[test]
    fn true_projection_never_scores_worse() {
        // A biased predictor, and the same predictor snapped onto the true
        // constraint: projection can only shrink the error (Pythagoras).
        let (sys, bundle) = small_bundle(2);
        let sys2 = sys.clone();
        let biased = move |x: &DVector<f64>, u: &DVector<f64>| {
            let mut d = sys2.dynamics(x, u);
            d[0] += 0.2;
            d[1] -= 0.15;
            d[2] += 0.05;
            d
        };
        let projected = TrueProjectedDynamics {
            model: &biased,
            system: &sys,
        };
        let report = evaluate(
            &sys,
            &bundle,
            &[("biased", &biased), ("biased_proj", &projected)],
            None,
            "h",
        )
        .unwrap();
        let raw = &report.models[0];
        let proj = &report.models[1];
        assert!(proj.rmse_total <= raw.rmse_total + 1e-12);
        // The projected model lands on the manifold; the biased one is off it.
        assert!(proj.violation_max < 1e-8);
        assert!(raw.violation_mean > 0.1);
    }

    #[test]
    fn rmse_recomputes_from_the_residual_table() {
        let (sys, bundle) = small_bundle(3);
        let sys2 = sys.clone();
        let wobbly = move |x: &DVector<f64>, u: &DVector<f64>| {
            let mut d = sys2.dynamics(x, u);
            d[0] += 0.1 * (x[0]).sin();
            d[2] -= 0.2 * (u[0]).cos();
            d
        };
        let report = evaluate(&sys, &bundle, &[("wobbly", &wobbly)], None, "h").unwrap();
        let m = &report.models[0];
        let count = m.residuals.len() as f64;
        let n = report.state_dim as f64;
        let total: f64 = m
            .residuals
            .iter()
            .flat_map(|r| r.iter())
            .map(|r| r * r)
            .sum();
        assert_relative_eq!(m.rmse_total, (total / (count * n)).sqrt(), epsilon = 1e-12);
        for d in 0..report.state_dim {
            let per: f64 = m.residuals.iter().map(|r| r[d] * r[d]).sum();
            assert_relative_eq!(m.rmse_per_dim[d], (per / count).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_round_trips_the_residuals_exactly() {
        let (sys, bundle) = small_bundle(4);
        let sys2 = sys.clone();
        let wobbly = move |x: &DVector<f64>, u: &DVector<f64>| {
            let mut d = sys2.dynamics(x, u);
            d[1] += 0.3 * (x[2]).cos();
            d
        };
        let report = evaluate(&sys, &bundle, &[("wobbly", &wobbly)], None, "h").unwrap();
        let csv = residuals_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "point,model,r0,r1,r2");
        let mut parsed: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 5);
            assert_eq!(cells[1], "wobbly");
            parsed.push(cells[2..].iter().map(|c| c.parse().unwrap()).collect());
        }
        let m = &report.models[0];
        assert_eq!(parsed.len(), m.residuals.len());
        for (a, b) in parsed.iter().zip(&m.residuals) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "CSV altered a residual");
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (sys, bundle) = small_bundle(5);
        let truth = TrueDynamics(&sys);
        let a = evaluate(&sys, &bundle, &[("oracle", &truth)], None, "h").unwrap();
        let b = evaluate(&sys, &bundle, &[("oracle", &truth)], None, "h").unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(residuals_csv(&a), residuals_csv(&b));
    }

    #[test]
    fn projector_comparison_ignores_row_scaling_but_sees_rotation() {
        // Same row space, different scaling: zero projector error.
        let a = DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 4, &[0.0, -3.0, 0.0, 0.0]);
        assert!((row_space_projector(&a) - row_space_projector(&b)).norm() < 1e-12);
        // Orthogonal rows: maximal disagreement for rank-1 spaces (√2).
        let c = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(
            (row_space_projector(&a) - row_space_projector(&c)).norm(),
            2.0f64.sqrt(),
            epsilon = 1e-12
        );
        // Empty rows project to nothing.
        let e = DMatrix::zeros(0, 4);
        assert_eq!(row_space_projector(&e), DMatrix::zeros(4, 4));
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        let odd = [5.0, 1.0, 3.0];
        assert_eq!(quantile(&odd, 0.5), 3.0);
    }

    #[test]
    fn aggregate_reports_median_and_iqr() {
        let (sys, _) = small_bundle(6);
        let mut reports = Vec::new();
        for seed in 0..4 {
            let (_, bundle) = small_bundle(10 + seed);
            let sys2 = sys.clone();
            let off = seed as f64 * 0.1;
            let skewed = move |x: &DVector<f64>, u: &DVector<f64>| {
                let mut d = sys2.dynamics(x, u);
                d[0] += off;
                d
            };
            reports.push(evaluate(&sys, &bundle, &[("skewed", &skewed)], None, "h").unwrap());
        }
        let agg = aggregate(&reports).unwrap();
        assert_eq!(agg.seeds, vec![10, 11, 12, 13]);
        assert_eq!(agg.models.len(), 1);
        let m = &agg.models[0];
        assert!(m.rmse_q25 <= m.rmse_median && m.rmse_median <= m.rmse_q75);
        // Error grows with the planted offset, so the median sits between
        // the second and third seed's scores.
        let rmses: Vec<f64> = reports.iter().map(|r| r.models[0].rmse_total).collect();
        assert_relative_eq!(m.rmse_median, (rmses[1] + rmses[2]) / 2.0, epsilon = 1e-12);

        // Mixed model lists refuse to aggregate.
        let mut other = reports[0].clone();
        other.models[0].name = "different".into();
        assert!(matches!(
            aggregate(&[reports[0].clone(), other]),
            Err(EvalError::BadAggregate(_))
        ));
    }

    #[test]
    fn gamma_report_compares_learned_rows() {
        use crate::manifold::{
            build_constraint_dataset, train_manifold, ConstraintDatasetConfig,
            ManifoldTrainConfig,
        };
        use crate::metric::MetricTrainConfig;
        use crate::systems::System;
        let (sys, bundle) = small_bundle(7);
        let truth = TrueDynamics(&sys);
        let states: Vec<DVector<f64>> = bundle
            .training_states()
            .into_iter()
            .cloned()
            .collect();
        let ds = build_constraint_dataset(
            &truth,
            &states,
            &sys.control_bounds(),
            &ConstraintDatasetConfig {
                expected_constraints: Some(1),
                seed: 3,
                ..ConstraintDatasetConfig::default()
            },
        )
        .unwrap();
        let manifold = train_manifold(
            &ds,
            &ManifoldTrainConfig {
                metric: MetricTrainConfig {
                    steps: 800,
                    ..MetricTrainConfig::default()
                },
                ..ManifoldTrainConfig::default()
            },
        )
        .unwrap();
        let report = evaluate(&sys, &bundle, &[("oracle", &truth)], Some(&manifold), "h").unwrap();
        let gamma = report.gamma.unwrap();
        assert_eq!(gamma.detected_count, 1);
        assert_eq!(gamma.true_count, 1);
        let max_err = gamma.max_abs_error.unwrap();
        assert!(max_err < 5e-2, "gamma max error {max_err}");
        assert!(gamma.projector_error_max < 5e-2);
        assert!(gamma.projector_error_mean <= gamma.projector_error_max);
    }
}
