//! Implicit constraint-manifold discovery from a dynamics model.
//!
//! At a state `x`, probing a dynamics model with `K` sampled controls gives
//! the *learned multi-action* (LMA) matrix whose rows are `[f(x, u_k)ᵀ, 1]`.
//! Any affine velocity constraint `G(x) ẋ + g(x) = 0` that holds for every
//! achievable velocity annihilates all rows, so the LMA right null space
//! spans the constraint rows at `x`. The null space is read off the small
//! singular values of the LMA; its basis is standardized by reduced row
//! echelon form, whose uniqueness makes the rows a well-defined function of
//! the state that varies continuously wherever the pivot structure is
//! stable, so they can be regressed like any other function. A
//! [`ManifoldModel`] learns those standardized rows with a contrastive
//! input mask and one scalar GP per non-constant entry.

use crate::datasets::subseed;
use crate::gp::{apply_mask, DynamicsModel, FitConfig, GpError, KernelHyperparams, ScalarGp};
use crate::linalg::{rref, right_singular_basis};
use crate::metric::{
    extract_mask, train_pseudometric, MetricError, MetricTrainConfig, SparsityMask, TrainedMetric,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("no states to build a constraint dataset from")]
    NoStates,
    #[error("need at least {need} probe controls for {state_dim} state dimensions, got {got}")]
    TooFewControls {
        need: usize,
        got: usize,
        state_dim: usize,
    },
    #[error(
        "LMA rank {have} below expected {need} at state {state_index} even after resampling"
    )]
    RankDeficient {
        state_index: usize,
        have: usize,
        need: usize,
    },
    #[error(
        "inconsistent constraint counts: modal {modal} covers only {coverage:.1}% of states \
         (need ≥ {required:.1}%); spectra of disagreeing states: {diagnostics}"
    )]
    InconsistentCounts {
        modal: usize,
        coverage: f64,
        required: f64,
        diagnostics: String,
    },
    #[error("degenerate null space: {detected} of {dim} directions vanish at state {state_index}")]
    DegenerateNullSpace {
        state_index: usize,
        detected: usize,
        dim: usize,
    },
    #[error("constraint dataset is empty after filtering")]
    EmptyDataset,
    #[error("checkpoint does not match the dataset: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Build an LMA matrix from explicit probe controls: row `k` is
/// `[f(x, u_k)ᵀ, 1]`.
pub fn build_lma(
    model: &dyn DynamicsModel,
    x: &DVector<f64>,
    controls: &[DVector<f64>],
) -> DMatrix<f64> {
    assert!(!controls.is_empty(), "need at least one probe control");
    let n = x.len();
    let mut a = DMatrix::zeros(controls.len(), n + 1);
    for (k, u) in controls.iter().enumerate() {
        let xdot = model.predict_dynamics(x, u);
        for j in 0..n {
            a[(k, j)] = xdot[j];
        }
        a[(k, n)] = 1.0;
    }
    a
}

/// Null space of an LMA matrix: directions whose singular value falls below
/// `eps_rel · σ_max`.
#[derive(Debug, Clone)]
pub struct NullSpace {
    /// `(n+1) × detected` orthonormal null directions (may have 0 columns).
    pub basis: DMatrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// Absolute cutoff that was applied.
    pub threshold: f64,
    pub detected: usize,
}

/// Split the right singular directions of `a` at `eps_rel · σ_max`.
pub fn null_space_basis(a: &DMatrix<f64>, eps_rel: f64) -> NullSpace {
    let (sigmas, v) = right_singular_basis(a);
    let sigma_max = sigmas[0];
    let threshold = eps_rel * sigma_max;
    let null_cols: Vec<usize> = (0..sigmas.len())
        .filter(|&i| sigmas[i] < threshold)
        .collect();
    let mut basis = DMatrix::zeros(a.ncols(), null_cols.len());
    for (out, &col) in null_cols.iter().enumerate() {
        basis.set_column(out, &v.column(col));
    }
    NullSpace {
        basis,
        singular_values: sigmas,
        threshold,
        detected: null_cols.len(),
    }
}

/// Standardize a null-space basis into unique constraint rows.
///
/// The transposed basis is brought to reduced row echelon form, which is
/// unique for a given row space: any basis of the same null space — however
/// its columns are scaled, permuted, or sign-scrambled by the eigensolver —
/// maps to the same matrix, and the `+1` pivots pin every row's sign. No
/// further sign alignment against neighboring states is applied; flipping a
/// pivoted row could only move it *away* from the canonical form, and a
/// cross-state reference row can point the wrong way whenever a large bias
/// column dominates the dot product.
pub fn standardize_basis(basis: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    rref(&basis.transpose(), tol).0
}

/// Residuals `Γ · [ẋ; 1]` of a velocity under standardized constraint rows.
pub fn eval_constraint(gamma: &DMatrix<f64>, xdot: &DVector<f64>) -> DVector<f64> {
    let n = xdot.len();
    debug_assert_eq!(gamma.ncols(), n + 1);
    DVector::from_fn(gamma.nrows(), |r, _| {
        let mut acc = gamma[(r, n)];
        for j in 0..n {
            acc += gamma[(r, j)] * xdot[j];
        }
        acc
    })
}

/// Configuration for [`build_constraint_dataset`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ConstraintDatasetConfig {
    /// Probe controls per state (the LMA row count).
    pub controls_per_state: usize,
    /// Null-space cutoff relative to the largest singular value.
    pub svd_eps_rel: f64,
    /// Pivot tolerance for echelon standardization.
    pub rref_tol: f64,
    /// Expected constraint count; enables the LMA rank precondition.
    pub expected_constraints: Option<usize>,
    /// Minimum fraction of states that must agree on the constraint count.
    pub min_coverage: f64,
    pub seed: u64,
}

impl Default for ConstraintDatasetConfig {
    fn default() -> Self {
        ConstraintDatasetConfig {
            controls_per_state: 8,
            svd_eps_rel: 1e-2,
            rref_tol: crate::linalg::DEFAULT_RREF_TOL,
            expected_constraints: None,
            min_coverage: 0.95,
            seed: 0,
        }
    }
}

/// Recommended probe-control count: `4 · (state_dim − expected_constraints)`,
/// comfortably above the `state_dim + 1 − c` rows needed to pin the rank.
pub fn default_control_count(state_dim: usize, expected_constraints: usize) -> usize {
    4 * state_dim.saturating_sub(expected_constraints).max(1)
}

/// Standardized constraint rows at a set of states.
#[derive(Debug, Clone)]
pub struct ConstraintDataset {
    /// States where the constraint was extracted (in input order).
    pub states: Vec<DVector<f64>>,
    /// One standardized `c × (n+1)` row matrix per accepted state.
    pub gammas: Vec<DMatrix<f64>>,
    /// LMA singular values per accepted state (descending).
    pub spectra: Vec<Vec<f64>>,
    /// Modal constraint count the dataset agreed on.
    pub constraint_count: usize,
    /// Indices (into the input state list) that were discarded.
    pub discarded: Vec<usize>,
    /// The null-space cutoff used, relative to σ_max.
    pub svd_eps_rel: f64,
}

fn sample_control(bounds: &[(f64, f64)], rng: &mut ChaCha20Rng) -> DVector<f64> {
    DVector::from_iterator(
        bounds.len(),
        bounds.iter().map(|&(lo, hi)| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        }),
    )
}

/// Probe a dynamics model at each state and extract standardized constraint
/// rows.
///
/// Two passes: the first builds an LMA per state (with one resample on rank
/// deficiency when an expected count is configured) and detects each state's
/// null-space dimension; the modal dimension must cover at least
/// [`ConstraintDatasetConfig::min_coverage`] of the states, and disagreeing
/// states are discarded with a warning. The second pass standardizes each
/// surviving basis into the canonical echelon form.
pub fn build_constraint_dataset(
    model: &dyn DynamicsModel,
    states: &[DVector<f64>],
    control_bounds: &[(f64, f64)],
    cfg: &ConstraintDatasetConfig,
) -> Result<ConstraintDataset, ManifoldError> {
    if states.is_empty() {
        return Err(ManifoldError::NoStates);
    }
    let n = states[0].len();
    if let Some(c) = cfg.expected_constraints {
        let need = n.saturating_sub(c).max(1);
        if cfg.controls_per_state < need {
            return Err(ManifoldError::TooFewControls {
                need,
                got: cfg.controls_per_state,
                state_dim: n,
            });
        }
    }

    // Pass 1: LMA + null space per state.
    struct StateNull {
        index: usize,
        null: NullSpace,
    }
    let mut per_state = Vec::with_capacity(states.len());
    let mut discarded = Vec::new();
    for (idx, x) in states.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(subseed(cfg.seed, "lma", idx as u64));
        let mut controls: Vec<DVector<f64>> = (0..cfg.controls_per_state)
            .map(|_| sample_control(control_bounds, &mut rng))
            .collect();
        let mut null = null_space_basis(&build_lma(model, x, &controls), cfg.svd_eps_rel);
        if let Some(c_expected) = cfg.expected_constraints {
            let need_rank = n - c_expected.min(n);
            let rank = n + 1 - null.detected;
            if rank < need_rank {
                // One fresh draw guards against an unlucky control sample.
                controls = (0..cfg.controls_per_state)
                    .map(|_| sample_control(control_bounds, &mut rng))
                    .collect();
                null = null_space_basis(&build_lma(model, x, &controls), cfg.svd_eps_rel);
                let rank = n + 1 - null.detected;
                if rank < need_rank {
                    return Err(ManifoldError::RankDeficient {
                        state_index: idx,
                        have: rank,
                        need: need_rank,
                    });
                }
            }
        }
        if null.detected >= n {
            return Err(ManifoldError::DegenerateNullSpace {
                state_index: idx,
                detected: null.detected,
                dim: n + 1,
            });
        }
        per_state.push(StateNull { index: idx, null });
    }

    // Consensus on the constraint count.
    let mut counts = std::collections::BTreeMap::new();
    for s in &per_state {
        *counts.entry(s.null.detected).or_insert(0usize) += 1;
    }
    let (&modal, &modal_count) = counts
        .iter()
        .max_by_key(|&(c, count)| (*count, std::cmp::Reverse(*c)))
        .unwrap();
    let coverage = modal_count as f64 / per_state.len() as f64;
    if coverage < cfg.min_coverage {
        let diagnostics = per_state
            .iter()
            .filter(|s| s.null.detected != modal)
            .take(3)
            .map(|s| {
                format!(
                    "state {}: c={} σ={:?}",
                    s.index,
                    s.null.detected,
                    s.null
                        .singular_values
                        .iter()
                        .map(|v| format!("{v:.3e}"))
                        .collect::<Vec<_>>()
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ManifoldError::InconsistentCounts {
            modal,
            coverage: 100.0 * coverage,
            required: 100.0 * cfg.min_coverage,
            diagnostics,
        });
    }

    // Pass 2: standardize accepted states into the canonical echelon form.
    let mut out = ConstraintDataset {
        states: Vec::with_capacity(modal_count),
        gammas: Vec::with_capacity(modal_count),
        spectra: Vec::with_capacity(modal_count),
        constraint_count: modal,
        discarded: Vec::new(),
        svd_eps_rel: cfg.svd_eps_rel,
    };
    for s in per_state {
        if s.null.detected != modal {
            log::warn!(
                "discarding state {}: detected {} constraints, modal is {}",
                s.index,
                s.null.detected,
                modal
            );
            discarded.push(s.index);
            continue;
        }
        let gamma = standardize_basis(&s.null.basis, cfg.rref_tol);
        out.states.push(states[s.index].clone());
        out.gammas.push(gamma);
        out.spectra.push(s.null.singular_values);
    }
    out.discarded = discarded;
    if out.states.is_empty() {
        return Err(ManifoldError::EmptyDataset);
    }
    Ok(out)
}

/// Per-entry regressor for one coordinate of the constraint rows.
#[derive(Debug, Clone)]
enum EntryModel {
    /// Entry is the same value at every dataset state.
    Constant(f64),
    Gp(Box<ScalarGp>),
}

/// Training configuration for [`train_manifold`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ManifoldTrainConfig {
    pub metric: MetricTrainConfig,
    pub gp: FitConfig,
    /// Relative threshold for distilling the metric diagonal into a mask.
    pub mask_rel_threshold: f64,
}

impl Default for ManifoldTrainConfig {
    fn default() -> Self {
        ManifoldTrainConfig {
            metric: MetricTrainConfig::default(),
            gp: FitConfig::default(),
            mask_rel_threshold: 1e-2,
        }
    }
}

/// A learned map from state to standardized constraint rows.
#[derive(Debug, Clone)]
pub struct ManifoldModel {
    pub constraint_count: usize,
    pub state_dim: usize,
    /// Metric trained on (state, vec(Γ)) items; its diagonal ranks state
    /// dimensions by constraint relevance.
    pub metric: Option<TrainedMetric>,
    pub mask: Option<SparsityMask>,
    /// Row-major `c × (n+1)` entry models over mask-reduced states.
    entries: Vec<EntryModel>,
}

/// Regress standardized constraint rows on the state.
///
/// A contrastive metric on `(state, vec(Γ))` items yields a state mask;
/// each of the `c·(n+1)` entries then gets either a constant (when the
/// dataset value never varies) or a scalar GP on the masked state. A
/// constraint-free dataset produces an empty model.
pub fn train_manifold(
    ds: &ConstraintDataset,
    cfg: &ManifoldTrainConfig,
) -> Result<ManifoldModel, ManifoldError> {
    if ds.states.is_empty() {
        return Err(ManifoldError::EmptyDataset);
    }
    let n = ds.states[0].len();
    let c = ds.constraint_count;
    if c == 0 {
        return Ok(ManifoldModel {
            constraint_count: 0,
            state_dim: n,
            metric: None,
            mask: None,
            entries: Vec::new(),
        });
    }
    let width = n + 1;
    let labels: Vec<DVector<f64>> = ds
        .gammas
        .iter()
        .map(|g| DVector::from_iterator(c * width, g.transpose().iter().copied()))
        .collect();

    let metric = train_pseudometric(&ds.states, &labels, &cfg.metric)?;
    let mask = extract_mask(&metric.pseudometric, cfg.mask_rel_threshold);
    let reduced: Vec<DVector<f64>> = ds
        .states
        .iter()
        .map(|x| apply_mask(x, &mask.retained))
        .collect();

    let mut entries = Vec::with_capacity(c * width);
    for row in 0..c {
        for col in 0..width {
            let values: Vec<f64> = ds.gammas.iter().map(|g| g[(row, col)]).collect();
            let (lo, hi) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if hi - lo < 1e-12 {
                entries.push(EntryModel::Constant(values[0]));
            } else {
                let mut gp_cfg = cfg.gp.clone();
                gp_cfg.seed = subseed(cfg.gp.seed, "manifold-entry", (row * width + col) as u64);
                entries.push(EntryModel::Gp(Box::new(ScalarGp::fit(&reduced, &values, &gp_cfg)?)));
            }
        }
    }
    Ok(ManifoldModel {
        constraint_count: c,
        state_dim: n,
        metric: Some(metric),
        mask: Some(mask),
        entries,
    })
}

impl ManifoldModel {
    /// Predicted standardized constraint rows `Γ(x)`, a `c × (n+1)` matrix.
    pub fn predict_gamma(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let width = self.state_dim + 1;
        if self.constraint_count == 0 {
            return DMatrix::zeros(0, width);
        }
        let reduced = apply_mask(
            x,
            &self
                .mask
                .as_ref()
                .expect("non-empty manifold model always has a mask")
                .retained,
        );
        DMatrix::from_fn(self.constraint_count, width, |r, c| {
            match &self.entries[r * width + c] {
                EntryModel::Constant(v) => *v,
                EntryModel::Gp(gp) => gp.predict_mean(&reduced),
            }
        })
    }

    /// Split `Γ(x)` into `(G, g)` with `G ẋ + g ≈ 0` on the manifold.
    pub fn constraint_at(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let gamma = self.predict_gamma(x);
        let n = self.state_dim;
        (
            gamma.columns(0, n).into_owned(),
            gamma.column(n).into_owned(),
        )
    }

    /// How many entries are backed by a GP (the rest are constants).
    pub fn gp_entry_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, EntryModel::Gp(_)))
            .count()
    }

    pub fn checkpoint(&self) -> ManifoldCheckpoint {
        ManifoldCheckpoint {
            constraint_count: self.constraint_count,
            state_dim: self.state_dim,
            metric: self.metric.clone(),
            mask: self.mask.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| match e {
                    EntryModel::Constant(v) => EntryCheckpoint::Constant(*v),
                    EntryModel::Gp(gp) => EntryCheckpoint::Gp(gp.hyper.clone()),
                })
                .collect(),
        }
    }

    /// Recondition a stored model on the constraint dataset it was trained
    /// from. Bit-for-bit identical to the original [`train_manifold`] result
    /// as long as `ds` is the same dataset and `gp_cfg` the same GP
    /// configuration.
    pub fn restore(
        ckpt: &ManifoldCheckpoint,
        ds: &ConstraintDataset,
        gp_cfg: &FitConfig,
    ) -> Result<ManifoldModel, ManifoldError> {
        if ckpt.constraint_count == 0 {
            return Ok(ManifoldModel {
                constraint_count: 0,
                state_dim: ckpt.state_dim,
                metric: ckpt.metric.clone(),
                mask: ckpt.mask.clone(),
                entries: Vec::new(),
            });
        }
        if ds.constraint_count != ckpt.constraint_count {
            return Err(ManifoldError::Checkpoint(format!(
                "dataset detects {} constraints, checkpoint stores {}",
                ds.constraint_count, ckpt.constraint_count
            )));
        }
        let n = ds.states.first().map_or(0, |x| x.len());
        if n != ckpt.state_dim {
            return Err(ManifoldError::Checkpoint(format!(
                "dataset state dimension {n}, checkpoint stores {}",
                ckpt.state_dim
            )));
        }
        let width = n + 1;
        if ckpt.entries.len() != ckpt.constraint_count * width {
            return Err(ManifoldError::Checkpoint(format!(
                "expected {} entries, checkpoint stores {}",
                ckpt.constraint_count * width,
                ckpt.entries.len()
            )));
        }
        let mask = ckpt
            .mask
            .as_ref()
            .ok_or_else(|| ManifoldError::Checkpoint("missing state mask".into()))?;
        let reduced: Vec<DVector<f64>> = ds
            .states
            .iter()
            .map(|x| apply_mask(x, &mask.retained))
            .collect();
        let mut frozen = gp_cfg.clone();
        frozen.max_iters = 0;
        let mut entries = Vec::with_capacity(ckpt.entries.len());
        for (idx, entry) in ckpt.entries.iter().enumerate() {
            entries.push(match entry {
                EntryCheckpoint::Constant(v) => EntryModel::Constant(*v),
                EntryCheckpoint::Gp(hyper) => {
                    let values: Vec<f64> = ds
                        .gammas
                        .iter()
                        .map(|g| g[(idx / width, idx % width)])
                        .collect();
                    let mut sub = frozen.clone();
                    sub.init = Some(hyper.clone());
                    sub.seed = subseed(gp_cfg.seed, "manifold-entry", idx as u64);
                    entries_gp(&reduced, &values, &sub)?
                }
            });
        }
        Ok(ManifoldModel {
            constraint_count: ckpt.constraint_count,
            state_dim: ckpt.state_dim,
            metric: ckpt.metric.clone(),
            mask: ckpt.mask.clone(),
            entries,
        })
    }
}

fn entries_gp(
    inputs: &[DVector<f64>],
    values: &[f64],
    cfg: &FitConfig,
) -> Result<EntryModel, GpError> {
    Ok(EntryModel::Gp(Box::new(ScalarGp::fit(inputs, values, cfg)?)))
}

/// Stored form of one constraint-row entry.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum EntryCheckpoint {
    Constant(f64),
    Gp(KernelHyperparams),
}

/// Stored form of a [`ManifoldModel`]: everything except GP conditioning
/// state, which [`ManifoldModel::restore`] recomputes from the constraint
/// dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifoldCheckpoint {
    pub constraint_count: usize,
    pub state_dim: usize,
    pub metric: Option<TrainedMetric>,
    pub mask: Option<SparsityMask>,
    pub entries: Vec<EntryCheckpoint>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::TrueDynamics;
    use crate::systems::{PlanarQuadrotor, System, Unicycle};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// Random unicycle states inside the benchmark's heading band.
    fn band_states(count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                vecd(&[
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(FRAC_PI_2 - 0.2..FRAC_PI_2 + 0.2),
                ])
            })
            .collect()
    }

    #[test]
    fn lma_rows_match_hand_computation() {
        // Unicycle at the origin heading 0, controls (1,0), (0,1), (1,1).
        let sys = Unicycle::default();
        let model = TrueDynamics(&sys);
        let x = vecd(&[0.0, 0.0, 0.0]);
        let controls = vec![vecd(&[1.0, 0.0]), vecd(&[0.0, 1.0]), vecd(&[1.0, 1.0])];
        let a = build_lma(&model, &x, &controls);
        let expected = DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                1.0, 0.0, 1.0, 1.0,
            ],
        );
        assert_eq!(a, expected);

        let null = null_space_basis(&a, 1e-2);
        assert_eq!(null.detected, 1);
        // Null direction is ±e₂ (the p_y velocity can never be nonzero here).
        let v = null.basis.column(0);
        assert_relative_eq!(v[1].abs(), 1.0, epsilon = 1e-12);
        for i in [0usize, 2, 3] {
            assert!(v[i].abs() < 1e-12);
        }
        assert!((&a * &null.basis).norm() < 1e-12);
    }

    #[test]
    fn null_space_threshold_splits_spectrum() {
        // Rows confined to a plane in R³ (plus bias): two large σ, two tiny.
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 2.0, 0.0, 1.0, //
                2.0, 4.0, 0.0, 1.0, //
                -1.0, -2.0, 0.0, 1.0, //
                0.5, 1.0, 0.0, 1.0,
            ],
        );
        let null = null_space_basis(&a, 1e-6);
        assert_eq!(null.detected, 2);
        assert!((&a * &null.basis).norm() < 1e-9);
        assert_eq!(null.singular_values.len(), 4);
        for w in null.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn standardization_gives_leading_one_rows_and_ignores_basis_choice() {
        let basis = DMatrix::from_column_slice(4, 1, &[0.0, -0.7, 0.0, 0.0]);
        let gamma = standardize_basis(&basis, 1e-9);
        assert_eq!(gamma, DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]));

        // Any basis of the same space standardizes identically: mix two
        // spanning vectors with an arbitrary invertible 2×2, including sign
        // scrambles, and the echelon form comes out the same.
        let v1 = vecd(&[1.0, 0.0, 2.0, -1.0]);
        let v2 = vecd(&[0.0, 1.0, -0.5, 3.0]);
        let span = DMatrix::from_columns(&[v1.clone(), v2.clone()]);
        let canon = standardize_basis(&span, 1e-9);
        for (a, b, c, d) in [(2.0, 1.0, -1.0, 0.5), (-1.0, 0.0, 3.0, -2.0)] {
            let mixed = DMatrix::from_columns(&[
                a * &v1 + b * &v2,
                c * &v1 + d * &v2,
            ]);
            let gamma = standardize_basis(&mixed, 1e-9);
            assert!((&gamma - &canon).amax() < 1e-12);
        }
    }

    #[test]
    fn unicycle_constraint_recovered_from_exact_dynamics() {
        let sys = Unicycle::default();
        let model = TrueDynamics(&sys);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for x in band_states(25, 77) {
            let controls: Vec<DVector<f64>> = (0..8)
                .map(|_| {
                    vecd(&[
                        rng.gen_range(0.15..0.6),
                        rng.gen_range(-0.4..0.4),
                    ])
                })
                .collect();
            let a = build_lma(&model, &x, &controls);
            let null = null_space_basis(&a, 1e-2);
            assert_eq!(null.detected, 1, "at state {x}");
            let gamma = standardize_basis(&null.basis, 1e-9);
            let truth = sys.true_constraint(&x);
            assert!((gamma - truth).amax() < 1e-9);
        }
    }

    #[test]
    fn quadrotor_constraints_recovered_from_exact_dynamics() {
        let sys = PlanarQuadrotor::default();
        let model = TrueDynamics(&sys);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bounds = sys.control_bounds();
        for _ in 0..15 {
            let x = vecd(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..1.5),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.3..0.3),
            ]);
            let controls: Vec<DVector<f64>> = (0..8)
                .map(|_| {
                    vecd(&[
                        rng.gen_range(bounds[0].0..bounds[0].1),
                        rng.gen_range(bounds[1].0..bounds[1].1),
                    ])
                })
                .collect();
            let a = build_lma(&model, &x, &controls);
            let null = null_space_basis(&a, 1e-2);
            // Two controls can only span 3 of the 7 lifted dimensions, so
            // four directions vanish: the three kinematic identities plus
            // the thrust-direction constraint.
            assert_eq!(null.detected, 4, "at state {x}");
            let gamma = standardize_basis(&null.basis, 1e-9);
            let truth = sys.true_constraint(&x);
            assert!(
                (&gamma - &truth).amax() < 1e-8,
                "gamma {gamma} truth {truth}"
            );
            // The thrust row carries the g·tanθ bias.
            assert_relative_eq!(
                gamma[(3, 6)],
                9.81 * x[2].tan(),
                epsilon = 1e-8,
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn constraint_dataset_agrees_with_analytic_rows() {
        let sys = Unicycle::default();
        let model = TrueDynamics(&sys);
        let states = band_states(30, 11);
        let cfg = ConstraintDatasetConfig {
            expected_constraints: Some(1),
            seed: 5,
            ..ConstraintDatasetConfig::default()
        };
        let ds = build_constraint_dataset(&model, &states, &sys.control_bounds(), &cfg).unwrap();
        assert_eq!(ds.constraint_count, 1);
        assert!(ds.discarded.is_empty());
        assert_eq!(ds.states.len(), 30);
        for (x, gamma) in ds.states.iter().zip(&ds.gammas) {
            assert!((gamma - sys.true_constraint(x)).amax() < 1e-9);
        }
        // Sign continuity: canonical rows never flip between nearby states.
        for pair in ds.gammas.windows(2) {
            assert!(pair[0].row(0).dot(&pair[1].row(0)) > 0.0);
        }
        // Null residuals stay below the detection threshold by construction.
        for spectrum in &ds.spectra {
            let threshold = ds.svd_eps_rel * spectrum[0];
            assert!(spectrum.last().unwrap() < &threshold);
        }
    }

    #[test]
    fn inconsistent_counts_are_discarded_or_rejected() {
        // Planted fault: beyond x₀ = 0.5 the model loses a control direction,
        // which doubles the null space there.
        let faulty = |x: &DVector<f64>, u: &DVector<f64>| {
            if x[0] > 0.5 {
                vecd(&[u[0], 0.0, 0.0])
            } else {
                vecd(&[u[0], u[1], 0.0])
            }
        };
        let bounds = [(-1.0, 1.0), (-1.0, 1.0)];
        let cfg = ConstraintDatasetConfig {
            seed: 9,
            ..ConstraintDatasetConfig::default()
        };
        // 2 of 40 states faulted: tolerated, discarded, logged.
        let mut states: Vec<DVector<f64>> = (0..38)
            .map(|i| vecd(&[-1.0 + 0.03 * i as f64, 0.3, 0.0]))
            .collect();
        states.push(vecd(&[0.9, 0.0, 0.0]));
        states.push(vecd(&[0.8, 0.1, 0.0]));
        let ds = build_constraint_dataset(&faulty, &states, &bounds, &cfg).unwrap();
        assert_eq!(ds.constraint_count, 1);
        assert_eq!(ds.discarded, vec![38, 39]);
        assert_eq!(ds.states.len(), 38);

        // 12 of 40: consensus breaks, the builder refuses.
        let mut states: Vec<DVector<f64>> = (0..28)
            .map(|i| vecd(&[-1.0 + 0.03 * i as f64, 0.3, 0.0]))
            .collect();
        for i in 0..12 {
            states.push(vecd(&[0.6 + 0.01 * i as f64, 0.0, 0.0]));
        }
        let err = build_constraint_dataset(&faulty, &states, &bounds, &cfg).unwrap_err();
        assert!(matches!(err, ManifoldError::InconsistentCounts { .. }));
        let msg = err.to_string();
        assert!(msg.contains("70.0%") && msg.contains("σ="), "message: {msg}");
    }

    #[test]
    fn constraint_free_systems_yield_empty_models() {
        // Fully actuated: ẋ = u spans everything, no constraint exists.
        let free = |_x: &DVector<f64>, u: &DVector<f64>| u.clone();
        let bounds = [(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)];
        let states: Vec<DVector<f64>> = (0..10)
            .map(|i| vecd(&[0.1 * i as f64, 0.0, 0.0]))
            .collect();
        let cfg = ConstraintDatasetConfig {
            controls_per_state: 12,
            seed: 1,
            ..ConstraintDatasetConfig::default()
        };
        let ds = build_constraint_dataset(&free, &states, &bounds, &cfg).unwrap();
        assert_eq!(ds.constraint_count, 0);
        assert!(ds.gammas.iter().all(|g| g.nrows() == 0));

        let model = train_manifold(&ds, &ManifoldTrainConfig::default()).unwrap();
        assert_eq!(model.constraint_count, 0);
        let gamma = model.predict_gamma(&vecd(&[0.0, 0.0, 0.0]));
        assert_eq!(gamma.nrows(), 0);
        assert_eq!(gamma.ncols(), 4);
    }

    #[test]
    fn too_few_controls_is_rejected_up_front() {
        let sys = Unicycle::default();
        let model = TrueDynamics(&sys);
        let states = band_states(3, 1);
        let cfg = ConstraintDatasetConfig {
            controls_per_state: 1,
            expected_constraints: Some(1),
            ..ConstraintDatasetConfig::default()
        };
        let err =
            build_constraint_dataset(&model, &states, &sys.control_bounds(), &cfg).unwrap_err();
        assert!(matches!(
            err,
            ManifoldError::TooFewControls { need: 2, got: 1, .. }
        ));
    }

    #[test]
    fn trained_manifold_masks_positions_and_predicts_rows() {
        let sys = Unicycle::default();
        let model = TrueDynamics(&sys);
        let states = band_states(60, 21);
        let cfg = ConstraintDatasetConfig {
            expected_constraints: Some(1),
            seed: 2,
            ..ConstraintDatasetConfig::default()
        };
        let ds = build_constraint_dataset(&model, &states, &sys.control_bounds(), &cfg).unwrap();
        let train_cfg = ManifoldTrainConfig {
            metric: MetricTrainConfig {
                steps: 1500,
                seed: 3,
                ..MetricTrainConfig::default()
            },
            ..ManifoldTrainConfig::default()
        };
        let model = train_manifold(&ds, &train_cfg).unwrap();
        assert_eq!(model.constraint_count, 1);
        // Only the heading influences the rows; positions drop out.
        let mask = model.mask.as_ref().unwrap();
        assert_eq!(mask.retained, vec![false, false, true]);
        // Three of the four entries are constants, one GP regresses −cot θ.
        assert_eq!(model.gp_entry_count(), 1);

        // Held-out states, including far-away positions (mask ignores them).
        for x in [
            vecd(&[0.2, -0.4, FRAC_PI_2 + 0.05]),
            vecd(&[40.0, -35.0, FRAC_PI_2 - 0.13]),
            vecd(&[5.0, 5.0, FRAC_PI_2 + 0.18]),
        ] {
            let gamma = model.predict_gamma(&x);
            let truth = sys.true_constraint(&x);
            assert!(
                (&gamma - &truth).amax() < 1e-2,
                "gamma {gamma} truth {truth}"
            );
            let (g, b) = model.constraint_at(&x);
            assert_eq!(g.ncols(), 3);
            assert_eq!(b.len(), 1);
            assert_relative_eq!(g[(0, 0)], gamma[(0, 0)]);
            assert_relative_eq!(b[0], gamma[(0, 3)]);
        }
    }

    #[test]
    fn eval_constraint_computes_residuals() {
        let gamma = DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]);
        let r = eval_constraint(&gamma, &vecd(&[1.0, 1.0, 1.0]));
        assert_eq!(r, vecd(&[1.0]));
        // Unicycle analytic rows annihilate the true velocity exactly.
        let sys = Unicycle::default();
        let x = vecd(&[0.3, -0.2, FRAC_PI_4]);
        let xdot = sys.dynamics(&x, &vecd(&[0.5, 0.1]));
        let r = eval_constraint(&sys.true_constraint(&x), &xdot);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn control_insensitive_model_is_rank_deficient() {
        // A model that ignores its controls yields identical LMA rows, so
        // the row space cannot reach rank n − c even after the resample.
        let constant = |_: &DVector<f64>, _: &DVector<f64>| vecd(&[1.0, 2.0, 3.0]);
        let err = build_constraint_dataset(
            &constant,
            &band_states(4, 0),
            &[(0.15, 0.6), (-0.4, 0.4)],
            &ConstraintDatasetConfig {
                expected_constraints: Some(1),
                ..ConstraintDatasetConfig::default()
            },
        )
        .unwrap_err();
        match err {
            ManifoldError::RankDeficient { have, need, .. } => {
                assert_eq!(have, 1);
                assert_eq!(need, 2);
            }
            other => panic!("expected rank deficiency, got {other}"),
        }
    }
}
