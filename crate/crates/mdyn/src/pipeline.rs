//! Configuration-driven pipeline: dataset generation, staged training with
//! resumable checkpoints, evaluation, parameter sweeps, and report
//! summarization.
//!
//! A pipeline is described by a TOML file:
//!
//! ```toml
//! seed = 0
//!
//! [system]
//! kind = "unicycle"            # or "planar_quadrotor"
//!
//! [data]
//! n_trajectories = 20
//! horizon = 50
//! dt = 0.1
//! control_hold = 10
//! train_region = { lo = [-1.0, -1.0, 1.37], hi = [1.0, 1.0, 1.77] }
//! test_region  = { lo = [4.0, 4.0, 1.37],  hi = [6.0, 6.0, 1.77] }
//! ood_margin = 3.0
//! noise_std = 0.0
//! test_count = 500
//!
//! [metric]                     # input-relevance metric for the dynamics
//! steps = 2000
//! mask_rel_threshold = 0.01
//!
//! [gp]                         # dynamics GP optimizer settings
//! restarts = 3
//! max_iters = 200
//!
//! [manifold]                   # constraint discovery
//! expected_constraints = 1
//! svd_eps_rel = 0.01
//! ```
//!
//! Training runs in five stages, each writing a JSON checkpoint under
//! `<out>/checkpoints/` keyed by a hash of the training configuration and a
//! hash of the dataset files. A rerun with matching hashes *restores* the
//! stage bit-for-bit instead of retraining; any config or data change makes
//! the stale checkpoint invisible and the stage retrains. A checkpoint that
//! exists but cannot be parsed stops the run with an error naming the file
//! (it is never silently overwritten).
//!
//! Errors carry process exit codes: configuration problems exit 2, training
//! failures 3, evaluation failures 4.

use crate::datasets::{
    generate_bundle, load_bundle, save_bundle, subseed, DataError, DatasetBundle,
    GenerationConfig, Partition, Region, MANIFEST_FILE, OFFLINE_FILE, ONLINE_FILE, TEST_FILE,
};
use crate::eval::{aggregate, evaluate, residuals_csv, AggregateReport, EvalReport};
use crate::gp::{fit_igp, DynamicsModel, FitConfig, IgpCheckpoint, IgpModel};
use crate::manifold::{
    build_constraint_dataset, default_control_count, train_manifold, ConstraintDataset,
    ConstraintDatasetConfig, ManifoldCheckpoint, ManifoldModel, ManifoldTrainConfig,
};
use crate::metric::{
    extract_mask, train_pseudometric, MetricTrainConfig, SparsityMask, TrainedMetric,
};
use crate::project::{ProjectedDynamics, TrueProjectedDynamics};
use crate::systems::{System, SystemKind};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("evaluation failure: {0}")]
    Evaluation(String),
}

impl PipelineError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Training(_) => 3,
            PipelineError::Evaluation(_) => 4,
        }
    }
}

/// The model lineup `eval` knows how to build, in report order: the
/// full-input GP, the metric-masked GP, the masked GP projected onto the
/// learned constraint, and the masked GP projected onto the analytic
/// constraint (an upper bound on what projection can contribute).
pub const STANDARD_MODELS: [&str; 4] =
    ["gp_full", "gp_sparse", "gp_sparse_proj", "gp_sparse_proj_true"];

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub kind: SystemKind,
}

/// The `[data]` section: everything [`GenerationConfig`] needs except the
/// seed, which comes from the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub dt: f64,
    pub control_hold: usize,
    pub train_region: Region,
    pub test_region: Region,
    pub ood_margin: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub test_count: usize,
}

impl DataSection {
    fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            n_trajectories: self.n_trajectories,
            horizon: self.horizon,
            dt: self.dt,
            control_hold: self.control_hold,
            train_region: self.train_region.clone(),
            test_region: self.test_region.clone(),
            ood_margin: self.ood_margin,
            noise_std: self.noise_std,
            test_count: self.test_count,
            seed,
        }
    }
}

/// The `[metric]` section: contrastive-training settings for the dynamics
/// input-relevance metric, plus the threshold that distills its diagonal
/// into the sparse model's input mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub min_separation_frac: f64,
    pub standardize: bool,
    /// Keep input dimension `i` when `diag[i] > threshold · max(diag)`.
    pub mask_rel_threshold: f64,
}

impl Default for MetricSection {
    fn default() -> Self {
        let m = MetricTrainConfig::default();
        MetricSection {
            steps: m.steps,
            learning_rate: m.learning_rate,
            batch_size: m.batch_size,
            min_separation_frac: m.min_separation_frac,
            standardize: m.standardize,
            mask_rel_threshold: 1e-2,
        }
    }
}

impl MetricSection {
    fn train_config(&self, seed: u64) -> MetricTrainConfig {
        MetricTrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            min_separation_frac: self.min_separation_frac,
            standardize: self.standardize,
            seed,
        }
    }
}

/// The `[manifold]` section: constraint-dataset extraction plus the
/// constraint-regression models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldSection {
    /// Probe controls per state; 0 picks
    /// [`default_control_count`]`(n, expected_constraints)`.
    pub controls_per_state: usize,
    pub svd_eps_rel: f64,
    pub rref_tol: f64,
    pub expected_constraints: Option<usize>,
    pub min_coverage: f64,
    /// Threshold for the constraint metric's state mask.
    pub mask_rel_threshold: f64,
    /// Probe at most this many training states (deterministic stride
    /// subsample); 0 probes all of them.
    pub max_states: usize,
    pub metric: MetricTrainConfig,
    pub gp: FitConfig,
}

impl Default for ManifoldSection {
    fn default() -> Self {
        let ds = ConstraintDatasetConfig::default();
        let tr = ManifoldTrainConfig::default();
        ManifoldSection {
            controls_per_state: 0,
            svd_eps_rel: ds.svd_eps_rel,
            rref_tol: ds.rref_tol,
            expected_constraints: None,
            min_coverage: ds.min_coverage,
            mask_rel_threshold: tr.mask_rel_threshold,
            max_states: 512,
            metric: tr.metric,
            gp: tr.gp,
        }
    }
}

impl ManifoldSection {
    fn dataset_config(&self, state_dim: usize, seed: u64) -> ConstraintDatasetConfig {
        let controls = if self.controls_per_state == 0 {
            default_control_count(state_dim, self.expected_constraints.unwrap_or(0))
        } else {
            self.controls_per_state
        };
        ConstraintDatasetConfig {
            controls_per_state: controls,
            svd_eps_rel: self.svd_eps_rel,
            rref_tol: self.rref_tol,
            expected_constraints: self.expected_constraints,
            min_coverage: self.min_coverage,
            seed,
        }
    }

    fn train_config(&self, metric_seed: u64, gp_seed: u64) -> ManifoldTrainConfig {
        let mut metric = self.metric.clone();
        metric.seed = metric_seed;
        let mut gp = self.gp.clone();
        gp.seed = gp_seed;
        ManifoldTrainConfig {
            metric,
            gp,
            mask_rel_threshold: self.mask_rel_threshold,
        }
    }
}

/// The `[eval]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Models to score, a subset of [`STANDARD_MODELS`]. The CLI `--models`
    /// flag overrides this.
    pub models: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            models: STANDARD_MODELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The `[sweep]` section: one-factor-at-a-time axes. Every cell varies a
/// single knob against the base configuration and runs the same `seeds`
/// consecutive seeds, so cells are directly comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: usize,
    pub mask_rel_threshold: Vec<f64>,
    pub svd_eps_rel: Vec<f64>,
    pub controls_per_state: Vec<usize>,
    pub noise_std: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            seeds: 3,
            mask_rel_threshold: vec![1e-3, 1e-2, 1e-1],
            svd_eps_rel: vec![1e-3, 1e-2, 1e-1],
            controls_per_state: vec![4, 8, 16],
            noise_std: vec![0.0, 1e-3, 1e-2],
        }
    }
}

/// A full pipeline description (one TOML file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub data: DataSection,
    #[serde(default)]
    pub metric: MetricSection,
    #[serde(default)]
    pub gp: FitConfig,
    #[serde(default)]
    pub manifold: ManifoldSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl PipelineConfig {
    /// Parse a TOML string and validate it.
    pub fn from_toml(text: &str) -> Result<PipelineConfig, PipelineError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        let sys = self.system.kind.build();
        let n = sys.state_dim();
        for (name, region) in [
            ("data.train_region", &self.data.train_region),
            ("data.test_region", &self.data.test_region),
        ] {
            if region.lo.len() != n || region.hi.len() != n {
                return bad(format!(
                    "{name} must have {n} bounds for {}, got lo={}, hi={}",
                    sys.name(),
                    region.lo.len(),
                    region.hi.len()
                ));
            }
            if region.lo.iter().zip(&region.hi).any(|(l, h)| l > h) {
                return bad(format!("{name} has lo > hi"));
            }
            if region
                .lo
                .iter()
                .chain(&region.hi)
                .any(|v| !v.is_finite())
            {
                return bad(format!("{name} has non-finite bounds"));
            }
        }
        if self.data.n_trajectories == 0 {
            return bad("data.n_trajectories must be positive".into());
        }
        if self.data.horizon < 2 {
            return bad("data.horizon must be at least 2".into());
        }
        if !(self.data.dt.is_finite() && self.data.dt > 0.0) {
            return bad("data.dt must be positive".into());
        }
        if self.data.control_hold == 0 {
            return bad("data.control_hold must be positive".into());
        }
        if !(self.data.ood_margin.is_finite() && self.data.ood_margin >= 0.0) {
            return bad("data.ood_margin must be non-negative".into());
        }
        if !(self.data.noise_std.is_finite() && self.data.noise_std >= 0.0) {
            return bad("data.noise_std must be non-negative".into());
        }
        if self.data.test_count == 0 {
            return bad("data.test_count must be positive".into());
        }
        for (name, m) in [
            ("metric", &self.metric.train_config(0)),
            ("manifold.metric", &self.manifold.metric),
        ] {
            if m.steps == 0 {
                return bad(format!("{name}.steps must be positive"));
            }
            if !(m.learning_rate.is_finite() && m.learning_rate > 0.0) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
            if m.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
            if !(m.min_separation_frac.is_finite() && m.min_separation_frac > 0.0) {
                return bad(format!("{name}.min_separation_frac must be positive"));
            }
        }
        for (name, g) in [("gp", &self.gp), ("manifold.gp", &self.manifold.gp)] {
            if !(g.rel_tol.is_finite() && g.rel_tol > 0.0) {
                return bad(format!("{name}.rel_tol must be positive"));
            }
        }
        for (name, t) in [
            ("metric.mask_rel_threshold", self.metric.mask_rel_threshold),
            (
                "manifold.mask_rel_threshold",
                self.manifold.mask_rel_threshold,
            ),
            ("manifold.svd_eps_rel", self.manifold.svd_eps_rel),
        ] {
            if !(t.is_finite() && t > 0.0 && t < 1.0) {
                return bad(format!("{name} must lie strictly between 0 and 1"));
            }
        }
        if !(self.manifold.rref_tol.is_finite() && self.manifold.rref_tol > 0.0) {
            return bad("manifold.rref_tol must be positive".into());
        }
        if !(self.manifold.min_coverage > 0.0 && self.manifold.min_coverage <= 1.0) {
            return bad("manifold.min_coverage must lie in (0, 1]".into());
        }
        if let Some(c) = self.manifold.expected_constraints {
            if c == 0 || c >= n {
                return bad(format!(
                    "manifold.expected_constraints must lie in 1..{n} for {}",
                    sys.name()
                ));
            }
        }
        if self.eval.models.is_empty() {
            return bad("eval.models must not be empty".into());
        }
        for m in &self.eval.models {
            if !STANDARD_MODELS.contains(&m.as_str()) {
                return bad(format!(
                    "unknown model {m:?} in eval.models; available: {}",
                    STANDARD_MODELS.join(", ")
                ));
            }
        }
        if self.sweep.seeds == 0 {
            return bad("sweep.seeds must be positive".into());
        }
        for v in &self.sweep.mask_rel_threshold {
            if !(v.is_finite() && *v > 0.0 && *v < 1.0) {
                return bad("sweep.mask_rel_threshold values must lie in (0, 1)".into());
            }
        }
        for v in &self.sweep.svd_eps_rel {
            if !(v.is_finite() && *v > 0.0 && *v < 1.0) {
                return bad("sweep.svd_eps_rel values must lie in (0, 1)".into());
            }
        }
        for v in &self.sweep.noise_std {
            if !(v.is_finite() && *v >= 0.0) {
                return bad("sweep.noise_std values must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// Read and validate a pipeline configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    PipelineConfig::from_toml(&text)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of the full effective configuration; recorded in evaluation reports.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_hex(
        serde_json::to_string(cfg)
            .expect("serializable config")
            .as_bytes(),
    )
}

/// Hash of the training-relevant configuration (everything except `[eval]`
/// and `[sweep]`), so evaluation-only edits keep training checkpoints valid.
fn train_hash(cfg: &PipelineConfig) -> String {
    #[derive(Serialize)]
    struct TrainKey<'a> {
        seed: u64,
        system: &'a SystemSection,
        data: &'a DataSection,
        metric: &'a MetricSection,
        gp: &'a FitConfig,
        manifold: &'a ManifoldSection,
    }
    let key = TrainKey {
        seed: cfg.seed,
        system: &cfg.system,
        data: &cfg.data,
        metric: &cfg.metric,
        gp: &cfg.gp,
        manifold: &cfg.manifold,
    };
    sha256_hex(
        serde_json::to_string(&key)
            .expect("serializable train key")
            .as_bytes(),
    )
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    config_hash: String,
    data_hash: String,
    payload: T,
}

fn write_text(path: &Path, text: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn save_stage<T: Serialize>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    data_hash: &str,
    payload: &T,
) -> Result<(), PipelineError> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        data_hash: data_hash.to_string(),
        payload,
    };
    let mut json = serde_json::to_string_pretty(&env)
        .map_err(|e| PipelineError::Training(format!("cannot serialize {kind}: {e}")))?;
    json.push('\n');
    write_text(path, &json).map_err(PipelineError::Training)
}

/// Read a checkpoint envelope. Missing file → `None`; unreadable or
/// wrong-kind file → error naming the file; stale version → `None` (the
/// stage retrains and overwrites).
fn load_envelope<T: serde::de::DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<Option<Envelope<T>>, PipelineError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| {
        PipelineError::Training(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| {
        PipelineError::Training(format!("checkpoint {} is corrupt: {e}", path.display()))
    })?;
    if env.kind != kind {
        return Err(PipelineError::Training(format!(
            "checkpoint {} holds {:?}, expected {:?}",
            path.display(),
            env.kind,
            kind
        )));
    }
    if env.version != CHECKPOINT_VERSION {
        log::warn!(
            "checkpoint {} has version {} (current {}); retraining",
            path.display(),
            env.version,
            CHECKPOINT_VERSION
        );
        return Ok(None);
    }
    Ok(Some(env))
}

/// Load a stage payload when its hashes match the current run.
fn load_stage<T: serde::de::DeserializeOwned>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    data_hash: &str,
) -> Result<Option<T>, PipelineError> {
    match load_envelope::<T>(path, kind)? {
        Some(env) if env.config_hash == config_hash && env.data_hash == data_hash => {
            Ok(Some(env.payload))
        }
        Some(_) => {
            log::info!(
                "checkpoint {} is stale (config or data changed); retraining",
                path.display()
            );
            Ok(None)
        }
        None => Ok(None),
    }
}

/// Hash the dataset files a bundle directory holds, in manifest order.
fn bundle_files_hash(dir: &Path) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    for name in [MANIFEST_FILE, OFFLINE_FILE, ONLINE_FILE, TEST_FILE] {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            PipelineError::Training(format!("cannot read {}: {e}", path.display()))
        })?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

fn classify_data(e: DataError) -> PipelineError {
    match e {
        DataError::Config(_) => PipelineError::Config(e.to_string()),
        other => PipelineError::Training(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Generate the dataset bundle under `out` (or reuse a matching one).
///
/// A `generation.json` stamp records the exact generation settings and the
/// hash of the written files. The bundle is reused only when the stamp, the
/// settings, and the file hashes all agree; files that exist without a
/// matching stamp are never overwritten.
pub fn run_generate(
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<(DatasetBundle, String), PipelineError> {
    let sys = cfg.system.kind.build();
    let gen = cfg.data.generation(cfg.seed);
    let gen_hash = sha256_hex(
        serde_json::to_string(&gen)
            .expect("serializable generation config")
            .as_bytes(),
    );
    let stamp_path = out.join("generation.json");
    match load_envelope::<GenerationConfig>(&stamp_path, "generation")? {
        Some(env) if env.config_hash == gen_hash && env.payload == gen => {
            let bundle = load_bundle(out).map_err(|e| {
                PipelineError::Training(format!(
                    "dataset under {} is unreadable ({e}); remove it to regenerate",
                    out.display()
                ))
            })?;
            let files_hash = bundle_files_hash(out)?;
            if files_hash != env.data_hash {
                return Err(PipelineError::Training(format!(
                    "dataset files under {} were modified after generation; \
                     remove them to regenerate",
                    out.display()
                )));
            }
            log::info!(
                "dataset: reusing {} offline + 1 online trajectories, {} test points",
                bundle.meta.n_offline,
                bundle.test.len()
            );
            return Ok((bundle, files_hash));
        }
        Some(_) => {
            log::info!("dataset stamp is stale; regenerating");
        }
        None => {
            if out.join(MANIFEST_FILE).exists() {
                return Err(PipelineError::Training(format!(
                    "{} holds a dataset without a generation stamp; refusing to overwrite",
                    out.display()
                )));
            }
        }
    }
    let start = Instant::now();
    let bundle = generate_bundle(sys.as_ref(), &gen).map_err(classify_data)?;
    save_bundle(&bundle, out).map_err(classify_data)?;
    let files_hash = bundle_files_hash(out)?;
    save_stage(&stamp_path, "generation", &gen_hash, &files_hash, &gen)?;
    log::info!(
        "dataset: generated {} offline + 1 online trajectories, {} test points in {:.1}s",
        bundle.meta.n_offline,
        bundle.test.len(),
        start.elapsed().as_secs_f64()
    );
    Ok((bundle, files_hash))
}

/// Everything training produces, ready for evaluation.
pub struct TrainedArtifacts {
    pub system: Box<dyn System>,
    pub bundle: DatasetBundle,
    pub data_hash: String,
    /// Input-relevance metric over `[x; u]` learned from the dynamics data.
    pub metric: TrainedMetric,
    /// Input mask distilled from the metric diagonal.
    pub mask: SparsityMask,
    /// GP dynamics model on all inputs.
    pub full: IgpModel,
    /// GP dynamics model on masked inputs.
    pub sparse: IgpModel,
    /// Constraint rows extracted from the sparse model.
    pub dataset: ConstraintDataset,
    /// Constraint-row regression (the learned manifold).
    pub manifold: ManifoldModel,
}

#[derive(Serialize, Deserialize)]
struct MetricStage {
    metric: TrainedMetric,
    mask: SparsityMask,
}

#[derive(Serialize, Deserialize)]
struct ConstraintDatasetWire {
    constraint_count: usize,
    state_dim: usize,
    svd_eps_rel: f64,
    states: Vec<Vec<f64>>,
    /// Row-major `c × (n+1)` entries per state.
    gammas: Vec<Vec<f64>>,
    spectra: Vec<Vec<f64>>,
    discarded: Vec<usize>,
}

impl ConstraintDatasetWire {
    fn from_dataset(ds: &ConstraintDataset) -> ConstraintDatasetWire {
        let state_dim = ds.states.first().map_or(0, |x| x.len());
        ConstraintDatasetWire {
            constraint_count: ds.constraint_count,
            state_dim,
            svd_eps_rel: ds.svd_eps_rel,
            states: ds.states.iter().map(|x| x.as_slice().to_vec()).collect(),
            gammas: ds
                .gammas
                .iter()
                .map(|g| {
                    let mut row_major = Vec::with_capacity(g.nrows() * g.ncols());
                    for r in 0..g.nrows() {
                        for c in 0..g.ncols() {
                            row_major.push(g[(r, c)]);
                        }
                    }
                    row_major
                })
                .collect(),
            spectra: ds.spectra.clone(),
            discarded: ds.discarded.clone(),
        }
    }

    fn into_dataset(self) -> Result<ConstraintDataset, PipelineError> {
        let width = self.state_dim + 1;
        let c = self.constraint_count;
        let mut gammas = Vec::with_capacity(self.gammas.len());
        for row_major in &self.gammas {
            if row_major.len() != c * width {
                return Err(PipelineError::Training(format!(
                    "constraint dataset entry holds {} values, expected {}",
                    row_major.len(),
                    c * width
                )));
            }
            gammas.push(nalgebra::DMatrix::from_row_slice(c, width, row_major));
        }
        Ok(ConstraintDataset {
            states: self.states.into_iter().map(DVector::from_vec).collect(),
            gammas,
            spectra: self.spectra,
            constraint_count: c,
            discarded: self.discarded,
            svd_eps_rel: self.svd_eps_rel,
        })
    }
}

fn joined(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + u.len());
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), u.len()).copy_from(u);
    v
}

fn stride_cap<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if cap == 0 || items.len() <= cap {
        return items.to_vec();
    }
    let stride = items.len().div_ceil(cap);
    items.iter().step_by(stride).cloned().collect()
}

/// Run (or resume) all training stages under `out`.
pub fn run_train(cfg: &PipelineConfig, out: &Path) -> Result<TrainedArtifacts, PipelineError> {
    let sys = cfg.system.kind.build();
    let (bundle, data_hash) = run_generate(cfg, out)?;
    let th = train_hash(cfg);
    let ckpt = out.join("checkpoints");
    let n = sys.state_dim();

    let samples = bundle.flatten(Partition::Training);
    let inputs: Vec<DVector<f64>> = samples.iter().map(|s| joined(&s.state, &s.control)).collect();
    let labels: Vec<DVector<f64>> = samples.iter().map(|s| s.deriv.clone()).collect();

    // Stage 1: input-relevance metric for the dynamics map.
    let metric_path = ckpt.join("metric_dynamics.json");
    let start = Instant::now();
    let (metric, mask, loaded) =
        match load_stage::<MetricStage>(&metric_path, "metric_dynamics", &th, &data_hash)? {
            Some(stage) => (stage.metric, stage.mask, true),
            None => {
                let metric_cfg = cfg
                    .metric
                    .train_config(subseed(cfg.seed, "stage-metric", 0));
                let metric = train_pseudometric(&inputs, &labels, &metric_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?;
                let mask = extract_mask(&metric.pseudometric, cfg.metric.mask_rel_threshold);
                save_stage(
                    &metric_path,
                    "metric_dynamics",
                    &th,
                    &data_hash,
                    &MetricStage {
                        metric: metric.clone(),
                        mask: mask.clone(),
                    },
                )?;
                (metric, mask, false)
            }
        };
    log::info!(
        "metric: {} loss {:.4} -> {:.4}, mask {:?} ({:.1}s)",
        if loaded { "restored" } else { "trained" },
        metric.initial_loss,
        metric.final_loss,
        mask.retained,
        start.elapsed().as_secs_f64()
    );

    // Stage 2: dynamics GP on all inputs.
    let full_path = ckpt.join("dynamics_full.json");
    let mut gp_full_cfg = cfg.gp.clone();
    gp_full_cfg.seed = subseed(cfg.seed, "stage-gp-full", 0);
    let start = Instant::now();
    let all = vec![true; n + sys.control_dim()];
    let (full, loaded) =
        match load_stage::<IgpCheckpoint>(&full_path, "dynamics_full", &th, &data_hash)? {
            Some(c) => (
                IgpModel::restore(&c, &inputs, &labels, &gp_full_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?,
                true,
            ),
            None => {
                let model = fit_igp(&inputs, &labels, &all, &gp_full_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?;
                save_stage(&full_path, "dynamics_full", &th, &data_hash, &model.checkpoint())?;
                (model, false)
            }
        };
    log::info!(
        "dynamics_full: {} {} outputs on {} points ({:.1}s)",
        if loaded { "restored" } else { "trained" },
        full.output_dim(),
        inputs.len(),
        start.elapsed().as_secs_f64()
    );

    // Stage 3: dynamics GP on metric-masked inputs.
    let sparse_path = ckpt.join("dynamics_sparse.json");
    let mut gp_sparse_cfg = cfg.gp.clone();
    gp_sparse_cfg.seed = subseed(cfg.seed, "stage-gp-sparse", 0);
    let start = Instant::now();
    let (sparse, loaded) =
        match load_stage::<IgpCheckpoint>(&sparse_path, "dynamics_sparse", &th, &data_hash)? {
            Some(c) => (
                IgpModel::restore(&c, &inputs, &labels, &gp_sparse_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?,
                true,
            ),
            None => {
                let model = fit_igp(&inputs, &labels, &mask.retained, &gp_sparse_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?;
                save_stage(
                    &sparse_path,
                    "dynamics_sparse",
                    &th,
                    &data_hash,
                    &model.checkpoint(),
                )?;
                (model, false)
            }
        };
    log::info!(
        "dynamics_sparse: {} {} outputs on {} retained inputs ({:.1}s)",
        if loaded { "restored" } else { "trained" },
        sparse.output_dim(),
        mask.retained.iter().filter(|&&m| m).count(),
        start.elapsed().as_secs_f64()
    );

    // Stage 4: constraint rows probed from the sparse model.
    let cds_path = ckpt.join("constraint_dataset.json");
    let lma_states: Vec<DVector<f64>> = stride_cap(
        &bundle
            .training_states()
            .into_iter()
            .cloned()
            .collect::<Vec<_>>(),
        cfg.manifold.max_states,
    );
    let cds_cfg = cfg
        .manifold
        .dataset_config(n, subseed(cfg.seed, "stage-lma", 0));
    let start = Instant::now();
    let (dataset, loaded) = match load_stage::<ConstraintDatasetWire>(
        &cds_path,
        "constraint_dataset",
        &th,
        &data_hash,
    )? {
        Some(wire) => (wire.into_dataset()?, true),
        None => {
            let ds = build_constraint_dataset(&sparse, &lma_states, &sys.control_bounds(), &cds_cfg)
                .map_err(|e| PipelineError::Training(e.to_string()))?;
            save_stage(
                &cds_path,
                "constraint_dataset",
                &th,
                &data_hash,
                &ConstraintDatasetWire::from_dataset(&ds),
            )?;
            (ds, false)
        }
    };
    log::info!(
        "constraint_dataset: {} {} constraints at {} states ({} discarded, {:.1}s)",
        if loaded { "restored" } else { "built" },
        dataset.constraint_count,
        dataset.states.len(),
        dataset.discarded.len(),
        start.elapsed().as_secs_f64()
    );

    // Stage 5: constraint-row regression.
    let manifold_path = ckpt.join("manifold.json");
    let manifold_cfg = cfg.manifold.train_config(
        subseed(cfg.seed, "stage-manifold-metric", 0),
        subseed(cfg.seed, "stage-manifold-gp", 0),
    );
    let start = Instant::now();
    let (manifold, loaded) =
        match load_stage::<ManifoldCheckpoint>(&manifold_path, "manifold", &th, &data_hash)? {
            Some(c) => (
                ManifoldModel::restore(&c, &dataset, &manifold_cfg.gp)
                    .map_err(|e| PipelineError::Training(e.to_string()))?,
                true,
            ),
            None => {
                let model = train_manifold(&dataset, &manifold_cfg)
                    .map_err(|e| PipelineError::Training(e.to_string()))?;
                save_stage(&manifold_path, "manifold", &th, &data_hash, &model.checkpoint())?;
                (model, false)
            }
        };
    log::info!(
        "manifold: {} {} constraint rows, {} GP entries ({:.1}s)",
        if loaded { "restored" } else { "trained" },
        manifold.constraint_count,
        manifold.gp_entry_count(),
        start.elapsed().as_secs_f64()
    );

    Ok(TrainedArtifacts {
        system: sys,
        bundle,
        data_hash,
        metric,
        mask,
        full,
        sparse,
        dataset,
        manifold,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum EvalModel<'a> {
    Direct(&'a dyn DynamicsModel),
    Projected(ProjectedDynamics<'a>),
    TrueProjected(TrueProjectedDynamics<'a>),
}

impl DynamicsModel for EvalModel<'_> {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            EvalModel::Direct(m) => m.predict_dynamics(x, u),
            EvalModel::Projected(m) => m.predict_dynamics(x, u),
            EvalModel::TrueProjected(m) => m.predict_dynamics(x, u),
        }
    }
}

/// Resolve the model lineup: the CLI filter wins over `[eval].models`;
/// names are validated and returned in [`STANDARD_MODELS`] order.
fn resolve_models(
    section: &EvalSection,
    cli: Option<&[String]>,
) -> Result<Vec<String>, PipelineError> {
    let requested: Vec<String> = match cli {
        Some(list) => list.to_vec(),
        None => section.models.clone(),
    };
    for name in &requested {
        if !STANDARD_MODELS.contains(&name.as_str()) {
            return Err(PipelineError::Config(format!(
                "unknown model {name:?}; available: {}",
                STANDARD_MODELS.join(", ")
            )));
        }
    }
    let ordered: Vec<String> = STANDARD_MODELS
        .iter()
        .filter(|n| requested.iter().any(|r| r == **n))
        .map(|s| s.to_string())
        .collect();
    if ordered.is_empty() {
        return Err(PipelineError::Config("no models selected".into()));
    }
    Ok(ordered)
}

/// Train (resuming where possible) and score the selected models on the
/// test set. Writes `report.json` and `residuals.csv` under `out`.
pub fn run_eval(
    cfg: &PipelineConfig,
    out: &Path,
    models: Option<&[String]>,
) -> Result<EvalReport, PipelineError> {
    let names = resolve_models(&cfg.eval, models)?;
    let arts = run_train(cfg, out)?;
    let sys = arts.system.as_ref();
    let lineup: Vec<(String, EvalModel)> = names
        .iter()
        .map(|name| {
            let model = match name.as_str() {
                "gp_full" => EvalModel::Direct(&arts.full),
                "gp_sparse" => EvalModel::Direct(&arts.sparse),
                "gp_sparse_proj" => EvalModel::Projected(ProjectedDynamics {
                    model: &arts.sparse,
                    manifold: &arts.manifold,
                }),
                "gp_sparse_proj_true" => EvalModel::TrueProjected(TrueProjectedDynamics {
                    model: &arts.sparse,
                    system: sys,
                }),
                other => unreachable!("resolve_models admitted {other:?}"),
            };
            (name.clone(), model)
        })
        .collect();
    let refs: Vec<(&str, &dyn DynamicsModel)> = lineup
        .iter()
        .map(|(n, m)| (n.as_str(), m as &dyn DynamicsModel))
        .collect();

    let start = Instant::now();
    let report = evaluate(
        sys,
        &arts.bundle,
        &refs,
        Some(&arts.manifold),
        &config_hash(cfg),
    )
    .map_err(|e| PipelineError::Evaluation(e.to_string()))?;

    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Evaluation(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    write_text(&out.join("report.json"), &json).map_err(PipelineError::Evaluation)?;
    write_text(&out.join("residuals.csv"), &residuals_csv(&report))
        .map_err(PipelineError::Evaluation)?;

    for m in &report.models {
        log::info!(
            "eval {}: rmse {:.4e}, violation mean {:.4e} max {:.4e}",
            m.name,
            m.rmse_total,
            m.violation_mean,
            m.violation_max
        );
    }
    if let Some(g) = &report.gamma {
        log::info!(
            "eval constraint recovery: {} of {} rows, projector error mean {:.4e}",
            g.detected_count,
            g.true_count,
            g.projector_error_mean
        );
    }
    log::info!(
        "eval: {} models on {} test points ({:.1}s)",
        report.models.len(),
        report.test_count,
        start.elapsed().as_secs_f64()
    );
    Ok(report)
}

/// Run `count` consecutive seeds (base seed, base+1, …) under
/// `out/seed_<k>/` and aggregate their reports into `out/aggregate.json`.
pub fn run_seeds(
    cfg: &PipelineConfig,
    out: &Path,
    count: usize,
    models: Option<&[String]>,
) -> Result<AggregateReport, PipelineError> {
    if count == 0 {
        return Err(PipelineError::Config("--seeds must be positive".into()));
    }
    let mut reports = Vec::with_capacity(count);
    for k in 0..count {
        let mut sub = cfg.clone();
        sub.seed = cfg.seed + k as u64;
        let dir = out.join(format!("seed_{k}"));
        log::info!("=== seed {} ({} of {count}) ===", sub.seed, k + 1);
        reports.push(run_eval(&sub, &dir, models)?);
    }
    let agg = aggregate(&reports).map_err(|e| PipelineError::Evaluation(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&agg)
        .map_err(|e| PipelineError::Evaluation(format!("cannot serialize aggregate: {e}")))?;
    json.push('\n');
    write_text(&out.join("aggregate.json"), &json).map_err(PipelineError::Evaluation)?;
    Ok(agg)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Outcome of one (cell, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SweepOutcome {
    Ok {
        seed: u64,
        /// RMSE of the projected sparse model.
        rmse: f64,
        violation_mean: f64,
        projector_error_mean: f64,
    },
    Failed {
        seed: u64,
        error: String,
    },
}

/// One knob value of one axis, with per-seed outcomes and medians over the
/// seeds that succeeded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: String,
    /// Knob value (integer axes are recorded as their float value).
    pub value: f64,
    pub outcomes: Vec<SweepOutcome>,
    pub rmse_median: Option<f64>,
    pub violation_median: Option<f64>,
    pub projector_error_median: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub system: String,
    pub base_seed: u64,
    pub seeds: usize,
    pub cells: Vec<SweepCell>,
}

fn apply_axis(cfg: &mut PipelineConfig, axis: &str, value: f64) {
    match axis {
        "mask_rel_threshold" => cfg.metric.mask_rel_threshold = value,
        "svd_eps_rel" => cfg.manifold.svd_eps_rel = value,
        "controls_per_state" => cfg.manifold.controls_per_state = value as usize,
        "noise_std" => cfg.data.noise_std = value,
        other => unreachable!("unknown sweep axis {other:?}"),
    }
}

/// One-factor-at-a-time sweep over the `[sweep]` axes.
///
/// Every cell evaluates the full standard model lineup on the same
/// consecutive seeds; a failing (cell, seed) run is recorded and the sweep
/// continues. Results land in `out/sweep.json`.
pub fn run_sweep(cfg: &PipelineConfig, out: &Path) -> Result<SweepReport, PipelineError> {
    let axes: [(&str, Vec<f64>); 4] = [
        ("mask_rel_threshold", cfg.sweep.mask_rel_threshold.clone()),
        ("svd_eps_rel", cfg.sweep.svd_eps_rel.clone()),
        (
            "controls_per_state",
            cfg.sweep
                .controls_per_state
                .iter()
                .map(|&k| k as f64)
                .collect(),
        ),
        ("noise_std", cfg.sweep.noise_std.clone()),
    ];
    let mut cells = Vec::new();
    for (axis, values) in &axes {
        for &value in values {
            let mut outcomes = Vec::with_capacity(cfg.sweep.seeds);
            for k in 0..cfg.sweep.seeds {
                let mut cell_cfg = cfg.clone();
                apply_axis(&mut cell_cfg, axis, value);
                cell_cfg.seed = cfg.seed + k as u64;
                let dir = out
                    .join("sweep")
                    .join(axis)
                    .join(value.to_string())
                    .join(format!("seed_{k}"));
                log::info!("sweep {axis}={value} seed {}", cell_cfg.seed);
                match run_eval(&cell_cfg, &dir, None) {
                    Ok(report) => {
                        let proj = report
                            .models
                            .iter()
                            .find(|m| m.name == "gp_sparse_proj")
                            .ok_or_else(|| {
                                PipelineError::Evaluation(
                                    "sweep requires gp_sparse_proj in eval.models".into(),
                                )
                            })?;
                        outcomes.push(SweepOutcome::Ok {
                            seed: cell_cfg.seed,
                            rmse: proj.rmse_total,
                            violation_mean: proj.violation_mean,
                            projector_error_mean: report
                                .gamma
                                .as_ref()
                                .map_or(f64::NAN, |g| g.projector_error_mean),
                        });
                    }
                    Err(PipelineError::Config(e)) => {
                        // A knob value the pipeline cannot even start with is
                        // a sweep-configuration problem, not a data point.
                        return Err(PipelineError::Config(format!(
                            "sweep cell {axis}={value}: {e}"
                        )));
                    }
                    Err(e) => {
                        log::warn!("sweep {axis}={value} seed {} failed: {e}", cell_cfg.seed);
                        outcomes.push(SweepOutcome::Failed {
                            seed: cell_cfg.seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
            let ok: Vec<&SweepOutcome> = outcomes
                .iter()
                .filter(|o| matches!(o, SweepOutcome::Ok { .. }))
                .collect();
            let median_of = |f: &dyn Fn(&SweepOutcome) -> f64| -> Option<f64> {
                if ok.is_empty() {
                    None
                } else {
                    let vals: Vec<f64> = ok.iter().map(|o| f(o)).collect();
                    Some(crate::eval::quantile(&vals, 0.5))
                }
            };
            cells.push(SweepCell {
                axis: axis.to_string(),
                value,
                rmse_median: median_of(&|o| match o {
                    SweepOutcome::Ok { rmse, .. } => *rmse,
                    SweepOutcome::Failed { .. } => unreachable!(),
                }),
                violation_median: median_of(&|o| match o {
                    SweepOutcome::Ok { violation_mean, .. } => *violation_mean,
                    SweepOutcome::Failed { .. } => unreachable!(),
                }),
                projector_error_median: median_of(&|o| match o {
                    SweepOutcome::Ok {
                        projector_error_mean,
                        ..
                    } => *projector_error_mean,
                    SweepOutcome::Failed { .. } => unreachable!(),
                }),
                outcomes,
            });
        }
    }
    let report = SweepReport {
        system: cfg.system.kind.build().name().to_string(),
        base_seed: cfg.seed,
        seeds: cfg.sweep.seeds,
        cells,
    };
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Evaluation(format!("cannot serialize sweep: {e}")))?;
    json.push('\n');
    write_text(&out.join("sweep.json"), &json).map_err(PipelineError::Evaluation)?;
    log::info!("sweep: {} cells written", report.cells.len());
    Ok(report)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Collect previously written evaluation reports under `out`
/// (`report.json` and/or `seed_<k>/report.json`), aggregate them, write
/// `aggregate.json`, and print a summary table.
pub fn run_report(out: &Path) -> Result<AggregateReport, PipelineError> {
    let mut report_paths = Vec::new();
    let single = out.join("report.json");
    if single.exists() {
        report_paths.push(single);
    }
    let mut seed_dirs: Vec<(usize, PathBuf)> = Vec::new();
    if let Ok(entries) = fs::read_dir(out) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(k) = name.strip_prefix("seed_").and_then(|s| s.parse().ok()) {
                let p = entry.path().join("report.json");
                if p.exists() {
                    seed_dirs.push((k, p));
                }
            }
        }
    }
    seed_dirs.sort_by_key(|(k, _)| *k);
    report_paths.extend(seed_dirs.into_iter().map(|(_, p)| p));
    if report_paths.is_empty() {
        return Err(PipelineError::Evaluation(format!(
            "no evaluation reports under {}; run eval first",
            out.display()
        )));
    }
    let mut reports = Vec::with_capacity(report_paths.len());
    for path in &report_paths {
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::Evaluation(format!("cannot read {}: {e}", path.display()))
        })?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| {
            PipelineError::Evaluation(format!("report {} is corrupt: {e}", path.display()))
        })?;
        reports.push(report);
    }
    let agg = aggregate(&reports).map_err(|e| PipelineError::Evaluation(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&agg)
        .map_err(|e| PipelineError::Evaluation(format!("cannot serialize aggregate: {e}")))?;
    json.push('\n');
    write_text(&out.join("aggregate.json"), &json).map_err(PipelineError::Evaluation)?;

    println!(
        "system {}  ({} seed{})",
        agg.system,
        agg.seeds.len(),
        if agg.seeds.len() == 1 { "" } else { "s" }
    );
    println!(
        "{:<24} {:>12} {:>12} {:>12} {:>14}",
        "model", "rmse_med", "rmse_q25", "rmse_q75", "violation_med"
    );
    for m in &agg.models {
        println!(
            "{:<24} {:>12.4e} {:>12.4e} {:>12.4e} {:>14.4e}",
            m.name, m.rmse_median, m.rmse_q25, m.rmse_q75, m.violation_median
        );
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use tempfile::tempdir;

    fn tiny_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            system: SystemSection {
                kind: SystemKind::Unicycle,
            },
            data: DataSection {
                n_trajectories: 2,
                horizon: 10,
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
                test_count: 12,
            },
            metric: MetricSection {
                steps: 150,
                ..MetricSection::default()
            },
            gp: FitConfig {
                restarts: 1,
                max_iters: 40,
                max_opt_points: Some(64),
                ..FitConfig::default()
            },
            manifold: ManifoldSection {
                expected_constraints: Some(1),
                max_states: 40,
                // Weakly trained toy models express the constraint less
                // sharply: widen the null-space cutoff and let the
                // consensus mechanism discard stragglers.
                svd_eps_rel: 0.04,
                min_coverage: 0.7,
                metric: MetricTrainConfig {
                    steps: 150,
                    ..MetricTrainConfig::default()
                },
                gp: FitConfig {
                    restarts: 1,
                    max_iters: 40,
                    max_opt_points: Some(64),
                    ..FitConfig::default()
                },
                ..ManifoldSection::default()
            },
            eval: EvalSection::default(),
            sweep: SweepSection {
                seeds: 1,
                mask_rel_threshold: vec![],
                svd_eps_rel: vec![],
                controls_per_state: vec![1, 8],
                noise_std: vec![],
            },
        }
    }

    #[test]
    fn toml_parsing_applies_defaults_and_rejects_unknown_keys() {
        let text = r#"
            seed = 7
            [system]
            kind = "unicycle"
            [data]
            n_trajectories = 2
            horizon = 10
            dt = 0.1
            control_hold = 5
            train_region = { lo = [-1.0, -1.0, 1.4], hi = [1.0, 1.0, 1.8] }
            test_region = { lo = [4.0, 4.0, 1.4], hi = [6.0, 6.0, 1.8] }
            ood_margin = 3.0
            test_count = 20
            [metric]
            steps = 500
        "#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.metric.steps, 500);
        assert_eq!(cfg.metric.batch_size, MetricTrainConfig::default().batch_size);
        assert_eq!(cfg.gp, FitConfig::default());
        assert_eq!(cfg.eval.models.len(), 4);
        assert_eq!(cfg.data.noise_std, 0.0);

        let err = PipelineConfig::from_toml(&text.replace("steps = 500", "stepz = 500"))
            .unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_catches_bad_regions_and_models() {
        let mut cfg = tiny_config(0);
        cfg.data.train_region.lo.pop();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("train_region"), "{err}");

        let mut cfg = tiny_config(0);
        cfg.data.test_region.lo[0] = 10.0; // above hi
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(0);
        cfg.eval.models = vec!["nonsense".into()];
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let mut cfg = tiny_config(0);
        cfg.manifold.expected_constraints = Some(3); // == state_dim
        assert!(cfg.validate().is_err());

        assert!(tiny_config(0).validate().is_ok());
    }

    #[test]
    fn end_to_end_resume_reproduces_report_bytes() {
        let cfg = tiny_config(11);
        let dir_a = tempdir().unwrap();
        run_eval(&cfg, dir_a.path(), None).unwrap();
        let first = fs::read(dir_a.path().join("report.json")).unwrap();
        let first_csv = fs::read(dir_a.path().join("residuals.csv")).unwrap();

        // Second run resumes from checkpoints (restore path) and must end
        // in the identical report.
        run_eval(&cfg, dir_a.path(), None).unwrap();
        assert_eq!(first, fs::read(dir_a.path().join("report.json")).unwrap());
        assert_eq!(
            first_csv,
            fs::read(dir_a.path().join("residuals.csv")).unwrap()
        );

        // A fresh directory retrains from scratch and still matches: the
        // report depends only on config and seed, not on the path.
        let dir_b = tempdir().unwrap();
        run_eval(&cfg, dir_b.path(), None).unwrap();
        assert_eq!(first, fs::read(dir_b.path().join("report.json")).unwrap());

        let report: EvalReport =
            serde_json::from_slice::<EvalReport>(&first).unwrap();
        assert_eq!(report.seed, 11);
        assert_eq!(report.models.len(), 4);
        assert!(report.gamma.is_some());
    }

    #[test]
    fn corrupt_checkpoint_stops_with_the_file_named() {
        let cfg = tiny_config(3);
        let dir = tempdir().unwrap();
        run_train(&cfg, dir.path()).unwrap();
        let victim = dir.path().join("checkpoints").join("dynamics_full.json");
        fs::write(&victim, "{ not json").unwrap();
        let err = match run_train(&cfg, dir.path()) {
            Err(e) => e,
            Ok(_) => panic!("corrupt checkpoint should fail the run"),
        };
        assert_eq!(err.exit_code(), 3);
        assert!(
            err.to_string().contains("dynamics_full.json"),
            "error should name the corrupt file: {err}"
        );
    }

    #[test]
    fn changed_config_invalidates_checkpoints() {
        let cfg = tiny_config(5);
        let dir = tempdir().unwrap();
        run_train(&cfg, dir.path()).unwrap();
        let path = dir.path().join("checkpoints").join("dynamics_full.json");
        let before = fs::read_to_string(&path).unwrap();

        let mut changed = tiny_config(5);
        changed.gp.max_iters = 13;
        run_train(&changed, dir.path()).unwrap();
        let after = fs::read_to_string(&path).unwrap();
        assert_ne!(before, after, "stale checkpoint should be replaced");
    }

    #[test]
    fn model_filter_is_validated_and_applied() {
        let cfg = tiny_config(9);
        let dir = tempdir().unwrap();
        let err = run_eval(&cfg, dir.path(), Some(&["bogus".to_string()])).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let report = run_eval(
            &cfg,
            dir.path(),
            Some(&["gp_sparse".to_string(), "gp_full".to_string()]),
        )
        .unwrap();
        let names: Vec<&str> = report.models.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["gp_full", "gp_sparse"]);
    }

    #[test]
    fn seed_orchestration_writes_aggregate() {
        let cfg = tiny_config(20);
        let dir = tempdir().unwrap();
        let agg = run_seeds(&cfg, dir.path(), 2, None).unwrap();
        assert_eq!(agg.seeds, vec![20, 21]);
        assert!(dir.path().join("seed_0/report.json").exists());
        assert!(dir.path().join("seed_1/report.json").exists());
        assert!(dir.path().join("aggregate.json").exists());

        // `report` rebuilds the same aggregate from the files on disk.
        let rebuilt = run_report(dir.path()).unwrap();
        assert_eq!(
            serde_json::to_string(&agg).unwrap(),
            serde_json::to_string(&rebuilt).unwrap()
        );
    }

    #[test]
    fn report_without_evaluations_is_an_evaluation_error() {
        let dir = tempdir().unwrap();
        let err = run_report(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn sweep_records_successes_and_failures() {
        let cfg = tiny_config(30);
        let dir = tempdir().unwrap();
        let report = run_sweep(&cfg, dir.path()).unwrap();
        assert_eq!(report.cells.len(), 2);

        // One probe control cannot pin down a 3-state constraint: that cell
        // fails and is recorded, not fatal.
        let failed = &report.cells[0];
        assert_eq!(failed.axis, "controls_per_state");
        assert_eq!(failed.value, 1.0);
        assert!(matches!(failed.outcomes[0], SweepOutcome::Failed { .. }));
        assert!(failed.rmse_median.is_none());

        let ok = &report.cells[1];
        assert_eq!(ok.value, 8.0);
        assert!(matches!(ok.outcomes[0], SweepOutcome::Ok { .. }));
        assert!(ok.rmse_median.is_some());
        assert!(dir.path().join("sweep.json").exists());
    }
}
