//! Trajectory datasets: generation, persistence, flattening into supervised
//! samples, and contrastive pair selection.
//!
//! A [`DatasetBundle`] holds three partitions from one system:
//!
//! * `offline` — N trajectories for model learning,
//! * `online` — one extra trajectory, appended when learning constraints,
//! * `test` — out-of-distribution `(x, u, ẋ)` triples whose states keep a
//!   minimum distance from every training state.
//!
//! On disk a bundle is a `bundle.manifest.json` plus JSON-lines files (one
//! trajectory or test triple per line). Serialization is lossless: floats
//! round-trip bit-exactly through their shortest decimal form, and
//! generation is a pure function of the config, so rebuilding a bundle with
//! the same seed reproduces the files byte for byte.

use crate::systems::{eval_dynamics, rollout, uniform_control, System, SystemError};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BUNDLE_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "bundle.manifest.json";
pub const OFFLINE_FILE: &str = "offline.traj.jsonl";
pub const ONLINE_FILE: &str = "online.traj.jsonl";
pub const TEST_FILE: &str = "test.triples.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(
        "could not place {requested} test states at margin {margin} from the training data \
         (accepted {accepted}); move the test region or lower the margin"
    )]
    OodInfeasible {
        requested: usize,
        accepted: usize,
        margin: f64,
    },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported bundle version {found:?} (expected {BUNDLE_VERSION:?})")]
    Version { found: String },
    #[error("inconsistent bundle: {0}")]
    Inconsistent(String),
}

/// Deterministic derived seed for a named sub-stream of a master seed.
pub fn subseed(master: u64, tag: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(idx.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Axis-aligned box, used for initial-state and test-state sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self, dim: usize, what: &str) -> Result<(), DataError> {
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(DataError::Config(format!(
                "{what} region has dimension {}/{}, state dimension is {dim}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(DataError::Config(format!(
                    "{what} region has an empty or non-finite interval [{l}, {h}]"
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(&l, &h)| {
                if l == h {
                    l
                } else {
                    rng.gen_range(l..=h)
                }
            }),
        )
    }

    /// Smallest Euclidean distance between any two points of the boxes.
    pub fn distance_to(&self, other: &Region) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .map(|((&al, &ah), (&bl, &bh))| {
                let gap = (bl - ah).max(al - bh).max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// One rollout: `T` states, `T-1` zero-order-hold controls, and the exact
/// (optionally noise-corrupted) derivative at every state. The derivative of
/// the final state is taken under the held last control, so a trajectory of
/// length `T` yields exactly `T` supervised samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Control effectively applied at sample `t` (last one is held).
    pub fn control_at(&self, t: usize) -> &DVector<f64> {
        &self.controls[t.min(self.controls.len() - 1)]
    }

    fn check(&self) -> Result<(), DataError> {
        if self.states.len() != self.controls.len() + 1 || self.states.len() != self.derivs.len() {
            return Err(DataError::Inconsistent(format!(
                "trajectory with {} states, {} controls, {} derivs",
                self.states.len(),
                self.controls.len(),
                self.derivs.len()
            )));
        }
        Ok(())
    }
}

/// A single supervised sample `(x, u, ẋ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: DVector<f64>,
    pub control: DVector<f64>,
    pub deriv: DVector<f64>,
}

/// Which partition(s) `flatten` draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Offline,
    Online,
    /// Offline followed by online, in generation order.
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub system: String,
    pub seed: u64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dt: f64,
    pub noise_std: f64,
    pub n_offline: usize,
    pub horizon: usize,
    pub test_count: usize,
    pub ood_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: BundleMeta,
    pub offline: Vec<Trajectory>,
    pub online: Trajectory,
    pub test: Vec<Sample>,
}

impl DatasetBundle {
    /// All training states (offline then online), in deterministic order.
    pub fn training_states(&self) -> Vec<&DVector<f64>> {
        self.offline
            .iter()
            .chain(std::iter::once(&self.online))
            .flat_map(|t| t.states.iter())
            .collect()
    }

    /// Flatten the selected partition into supervised samples, trajectory by
    /// trajectory, preserving order.
    pub fn flatten(&self, which: Partition) -> Vec<Sample> {
        let trajs: Vec<&Trajectory> = match which {
            Partition::Offline => self.offline.iter().collect(),
            Partition::Online => vec![&self.online],
            Partition::Training => self
                .offline
                .iter()
                .chain(std::iter::once(&self.online))
                .collect(),
        };
        let mut samples = Vec::new();
        for traj in trajs {
            for t in 0..traj.len() {
                samples.push(Sample {
                    state: traj.states[t].clone(),
                    control: traj.control_at(t).clone(),
                    deriv: traj.derivs[t].clone(),
                });
            }
        }
        samples
    }
}

/// Dataset generation parameters (the `[data]` section of a pipeline config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Number of offline trajectories.
    pub n_trajectories: usize,
    /// States per trajectory (T).
    pub horizon: usize,
    pub dt: f64,
    /// Steps each sampled control is held (piecewise-constant excitation).
    pub control_hold: usize,
    /// Initial-state box for training rollouts.
    pub train_region: Region,
    /// State box the OOD test triples are drawn from.
    pub test_region: Region,
    /// Minimum distance of every test state from every training state.
    pub ood_margin: f64,
    /// Standard deviation of Gaussian noise added to *recorded* training
    /// derivatives (test labels stay exact — they are the ground truth).
    pub noise_std: f64,
    pub test_count: usize,
    pub seed: u64,
}

impl GenerationConfig {
    fn validate(&self, sys: &dyn System) -> Result<(), DataError> {
        if self.n_trajectories == 0 {
            return Err(DataError::Config("n_trajectories must be positive".into()));
        }
        if self.horizon < 2 {
            return Err(DataError::Config(
                "horizon must be at least 2 states".into(),
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DataError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.control_hold == 0 {
            return Err(DataError::Config("control_hold must be positive".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(DataError::Config(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        self.train_region.validate(sys.state_dim(), "train")?;
        self.test_region.validate(sys.state_dim(), "test")?;
        if self.test_count > 0 && self.test_region.distance_to(&self.train_region) < self.ood_margin
        {
            return Err(DataError::Config(format!(
                "test region is within the OOD margin {} of the training region \
                 (box distance {:.3})",
                self.ood_margin,
                self.test_region.distance_to(&self.train_region)
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant control sequence of `steps` entries, each sampled
/// uniformly from the actuator box and held `hold` steps.
fn sample_control_sequence<R: Rng>(
    sys: &dyn System,
    steps: usize,
    hold: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let u = uniform_control(sys, rng);
        for _ in 0..hold.min(steps - out.len()) {
            out.push(u.clone());
        }
    }
    out
}

/// Generate a full bundle: offline rollouts, one online rollout, and OOD
/// test triples. Deterministic in `cfg.seed`; each partition consumes its
/// own derived random stream, so e.g. the online trajectory does not depend
/// on how many offline trajectories were drawn.
pub fn generate_bundle(sys: &dyn System, cfg: &GenerationConfig) -> Result<DatasetBundle, DataError> {
    cfg.validate(sys)?;

    let steps = cfg.horizon - 1;
    let make_traj = |tag: &str, idx: u64| -> Result<Trajectory, DataError> {
        let mut rng = ChaCha20Rng::seed_from_u64(subseed(cfg.seed, tag, idx));
        let x0 = cfg.train_region.sample(&mut rng);
        let controls = sample_control_sequence(sys, steps, cfg.control_hold, &mut rng);
        Ok(rollout(sys, &x0, &controls, cfg.dt)?)
    };

    let mut offline = Vec::with_capacity(cfg.n_trajectories);
    for i in 0..cfg.n_trajectories {
        offline.push(make_traj("offline", i as u64)?);
    }
    let mut online = make_traj("online", 0)?;

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| DataError::Config(format!("bad noise level: {e}")))?;
        let mut rng = ChaCha20Rng::seed_from_u64(subseed(cfg.seed, "noise", 0));
        for traj in offline.iter_mut().chain(std::iter::once(&mut online)) {
            for d in traj.derivs.iter_mut() {
                for v in d.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }

    let training_states: Vec<DVector<f64>> = offline
        .iter()
        .chain(std::iter::once(&online))
        .flat_map(|t| t.states.iter().cloned())
        .collect();

    let mut test = Vec::with_capacity(cfg.test_count);
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(cfg.seed, "test", 0));
    let max_attempts = (cfg.test_count.max(1)) * 200;
    let mut attempts = 0;
    while test.len() < cfg.test_count {
        if attempts >= max_attempts {
            return Err(DataError::OodInfeasible {
                requested: cfg.test_count,
                accepted: test.len(),
                margin: cfg.ood_margin,
            });
        }
        attempts += 1;
        let state = cfg.test_region.sample(&mut rng);
        let control = uniform_control(sys, &mut rng);
        let min_dist = training_states
            .iter()
            .map(|s| (s - &state).norm())
            .fold(f64::INFINITY, f64::min);
        if min_dist < cfg.ood_margin {
            continue;
        }
        let deriv = eval_dynamics(sys, &state, &control)?;
        test.push(Sample {
            state,
            control,
            deriv,
        });
    }

    Ok(DatasetBundle {
        meta: BundleMeta {
            system: sys.name().to_string(),
            seed: cfg.seed,
            state_dim: sys.state_dim(),
            control_dim: sys.control_dim(),
            dt: cfg.dt,
            noise_std: cfg.noise_std,
            n_offline: cfg.n_trajectories,
            horizon: cfg.horizon,
            test_count: cfg.test_count,
            ood_margin: cfg.ood_margin,
        },
        offline,
        online,
        test,
    })
}

// ---------------------------------------------------------------------------
// Persistence (JSON manifest + JSONL partitions)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    #[serde(flatten)]
    meta: BundleMeta,
    files: ManifestFiles,
}

#[derive(Serialize, Deserialize)]
struct ManifestFiles {
    offline: String,
    online: String,
    test: String,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    dt: f64,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    state: Vec<f64>,
    control: Vec<f64>,
    deriv: Vec<f64>,
}

fn to_rows(vs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.as_slice().to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    rows.into_iter().map(DVector::from_vec).collect()
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            dt: t.dt,
            states: to_rows(&t.states),
            controls: to_rows(&t.controls),
            derivs: to_rows(&t.derivs),
        }
    }
}

impl From<TrajectoryRecord> for Trajectory {
    fn from(r: TrajectoryRecord) -> Self {
        Trajectory {
            states: from_rows(r.states),
            controls: from_rows(r.controls),
            derivs: from_rows(r.derivs),
            dt: r.dt,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    std::fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("serializable record"));
        out.push('\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Write a bundle into `dir` (created if needed): `bundle.manifest.json`,
/// `offline.traj.jsonl`, `online.traj.jsonl`, `test.triples.jsonl`.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let manifest = Manifest {
        version: BUNDLE_VERSION.to_string(),
        meta: bundle.meta.clone(),
        files: ManifestFiles {
            offline: OFFLINE_FILE.to_string(),
            online: ONLINE_FILE.to_string(),
            test: TEST_FILE.to_string(),
        },
    };
    let mut manifest_json =
        serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    manifest_json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), &manifest_json)?;
    write_file(
        &dir.join(OFFLINE_FILE),
        &jsonl(bundle.offline.iter().map(TrajectoryRecord::from)),
    )?;
    write_file(
        &dir.join(ONLINE_FILE),
        &jsonl(std::iter::once(TrajectoryRecord::from(&bundle.online))),
    )?;
    write_file(
        &dir.join(TEST_FILE),
        &jsonl(bundle.test.iter().map(|s| SampleRecord {
            state: s.state.as_slice().to_vec(),
            control: s.control.as_slice().to_vec(),
            deriv: s.deriv.as_slice().to_vec(),
        })),
    )?;
    Ok(())
}

/// Load and validate a bundle previously written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&read_file(&manifest_path)?).map_err(|e| DataError::Parse {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    if manifest.version != BUNDLE_VERSION {
        return Err(DataError::Version {
            found: manifest.version,
        });
    }

    let offline_path = dir.join(&manifest.files.offline);
    let offline: Vec<Trajectory> =
        parse_jsonl::<TrajectoryRecord>(&offline_path, &read_file(&offline_path)?)?
            .into_iter()
            .map(Trajectory::from)
            .collect();
    let online_path = dir.join(&manifest.files.online);
    let mut online: Vec<Trajectory> =
        parse_jsonl::<TrajectoryRecord>(&online_path, &read_file(&online_path)?)?
            .into_iter()
            .map(Trajectory::from)
            .collect();
    if online.len() != 1 {
        return Err(DataError::Inconsistent(format!(
            "expected exactly one online trajectory, found {}",
            online.len()
        )));
    }
    let test_path = dir.join(&manifest.files.test);
    let test: Vec<Sample> = parse_jsonl::<SampleRecord>(&test_path, &read_file(&test_path)?)?
        .into_iter()
        .map(|r| Sample {
            state: DVector::from_vec(r.state),
            control: DVector::from_vec(r.control),
            deriv: DVector::from_vec(r.deriv),
        })
        .collect();

    let bundle = DatasetBundle {
        meta: manifest.meta,
        offline,
        online: online.pop().unwrap(),
        test,
    };

    if bundle.offline.len() != bundle.meta.n_offline {
        return Err(DataError::Inconsistent(format!(
            "manifest lists {} offline trajectories, files hold {}",
            bundle.meta.n_offline,
            bundle.offline.len()
        )));
    }
    for traj in bundle.offline.iter().chain(std::iter::once(&bundle.online)) {
        traj.check()?;
        for x in &traj.states {
            if x.len() != bundle.meta.state_dim {
                return Err(DataError::Inconsistent(format!(
                    "state dimension {} does not match manifest {}",
                    x.len(),
                    bundle.meta.state_dim
                )));
            }
        }
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Contrastive pair selection
// ---------------------------------------------------------------------------

/// Indices of one anchor with its positive and the in-batch negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Result of [`select_pairs`], including anchors that had to be skipped.
#[derive(Debug, Clone, Default)]
pub struct PairSelection {
    pub pairs: Vec<SamplePair>,
    /// Anchors with no admissible positive (or no negatives left in batch).
    pub skipped: Vec<usize>,
}

/// Build contrastive pairs over embedded items.
///
/// For each anchor `i` the positive is the item with the nearest *label*
/// (`labels`) among items whose *input* distance (`inputs`) from the anchor
/// is at least `eps`; exact ties resolve to the lowest index. Negatives are
/// the anchor's other batch members, where batches are consecutive chunks of
/// `batch` items in the given order (a trailing chunk of fewer than 3 items
/// is merged into its predecessor). Anchors with no admissible positive or
/// no remaining negative are skipped and reported.
pub fn select_pairs(
    inputs: &[DVector<f64>],
    labels: &[DVector<f64>],
    eps: f64,
    batch: usize,
) -> PairSelection {
    assert_eq!(inputs.len(), labels.len(), "inputs/labels length mismatch");
    assert!(batch >= 2, "batch size must be at least 2");
    let n = inputs.len();

    let mut chunk_bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        chunk_bounds.push((start, end));
        start = end;
    }
    if chunk_bounds.len() >= 2 {
        let (last_start, last_end) = *chunk_bounds.last().unwrap();
        if last_end - last_start < 3 {
            chunk_bounds.pop();
            chunk_bounds.last_mut().unwrap().1 = last_end;
        }
    }

    let mut out = PairSelection::default();
    for &(lo, hi) in &chunk_bounds {
        for anchor in lo..hi {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == anchor || (&inputs[j] - &inputs[anchor]).norm() < eps {
                    continue;
                }
                let label_dist = (&labels[j] - &labels[anchor]).norm();
                if best.is_none_or(|(_, d)| label_dist < d) {
                    best = Some((j, label_dist));
                }
            }
            let Some((positive, _)) = best else {
                out.skipped.push(anchor);
                continue;
            };
            let negatives: Vec<usize> = (lo..hi)
                .filter(|&j| j != anchor && j != positive)
                .collect();
            if negatives.is_empty() {
                out.skipped.push(anchor);
                continue;
            }
            out.pairs.push(SamplePair {
                anchor,
                positive,
                negatives,
            });
        }
    }
    out
}
