//! Contrastively learned diagonal pseudometrics for input-relevance discovery.
//!
//! A [`DiagonalPseudometric`] carries one non-negative weight per input
//! dimension; the induced similarity is a weighted cosine and the induced
//! distance a weighted Euclidean norm. Training minimizes an InfoNCE
//! objective over (anchor, positive, negatives) triples: positives share the
//! anchor's *label* (nearest label neighbor at a minimum input separation),
//! negatives are the anchor's shuffled batch mates. Dimensions that do not
//! influence the label earn weights near zero, because down-weighting them
//! makes anchors more similar to their positives without affecting the
//! label; [`extract_mask`] then thresholds the learned diagonal into a
//! boolean input mask.
//!
//! Weights are parametrized as `q_i = w_i²` so plain gradient descent keeps
//! them non-negative. Training is full-batch with pairs fixed up front,
//! which keeps runs bit-reproducible for a given seed.

use crate::datasets::{select_pairs, subseed, SamplePair};
use crate::linalg::{logsumexp, Standardizer};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least 3 items to form contrastive pairs, got {0}")]
    TooFewItems(usize),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no contrastive pairs could be formed ({skipped} anchors skipped)")]
    NoPairs { skipped: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Squared-norm floor below which a vector counts as degenerate for the
/// weighted cosine (similarity is defined as 0 there).
const DEGENERATE_NORM_SQ: f64 = 1e-30;

/// A diagonal pseudometric: per-dimension non-negative weights `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalPseudometric {
    pub diag: Vec<f64>,
}

impl DiagonalPseudometric {
    pub fn ones(dim: usize) -> Self {
        DiagonalPseudometric { diag: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Squared distance `Σ_i q_i (a_i − b_i)²`.
    pub fn distance_sq(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.diag
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let d = a[i] - b[i];
                q * d * d
            })
            .sum()
    }

    /// Pseudometric distance (square root of [`Self::distance_sq`]).
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.distance_sq(a, b).sqrt()
    }

    /// Weighted cosine similarity and a flag marking degenerate operands
    /// (weighted norm ≈ 0), for which the similarity is defined as 0.
    pub fn similarity_flagged(&self, a: &DVector<f64>, b: &DVector<f64>) -> (f64, bool) {
        let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (i, &q) in self.diag.iter().enumerate() {
            num += q * a[i] * b[i];
            na += q * a[i] * a[i];
            nb += q * b[i] * b[i];
        }
        if na <= DEGENERATE_NORM_SQ || nb <= DEGENERATE_NORM_SQ {
            (0.0, true)
        } else {
            (num / (na.sqrt() * nb.sqrt()), false)
        }
    }

    /// Weighted cosine similarity (0 for degenerate operands).
    pub fn similarity(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.similarity_flagged(a, b).0
    }
}

/// Similarity together with its gradient with respect to the diagonal `q`.
///
/// With `A = Σ q a b`, `B = Σ q a²`, `C = Σ q b²`, `S = A/√(BC)`:
/// `∂S/∂q_i = a_i b_i / √(BC) − S · (a_i²/(2B) + b_i²/(2C))`.
fn similarity_with_grad(
    q: &[f64],
    a: &DVector<f64>,
    b: &DVector<f64>,
    grad: &mut [f64],
) -> (f64, bool) {
    let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (i, &qi) in q.iter().enumerate() {
        num += qi * a[i] * b[i];
        na += qi * a[i] * a[i];
        nb += qi * b[i] * b[i];
    }
    if na <= DEGENERATE_NORM_SQ || nb <= DEGENERATE_NORM_SQ {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return (0.0, true);
    }
    let root = na.sqrt() * nb.sqrt();
    let s = num / root;
    for i in 0..q.len() {
        grad[i] = a[i] * b[i] / root - s * (a[i] * a[i] / (2.0 * na) + b[i] * b[i] / (2.0 * nb));
    }
    (s, false)
}

/// InfoNCE loss over contrastive pairs under a diagonal pseudometric.
///
/// Per anchor: `−sim(z, z⁺) + logsumexp_k sim(z, z⁻_k)`, averaged over all
/// pairs. Lower is better; with `K` negatives the infimum is `ln K − 2`.
pub fn infonce_loss(
    metric: &DiagonalPseudometric,
    pairs: &[SamplePair],
    items: &[DVector<f64>],
) -> f64 {
    assert!(!pairs.is_empty(), "no contrastive pairs");
    let mut total = 0.0;
    for pair in pairs {
        let anchor = &items[pair.anchor];
        let s_pos = metric.similarity(anchor, &items[pair.positive]);
        let sims: Vec<f64> = pair
            .negatives
            .iter()
            .map(|&k| metric.similarity(anchor, &items[k]))
            .collect();
        total += -s_pos + logsumexp(&sims);
    }
    total / pairs.len() as f64
}

/// InfoNCE loss and its gradient with respect to the diagonal `q`.
pub fn infonce_gradient(
    metric: &DiagonalPseudometric,
    pairs: &[SamplePair],
    items: &[DVector<f64>],
) -> (f64, Vec<f64>) {
    assert!(!pairs.is_empty(), "no contrastive pairs");
    let d = metric.dim();
    let q = &metric.diag;
    let mut grad = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut total = 0.0;
    for pair in pairs {
        let anchor = &items[pair.anchor];
        let (s_pos, _) = similarity_with_grad(q, anchor, &items[pair.positive], &mut scratch);
        let mut term_grad: Vec<f64> = scratch.iter().map(|g| -g).collect();

        let mut sims = Vec::with_capacity(pair.negatives.len());
        let mut neg_grads = Vec::with_capacity(pair.negatives.len());
        for &k in &pair.negatives {
            let (s, _) = similarity_with_grad(q, anchor, &items[k], &mut scratch);
            sims.push(s);
            neg_grads.push(scratch.clone());
        }
        let lse = logsumexp(&sims);
        for (s, g) in sims.iter().zip(&neg_grads) {
            let weight = (s - lse).exp();
            for i in 0..d {
                term_grad[i] += weight * g[i];
            }
        }
        total += -s_pos + lse;
        for i in 0..d {
            grad[i] += term_grad[i];
        }
    }
    let n = pairs.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    (total / n, grad)
}

/// Training configuration for [`train_pseudometric`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricTrainConfig {
    /// Gradient-descent steps (full batch).
    pub steps: usize,
    /// Initial learning rate; decays to 0 on a cosine schedule.
    pub learning_rate: f64,
    /// Negative-pool chunk size used by pair selection.
    pub batch_size: usize,
    /// Minimum anchor–positive input separation, as a fraction of the median
    /// pairwise distance between (standardized) inputs. Positives are
    /// label-nearest, so this forces pairs that agree in output while
    /// disagreeing in input — the contrast that drives irrelevant input
    /// weights toward zero. Too small and positives come from adjacent
    /// trajectory samples that agree in every dimension.
    pub min_separation_frac: f64,
    /// Standardize inputs per dimension before training.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for MetricTrainConfig {
    fn default() -> Self {
        MetricTrainConfig {
            steps: 2000,
            learning_rate: 0.05,
            batch_size: 32,
            min_separation_frac: 0.5,
            standardize: true,
            seed: 0,
        }
    }
}

/// A trained pseudometric with the scaler that maps raw inputs into the
/// space the metric was learned in, plus training telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedMetric {
    pub pseudometric: DiagonalPseudometric,
    pub scaler: Standardizer,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Anchors skipped by pair selection (no admissible positive/negative).
    pub skipped_anchors: usize,
    /// The separation threshold actually used, in standardized input units.
    pub min_separation: f64,
}

impl TrainedMetric {
    /// Distance between two raw inputs under the learned metric.
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.pseudometric
            .distance(&self.scaler.transform(a), &self.scaler.transform(b))
    }
}

/// Median pairwise Euclidean distance over at most 512 stride-subsampled
/// items (an even median is the lower of the two central values).
fn median_pairwise_distance(items: &[DVector<f64>]) -> f64 {
    const CAP: usize = 512;
    let stride = items.len().div_ceil(CAP).max(1);
    let sub: Vec<&DVector<f64>> = items.iter().step_by(stride).collect();
    let mut dists = Vec::with_capacity(sub.len() * (sub.len() - 1) / 2);
    for i in 0..sub.len() {
        for j in 0..i {
            dists.push((sub[i] - sub[j]).norm());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    dists[(dists.len() - 1) / 2]
}

/// Learn a diagonal pseudometric on `(input, label)` items.
///
/// Inputs are standardized (per [`MetricTrainConfig::standardize`]), items
/// are shuffled once to decorrelate negative pools from trajectory order,
/// contrastive pairs are fixed, and `q = w²` is optimized by full-batch
/// gradient descent from `w = 1` with a cosine-decayed learning rate.
pub fn train_pseudometric(
    inputs: &[DVector<f64>],
    labels: &[DVector<f64>],
    cfg: &MetricTrainConfig,
) -> Result<TrainedMetric, MetricError> {
    if inputs.len() < 3 {
        return Err(MetricError::TooFewItems(inputs.len()));
    }
    if inputs.len() != labels.len() {
        return Err(MetricError::DimensionMismatch {
            what: "labels",
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    let d = inputs[0].len();
    for x in inputs {
        if x.len() != d {
            return Err(MetricError::DimensionMismatch {
                what: "input",
                expected: d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite("inputs"));
        }
    }
    if labels.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
        return Err(MetricError::NonFinite("labels"));
    }

    let scaler = if cfg.standardize {
        Standardizer::fit(inputs)
    } else {
        Standardizer::identity(d)
    };
    let std_inputs: Vec<DVector<f64>> = inputs.iter().map(|x| scaler.transform(x)).collect();

    // Labels are standardized per dimension for pair selection only, so that
    // "nearest label" weighs every output comparably; otherwise the output
    // with the widest range dominates the distance and inputs that only move
    // narrow outputs lose their retention pressure.
    let label_scaler = Standardizer::fit(labels);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(cfg.seed, "metric-shuffle", 0));
    order.shuffle(&mut rng);
    let items: Vec<DVector<f64>> = order.iter().map(|&i| std_inputs[i].clone()).collect();
    let item_labels: Vec<DVector<f64>> = order
        .iter()
        .map(|&i| label_scaler.transform(&labels[i]))
        .collect();

    let min_separation = cfg.min_separation_frac * median_pairwise_distance(&items);
    let selection = select_pairs(&items, &item_labels, min_separation, cfg.batch_size.max(2));
    if selection.pairs.is_empty() {
        return Err(MetricError::NoPairs {
            skipped: selection.skipped.len(),
        });
    }

    let mut w = vec![1.0f64; d];
    let mut metric = DiagonalPseudometric::ones(d);
    let (initial_loss, _) = infonce_gradient(&metric, &selection.pairs, &items);
    let mut final_loss = initial_loss;
    for step in 0..cfg.steps {
        let (loss, grad_q) = infonce_gradient(&metric, &selection.pairs, &items);
        final_loss = loss;
        let lr = cfg.learning_rate
            * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        for i in 0..d {
            w[i] -= lr * 2.0 * w[i] * grad_q[i];
            metric.diag[i] = w[i] * w[i];
        }
    }
    if cfg.steps > 0 {
        final_loss = infonce_loss(&metric, &selection.pairs, &items);
    }
    if !final_loss.is_finite() {
        return Err(MetricError::NonFinite("training loss"));
    }

    Ok(TrainedMetric {
        pseudometric: metric,
        scaler,
        initial_loss,
        final_loss,
        skipped_anchors: selection.skipped.len(),
        min_separation,
    })
}

/// A boolean input mask distilled from a learned diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub retained: Vec<bool>,
    /// Absolute threshold applied (`rel_threshold · max_i diag_i`).
    pub threshold_used: f64,
    /// The diagonal the mask was read from.
    pub diag_snapshot: Vec<f64>,
}

impl SparsityMask {
    pub fn retained_count(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }
}

/// Threshold a learned diagonal into a mask: dimension `i` is retained iff
/// `diag_i > rel_threshold · max_j diag_j` (strictly); the argmax dimension
/// is always retained.
pub fn extract_mask(metric: &DiagonalPseudometric, rel_threshold: f64) -> SparsityMask {
    let max = metric.diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Ties resolve to the lowest index.
    let mut argmax = 0;
    for (i, &q) in metric.diag.iter().enumerate() {
        if q > metric.diag[argmax] {
            argmax = i;
        }
    }
    let threshold = rel_threshold * max;
    let mut retained: Vec<bool> = metric.diag.iter().map(|&q| q > threshold).collect();
    retained[argmax] = true;
    SparsityMask {
        retained,
        threshold_used: threshold,
        diag_snapshot: metric.diag.clone(),
    }
}
