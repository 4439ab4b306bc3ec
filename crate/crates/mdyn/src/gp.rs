//! Exact Gaussian-process regression with an ARD squared-exponential kernel.
//!
//! One [`ScalarGp`] regresses a single output; an [`IgpModel`] bundles
//! independent scalar GPs over a shared, optionally masked input space —
//! the standard "independent GPs" construction for vector-valued dynamics.
//!
//! Kernel: `k(a, b) = σ_f² · exp(−½ Σ_i (a_i − b_i)² / l_i²)` with one
//! signal variance per GP and one lengthscale per input dimension, plus
//! observation noise `σ²` on the diagonal. Hyperparameters are chosen by
//! gradient ascent on the log marginal likelihood in log-space, with
//! backtracking line search and random restarts. Fits are exact (no sparse
//! approximations); datasets here stay in the low thousands. For speed the
//! hyperparameter search may run on a deterministic stride-subsample while
//! the final posterior always conditions on the full dataset.

use crate::datasets::subseed;
use crate::linalg::{ScalarScaler, Standardizer};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("kernel matrix not positive definite even with jitter {max_jitter}")]
    IllConditioned { max_jitter: f64 },
    #[error("mask retains no input dimension")]
    EmptyMask,
}

/// ARD squared-exponential hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelHyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn isotropic(dim: usize, signal_variance: f64, lengthscale: f64, noise: f64) -> Self {
        KernelHyperparams {
            signal_variance,
            lengthscales: vec![lengthscale; dim],
            noise_variance: noise,
        }
    }
}

/// Kernel evaluation `k(a, b)`.
pub fn kernel_eval(h: &KernelHyperparams, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut q = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / h.lengthscales[i];
        q += d * d;
    }
    h.signal_variance * (-0.5 * q).exp()
}

fn kernel_matrix(h: &KernelHyperparams, xs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = h.signal_variance;
        for j in 0..i {
            let v = kernel_eval(h, &xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Jitter ladder tried when the noisy kernel matrix fails to factor.
const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

fn jittered_cholesky(
    k_noisy: &DMatrix<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    for &jitter in &JITTERS {
        let mut k = k_noisy.clone();
        if jitter > 0.0 {
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol, jitter));
        }
    }
    Err(GpError::IllConditioned {
        max_jitter: *JITTERS.last().unwrap(),
    })
}

struct Factored {
    k_nl: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lml: f64,
    jitter: f64,
}

fn factor(h: &KernelHyperparams, xs: &[DVector<f64>], ys: &DVector<f64>) -> Result<Factored, GpError> {
    let n = xs.len();
    let k_nl = kernel_matrix(h, xs);
    let mut k_noisy = k_nl.clone();
    for i in 0..n {
        k_noisy[(i, i)] += h.noise_variance;
    }
    let (chol, jitter) = jittered_cholesky(&k_noisy)?;
    let alpha = chol.solve(ys);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let lml = -0.5 * ys.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return Err(GpError::NonFinite("log marginal likelihood"));
    }
    Ok(Factored {
        k_nl,
        chol,
        alpha,
        lml,
        jitter,
    })
}

/// Log marginal likelihood of the data under fixed hyperparameters.
pub fn log_marginal_likelihood(
    h: &KernelHyperparams,
    xs: &[DVector<f64>],
    ys: &DVector<f64>,
) -> Result<f64, GpError> {
    Ok(factor(h, xs, ys)?.lml)
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln σ_f², ln l_1, …, ln l_d, ln σ²]`.
pub fn lml_gradient(
    h: &KernelHyperparams,
    xs: &[DVector<f64>],
    ys: &DVector<f64>,
) -> Result<(f64, Vec<f64>), GpError> {
    let f = factor(h, xs, ys)?;
    let n = xs.len();
    let d = h.lengthscales.len();
    let k_inv = f.chol.inverse();

    // ∂LML/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ), accumulated entrywise.
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let a_ij = f.alpha[i] * f.alpha[j] - k_inv[(i, j)];
            let k_ij = f.k_nl[(i, j)];
            grad[0] += 0.5 * a_ij * k_ij; // ∂K/∂ln σ_f² = K_noiseless
            for dim in 0..d {
                let diff = xs[i][dim] - xs[j][dim];
                let l = h.lengthscales[dim];
                grad[1 + dim] += 0.5 * a_ij * k_ij * (diff * diff) / (l * l);
            }
            if i == j {
                grad[d + 1] += 0.5 * a_ij * h.noise_variance; // ∂K/∂ln σ² = σ² I
            }
        }
    }
    Ok((f.lml, grad))
}

/// Hyperparameter-fitting configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Starting hyperparameters; `None` uses a data-driven heuristic.
    pub init: Option<KernelHyperparams>,
    /// Number of optimizer starts (the first uses `init`/heuristic, the rest
    /// are randomized); the best final likelihood wins.
    pub restarts: usize,
    /// Ascent iterations per restart; 0 keeps the initial hyperparameters.
    pub max_iters: usize,
    /// Stop when the relative likelihood improvement falls below this.
    pub rel_tol: f64,
    /// Optimize hyperparameters on at most this many points (deterministic
    /// stride subsample); the posterior still conditions on everything.
    pub max_opt_points: Option<usize>,
    /// Standardize inputs per dimension and labels to zero mean/unit
    /// variance (training statistics; undone on prediction).
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            init: None,
            restarts: 3,
            max_iters: 200,
            rel_tol: 1e-7,
            max_opt_points: Some(256),
            standardize: true,
            seed: 0,
        }
    }
}

/// What the optimizer did, kept for inspection and tests.
#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    /// Full-data likelihood at the initial hyperparameters.
    pub initial_lml: f64,
    /// Full-data likelihood at the selected hyperparameters.
    pub final_lml: f64,
    /// Accepted-step likelihood trace of the winning restart (optimizer
    /// objective: the subsample when one is in effect). Non-decreasing.
    pub lml_path: Vec<f64>,
    pub iterations: usize,
    pub jitter: f64,
}

/// A fitted scalar Gaussian process.
#[derive(Debug, Clone)]
pub struct ScalarGp {
    pub hyper: KernelHyperparams,
    pub diagnostics: FitDiagnostics,
    x_scaler: Standardizer,
    y_scaler: ScalarScaler,
    train_x: Vec<DVector<f64>>,
    alpha: DVector<f64>,
}

const LOG_BOUNDS_SIGNAL: (f64, f64) = (-18.0, 14.0);
const LOG_BOUNDS_LENGTH: (f64, f64) = (-7.0, 7.0);
const LOG_BOUNDS_NOISE: (f64, f64) = (-20.5, 5.0);

fn phi_of(h: &KernelHyperparams) -> Vec<f64> {
    let mut phi = vec![h.signal_variance.ln()];
    phi.extend(h.lengthscales.iter().map(|l| l.ln()));
    phi.push(h.noise_variance.ln());
    phi
}

fn hyper_of(phi: &[f64]) -> KernelHyperparams {
    let d = phi.len() - 2;
    KernelHyperparams {
        signal_variance: phi[0].exp(),
        lengthscales: phi[1..=d].iter().map(|v| v.exp()).collect(),
        noise_variance: phi[d + 1].exp(),
    }
}

fn clamp_phi(phi: &mut [f64]) {
    let d = phi.len() - 2;
    phi[0] = phi[0].clamp(LOG_BOUNDS_SIGNAL.0, LOG_BOUNDS_SIGNAL.1);
    for v in phi[1..=d].iter_mut() {
        *v = v.clamp(LOG_BOUNDS_LENGTH.0, LOG_BOUNDS_LENGTH.1);
    }
    phi[d + 1] = phi[d + 1].clamp(LOG_BOUNDS_NOISE.0, LOG_BOUNDS_NOISE.1);
}

fn heuristic_init(xs: &[DVector<f64>], ys: &DVector<f64>) -> KernelHyperparams {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / n;
    let y_var = ys.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n;
    let signal = if y_var > 1e-12 { y_var } else { 1.0 };
    let lengthscales = (0..d)
        .map(|i| {
            let mean = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[i] - mean) * (x[i] - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    KernelHyperparams {
        signal_variance: signal,
        lengthscales,
        noise_variance: (1e-4 * signal).max(1e-8),
    }
}

/// Maximize the likelihood from one start; returns the final `(φ, lml, path)`.
fn ascend(
    mut phi: Vec<f64>,
    xs: &[DVector<f64>],
    ys: &DVector<f64>,
    cfg: &FitConfig,
) -> Result<(Vec<f64>, f64, Vec<f64>, usize), GpError> {
    clamp_phi(&mut phi);
    let mut current = factor(&hyper_of(&phi), xs, ys)?.lml;
    let mut path = vec![current];
    let mut step = 0.1;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let (_, grad) = lml_gradient(&hyper_of(&phi), xs, ys)?;
        let mut accepted = false;
        while step >= 1e-12 {
            let mut cand: Vec<f64> = phi.iter().zip(&grad).map(|(p, g)| p + step * g).collect();
            clamp_phi(&mut cand);
            match factor(&hyper_of(&cand), xs, ys) {
                Ok(f) if f.lml > current => {
                    let improvement = f.lml - current;
                    phi = cand;
                    current = f.lml;
                    path.push(current);
                    step = (step * 1.5).min(10.0);
                    accepted = true;
                    iterations += 1;
                    if improvement < cfg.rel_tol * current.abs().max(1.0) {
                        return Ok((phi, current, path, iterations));
                    }
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok((phi, current, path, iterations))
}

impl ScalarGp {
    /// Fit a scalar GP: validate, standardize (when configured), optimize
    /// hyperparameters with restarts, and condition on the full dataset.
    pub fn fit(
        inputs: &[DVector<f64>],
        labels: &[f64],
        cfg: &FitConfig,
    ) -> Result<ScalarGp, GpError> {
        if inputs.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        if inputs.len() != labels.len() {
            return Err(GpError::DimensionMismatch {
                what: "labels",
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        let d = inputs[0].len();
        for x in inputs {
            if x.len() != d {
                return Err(GpError::DimensionMismatch {
                    what: "input",
                    expected: d,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite("inputs"));
            }
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("labels"));
        }

        let (x_scaler, y_scaler) = if cfg.standardize {
            (
                Standardizer::fit(inputs),
                ScalarScaler::fit(labels),
            )
        } else {
            (Standardizer::identity(d), ScalarScaler::identity())
        };
        let xs: Vec<DVector<f64>> = inputs.iter().map(|x| x_scaler.transform(x)).collect();
        let ys = DVector::from_iterator(labels.len(), labels.iter().map(|&y| y_scaler.transform(y)));

        // Constant labels need no hyperparameter search: the posterior mean
        // is the constant regardless.
        let degenerate_labels = ys.amax() < 1e-13;

        let opt_idx: Vec<usize> = match cfg.max_opt_points {
            Some(m) if m > 0 && inputs.len() > m => {
                let stride = inputs.len().div_ceil(m);
                (0..inputs.len()).step_by(stride).collect()
            }
            _ => (0..inputs.len()).collect(),
        };
        let opt_xs: Vec<DVector<f64>> = opt_idx.iter().map(|&i| xs[i].clone()).collect();
        let opt_ys = DVector::from_iterator(opt_idx.len(), opt_idx.iter().map(|&i| ys[i]));

        let init = cfg
            .init
            .clone()
            .unwrap_or_else(|| heuristic_init(&opt_xs, &opt_ys));
        if init.lengthscales.len() != d {
            return Err(GpError::DimensionMismatch {
                what: "init lengthscales",
                expected: d,
                got: init.lengthscales.len(),
            });
        }
        let initial_lml = log_marginal_likelihood(&init, &xs, &ys)?;

        let mut best_path = Vec::new();
        let mut best_iters = 0;
        let hyper = if cfg.max_iters == 0 || degenerate_labels {
            // Keep the starting values bit-for-bit: a reload from stored
            // hyperparameters must recreate the identical posterior, and a
            // ln/exp round trip can drift by an ulp.
            init.clone()
        } else {
            let mut best_phi = phi_of(&init);
            let mut best_lml = f64::NEG_INFINITY;
            for restart in 0..cfg.restarts.max(1) {
                let phi0 = if restart == 0 {
                    phi_of(&init)
                } else {
                    let mut rng =
                        ChaCha20Rng::seed_from_u64(subseed(cfg.seed, "gp-restart", restart as u64));
                    let mut phi = Vec::with_capacity(d + 2);
                    phi.push(rng.gen_range(0.5f64.ln()..=2.0f64.ln()));
                    for _ in 0..d {
                        phi.push(rng.gen_range(0.3f64.ln()..=3.0f64.ln()));
                    }
                    phi.push(rng.gen_range(1e-6f64.ln()..=1e-2f64.ln()));
                    phi
                };
                let (phi, lml, path, iters) = ascend(phi0, &opt_xs, &opt_ys, cfg)?;
                if lml > best_lml {
                    best_phi = phi;
                    best_lml = lml;
                    best_path = path;
                    best_iters = iters;
                }
            }
            hyper_of(&best_phi)
        };
        let f = factor(&hyper, &xs, &ys)?;
        Ok(ScalarGp {
            hyper,
            diagnostics: FitDiagnostics {
                initial_lml,
                final_lml: f.lml,
                lml_path: best_path,
                iterations: best_iters,
                jitter: f.jitter,
            },
            x_scaler,
            y_scaler,
            train_x: xs,
            alpha: f.alpha,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.x_scaler.dim()
    }

    pub fn train_len(&self) -> usize {
        self.train_x.len()
    }

    /// Posterior mean at a query point.
    pub fn predict_mean(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        let xq = self.x_scaler.transform(x);
        let mut acc = 0.0;
        for (xi, &a) in self.train_x.iter().zip(self.alpha.iter()) {
            acc += kernel_eval_unit_signal(&self.hyper, &xq, xi) * a;
        }
        self.y_scaler.inverse_transform(acc * self.hyper.signal_variance)
    }
}

// Split signal variance out of the inner loop so the scaling happens once.
fn kernel_eval_unit_signal(h: &KernelHyperparams, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut q = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / h.lengthscales[i];
        q += d * d;
    }
    (-0.5 * q).exp()
}

/// Keep only the masked-in coordinates of `v`.
pub fn apply_mask(v: &DVector<f64>, mask: &[bool]) -> DVector<f64> {
    DVector::from_iterator(
        mask.iter().filter(|&&m| m).count(),
        v.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x),
    )
}

/// Independent GPs over a shared (masked) input space, one per output.
#[derive(Debug, Clone)]
pub struct IgpModel {
    pub mask: Vec<bool>,
    pub gps: Vec<ScalarGp>,
}

/// Fit one scalar GP per label dimension on mask-reduced inputs.
///
/// Each output is fitted independently (they share nothing but the masked
/// inputs), so per-output results are identical whether the fits run
/// sequentially or concurrently; here they run sequentially with a
/// deterministic per-output seed.
pub fn fit_igp(
    inputs: &[DVector<f64>],
    labels: &[DVector<f64>],
    mask: &[bool],
    cfg: &FitConfig,
) -> Result<IgpModel, GpError> {
    if inputs.is_empty() || labels.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(GpError::DimensionMismatch {
            what: "labels",
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    if inputs[0].len() != mask.len() {
        return Err(GpError::DimensionMismatch {
            what: "mask",
            expected: inputs[0].len(),
            got: mask.len(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(GpError::EmptyMask);
    }
    let reduced: Vec<DVector<f64>> = inputs.iter().map(|x| apply_mask(x, mask)).collect();
    let out_dim = labels[0].len();
    let mut gps = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        let ys: Vec<f64> = labels.iter().map(|y| y[k]).collect();
        let mut sub_cfg = cfg.clone();
        sub_cfg.seed = subseed(cfg.seed, "igp-output", k as u64);
        gps.push(ScalarGp::fit(&reduced, &ys, &sub_cfg)?);
    }
    Ok(IgpModel {
        mask: mask.to_vec(),
        gps,
    })
}

impl IgpModel {
    pub fn output_dim(&self) -> usize {
        self.gps.len()
    }

    /// Posterior mean for every output at a raw (unmasked) input.
    pub fn predict(&self, input: &DVector<f64>) -> DVector<f64> {
        let reduced = apply_mask(input, &self.mask);
        DVector::from_iterator(self.gps.len(), self.gps.iter().map(|g| g.predict_mean(&reduced)))
    }
}

/// Stored form of an [`IgpModel`]: the input mask and each output's selected
/// hyperparameters. Conditioning state is recomputed from the training data
/// on [`IgpModel::restore`], keeping checkpoints small and version-stable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IgpCheckpoint {
    pub mask: Vec<bool>,
    pub hypers: Vec<KernelHyperparams>,
}

impl IgpModel {
    pub fn checkpoint(&self) -> IgpCheckpoint {
        IgpCheckpoint {
            mask: self.mask.clone(),
            hypers: self.gps.iter().map(|g| g.hyper.clone()).collect(),
        }
    }

    /// Recondition stored hyperparameters on the same training data.
    ///
    /// Produces a model bit-for-bit identical to the fit that wrote the
    /// checkpoint (the stored values are used exactly; nothing is
    /// re-optimized).
    pub fn restore(
        ckpt: &IgpCheckpoint,
        inputs: &[DVector<f64>],
        labels: &[DVector<f64>],
        cfg: &FitConfig,
    ) -> Result<IgpModel, GpError> {
        let out_dim = labels.first().map_or(0, |l| l.len());
        if out_dim != ckpt.hypers.len() {
            return Err(GpError::DimensionMismatch {
                what: "checkpoint outputs",
                expected: out_dim,
                got: ckpt.hypers.len(),
            });
        }
        if inputs.first().map_or(0, |x| x.len()) != ckpt.mask.len() {
            return Err(GpError::DimensionMismatch {
                what: "checkpoint mask",
                expected: inputs.first().map_or(0, |x| x.len()),
                got: ckpt.mask.len(),
            });
        }
        let mut frozen = cfg.clone();
        frozen.max_iters = 0;
        let mut expanded = Vec::with_capacity(out_dim);
        for (k, hyper) in ckpt.hypers.iter().enumerate() {
            let mut sub = frozen.clone();
            sub.init = Some(hyper.clone());
            sub.seed = subseed(cfg.seed, "igp-output", k as u64);
            expanded.push(sub);
        }
        let reduced: Vec<DVector<f64>> =
            inputs.iter().map(|x| apply_mask(x, &ckpt.mask)).collect();
        let mut gps = Vec::with_capacity(out_dim);
        for (k, sub) in expanded.iter().enumerate() {
            let ys: Vec<f64> = labels.iter().map(|y| y[k]).collect();
            gps.push(ScalarGp::fit(&reduced, &ys, sub)?);
        }
        Ok(IgpModel {
            mask: ckpt.mask.clone(),
            gps,
        })
    }
}

/// Anything that maps `(x, u) → ẋ`. Implemented by learned models, exact
/// simulators, and ad-hoc closures (useful as oracles in tests).
pub trait DynamicsModel {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

impl DynamicsModel for IgpModel {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut input = DVector::zeros(x.len() + u.len());
        input.rows_mut(0, x.len()).copy_from(x);
        input.rows_mut(x.len(), u.len()).copy_from(u);
        self.predict(&input)
    }
}

/// Exact system dynamics viewed as a [`DynamicsModel`].
pub struct TrueDynamics<'a>(pub &'a dyn crate::systems::System);

impl DynamicsModel for TrueDynamics<'_> {
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.0.dynamics(x, u)
    }
}

impl<F> DynamicsModel for F
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    fn predict_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self(x, u)
    }
}
