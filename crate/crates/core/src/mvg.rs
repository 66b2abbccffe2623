//! Matrix-variate Gaussian process over dynamics disturbances.
//!
//! One model covers one disturbance source (the robot, or one agent). The
//! 4-dimensional output `[d_p, d_v]` has Kronecker-factored covariance
//! `K ⊗ Ω`: the squared-exponential kernel `K` couples query states, the
//! column covariance `Ω` couples output components. Hyperparameters
//! (`σ`, `l`, `σ_n`, `Ω`) are trained offline by stochastic gradient descent
//! on the negative log-likelihood with projected updates keeping `Ω`
//! positive definite; inference then conditions on a sliding window of
//! recent (state, disturbance) observations.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, Disturbance};

/// Output dimension: stacked `[d_p, d_v]`.
pub const OUTPUT_DIM: usize = 4;

/// Relative scale of the numerical jitter added to the kernel diagonal.
pub const JITTER_REL: f64 = 1e-8;

/// Smallest eigenvalue allowed for the projected column covariance.
pub const OMEGA_EIG_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MvgError {
    #[error("kernel matrix is not positive definite beyond jitter rescue")]
    KernelNotPd,
    #[error("column covariance is not positive definite")]
    OmegaNotPd,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("training diverged in all restarts")]
    TrainDiverged,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Signal scale σ > 0.
    pub sigma: f64,
    /// Length-scale l > 0 in state-space units.
    pub length: f64,
}

/// `κ(xi, xj) = σ² exp(-||xi - xj||² / (2 l²))`.
pub fn kernel_eval(k: &KernelParams, xi: &AgentState, xj: &AgentState) -> f64 {
    let mut r2 = (xi.as_vector4() - xj.as_vector4()).norm_squared();
    for (a, b) in xi.z.iter().zip(xj.z.iter()) {
        r2 += (a - b) * (a - b);
    }
    k.sigma * k.sigma * (-r2 / (2.0 * k.length * k.length)).exp()
}

/// Gaussian posterior over the disturbance at a single query state.
/// The full covariance factors as `Σ̂ ⊗ Ω`, which at a single point is the
/// scalar-scaled matrix `Σ̂ · Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbancePosterior {
    pub mean: Vector4<f64>,
    /// Scalar predictive variance factor (includes observation noise).
    pub sigma_hat: f64,
    pub omega: Matrix4<f64>,
}

impl DisturbancePosterior {
    pub fn cov(&self) -> Matrix4<f64> {
        self.omega * self.sigma_hat
    }
}

/// One disturbance source's MVG model: hyperparameters plus a bounded,
/// time-ordered window of training pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvgModel {
    pub kernel: KernelParams,
    /// Observation-noise scale σ_n, added as σ_n² to the kernel diagonal and
    /// to the predictive variance.
    pub noise: f64,
    /// Column covariance Ω, symmetric positive definite.
    pub omega: Matrix4<f64>,
    /// Absolute jitter added to the kernel diagonal.
    pub jitter: f64,
    pub capacity: usize,
    window: VecDeque<(AgentState, Vector4<f64>)>,
}

impl MvgModel {
    pub fn new(kernel: KernelParams, noise: f64, omega: Matrix4<f64>, capacity: usize) -> Self {
        let jitter = JITTER_REL * kernel.sigma * kernel.sigma;
        Self { kernel, noise, omega, jitter, capacity, window: VecDeque::new() }
    }

    pub fn window(&self) -> impl Iterator<Item = &(AgentState, Vector4<f64>)> {
        self.window.iter()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Appends an observation, evicting the oldest entry when full.
    pub fn observe(&mut self, x: AgentState, d: &Disturbance) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((x, d.as_vector4()));
    }

    pub fn clear_window(&mut self) {
        self.window.clear();
    }

    fn kernel_matrix(&self, xs: &[AgentState], diag_extra: f64) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = kernel_eval(&self.kernel, &xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += diag_extra;
        }
        k
    }

    fn diag_extra(&self) -> f64 {
        self.noise * self.noise + self.jitter
    }

    /// Prior at a query point (used when the window is empty).
    pub fn prior(&self, x_star: &AgentState) -> DisturbancePosterior {
        DisturbancePosterior {
            mean: Vector4::zeros(),
            sigma_hat: kernel_eval(&self.kernel, x_star, x_star) + self.diag_extra(),
            omega: self.omega,
        }
    }

    /// Posterior disturbance distribution at a query state, conditioned on
    /// the current window.
    pub fn posterior(&self, x_star: &AgentState) -> Result<DisturbancePosterior, MvgError> {
        if !x_star.is_finite() {
            return Err(MvgError::NonFinite("query state"));
        }
        if self.window.is_empty() {
            return Ok(self.prior(x_star));
        }
        let xs: Vec<AgentState> = self.window.iter().map(|(x, _)| x.clone()).collect();
        let n = xs.len();

        // K with jitter rescue: scale up the diagonal shift on failure.
        let mut extra = self.diag_extra();
        let chol = loop {
            let k = self.kernel_matrix(&xs, extra);
            match k.cholesky() {
                Some(c) => break c,
                None => {
                    extra *= 1e3;
                    if extra > 1e3 * self.kernel.sigma * self.kernel.sigma {
                        return Err(MvgError::KernelNotPd);
                    }
                }
            }
        };

        let k_star =
            DVector::from_fn(n, |i, _| kernel_eval(&self.kernel, &xs[i], x_star));
        let alpha = chol.solve(&k_star);

        let mut mean = Vector4::zeros();
        for (i, (_, y)) in self.window.iter().enumerate() {
            mean += alpha[i] * y;
        }
        let sigma_hat = (kernel_eval(&self.kernel, x_star, x_star) + self.diag_extra()
            - k_star.dot(&alpha))
            .max(0.0);
        Ok(DisturbancePosterior { mean, sigma_hat, omega: self.omega })
    }

    /// Negative log-likelihood of a training batch under the current
    /// hyperparameters.
    pub fn nll(&self, xs: &[AgentState], ys: &[Vector4<f64>]) -> Result<f64, MvgError> {
        self.nll_inner(xs, ys).map(|(l, _, _, _)| l)
    }

    fn nll_inner(
        &self,
        xs: &[AgentState],
        ys: &[Vector4<f64>],
    ) -> Result<(f64, DMatrix<f64>, DMatrix<f64>, Matrix4<f64>), MvgError> {
        let n = xs.len();
        if n == 0 || ys.len() != n {
            return Err(MvgError::Dimension(format!(
                "nll needs matching non-empty X ({}) and Y ({})",
                n,
                ys.len()
            )));
        }
        let m = OUTPUT_DIM as f64;
        let k = self.kernel_matrix(xs, self.diag_extra());
        let chol_k = k.clone().cholesky().ok_or(MvgError::KernelNotPd)?;
        let chol_omega = self.omega.cholesky().ok_or(MvgError::OmegaNotPd)?;

        let ln_det_k: f64 = 2.0 * chol_k.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ln_det_omega: f64 =
            2.0 * chol_omega.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let y = DMatrix::from_fn(n, OUTPUT_DIM, |i, j| ys[i][j]);
        let omega_inv = chol_omega.inverse();
        // tr(K^-1 Y Ω^-1 Y^T) via the solve A = K^-1 Y.
        let a = chol_k.solve(&y);
        let y_omega_inv = &y * omega_inv;
        let trace: f64 = a.zip_fold(&y_omega_inv, 0.0, |acc, ai, yi| acc + ai * yi);

        let nll = 0.5 * (n as f64) * m * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * m * ln_det_k
            + 0.5 * (n as f64) * ln_det_omega
            + 0.5 * trace;
        if !nll.is_finite() {
            return Err(MvgError::NonFinite("nll"));
        }
        let k_inv = chol_k.inverse();
        Ok((nll, k_inv, y, omega_inv))
    }

    /// Analytic gradients of the negative log-likelihood with respect to the
    /// kernel length-scale, signal scale, noise scale, and column covariance.
    pub fn nll_gradients(
        &self,
        xs: &[AgentState],
        ys: &[Vector4<f64>],
    ) -> Result<NllGradients, MvgError> {
        let (_, k_inv, y, omega_inv) = self.nll_inner(xs, ys)?;
        let n = xs.len();
        let m = OUTPUT_DIM as f64;

        // B = Y Ω^-1 Y^T
        let b = &y * omega_inv * y.transpose();

        let sig = self.kernel.sigma;
        let len = self.kernel.length;
        let mut dk_dl = DMatrix::zeros(n, n);
        let mut dk_dsigma = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut r2 = (xs[i].as_vector4() - xs[j].as_vector4()).norm_squared();
                for (a, bz) in xs[i].z.iter().zip(xs[j].z.iter()) {
                    r2 += (a - bz) * (a - bz);
                }
                let k_se = sig * sig * (-r2 / (2.0 * len * len)).exp();
                let dl = k_se * r2 / (len * len * len);
                let ds = 2.0 * k_se / sig;
                dk_dl[(i, j)] = dl;
                dk_dl[(j, i)] = dl;
                dk_dsigma[(i, j)] = ds;
                dk_dsigma[(j, i)] = ds;
            }
        }

        // dL/dθ = (m/2) tr(K^-1 dK) - 1/2 tr(K^-1 dK K^-1 B)
        let grad_for = |dk: &DMatrix<f64>| -> f64 {
            let ki_dk = &k_inv * dk;
            let t1: f64 = ki_dk.diagonal().iter().sum();
            let ki_b = &k_inv * &b;
            let t2: f64 = (&ki_dk * ki_b).diagonal().iter().sum();
            0.5 * m * t1 - 0.5 * t2
        };
        let d_length = grad_for(&dk_dl);
        let d_sigma = grad_for(&dk_dsigma);
        // dK/dσ_n = 2 σ_n I
        let d_noise = {
            let t1: f64 = k_inv.diagonal().iter().sum();
            let ki_b = &k_inv * &b;
            let t2: f64 = (&k_inv * ki_b).diagonal().iter().sum();
            2.0 * self.noise * (0.5 * m * t1 - 0.5 * t2)
        };

        // dL/dΩ = (N/2) Ω^-1 - 1/2 Ω^-1 Y^T K^-1 Y Ω^-1
        let yt_kinv_y4 = y.transpose() * &k_inv * &y;
        let mut yt_kinv_y = Matrix4::zeros();
        for i in 0..OUTPUT_DIM {
            for j in 0..OUTPUT_DIM {
                yt_kinv_y[(i, j)] = yt_kinv_y4[(i, j)];
            }
        }
        let d_omega = omega_inv * (n as f64) * 0.5 - 0.5 * omega_inv * yt_kinv_y * omega_inv;

        Ok(NllGradients { d_length, d_sigma, d_noise, d_omega })
    }
}

/// Gradients of the batch NLL.
#[derive(Debug, Clone)]
pub struct NllGradients {
    pub d_length: f64,
    pub d_sigma: f64,
    pub d_noise: f64,
    pub d_omega: Matrix4<f64>,
}

/// One training batch: states and the disturbances observed at them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub xs: Vec<AgentState>,
    pub ys: Vec<Vector4<f64>>,
}

/// Hyperparameter training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub restarts: usize,
    pub holdout_fraction: f64,
    pub window_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 2000,
            restarts: 5,
            holdout_fraction: 0.2,
            window_capacity: 50,
            seed: 0,
        }
    }
}

/// Per-restart training outcome, for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub holdout_nll: f64,
    pub diverged: bool,
    /// Held-out NLL sampled every 50 steps.
    pub nll_curve: Vec<f64>,
}

/// Training output: the selected model plus per-restart diagnostics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MvgModel,
    pub reports: Vec<RestartReport>,
    pub holdout_nll: f64,
}

/// Projects a symmetric matrix onto the PD cone with eigenvalue floor.
pub fn project_pd(m: &Matrix4<f64>, floor: f64) -> Matrix4<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = Matrix4::zeros();
    for i in 0..OUTPUT_DIM {
        let lam = eig.eigenvalues[i].max(floor);
        let v = eig.eigenvectors.column(i);
        out += lam * v * v.transpose();
    }
    (out + out.transpose()) * 0.5
}

/// Trains MVG hyperparameters by SGD over batches with random restarts,
/// returning the restart with the lowest held-out NLL. σ, l and σ_n are
/// updated in log-space; Ω by projected gradient steps.
pub fn train(dataset: &[TrainingBatch], cfg: &TrainConfig) -> Result<TrainOutcome, MvgError> {
    if dataset.is_empty() || dataset.iter().any(|b| b.xs.is_empty()) {
        return Err(MvgError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Deterministic train/held-out split over batches.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = ((dataset.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.min(dataset.len().saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let train_idx: Vec<usize> = train_idx.to_vec();
    let holdout_idx: Vec<usize> =
        if holdout_idx.is_empty() { train_idx.clone() } else { holdout_idx.to_vec() };

    // Data scale for initialization.
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for b in dataset {
        for y in &b.ys {
            sum_sq += y.norm_squared();
            count += 1;
        }
    }
    let scale = (sum_sq / (count * OUTPUT_DIM).max(1) as f64).sqrt().max(1e-6);

    let holdout_nll = |model: &MvgModel| -> f64 {
        let mut total = 0.0;
        for &i in &holdout_idx {
            match model.nll(&dataset[i].xs, &dataset[i].ys) {
                Ok(v) => total += v,
                Err(_) => return f64::INFINITY,
            }
        }
        total
    };

    let mut best: Option<(f64, MvgModel)> = None;
    let mut reports = Vec::new();

    for restart in 0..cfg.restarts {
        let mut sigma = scale * rng.gen_range(0.5..2.0_f64);
        let mut length = rng.gen_range(0.5..4.0_f64);
        let mut noise = scale * rng.gen_range(0.2..1.0_f64);
        let mut omega = Matrix4::identity();

        let make = |sigma: f64, length: f64, noise: f64, omega: Matrix4<f64>| {
            MvgModel::new(KernelParams { sigma, length }, noise, omega, cfg.window_capacity)
        };

        let initial_nll = holdout_nll(&make(sigma, length, noise, omega));
        let mut curve = Vec::new();
        let mut diverged = false;

        for step in 0..cfg.steps {
            let &bi = &train_idx[rng.gen_range(0..train_idx.len())];
            let model = make(sigma, length, noise, omega);
            let grads = match model.nll_gradients(&dataset[bi].xs, &dataset[bi].ys) {
                Ok(g) => g,
                Err(_) => {
                    diverged = true;
                    break;
                }
            };
            // Log-space updates keep the scalar hyperparameters positive.
            let clamp = |x: f64| x.clamp(-12.0, 12.0);
            sigma = clamp(sigma.ln() - cfg.learning_rate * grads.d_sigma * sigma).exp();
            length = clamp(length.ln() - cfg.learning_rate * grads.d_length * length).exp();
            noise = clamp(noise.ln() - cfg.learning_rate * grads.d_noise * noise).exp();
            omega = project_pd(&(omega - cfg.learning_rate * grads.d_omega), OMEGA_EIG_FLOOR);
            if !sigma.is_finite() || !length.is_finite() || !noise.is_finite() {
                diverged = true;
                break;
            }
            if step % 50 == 0 {
                curve.push(holdout_nll(&make(sigma, length, noise, omega)));
            }
        }

        let model = make(sigma, length, noise, omega);
        let h = if diverged { f64::INFINITY } else { holdout_nll(&model) };
        reports.push(RestartReport {
            restart,
            initial_nll,
            final_nll: h,
            holdout_nll: h,
            diverged: diverged || !h.is_finite(),
            nll_curve: curve,
        });
        if h.is_finite() && best.as_ref().map_or(true, |(bh, _)| h < *bh) {
            best = Some((h, model));
        }
    }

    match best {
        Some((h, model)) => Ok(TrainOutcome { model, reports, holdout_nll: h }),
        None => Err(MvgError::TrainDiverged),
    }
}

/// On-disk model document. Version 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub model: MvgModel,
}

impl ModelFile {
    pub const VERSION: u32 = 1;

    pub fn new(model: MvgModel) -> Self {
        Self { format_version: Self::VERSION, model }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
