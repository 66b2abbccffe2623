//! Confidence sets over disturbances: chi-square ellipsoids, their outer
//! polytopes, and scalar magnitude bounds.
//!
//! A Gaussian posterior `d ~ N(μ, Σ)` confines the disturbance to the
//! ellipsoid `(d−μ)ᵀΣ⁻¹(d−μ) ≤ k_δ` with probability `1−δ`, where `k_δ` is
//! the chi-square quantile at `1−δ` with `dim(d)` degrees of freedom. The
//! ellipsoid's eigenbasis gives a tight outer polytope (a rotated box) whose
//! facets the robust QP dualizes, and projecting onto the positional and
//! velocity blocks gives the norm caps `ζ_p`, `ζ_v` consumed by the barrier
//! coefficient formulas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};
use thiserror::Error;

use crate::mvg::DisturbancePosterior;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("probability {0} outside (0,1)")]
    InvalidProb(f64),
    #[error("degrees of freedom must be positive")]
    InvalidDof,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Chi-square quantile: the `k` with `CDF_{χ²_dof}(k) = prob`, accurate to
/// better than 1e−9 (library inverse plus two Newton refinement steps).
pub fn chi2_quantile(prob: f64, dof: usize) -> Result<f64, BoundsError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(BoundsError::InvalidProb(prob));
    }
    if dof == 0 {
        return Err(BoundsError::InvalidDof);
    }
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    let mut x = dist.inverse_cdf(prob);
    for _ in 0..2 {
        let f = dist.cdf(x) - prob;
        let d = dist.pdf(x);
        if d > 0.0 {
            x -= f / d;
        }
    }
    Ok(x)
}

/// `(1−δ)`-confidence ellipsoid `(d−μ)ᵀΣ⁻¹(d−μ) ≤ k_δ` over a disturbance
/// vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceEllipsoid {
    pub mean: DVector<f64>,
    /// Symmetric PSD covariance.
    pub cov: DMatrix<f64>,
    /// Chi-square quantile at probability `1−δ` with `dim` degrees of freedom.
    pub k_delta: f64,
    pub delta: f64,
}

/// Symmetrizes and clamps negative eigenvalues to zero. Returns the repaired
/// matrix and whether any clamping happened.
fn repair_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, false);
    }
    let n = sym.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        out += lam * &v * v.transpose();
    }
    ((&out + out.transpose()) * 0.5, true)
}

impl ConfidenceEllipsoid {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ellipsoid for one 4-dimensional disturbance source. `k_delta` is
    /// passed in (rather than recomputed at dof 4) so the caller can use the
    /// quantile of the full stacked disturbance; the block-diagonal marginal
    /// of that larger ellipsoid is exactly this set.
    pub fn from_posterior(post: &DisturbancePosterior, k_delta: f64, delta: f64) -> Self {
        let cov4 = post.cov();
        let cov = DMatrix::from_fn(4, 4, |i, j| cov4[(i, j)]);
        let (cov, clamped) = repair_psd(&cov);
        if clamped {
            log::warn!("posterior covariance had negative eigenvalues; clamped to PSD");
        }
        Self {
            mean: DVector::from_fn(4, |i, _| post.mean[i]),
            cov,
            k_delta,
            delta,
        }
    }
}

/// Stacks the robot and one agent posterior into the 8-dimensional
/// confidence ellipsoid over `[d_p, d_v, d_p^h, d_v^h]` with block-diagonal
/// covariance and `k_δ = chi2_quantile(1−δ, 8)`.
pub fn build_ellipsoid(
    post_robot: &DisturbancePosterior,
    post_agent: &DisturbancePosterior,
    delta: f64,
) -> Result<ConfidenceEllipsoid, BoundsError> {
    let k_delta = chi2_quantile(1.0 - delta, 8)?;
    let mut mean = DVector::zeros(8);
    let mut cov = DMatrix::zeros(8, 8);
    let cr = post_robot.cov();
    let ca = post_agent.cov();
    for i in 0..4 {
        mean[i] = post_robot.mean[i];
        mean[4 + i] = post_agent.mean[i];
        for j in 0..4 {
            cov[(i, j)] = cr[(i, j)];
            cov[(4 + i, 4 + j)] = ca[(i, j)];
        }
    }
    let (cov, clamped) = repair_psd(&cov);
    if clamped {
        log::warn!("stacked covariance had negative eigenvalues; clamped to PSD");
    }
    if !mean.iter().all(|c| c.is_finite()) || !cov.iter().all(|c| c.is_finite()) {
        return Err(BoundsError::NonFinite("ellipsoid"));
    }
    Ok(ConfidenceEllipsoid { mean, cov, k_delta, delta })
}

/// Outer polytope `G d ≤ g` of a confidence ellipsoid: one ± pair of facets
/// per covariance eigenvector, touching the ellipsoid at its extreme points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyPolytope {
    /// 2P×P facet normals; row 2i is `υᵢᵀ`, row 2i+1 is `−υᵢᵀ`.
    pub g_mat: DMatrix<f64>,
    /// 2P facet offsets.
    pub g_vec: DVector<f64>,
    /// Ellipsoid center (the box center).
    pub mean: DVector<f64>,
    /// Half-axis vectors `√(k_δ λᵢ) υᵢ`; vertices are `mean ± axes` sums.
    pub axes: Vec<DVector<f64>>,
}

impl UncertaintyPolytope {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn contains(&self, d: &DVector<f64>, tol: f64) -> bool {
        let r = &self.g_mat * d - &self.g_vec;
        r.iter().all(|&v| v <= tol)
    }

    /// All `2^P` vertices of the rotated box.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let p = self.axes.len();
        let mut out = Vec::with_capacity(1 << p);
        for mask in 0..(1usize << p) {
            let mut v = self.mean.clone();
            for (i, a) in self.axes.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    v += a;
                } else {
                    v -= a;
                }
            }
            out.push(v);
        }
        out
    }

    /// Human-readable rows `G | g` for debugging.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for r in 0..self.g_mat.nrows() {
            for c in 0..self.g_mat.ncols() {
                s.push_str(&format!("{:+.6} ", self.g_mat[(r, c)]));
            }
            s.push_str(&format!("| {:+.6}\n", self.g_vec[r]));
        }
        s
    }
}

/// Tight outer box of the ellipsoid in its eigenbasis: for each eigenpair
/// `(λᵢ, υᵢ)`, the facet pair `±υᵢᵀ d ≤ √(k_δ λᵢ) ± υᵢᵀ μ`.
pub fn to_polytope(e: &ConfidenceEllipsoid) -> UncertaintyPolytope {
    let p = e.dim();
    let sym = (&e.cov + e.cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut g_mat = DMatrix::zeros(2 * p, p);
    let mut g_vec = DVector::zeros(2 * p);
    let mut axes = Vec::with_capacity(p);
    for i in 0..p {
        let lam = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i).clone_owned();
        let half = (e.k_delta * lam).sqrt();
        let offset = v.dot(&e.mean);
        for c in 0..p {
            g_mat[(2 * i, c)] = v[c];
            g_mat[(2 * i + 1, c)] = -v[c];
        }
        g_vec[2 * i] = half + offset;
        g_vec[2 * i + 1] = half - offset;
        axes.push(v * half);
    }
    UncertaintyPolytope { g_mat, g_vec, mean: e.mean.clone(), axes }
}

/// Norm caps on the positional and velocity components of one disturbance
/// source, valid over the whole confidence set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaBounds {
    /// `‖d_p‖ ≤ ζ_p`, meters.
    pub zeta_p: f64,
    /// `‖d_v‖ ≤ ζ_v`, m/s.
    pub zeta_v: f64,
}

/// Conservative norm caps from a 4-dimensional per-source ellipsoid:
/// `ζ_p = ‖μ_p‖ + √(k_δ λ_max(Σ_pp))` and likewise for the velocity block.
/// Valid because the marginal of the ellipsoid onto a block is the ellipsoid
/// of the block's sub-covariance, whose support in any direction is at most
/// `√(k_δ λ_max)` from the mean.
pub fn zeta_from_polytope(e: &ConfidenceEllipsoid) -> ZetaBounds {
    assert_eq!(e.dim(), 4, "per-source ellipsoid must be 4-dimensional");
    let block_bound = |rows: std::ops::Range<usize>| {
        let sub = e.cov.view((rows.start, rows.start), (2, 2)).clone_owned();
        let sym = (&sub + sub.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max).max(0.0);
        let mu = e.mean.rows(rows.start, 2).norm();
        mu + (e.k_delta * lam_max).sqrt()
    };
    ZetaBounds { zeta_p: block_bound(0..2), zeta_v: block_bound(2..4) }
}
