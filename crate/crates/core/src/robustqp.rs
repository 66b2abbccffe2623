//! Dualized robust quadratic program selecting the minimally invasive safe
//! control.
//!
//! Each active agent contributes the robust constraint
//! `H1 d + uᵀ H2 d + H3 u ≤ k_c` for every disturbance `d` in its
//! uncertainty polytope `{d : G d ≤ g}`. Linear-programming duality turns
//! the inner maximum over `d` into multipliers `ξ ≥ 0` with `Gᵀ ξ = H1ᵀ +
//! H2ᵀ u` and `gᵀ ξ + H3 u ≤ k_c`, so the whole filter is one convex QP in
//! `(u, ξ⁽¹⁾, …, ξ⁽ᴺ⁾)` minimizing `½‖u − u_des‖²`. The control-norm ball
//! is inner-approximated by `K` polygon facets so the program stays a QP.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::UncertaintyPolytope;
use crate::cbf::CbcCoefficients;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("polygon facet count {0} too small (need ≥ 8)")]
    TooFewFacets(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("solver setup failed: {0}")]
    Setup(String),
}

/// One agent's contribution to the program. `polytope: None` collapses the
/// uncertainty set to `{0}` (certainty-equivalent constraint `H3 u ≤ k_c`,
/// no multipliers) — the nominal-filter baseline.
#[derive(Debug, Clone)]
pub struct AgentBlock {
    pub coeffs: CbcCoefficients,
    pub polytope: Option<UncertaintyPolytope>,
}

/// Assembled robust program.
#[derive(Debug, Clone)]
pub struct RobustProgram {
    pub u_des: Vector2<f64>,
    pub u_max: f64,
    /// Facet count `K` of the inscribed control polygon.
    pub ball_facets: usize,
    pub blocks: Vec<AgentBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: Vector2<f64>,
    /// Multipliers per robust block, in block order; empty vectors for
    /// certainty-equivalent blocks.
    pub xi: Vec<DVector<f64>>,
    pub status: QpStatus,
    /// Max-norm KKT residual (stationarity, equality, inequality) of the
    /// returned iterate.
    pub kkt_residual: f64,
    /// `½‖u − u_des‖²` at the returned iterate.
    pub objective: f64,
}

/// Effective control-norm budget after the polygon inner approximation.
pub fn effective_u_max(u_max: f64, ball_facets: usize) -> f64 {
    u_max * (std::f64::consts::PI / ball_facets as f64).cos()
}

/// Validates and packages the program.
pub fn assemble(
    u_des: Vector2<f64>,
    blocks: Vec<AgentBlock>,
    u_max: f64,
    ball_facets: usize,
) -> Result<RobustProgram, QpError> {
    if ball_facets < 8 {
        return Err(QpError::TooFewFacets(ball_facets));
    }
    if !u_des.iter().all(|c| c.is_finite()) || !u_max.is_finite() || u_max <= 0.0 {
        return Err(QpError::NonFinite("control inputs"));
    }
    for (i, b) in blocks.iter().enumerate() {
        if !b.coeffs.is_finite() {
            return Err(QpError::NonFinite("coefficients"));
        }
        if let Some(p) = &b.polytope {
            if p.dim() != 8 || p.g_mat.nrows() != 2 * p.dim() {
                return Err(QpError::Dimension(format!(
                    "block {i}: polytope is {}×{}, expected 16×8",
                    p.g_mat.nrows(),
                    p.g_mat.ncols()
                )));
            }
        }
    }
    Ok(RobustProgram { u_des, u_max, ball_facets, blocks })
}

impl RobustProgram {
    /// Number of scalar equality constraints (`P` per robust block).
    pub fn n_equalities(&self) -> usize {
        self.blocks.iter().filter(|b| b.polytope.is_some()).count() * 8
    }

    /// Decision-vector length: control plus multipliers.
    pub fn n_vars(&self) -> usize {
        2 + self.blocks.iter().filter(|b| b.polytope.is_some()).count() * 16
    }

    /// Full-precision structured dump for failure triage.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "u_des = [{:e}, {:e}], u_max = {:e}, facets = {}\n",
            self.u_des.x, self.u_des.y, self.u_max, self.ball_facets
        );
        for (i, b) in self.blocks.iter().enumerate() {
            s.push_str(&format!("block {i}: k_c = {:e}\n", b.coeffs.k_c));
            s.push_str(&format!("  h1 = {:?}\n", b.coeffs.h1.as_slice()));
            s.push_str(&format!("  h2 = {:?}\n", b.coeffs.h2.as_slice()));
            s.push_str(&format!("  h3 = [{:e}, {:e}]\n", b.coeffs.h3.x, b.coeffs.h3.y));
            match &b.polytope {
                Some(p) => s.push_str(&p.dump()),
                None => s.push_str("  certainty-equivalent (no polytope)\n"),
            }
        }
        s
    }
}

/// Dense → compressed sparse column, dropping exact zeros.
fn to_csc(a: &DMatrix<f64>) -> CscMatrix<f64> {
    let (m, n) = a.shape();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..m {
            let v = a[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

struct Assembled {
    a: DMatrix<f64>,
    b: DVector<f64>,
    n_eq: usize,
    p_mat: DMatrix<f64>,
    q: DVector<f64>,
    /// offsets of each robust block's ξ in the decision vector
    xi_offsets: Vec<Option<usize>>,
}

fn build_matrices(prog: &RobustProgram) -> Assembled {
    let n = prog.n_vars();
    let n_eq = prog.n_equalities();
    let k = prog.ball_facets;
    let n_robust = prog.blocks.iter().filter(|b| b.polytope.is_some()).count();
    let n_ineq = k + prog.blocks.len() + 16 * n_robust;

    let mut a = DMatrix::zeros(n_eq + n_ineq, n);
    let mut b = DVector::zeros(n_eq + n_ineq);
    let mut p_mat = DMatrix::zeros(n, n);
    p_mat[(0, 0)] = 1.0;
    p_mat[(1, 1)] = 1.0;
    let mut q = DVector::zeros(n);
    q[0] = -prog.u_des.x;
    q[1] = -prog.u_des.y;

    let mut xi_offsets = Vec::with_capacity(prog.blocks.len());
    let mut off = 2;
    for blk in &prog.blocks {
        if blk.polytope.is_some() {
            xi_offsets.push(Some(off));
            off += 16;
        } else {
            xi_offsets.push(None);
        }
    }

    // Equalities first (zero cone): Gᵀ ξ − H2ᵀ u = H1ᵀ, row-normalized.
    let mut row = 0;
    for (bi, blk) in prog.blocks.iter().enumerate() {
        let Some(poly) = &blk.polytope else { continue };
        let xo = xi_offsets[bi].unwrap();
        for j in 0..8 {
            // u coefficients: −H2ᵀ[j,:] = −H2[:,j]ᵀ
            a[(row, 0)] = -blk.coeffs.h2[(0, j)];
            a[(row, 1)] = -blk.coeffs.h2[(1, j)];
            for r in 0..16 {
                a[(row, xo + r)] = poly.g_mat[(r, j)];
            }
            b[row] = blk.coeffs.h1[j];
            let norm = a.row(row).norm();
            if norm > 0.0 {
                for c in 0..n {
                    a[(row, c)] /= norm;
                }
                b[row] /= norm;
            }
            row += 1;
        }
    }

    // Inequalities (nonnegative cone): control polygon, per-block scalar
    // constraint, ξ ≥ 0.
    let rhs = effective_u_max(prog.u_max, k);
    for i in 0..k {
        let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        a[(row, 0)] = th.cos();
        a[(row, 1)] = th.sin();
        b[row] = rhs;
        row += 1;
    }
    for (bi, blk) in prog.blocks.iter().enumerate() {
        a[(row, 0)] = blk.coeffs.h3.x;
        a[(row, 1)] = blk.coeffs.h3.y;
        if let (Some(xo), Some(poly)) = (xi_offsets[bi], &blk.polytope) {
            for r in 0..16 {
                a[(row, xo + r)] = poly.g_vec[r];
            }
        }
        b[row] = blk.coeffs.k_c;
        row += 1;
    }
    for xo in xi_offsets.iter().flatten() {
        for r in 0..16 {
            a[(row, xo + r)] = -1.0;
            row += 1;
        }
    }
    debug_assert_eq!(row, n_eq + n_ineq);

    Assembled { a, b, n_eq, p_mat, q, xi_offsets }
}

/// Solves the assembled program. Deterministic for fixed input.
pub fn solve(prog: &RobustProgram) -> Result<QpSolution, QpError> {
    let m = build_matrices(prog);
    let n_ineq = m.b.len() - m.n_eq;

    let p_csc = to_csc(&m.p_mat);
    let a_csc = to_csc(&m.a);
    let q: Vec<f64> = m.q.iter().cloned().collect();
    let b: Vec<f64> = m.b.iter().cloned().collect();
    let cones = [
        SupportedConeT::ZeroConeT(m.n_eq),
        SupportedConeT::NonnegativeConeT(n_ineq),
    ];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .max_iter(200)
        .build()
        .map_err(|e| QpError::Setup(e.to_string()))?;
    let mut solver = DefaultSolver::new(&p_csc, &q, &a_csc, &b, &cones, settings);
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => QpStatus::MaxIter,
        _ => QpStatus::Infeasible,
    };
    let x = DVector::from_column_slice(&solver.solution.x);
    let z = DVector::from_column_slice(&solver.solution.z);

    // KKT residuals of the returned iterate: stationarity Px + q + Aᵀz,
    // equality Ax − b, inequality max(0, Ax − b).
    let stat = (&m.p_mat * &x + &m.q + m.a.transpose() * &z).amax();
    let ax = &m.a * &x;
    let mut r_eq = 0.0_f64;
    for i in 0..m.n_eq {
        r_eq = r_eq.max((ax[i] - m.b[i]).abs());
    }
    let mut r_ineq = 0.0_f64;
    for i in m.n_eq..m.b.len() {
        r_ineq = r_ineq.max(ax[i] - m.b[i]);
    }
    let kkt_residual = stat.max(r_eq).max(r_ineq);

    let u = Vector2::new(x[0], x[1]);
    let xi = m
        .xi_offsets
        .iter()
        .map(|off| match off {
            Some(o) => x.rows(*o, 16).clone_owned(),
            None => DVector::zeros(0),
        })
        .collect();
    Ok(QpSolution {
        u,
        xi,
        status,
        kkt_residual,
        objective: 0.5 * (u - prog.u_des).norm_squared(),
    })
}

/// Worst-case constraint value `max_{d : Gd ≤ g} (H1 + uᵀH2) d + H3 u` by
/// enumerating the polytope's box vertices. Independent primal oracle for
/// the dual program.
pub fn primal_worst_case(u: &Vector2<f64>, block: &AgentBlock) -> f64 {
    let base = block.coeffs.h3.dot(u);
    let Some(poly) = &block.polytope else {
        return base;
    };
    let row = block.coeffs.h1 + (u.transpose() * block.coeffs.h2).transpose();
    let mut best = f64::NEG_INFINITY;
    for v in poly.vertices() {
        let mut s = 0.0;
        for i in 0..8 {
            s += row[i] * v[i];
        }
        best = best.max(s);
    }
    base + best
}
