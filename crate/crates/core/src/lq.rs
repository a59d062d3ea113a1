//! Infinite-horizon linear-quadratic machinery.
//!
//! The human plans with a linear model `x' = A x + B u` and a quadratic
//! reward `-x'Qx - u'Ru`. Under that model the Boltzmann-rational policy
//! `P(u | x) ∝ exp(Q_H(x, u))` is Gaussian with mean `u* = -K x` and
//! covariance `(2 (R + B'PB))^-1`, where `P` is the stabilizing solution
//! of the discrete algebraic Riccati equation (DARE).
//!
//! Derivatives of `P` with respect to `(A, B, Q, R)` come from
//! differentiating the DARE at its fixed point. With `A_cl = A - BK` and
//! `K` held at its optimum (envelope argument) every directional
//! derivative solves a discrete Lyapunov equation
//!
//! ```text
//! dP = A_cl' dP A_cl + dQ + K' dR K + dA_cl' P A_cl + A_cl' P dA_cl,   dA_cl = dA - dB K
//! ```
//!
//! `Q` and `R` enter every quantity here through their symmetric parts,
//! so derivatives with respect to an off-diagonal entry are taken along
//! the symmetrized perturbation `(E_kl + E_lk) / 2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let prob = LqProblem { a, b, q, r };
        prob.check()?;
        Ok(prob)
    }

    /// Scalar problem, handy in tests and examples.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Self {
        LqProblem {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        if self.a.ncols() != n {
            return Err(Error::DimensionMismatch(format!("A is {}x{}", n, self.a.ncols())));
        }
        if self.b.nrows() != n {
            return Err(Error::DimensionMismatch(format!("B has {} rows, A has {n}", self.b.nrows())));
        }
        if self.q.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!("Q is {:?}, expected ({n}, {n})", self.q.shape())));
        }
        if self.r.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!("R is {:?}, expected ({m}, {m})", self.r.shape())));
        }
        Ok(())
    }

    /// Right-hand side of the DARE evaluated at `p`.
    pub fn riccati_rhs(&self, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let pa = p * &self.a;
        let pb = p * &self.b;
        let s = sym(&self.r) + self.b.transpose() * &pb;
        let btpa = self.b.transpose() * &pa;
        let gain = s.lu().solve(&btpa)?;
        Some(self.a.transpose() * &pa - (self.a.transpose() * &pb) * gain + sym(&self.q))
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Max-abs DARE residual `|P - rhs(P)|`.
pub fn dare_residual(prob: &LqProblem, p: &DMatrix<f64>) -> f64 {
    match prob.riccati_rhs(p) {
        Some(rhs) => max_abs(&(p - rhs)),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl RiccatiSolution {
    fn from_p(prob: &LqProblem, p: DMatrix<f64>, iterations: usize, residual: f64) -> Result<Self> {
        let s = sym(&prob.r) + prob.b.transpose() * &p * &prob.b;
        let k = s
            .lu()
            .solve(&(prob.b.transpose() * &p * &prob.a))
            .ok_or(Error::SingularH)?;
        Ok(RiccatiSolution { p, k, iterations, residual })
    }

    /// Closed-loop matrix `A - BK`.
    pub fn closed_loop(&self, prob: &LqProblem) -> DMatrix<f64> {
        &prob.a - &prob.b * &self.k
    }
}

fn converged(residual: f64, p: &DMatrix<f64>, tol: f64) -> bool {
    residual <= tol * max_abs(p).max(1.0)
}

/// Solve the DARE.
///
/// Runs structure-preserving doubling first and polishes the result with
/// plain fixed-point sweeps; falls back to fixed-point iteration from
/// `P = Q` when doubling breaks down. Convergence is declared when the
/// max-abs residual is at most `tol * max(1, |P|max)`.
pub fn solve_dare(prob: &LqProblem, tol: f64, max_iter: usize) -> Result<RiccatiSolution> {
    prob.check()?;
    if Cholesky::new(sym(&prob.r)).is_none() {
        return Err(Error::SingularH);
    }
    match doubling(prob) {
        Doubling::Converged(p, doublings) => {
            if let Ok(sol) = fixed_point_from(prob, p, tol, max_iter) {
                return Ok(RiccatiSolution { iterations: sol.iterations + doublings, ..sol });
            }
        }
        // Doubling covers 2^k fixed-point sweeps in k steps; if it blows up
        // or stalls the plain iteration cannot do better.
        Doubling::Diverged { iterations, residual } => {
            return Err(Error::NonConvergence { iterations, residual });
        }
        Doubling::Breakdown => {}
    }
    solve_dare_fixed_point(prob, tol, max_iter)
}

/// Plain fixed-point iteration `P <- rhs(P)` from `P = Q`, symmetrizing
/// after every sweep.
pub fn solve_dare_fixed_point(prob: &LqProblem, tol: f64, max_iter: usize) -> Result<RiccatiSolution> {
    prob.check()?;
    fixed_point_from(prob, sym(&prob.q), tol, max_iter)
}

fn fixed_point_from(prob: &LqProblem, mut p: DMatrix<f64>, tol: f64, max_iter: usize) -> Result<RiccatiSolution> {
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = match prob.riccati_rhs(&p) {
            Some(next) => sym(&next),
            None => break,
        };
        residual = max_abs(&(&p - &next));
        if !residual.is_finite() {
            break;
        }
        if converged(residual, &p, tol) {
            return RiccatiSolution::from_p(prob, p, it, residual);
        }
        p = next;
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

enum Doubling {
    Converged(DMatrix<f64>, usize),
    Diverged { iterations: usize, residual: f64 },
    Breakdown,
}

const MAX_DOUBLINGS: usize = 64;

/// Structure-preserving doubling.
fn doubling(prob: &LqProblem) -> Doubling {
    let n = prob.state_dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let Some(r_inv) = sym(&prob.r).try_inverse() else {
        return Doubling::Breakdown;
    };
    let mut a = prob.a.clone();
    let mut g = &prob.b * r_inv * prob.b.transpose();
    let mut h = sym(&prob.q);
    for k in 1..=MAX_DOUBLINGS {
        let lu = (&eye + &g * &h).lu();
        let (Some(w_inv_a), Some(w_inv_g)) = (lu.solve(&a), lu.solve(&g)) else {
            return Doubling::Breakdown;
        };
        let a_next = &a * &w_inv_a;
        let g_next = sym(&(&g + &a * w_inv_g * a.transpose()));
        let h_next = sym(&(&h + a.transpose() * &h * w_inv_a));
        if !h_next.iter().chain(a_next.iter()).all(|v| v.is_finite()) {
            return Doubling::Diverged { iterations: k, residual: dare_residual(prob, &h) };
        }
        let delta = max_abs(&(&h_next - &h));
        let scale = max_abs(&h_next).max(1.0);
        a = a_next;
        g = g_next;
        h = h_next;
        if delta <= 1e-14 * scale {
            return Doubling::Converged(h, k);
        }
    }
    Doubling::Diverged { iterations: MAX_DOUBLINGS, residual: dare_residual(prob, &h) }
}

/// `Q_H(x, u) = -x'Qx - u'Ru - (Ax + Bu)' P (Ax + Bu)`.
pub fn q_value(x: &DVector<f64>, u: &DVector<f64>, prob: &LqProblem, sol: &RiccatiSolution) -> Result<f64> {
    check_xu(prob, x, u)?;
    let next = &prob.a * x + &prob.b * u;
    let q = sym(&prob.q);
    let r = sym(&prob.r);
    Ok(-(x.dot(&(&q * x))) - u.dot(&(&r * u)) - next.dot(&(&sol.p * &next)))
}

/// `u* = -K x`.
pub fn optimal_action(x: &DVector<f64>, sol: &RiccatiSolution) -> DVector<f64> {
    -(&sol.k * x)
}

fn check_xu(prob: &LqProblem, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != prob.state_dim() {
        return Err(Error::DimensionMismatch(format!("state has {} entries, expected {}", x.len(), prob.state_dim())));
    }
    if u.len() != prob.action_dim() {
        return Err(Error::DimensionMismatch(format!("action has {} entries, expected {}", u.len(), prob.action_dim())));
    }
    Ok(())
}

/// Gaussian form of the Boltzmann policy at a fixed state.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    /// `u* = -K x`
    pub mean: DVector<f64>,
    /// `S = R + B'PB`; the precision is `2S`.
    pub half_precision: DMatrix<f64>,
    chol_precision: Cholesky<f64, Dyn>,
    /// `½ log det(2S) - (m/2) log 2π`
    pub log_norm: f64,
}

impl GaussianPolicy {
    pub fn new(x: &DVector<f64>, prob: &LqProblem, sol: &RiccatiSolution) -> Result<Self> {
        if x.len() != prob.state_dim() {
            return Err(Error::DimensionMismatch(format!("state has {} entries, expected {}", x.len(), prob.state_dim())));
        }
        let s = half_precision(prob, sol);
        let chol = Cholesky::new(&s * 2.0).ok_or(Error::SingularH)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let m = prob.action_dim() as f64;
        Ok(GaussianPolicy {
            mean: optimal_action(x, sol),
            half_precision: s,
            chol_precision: chol,
            log_norm: 0.5 * log_det - 0.5 * m * LOG_2PI,
        })
    }

    pub fn log_prob(&self, u: &DVector<f64>) -> f64 {
        let e = u - &self.mean;
        self.log_norm - e.dot(&(&self.half_precision * &e))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol_precision.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.sample_with_noise(&z)
    }

    /// `mean + L^-T z` for a standard-normal `z`, where `LL' = 2S`.
    pub fn sample_with_noise(&self, z: &DVector<f64>) -> DVector<f64> {
        let lt = self.chol_precision.l_dirty().transpose();
        let y = lt
            .solve_upper_triangular(z)
            .expect("Cholesky factor has a positive diagonal");
        &self.mean + y
    }
}

fn half_precision(prob: &LqProblem, sol: &RiccatiSolution) -> DMatrix<f64> {
    sym(&(sym(&prob.r) + prob.b.transpose() * &sol.p * &prob.b))
}

/// `log P(u | x)` under the closed-form Gaussian policy.
pub fn policy_log_prob(u: &DVector<f64>, x: &DVector<f64>, prob: &LqProblem, sol: &RiccatiSolution) -> Result<f64> {
    check_xu(prob, x, u)?;
    Ok(GaussianPolicy::new(x, prob, sol)?.log_prob(u))
}

pub fn sample_human_action<R: Rng + ?Sized>(
    x: &DVector<f64>,
    prob: &LqProblem,
    sol: &RiccatiSolution,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(GaussianPolicy::new(x, prob, sol)?.sample(rng))
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Factorized solver for `X = A_cl' X A_cl + G`.
pub struct LyapunovSolver {
    n: usize,
    lu: LU<f64, Dyn, Dyn>,
}

impl LyapunovSolver {
    pub fn new(a_cl: &DMatrix<f64>) -> Result<Self> {
        let rho = spectral_radius(a_cl);
        if rho >= 1.0 {
            return Err(Error::UnstableClosedLoop(rho));
        }
        let n = a_cl.nrows();
        let at = a_cl.transpose();
        let sys = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
        Ok(LyapunovSolver { n, lu: sys.lu() })
    }

    pub fn solve(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = DVector::from_column_slice(g.as_slice());
        let x = self.lu.solve(&rhs).expect("I - A'⊗A' is nonsingular when rho(A) < 1");
        sym(&DMatrix::from_column_slice(self.n, self.n, x.as_slice()))
    }
}

/// A perturbation of `(A, B, Q, R)`.
#[derive(Debug, Clone)]
pub struct LqPerturbation {
    pub da: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub dq: DMatrix<f64>,
    pub dr: DMatrix<f64>,
}

/// Single-entry perturbation directions; `Q` and `R` entries are symmetrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqEntry {
    A(usize, usize),
    B(usize, usize),
    Q(usize, usize),
    R(usize, usize),
}

impl LqPerturbation {
    pub fn zeros(n: usize, m: usize) -> Self {
        LqPerturbation {
            da: DMatrix::zeros(n, n),
            db: DMatrix::zeros(n, m),
            dq: DMatrix::zeros(n, n),
            dr: DMatrix::zeros(m, m),
        }
    }

    pub fn entry(n: usize, m: usize, e: LqEntry) -> Self {
        let mut d = Self::zeros(n, m);
        match e {
            LqEntry::A(i, j) => d.da[(i, j)] = 1.0,
            LqEntry::B(i, j) => d.db[(i, j)] = 1.0,
            LqEntry::Q(i, j) => {
                d.dq[(i, j)] += 0.5;
                d.dq[(j, i)] += 0.5;
            }
            LqEntry::R(i, j) => {
                d.dr[(i, j)] += 0.5;
                d.dr[(j, i)] += 0.5;
            }
        }
        d
    }

    pub fn apply(&self, prob: &LqProblem, h: f64) -> LqProblem {
        LqProblem {
            a: &prob.a + &self.da * h,
            b: &prob.b + &self.db * h,
            q: &prob.q + &self.dq * h,
            r: &prob.r + &self.dr * h,
        }
    }
}

/// Directional derivative of `P` along `d`.
pub fn dare_directional(
    prob: &LqProblem,
    sol: &RiccatiSolution,
    lyap: &LyapunovSolver,
    d: &LqPerturbation,
) -> DMatrix<f64> {
    let a_cl = sol.closed_loop(prob);
    let da_cl = &d.da - &d.db * &sol.k;
    let pa_cl = &sol.p * &a_cl;
    let cross = da_cl.transpose() * &pa_cl;
    let g = &d.dq + sol.k.transpose() * &d.dr * &sol.k + &cross + cross.transpose();
    lyap.solve(&g)
}

/// Full sensitivity tensors of `P`. Slice `[k * cols + l]` holds
/// `∂P/∂X_kl` as an `n x n` matrix.
#[derive(Debug, Clone)]
pub struct RiccatiJacobians {
    pub n: usize,
    pub m: usize,
    pub dp_da: Vec<DMatrix<f64>>,
    pub dp_db: Vec<DMatrix<f64>>,
    pub dp_dq: Vec<DMatrix<f64>>,
    pub dp_dr: Vec<DMatrix<f64>>,
}

impl RiccatiJacobians {
    /// `∂P_ij / ∂A_kl`
    pub fn dp_da(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.dp_da[k * self.n + l][(i, j)]
    }
    pub fn dp_db(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.dp_db[k * self.m + l][(i, j)]
    }
    pub fn dp_dq(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.dp_dq[k * self.n + l][(i, j)]
    }
    pub fn dp_dr(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.dp_dr[k * self.m + l][(i, j)]
    }

    /// Contract the tensors with a perturbation.
    pub fn contract(&self, d: &LqPerturbation) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        let mut acc = |slices: &[DMatrix<f64>], dm: &DMatrix<f64>| {
            let cols = dm.ncols();
            for k in 0..dm.nrows() {
                for l in 0..cols {
                    let w = dm[(k, l)];
                    if w != 0.0 {
                        out += &slices[k * cols + l] * w;
                    }
                }
            }
        };
        acc(&self.dp_da, &d.da);
        acc(&self.dp_db, &d.db);
        // Q and R slices are already symmetrized derivatives, so only the
        // symmetric part of the perturbation contributes.
        acc(&self.dp_dq, &sym(&d.dq));
        acc(&self.dp_dr, &sym(&d.dr));
        out
    }
}

pub fn dare_jacobians(prob: &LqProblem, sol: &RiccatiSolution) -> Result<RiccatiJacobians> {
    let n = prob.state_dim();
    let m = prob.action_dim();
    let lyap = LyapunovSolver::new(&sol.closed_loop(prob))?;
    let slices = |rows: usize, cols: usize, f: &dyn Fn(usize, usize) -> LqEntry| -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(rows * cols);
        for k in 0..rows {
            for l in 0..cols {
                out.push(dare_directional(prob, sol, &lyap, &LqPerturbation::entry(n, m, f(k, l))));
            }
        }
        out
    };
    Ok(RiccatiJacobians {
        n,
        m,
        dp_da: slices(n, n, &LqEntry::A),
        dp_db: slices(n, m, &LqEntry::B),
        dp_dq: slices(n, n, &LqEntry::Q),
        dp_dr: slices(m, m, &LqEntry::R),
    })
}

/// What a block of θ parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaRole {
    /// All entries of A, row-major.
    A,
    /// All entries of B, row-major.
    B,
    /// All entries of Q, row-major (symmetrized).
    Q,
    /// All entries of R, row-major (symmetrized).
    R,
    /// Diagonal of Q.
    QDiag,
    /// Diagonal of B.
    BDiag,
    /// Goal state `g`; `x` is passed already shifted as `x - g`.
    Goal,
    /// Control offset `c`; `u` is passed already shifted as `u - c`.
    Bias,
}

impl ThetaRole {
    pub fn entries(self, n: usize, m: usize) -> Option<Vec<LqEntry>> {
        let grid = |rows: usize, cols: usize, f: fn(usize, usize) -> LqEntry| {
            (0..rows).flat_map(move |k| (0..cols).map(move |l| f(k, l))).collect()
        };
        match self {
            ThetaRole::A => Some(grid(n, n, LqEntry::A)),
            ThetaRole::B => Some(grid(n, m, LqEntry::B)),
            ThetaRole::Q => Some(grid(n, n, LqEntry::Q)),
            ThetaRole::R => Some(grid(m, m, LqEntry::R)),
            ThetaRole::QDiag => Some((0..n).map(|i| LqEntry::Q(i, i)).collect()),
            ThetaRole::BDiag => Some((0..n.min(m)).map(|i| LqEntry::B(i, i)).collect()),
            ThetaRole::Goal | ThetaRole::Bias => None,
        }
    }
}

/// Log-probability and its derivatives at one `(x, u)`.
#[derive(Debug, Clone)]
pub struct PolicyDerivatives {
    pub log_prob: f64,
    /// One entry per requested perturbation direction.
    pub directional: Vec<f64>,
    /// `∂ log P / ∂x`
    pub d_state: DVector<f64>,
    /// `∂ log P / ∂u`
    pub d_action: DVector<f64>,
}

struct PolicyTerms {
    s: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    e: DVector<f64>,
    kx: DVector<f64>,
    log_prob: f64,
}

fn policy_terms(u: &DVector<f64>, x: &DVector<f64>, prob: &LqProblem, sol: &RiccatiSolution) -> Result<PolicyTerms> {
    check_xu(prob, x, u)?;
    let pol = GaussianPolicy::new(x, prob, sol)?;
    let s_inv = pol.chol_precision.inverse() * 2.0;
    let e = u - &pol.mean;
    let log_prob = pol.log_prob(u);
    Ok(PolicyTerms { s: pol.half_precision, s_inv, e, kx: -pol.mean, log_prob })
}

fn directional_log_prob(
    t: &PolicyTerms,
    x: &DVector<f64>,
    prob: &LqProblem,
    sol: &RiccatiSolution,
    d: &LqPerturbation,
    dp: &DMatrix<f64>,
) -> f64 {
    let p = &sol.p;
    let b = &prob.b;
    let pb = p * b;
    let ds_raw = sym(&d.dr) + d.db.transpose() * &pb + b.transpose() * dp * b + pb.transpose() * &d.db;
    let ds = sym(&ds_raw);
    let trace_term = 0.5 * (&t.s_inv * &ds).trace();
    let quad = t.e.dot(&(&ds * &t.e));
    let pa_x = p * (&prob.a * x);
    let v = d.db.transpose() * &pa_x + b.transpose() * (dp * (&prob.a * x)) + pb.transpose() * (&d.da * x)
        - &ds * &t.kx;
    trace_term - quad - 2.0 * t.e.dot(&v)
}

fn state_action_grads(t: &PolicyTerms, sol: &RiccatiSolution) -> (DVector<f64>, DVector<f64>) {
    let se = &t.s * &t.e;
    (-(sol.k.transpose() * &se) * 2.0, -se * 2.0)
}

/// Log-probability with derivatives along `dirs`, each obtained by one
/// Lyapunov solve. This is the hot path used by learners and training.
pub fn policy_derivatives(
    u: &DVector<f64>,
    x: &DVector<f64>,
    prob: &LqProblem,
    sol: &RiccatiSolution,
    dirs: &[LqPerturbation],
) -> Result<PolicyDerivatives> {
    let t = policy_terms(u, x, prob, sol)?;
    let directional = if dirs.is_empty() {
        Vec::new()
    } else {
        let lyap = LyapunovSolver::new(&sol.closed_loop(prob))?;
        dirs.iter()
            .map(|d| {
                let dp = dare_directional(prob, sol, &lyap, d);
                directional_log_prob(&t, x, prob, sol, d, &dp)
            })
            .collect()
    };
    let (d_state, d_action) = state_action_grads(&t, sol);
    Ok(PolicyDerivatives { log_prob: t.log_prob, directional, d_state, d_action })
}

/// Gradient of `log P(u | x; θ)` with respect to θ, where θ is the
/// concatenation of the given role blocks. `P` sensitivities come from
/// the precomputed tensors.
pub fn policy_grad_theta(
    u: &DVector<f64>,
    x: &DVector<f64>,
    roles: &[ThetaRole],
    prob: &LqProblem,
    sol: &RiccatiSolution,
    jac: &RiccatiJacobians,
) -> Result<DVector<f64>> {
    let n = prob.state_dim();
    let m = prob.action_dim();
    if jac.n != n || jac.m != m {
        return Err(Error::DimensionMismatch("Jacobians do not match the problem".into()));
    }
    let t = policy_terms(u, x, prob, sol)?;
    let (d_state, d_action) = state_action_grads(&t, sol);
    let mut out = Vec::new();
    for role in roles {
        match role {
            ThetaRole::Goal => out.extend(d_state.iter().map(|v| -v)),
            ThetaRole::Bias => out.extend(d_action.iter().map(|v| -v)),
            _ => {
                let entries = role
                    .entries(n, m)
                    .ok_or_else(|| Error::UnsupportedRole(format!("{role:?}")))?;
                for e in entries {
                    let d = LqPerturbation::entry(n, m, e);
                    let dp = jac.contract(&d);
                    out.push(directional_log_prob(&t, x, prob, sol, &d, &dp));
                }
            }
        }
    }
    Ok(DVector::from_vec(out))
}
