//! Path-following log-det barrier method: nullspace-reduced Newton iterations
//! with Wolfe backtracking and Hessian modification, an outer barrier-weight
//! schedule, and a pluggable smooth convex objective oracle.
//!
//! All iterates stay strictly feasible: a trial point whose barrier matrix is
//! not positive definite evaluates as +infinity in the line search.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, sym_factor};
use crate::stability::ConstraintSystem;

/// Solver parameters. The first six are the published defaults; the rest pin
/// down details the reference leaves open and are echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tau0: f64,
    pub beta: f64,
    pub delta_f: f64,
    pub delta_g: f64,
    pub delta_j: f64,
    pub maxit: usize,
    pub tau_min: f64,
    pub armijo_c1: f64,
    pub curvature_c2: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub hess_mod_floor: f64,
    pub feas_margin: f64,
    /// Initial barrier weight for the phase-I feasibility problem, whose
    /// objective t is O(1) regardless of the data scale.
    pub phase1_tau0: f64,
    pub time_budget_s: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tau0: 1e4,
            beta: 10.0,
            delta_f: 1e-10,
            delta_g: 1e-10,
            delta_j: 1e-11,
            maxit: 10_000,
            tau_min: 1e-9,
            armijo_c1: 1e-4,
            curvature_c2: 0.9,
            backtrack: 0.5,
            max_backtracks: 60,
            hess_mod_floor: 1e-12,
            feas_margin: 1e-6,
            phase1_tau0: 1.0,
            time_budget_s: None,
        }
    }
}

/// Hessian restricted to the coordinates where it can be nonzero.
#[derive(Debug, Clone)]
pub struct BlockHess {
    pub idx: Vec<usize>,
    pub h: DMatrix<f64>,
}

impl BlockHess {
    pub fn empty() -> Self {
        BlockHess {
            idx: Vec::new(),
            h: DMatrix::zeros(0, 0),
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for (a, &i) in self.idx.iter().enumerate() {
            for (b, &j) in self.idx.iter().enumerate() {
                out[(i, j)] = self.h[(a, b)];
            }
        }
        out
    }
}

/// Value, gradient and Hessian of a smooth convex objective at one theta.
#[derive(Debug, Clone)]
pub struct OracleEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: BlockHess,
}

/// Smooth convex objective over theta. Gradients and Hessians must be exact;
/// the solver never finite-differences.
pub trait Objective {
    fn n_theta(&self) -> usize;
    fn value(&self, theta: &DVector<f64>) -> Result<f64>;
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn eval(&self, theta: &DVector<f64>) -> Result<OracleEval>;
}

/// The zero objective (pure barrier minimization).
pub struct ZeroObjective {
    pub n_theta: usize,
}

impl Objective for ZeroObjective {
    fn n_theta(&self) -> usize {
        self.n_theta
    }
    fn value(&self, _theta: &DVector<f64>) -> Result<f64> {
        Ok(0.0)
    }
    fn value_grad(&self, _theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((0.0, DVector::zeros(self.n_theta)))
    }
    fn eval(&self, _theta: &DVector<f64>) -> Result<OracleEval> {
        Ok(OracleEval {
            value: 0.0,
            grad: DVector::zeros(self.n_theta),
            hess: BlockHess::empty(),
        })
    }
}

/// Convex quadratic c0 + lin . theta_a + 1/2 theta_a' H theta_a over the
/// active coordinates `idx`; constant PSD Hessian.
pub struct QuadraticObjective {
    pub idx: Vec<usize>,
    pub h: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub c0: f64,
    pub n_theta: usize,
}

impl QuadraticObjective {
    /// Least-squares form |A theta_a + r|^2.
    pub fn from_least_squares(
        idx: Vec<usize>,
        a: &DMatrix<f64>,
        r: &DVector<f64>,
        n_theta: usize,
    ) -> Self {
        let h = a.tr_mul(a) * 2.0;
        let lin = a.tr_mul(r) * 2.0;
        QuadraticObjective {
            idx,
            h,
            lin,
            c0: r.norm_squared(),
            n_theta,
        }
    }

    fn active(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.idx.len(), |k, _| theta[self.idx[k]])
    }
}

impl Objective for QuadraticObjective {
    fn n_theta(&self) -> usize {
        self.n_theta
    }
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let ta = self.active(theta);
        Ok(self.c0 + self.lin.dot(&ta) + 0.5 * ta.dot(&(&self.h * &ta)))
    }
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let ta = self.active(theta);
        let ga = &self.lin + &self.h * &ta;
        let mut grad = DVector::zeros(self.n_theta);
        for (k, &i) in self.idx.iter().enumerate() {
            grad[i] = ga[k];
        }
        let value = self.c0 + self.lin.dot(&ta) + 0.5 * ta.dot(&(&self.h * &ta));
        Ok((value, grad))
    }
    fn eval(&self, theta: &DVector<f64>) -> Result<OracleEval> {
        let (value, grad) = self.value_grad(theta)?;
        Ok(OracleEval {
            value,
            grad,
            hess: BlockHess {
                idx: self.idx.clone(),
                h: self.h.clone(),
            },
        })
    }
}

/// Affine symmetric-matrix map S(x) = mat(A_s x + s0), stored column-wise as
/// sparse (row, col, value) entries of S per coordinate of x.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub cols: Vec<Vec<(usize, usize, f64)>>,
    pub s0: DMatrix<f64>,
}

impl AffineMap {
    pub fn dims(&self) -> usize {
        self.cols.len()
    }

    pub fn n_s(&self) -> usize {
        self.s0.nrows()
    }

    pub fn s_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut s = self.s0.clone();
        for (j, entries) in self.cols.iter().enumerate() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for &(r, c, v) in entries {
                s[(r, c)] += v * xj;
            }
        }
        s
    }

    /// -log det S(x), or NotInDomain if S is not positive definite.
    pub fn barrier_value(&self, x: &DVector<f64>) -> Result<f64> {
        let s = self.s_at(x);
        let f = sym_factor(&s);
        if !f.success {
            return Err(Error::NotInDomain);
        }
        Ok(-f.logdet())
    }

    /// Barrier value, gradient and Hessian. The gradient is dense over x; the
    /// Hessian is returned on the active coordinates only, since a coordinate
    /// without entries in A_s cannot curve the barrier.
    pub fn barrier(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, BlockHess)> {
        let s = self.s_at(x);
        let f = sym_factor(&s);
        if !f.success {
            return Err(Error::NotInDomain);
        }
        let phi = -f.logdet();
        let sinv = f.inverse();
        let n = self.dims();
        let mut grad = DVector::zeros(n);
        let active: Vec<usize> = (0..n).filter(|&j| !self.cols[j].is_empty()).collect();
        for &j in &active {
            let mut acc = 0.0;
            for &(p, q, v) in &self.cols[j] {
                acc += v * sinv[(p, q)];
            }
            grad[j] = -acc;
        }
        let na = active.len();
        let mut h = DMatrix::zeros(na, na);
        for a in 0..na {
            let ca = &self.cols[active[a]];
            for b in a..na {
                let cb = &self.cols[active[b]];
                let mut acc = 0.0;
                for &(p, q, va) in ca {
                    for &(r, sc, vb) in cb {
                        acc += va * vb * sinv[(q, r)] * sinv[(sc, p)];
                    }
                }
                h[(a, b)] = acc;
                h[(b, a)] = acc;
            }
        }
        Ok((phi, grad, BlockHess { idx: active, h }))
    }
}

/// Newton direction with Hessian modification: solves (H + delta I) d = -g for
/// the smallest delta in {0, floor, 10 floor, ...} whose factorization has all
/// pivots >= floor. The returned d is always a descent direction for g != 0.
pub fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, floor: f64) -> (DVector<f64>, f64) {
    let n = h.nrows();
    let scale = h.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let mut delta = 0.0;
    loop {
        let trial = if delta == 0.0 {
            h.clone()
        } else {
            h + DMatrix::identity(n, n) * delta
        };
        let f = sym_factor(&trial);
        if f.success && f.min_pivot >= floor {
            return (f.solve(&(-g)), delta);
        }
        delta = if delta == 0.0 { floor } else { delta * 10.0 };
        if delta > 1e3 * scale {
            // Dominant regularization: effectively scaled steepest descent.
            return (-g / delta, delta);
        }
    }
}

/// Backtracking line search for the Wolfe conditions.
///
/// `f` evaluates the merit at a trial step (Err with a domain violation means
/// the trial is outside the barrier domain and counts as +infinity). `dd`
/// evaluates the directional derivative at a trial step. Returns the largest
/// alpha in {1, backtrack, backtrack^2, ...} satisfying Armijo + curvature,
/// falling back to the largest Armijo-satisfying alpha if curvature cannot be
/// met within the budget.
pub fn wolfe_backtrack<F, G>(
    mut f: F,
    mut dd: G,
    f0: f64,
    g0: f64,
    opts: &SolverOptions,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
    G: FnMut(f64) -> Result<f64>,
{
    debug_assert!(g0 < 0.0, "line search needs a descent direction");
    let mut alpha = 1.0;
    let mut best_armijo: Option<f64> = None;
    for _ in 0..=opts.max_backtracks {
        let fa = match f(alpha) {
            Ok(v) => v,
            Err(e) if e.is_domain_violation() => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if fa.is_finite() && fa <= f0 + opts.armijo_c1 * alpha * g0 {
            if best_armijo.is_none() {
                best_armijo = Some(alpha);
            }
            let da = match dd(alpha) {
                Ok(v) => Some(v),
                Err(e) if e.is_domain_violation() => None,
                Err(e) => return Err(e),
            };
            if let Some(d) = da {
                if d >= opts.curvature_c2 * g0 {
                    return Ok(alpha);
                }
            }
        }
        alpha *= opts.backtrack;
    }
    best_armijo.ok_or(Error::LineSearchFailed)
}

/// Chain rule from theta to the reduced coordinates nu:
/// g_nu = N_e' g_theta, H_nu = N_e' H_theta N_e.
pub fn chain_to_nu(
    cs: &ConstraintSystem,
    grad_theta: &DVector<f64>,
    hess_theta: &BlockHess,
) -> (DVector<f64>, DMatrix<f64>) {
    let n_nu = cs.n_nu();
    let g_nu = cs.n_e.tr_mul(grad_theta);
    let na = hess_theta.idx.len();
    if na == 0 {
        return (g_nu, DMatrix::zeros(n_nu, n_nu));
    }
    let mut n_rows = DMatrix::zeros(na, n_nu);
    for (a, &i) in hess_theta.idx.iter().enumerate() {
        n_rows.row_mut(a).copy_from(&cs.n_e.row(i));
    }
    let h_nu = n_rows.tr_mul(&(&hess_theta.h * &n_rows));
    (g_nu, h_nu)
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Outer objective change fell below delta_j.
    ObjectiveConverged,
    /// Barrier weight reached tau_min before the objective settled.
    TauFloor,
}

/// Solve trace: everything needed to reproduce and audit a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub theta: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub newton_steps: Vec<usize>,
    pub step_wall_times_us: Vec<u64>,
    pub termination: Termination,
    pub final_margin: f64,
    pub options_echo: SolverOptions,
}

impl SolveReport {
    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.theta.clone())
    }

    pub fn total_newton_steps(&self) -> usize {
        self.newton_steps.iter().sum()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

/// Minimize oracle(theta) over theta in Theta by the path-following barrier
/// method: theta(nu) = theta_init + N_e nu, inner damped-Newton centering for
/// f_tau(nu) = J(theta(nu)) + tau * phi(theta(nu)), outer tau division by
/// beta until the objective settles. Every iterate is strictly feasible.
pub fn solve(
    oracle: &dyn Objective,
    cs: &ConstraintSystem,
    theta_init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n_nu = cs.n_nu();
    let (ok, margin0) = cs.membership(theta_init);
    if !ok || margin0 <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "initial point is not strictly feasible (margin {margin0:.3e})"
        )));
    }
    let start = Instant::now();
    let mut nu = DVector::<f64>::zeros(n_nu);
    // theta(nu) = theta_init + N_e nu (the initial point anchors the
    // affine parametrization of the equality manifold).
    let theta_of = |nu: &DVector<f64>| -> DVector<f64> { theta_init + &cs.n_e * nu };
    let mut tau = opts.tau0;
    let mut objective_trace: Vec<f64> = Vec::new();
    let mut newton_steps: Vec<usize> = Vec::new();
    let mut step_wall_times_us: Vec<u64> = Vec::new();
    let mut j_prev = f64::INFINITY;
    let termination;

    loop {
        // Centering problem at this tau.
        let mut inner_steps = 0usize;
        for _ in 0..opts.maxit {
            if let Some(budget) = opts.time_budget_s {
                if start.elapsed().as_secs_f64() > budget {
                    return Err(Error::TimeBudgetExceeded { budget_s: budget });
                }
            }
            let step_t0 = Instant::now();
            let theta = theta_of(&nu);
            let oe = oracle.eval(&theta)?;
            let (phi, gphi, hphi) = cs.barrier(&theta)?;
            let f_cur = oe.value + tau * phi;
            let (g_j, h_j) = chain_to_nu(cs, &oe.grad, &oe.hess);
            let (g_b, h_b) = chain_to_nu(cs, &gphi, &hphi);
            let g_nu = &g_j + &g_b * tau;
            if inf_norm(&g_nu) < opts.delta_g {
                break;
            }
            let h_nu = &h_j + &h_b * tau;
            let (dir, _delta) = newton_direction(&h_nu, &g_nu, opts.hess_mod_floor);
            let g0 = g_nu.dot(&dir);
            if g0 >= 0.0 {
                break;
            }
            let alpha = wolfe_backtrack(
                |a| {
                    let th = theta_of(&(&nu + &dir * a));
                    Ok(oracle.value(&th)? + tau * cs.barrier_value(&th)?)
                },
                |a| {
                    let th = theta_of(&(&nu + &dir * a));
                    let (_, gj) = oracle.value_grad(&th)?;
                    let (_, gp, _) = cs.barrier(&th)?;
                    let g_theta = gj + gp * tau;
                    Ok(cs.n_e.tr_mul(&g_theta).dot(&dir))
                },
                f_cur,
                g0,
                opts,
            )?;
            nu += &dir * alpha;
            inner_steps += 1;
            step_wall_times_us.push(step_t0.elapsed().as_micros() as u64);

            #[cfg(debug_assertions)]
            {
                let th = theta_of(&nu);
                let (member, m) = cs.membership(&th);
                debug_assert!(member && m > 0.0, "iterate left the feasible set");
            }

            let th = theta_of(&nu);
            let f_new = oracle.value(&th)? + tau * cs.barrier_value(&th)?;
            if (f_new - f_cur).abs() < opts.delta_f || inf_norm(&(&dir * alpha)) < opts.delta_f {
                break;
            }
        }

        let theta = theta_of(&nu);
        let j_now = oracle.value(&theta)?;
        objective_trace.push(j_now);
        newton_steps.push(inner_steps);

        if (j_now - j_prev).abs() < opts.delta_j {
            termination = Termination::ObjectiveConverged;
            break;
        }
        j_prev = j_now;
        tau /= opts.beta;
        if tau < opts.tau_min {
            termination = Termination::TauFloor;
            break;
        }
    }

    let theta = theta_of(&nu);
    let (_, final_margin) = cs.membership(&theta);
    Ok(SolveReport {
        theta: theta.iter().copied().collect(),
        objective_trace,
        newton_steps,
        step_wall_times_us,
        termination,
        final_margin,
        options_echo: opts.clone(),
    })
}
