//! The Lagrangian-relaxation objective J_hat(theta) = sup_Delta J(theta, Delta)
//! with multipliers lambda_t = 2 Delta_t: lifted per-time-step blocks, the
//! block-tridiagonal W and vector w, the maximizer Delta*, and exact value,
//! gradient and Hessian over the model-coefficient block — all at O(T) cost
//! through a block Thomas factorization.
//!
//! Conventions (0-based time): W has diagonal blocks G_t'G_t - E_t - E_t' and
//! sub-diagonal blocks F_t at (t+1, t); w_t = -G_t' eta_t - eps_{t-1} with
//! eps_{-1} = 0. The maximizer solves W Delta* = w, and
//! J_hat = |G Delta* + eta|^2 - 2 Delta*'(F_lift Delta* - eps_lift).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::inf_norm;
use crate::models::{Dataset, ModelFn, ModelStructure};
use crate::polyalg::{Monomial, Polynomial};
use crate::stability::ThetaLayout;

/// Value and gradient series of one basis monomial along the data.
#[derive(Debug, Clone)]
struct MonoSeries {
    /// m(x_t, u_t) for t = 0..T.
    val: Vec<f64>,
    /// Rows are the x-gradient of m at (x_t, u_t).
    grad: DMatrix<f64>,
}

/// Where one model parameter enters the lifted blocks.
#[derive(Debug, Clone)]
struct Site {
    func: ModelFn,
    coord: usize,
    series: usize,
}

/// Per-dataset lifted representation: surrogate data, per-parameter constant
/// derivative blocks (as shared monomial series), and fixed-part blocks.
/// Everything theta-independent is computed once here.
#[derive(Debug)]
pub struct LiftedData {
    pub t_len: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_rho: usize,
    sites: Vec<Site>,
    series: Vec<MonoSeries>,
    /// Fixed (non-parametric) part of the Jacobian blocks, one T x n_x matrix
    /// per output coordinate, and fixed values for the residual parts.
    fix_e_jac: Vec<DMatrix<f64>>,
    fix_f_jac: Vec<DMatrix<f64>>,
    fix_g_jac: Vec<DMatrix<f64>>,
    fix_e_val: DMatrix<f64>,
    fix_f_val: DMatrix<f64>,
    fix_g_val: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Jacobian and residual blocks assembled at a specific rho.
#[derive(Debug, Clone)]
pub struct Blocks {
    /// E_t, t = 0..T.
    pub e: Vec<DMatrix<f64>>,
    /// F_t, t = 0..T-1 (only 0..T-2 enter W and eps).
    pub f: Vec<DMatrix<f64>>,
    /// G_t, t = 0..T.
    pub g: Vec<DMatrix<f64>>,
    /// eps_t = f(x_t,u_t) - e(x_{t+1}), rows t = 0..T-1.
    pub eps: DMatrix<f64>,
    /// eta_t = g(x_t,u_t) - y_t, rows t = 0..T.
    pub eta: DMatrix<f64>,
}

/// Symmetric block-tridiagonal matrix: diagonal blocks and the sub-diagonal
/// blocks at (t+1, t); the super-diagonal is their transpose.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub sub: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn t_len(&self) -> usize {
        self.diag.len()
    }

    /// y = W x for x stored as a T x n_x row-per-time matrix.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let t_len = self.t_len();
        let n_x = self.diag[0].nrows();
        let mut y = DMatrix::zeros(t_len, n_x);
        for t in 0..t_len {
            let mut acc = &self.diag[t] * x.row(t).transpose();
            if t > 0 {
                acc += &self.sub[t - 1] * x.row(t - 1).transpose();
            }
            if t + 1 < t_len {
                acc += self.sub[t].tr_mul(&x.row(t + 1).transpose());
            }
            y.row_mut(t).copy_from(&acc.transpose());
        }
        y
    }

    /// Dense assembly (testing and small problems).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let t_len = self.t_len();
        let n_x = self.diag[0].nrows();
        let mut w = DMatrix::zeros(t_len * n_x, t_len * n_x);
        for t in 0..t_len {
            w.view_mut((t * n_x, t * n_x), (n_x, n_x))
                .copy_from(&self.diag[t]);
            if t + 1 < t_len {
                w.view_mut(((t + 1) * n_x, t * n_x), (n_x, n_x))
                    .copy_from(&self.sub[t]);
                w.view_mut((t * n_x, (t + 1) * n_x), (n_x, n_x))
                    .copy_from(&self.sub[t].transpose());
            }
        }
        w
    }
}

/// Block Thomas factorization of -W (positive definite when theta is in the
/// stable set): per-step Cholesky pivots S_t = V_tt - B_{t-1} S_{t-1}^-1
/// B_{t-1}' with V = -W, reusable across many right-hand sides.
#[derive(Debug)]
pub struct BlockThomasFactor {
    /// Cholesky factors of the pivot blocks S_t.
    chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// Coupling blocks C_t = B_t S_t^-1 with B_t = -sub_t.
    coupling: Vec<DMatrix<f64>>,
    n_x: usize,
}

pub fn block_thomas_factor(w: &BlockTridiagonal) -> Result<BlockThomasFactor> {
    let t_len = w.t_len();
    let n_x = w.diag[0].nrows();
    let mut chol = Vec::with_capacity(t_len);
    let mut coupling = Vec::with_capacity(t_len.saturating_sub(1));
    let mut prev: Option<&nalgebra::Cholesky<f64, nalgebra::Dyn>> = None;
    let mut pivot = DMatrix::zeros(n_x, n_x);
    for t in 0..t_len {
        pivot.copy_from(&w.diag[t]);
        pivot.neg_mut();
        if t > 0 {
            let b = -&w.sub[t - 1];
            // S_t = V_tt - B S_{t-1}^-1 B' ; C_{t-1} = B S_{t-1}^-1.
            let c = prev
                .expect("previous pivot exists")
                .solve(&b.transpose())
                .transpose();
            pivot -= &c * b.transpose();
            coupling.push(c);
        }
        let ch = nalgebra::Cholesky::new(pivot.clone())
            .ok_or(Error::NotDefiniteBlock { t })?;
        chol.push(ch);
        prev = chol.last();
    }
    Ok(BlockThomasFactor {
        chol,
        coupling,
        n_x,
    })
}

impl BlockThomasFactor {
    pub fn t_len(&self) -> usize {
        self.chol.len()
    }

    /// Solve W X = RHS (note: W itself, not -W) for one or many columns
    /// stored as T x n_x row-per-time matrices.
    pub fn solve_w(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let t_len = self.t_len();
        let n_x = self.n_x;
        debug_assert_eq!(rhs.nrows(), t_len);
        debug_assert_eq!(rhs.ncols(), n_x);
        // Solve V z = -rhs blockwise, V = -W.
        let mut z = -rhs;
        for t in 1..t_len {
            let correction = &self.coupling[t - 1] * z.row(t - 1).transpose();
            let mut row = z.row_mut(t);
            for j in 0..n_x {
                row[j] -= correction[j];
            }
        }
        for t in 0..t_len {
            let solved = self.chol[t].solve(&z.row(t).transpose());
            z.row_mut(t).copy_from(&solved.transpose());
        }
        for t in (0..t_len.saturating_sub(1)).rev() {
            let correction = self.coupling[t].tr_mul(&z.row(t + 1).transpose());
            let mut row = z.row_mut(t);
            for j in 0..n_x {
                row[j] -= correction[j];
            }
        }
        z
    }
}

/// Evaluation of the relaxed objective at one theta.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    /// Row t is Delta*_t.
    pub delta_star: DMatrix<f64>,
    /// Gradient over the rho block (zero on P and Q by construction).
    pub grad_rho: DVector<f64>,
    /// Hessian over the rho block.
    pub hess_rho: DMatrix<f64>,
    /// ||W Delta* - w||_inf.
    pub kkt_residual: f64,
}

pub fn assemble_lifted(ms: &ModelStructure, data: &Dataset) -> Result<LiftedData> {
    let xs = data.states()?;
    if xs.ncols() != ms.n_x {
        return Err(Error::DimensionMismatch(format!(
            "states have {} columns, model has n_x = {}",
            xs.ncols(),
            ms.n_x
        )));
    }
    let t_len = data.len();
    let (n_x, n_u, n_y) = (ms.n_x, ms.n_u, ms.n_y);

    // Points (x_t, u_t) as flat slices.
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut p = Vec::with_capacity(n_x + n_u);
        for j in 0..n_x {
            p.push(xs[(t, j)]);
        }
        for j in 0..n_u {
            p.push(data.u[(t, j)]);
        }
        points.push(p);
    }

    // Shared monomial series, one per distinct monomial.
    let mut series: Vec<MonoSeries> = Vec::new();
    let mut index: std::collections::BTreeMap<Monomial, usize> = Default::default();
    let mut sites = Vec::with_capacity(ms.n_rho);
    for site in ms.sites() {
        let idx = match index.get(&site.mono) {
            Some(&i) => i,
            None => {
                let mut val = Vec::with_capacity(t_len);
                let mut grad = DMatrix::zeros(t_len, n_x);
                let partials: Vec<Option<(u32, Monomial)>> =
                    (0..n_x).map(|j| site.mono.partial(j)).collect();
                for (t, p) in points.iter().enumerate() {
                    val.push(site.mono.eval(p)?);
                    for (j, part) in partials.iter().enumerate() {
                        if let Some((e, m)) = part {
                            grad[(t, j)] = (*e as f64) * m.eval(p)?;
                        }
                    }
                }
                let i = series.len();
                series.push(MonoSeries { val, grad });
                index.insert(site.mono.clone(), i);
                i
            }
        };
        sites.push(Site {
            func: site.func,
            coord: site.coord,
            series: idx,
        });
    }

    // Fixed (non-parametric) parts.
    let zero_rho = DVector::zeros(ms.n_rho);
    let eval_fixed = |polys: &dyn Fn(usize) -> Polynomial,
                      rows: usize|
     -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let mut vals = DMatrix::zeros(t_len, rows);
        let mut jacs = vec![DMatrix::zeros(t_len, n_x); rows];
        for i in 0..rows {
            let poly = polys(i);
            let partials: Vec<Polynomial> = (0..n_x).map(|j| poly.partial(j)).collect();
            for (t, p) in points.iter().enumerate() {
                vals[(t, i)] = poly.eval(zero_rho.as_slice(), p)?;
                for (j, dp) in partials.iter().enumerate() {
                    jacs[i][(t, j)] = dp.eval(zero_rho.as_slice(), p)?;
                }
            }
        }
        Ok((vals, jacs))
    };
    // Fixed part = polynomial with rho set to zero (parameters contribute
    // nothing there, fixed coefficients survive).
    let (fix_e_val, fix_e_jac) = eval_fixed(&|i| ms.e_poly(i).clone(), n_x)?;
    let (fix_f_val, fix_f_jac) = eval_fixed(&|i| ms.f_poly(i).clone(), n_x)?;
    let (fix_g_val, fix_g_jac) = eval_fixed(&|i| ms.g_poly(i).clone(), n_y)?;

    Ok(LiftedData {
        t_len,
        n_x,
        n_y,
        n_rho: ms.n_rho,
        sites,
        series,
        fix_e_jac,
        fix_f_jac,
        fix_g_jac,
        fix_e_val,
        fix_f_val,
        fix_g_val,
        y: data.y.clone(),
    })
}

impl LiftedData {
    /// Assemble E_t, F_t, G_t, eps, eta at the given model coefficients.
    pub fn blocks_at(&self, rho: &DVector<f64>) -> Blocks {
        let (t_len, n_x, n_y) = (self.t_len, self.n_x, self.n_y);
        let mut e = vec![DMatrix::zeros(n_x, n_x); t_len];
        let mut f = vec![DMatrix::zeros(n_x, n_x); t_len];
        let mut g = vec![DMatrix::zeros(n_y, n_x); t_len];
        let mut e_val = self.fix_e_val.clone();
        let mut f_val = self.fix_f_val.clone();
        let mut g_val = self.fix_g_val.clone();
        for t in 0..t_len {
            for i in 0..n_x {
                for j in 0..n_x {
                    e[t][(i, j)] = self.fix_e_jac[i][(t, j)];
                    f[t][(i, j)] = self.fix_f_jac[i][(t, j)];
                }
            }
            for i in 0..n_y {
                for j in 0..n_x {
                    g[t][(i, j)] = self.fix_g_jac[i][(t, j)];
                }
            }
        }
        for (k, site) in self.sites.iter().enumerate() {
            let w = rho[k];
            if w == 0.0 {
                continue;
            }
            let s = &self.series[site.series];
            let c = site.coord;
            match site.func {
                ModelFn::E => {
                    for t in 0..t_len {
                        e_val[(t, c)] += w * s.val[t];
                        for j in 0..n_x {
                            e[t][(c, j)] += w * s.grad[(t, j)];
                        }
                    }
                }
                ModelFn::F => {
                    for t in 0..t_len {
                        f_val[(t, c)] += w * s.val[t];
                        for j in 0..n_x {
                            f[t][(c, j)] += w * s.grad[(t, j)];
                        }
                    }
                }
                ModelFn::G => {
                    for t in 0..t_len {
                        g_val[(t, c)] += w * s.val[t];
                        for j in 0..n_x {
                            g[t][(c, j)] += w * s.grad[(t, j)];
                        }
                    }
                }
            }
        }
        let mut eps = DMatrix::zeros(t_len - 1, n_x);
        for t in 0..t_len - 1 {
            for i in 0..n_x {
                eps[(t, i)] = f_val[(t, i)] - e_val[(t + 1, i)];
            }
        }
        let eta = g_val - &self.y;
        Blocks { e, f, g, eps, eta }
    }
}

/// W = G'G - F_lift - F_lift' and w = -G'eta - eps_lift, blockwise.
pub fn build_w_w(blocks: &Blocks) -> (BlockTridiagonal, DMatrix<f64>) {
    let t_len = blocks.e.len();
    let n_x = blocks.e[0].nrows();
    let mut diag = Vec::with_capacity(t_len);
    let mut sub = Vec::with_capacity(t_len.saturating_sub(1));
    let mut w = DMatrix::zeros(t_len, n_x);
    for t in 0..t_len {
        let gt = &blocks.g[t];
        let mut d = gt.tr_mul(gt);
        d -= &blocks.e[t];
        d -= blocks.e[t].transpose();
        diag.push(d);
        if t + 1 < t_len {
            sub.push(blocks.f[t].clone());
        }
        let mut wt = -gt.tr_mul(&blocks.eta.row(t).transpose());
        if t > 0 {
            wt -= blocks.eps.row(t - 1).transpose();
        }
        w.row_mut(t).copy_from(&wt.transpose());
    }
    (BlockTridiagonal { diag, sub }, w)
}

enum Level {
    Value,
    Grad,
    Full,
}

/// Objective value J_hat at theta (cheap path for line searches).
pub fn value(ld: &LiftedData, layout: &ThetaLayout, theta: &DVector<f64>) -> Result<f64> {
    let ev = evaluate_level(ld, layout, theta, Level::Value)?;
    Ok(ev.value)
}

/// Objective value and gradient over theta (gradient is zero outside rho).
pub fn value_grad(
    ld: &LiftedData,
    layout: &ThetaLayout,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let ev = evaluate_level(ld, layout, theta, Level::Grad)?;
    let mut grad = DVector::zeros(layout.n_theta());
    grad.rows_mut(0, ld.n_rho).copy_from(&ev.grad_rho);
    Ok((ev.value, grad))
}

/// Full evaluation: value, maximizer, exact gradient and Hessian.
pub fn evaluate(ld: &LiftedData, layout: &ThetaLayout, theta: &DVector<f64>) -> Result<ObjectiveEval> {
    evaluate_level(ld, layout, theta, Level::Full)
}

fn evaluate_level(
    ld: &LiftedData,
    layout: &ThetaLayout,
    theta: &DVector<f64>,
    level: Level,
) -> Result<ObjectiveEval> {
    if theta.len() != layout.n_theta() || layout.n_rho != ld.n_rho {
        return Err(Error::DimensionMismatch(format!(
            "theta has length {}, layout expects {} (n_rho {})",
            theta.len(),
            layout.n_theta(),
            layout.n_rho
        )));
    }
    let rho = theta.rows(0, ld.n_rho).into_owned();
    let blocks = ld.blocks_at(&rho);
    let (wmat, wvec) = build_w_w(&blocks);
    let fact = block_thomas_factor(&wmat)?;
    let delta = fact.solve_w(&wvec);
    let kkt_residual = (wmat.mul(&delta) - &wvec).amax();

    let (t_len, n_x, n_y, n_rho) = (ld.t_len, ld.n_x, ld.n_y, ld.n_rho);

    // s_t = G_t Delta_t + eta_t and (F_lift Delta)_t.
    let mut s = DMatrix::zeros(t_len, n_y);
    let mut fd = DMatrix::zeros(t_len, n_x);
    for t in 0..t_len {
        let dt = delta.row(t).transpose();
        let st = &blocks.g[t] * &dt + blocks.eta.row(t).transpose();
        s.row_mut(t).copy_from(&st.transpose());
        let mut f_t = &blocks.e[t] * &dt;
        if t > 0 {
            f_t -= &blocks.f[t - 1] * delta.row(t - 1).transpose();
        }
        fd.row_mut(t).copy_from(&f_t.transpose());
    }
    let mut val = s.norm_squared();
    for t in 0..t_len {
        let mut inner = 0.0;
        for j in 0..n_x {
            let eps_l = if t > 0 { blocks.eps[(t - 1, j)] } else { 0.0 };
            inner += delta[(t, j)] * (fd[(t, j)] - eps_l);
        }
        val -= 2.0 * inner;
    }

    if matches!(level, Level::Value) {
        return Ok(ObjectiveEval {
            value: val,
            delta_star: delta,
            grad_rho: DVector::zeros(0),
            hess_rho: DMatrix::zeros(0, 0),
            kkt_residual,
        });
    }

    // Gradient over rho, one parameter at a time; every piece is O(T).
    let grad_vec: Vec<f64> = (0..n_rho)
        .into_par_iter()
        .map(|k| grad_entry(ld, &delta, &s, k))
        .collect();
    let grad_rho = DVector::from_vec(grad_vec);

    if matches!(level, Level::Grad) {
        return Ok(ObjectiveEval {
            value: val,
            delta_star: delta,
            grad_rho,
            hess_rho: DMatrix::zeros(0, 0),
            kkt_residual,
        });
    }

    // Hessian: H = H1 - 2 R' W^-1 R with r_k = w_k - W_k Delta* and
    // H1_{kl} = 2 q_k' q_l, q_k = G_k Delta* + eta_k (nonzero only for
    // output-map parameters).
    let r_cols: Vec<DMatrix<f64>> = (0..n_rho)
        .into_par_iter()
        .map(|k| r_column(ld, &blocks, &delta, k))
        .collect();
    let d_cols: Vec<DMatrix<f64>> = r_cols
        .par_iter()
        .map(|r| fact.solve_w(r))
        .collect();
    // q columns exist only for G-sites.
    let q_cols: Vec<Option<DVector<f64>>> = (0..n_rho)
        .into_par_iter()
        .map(|k| q_column(ld, &delta, k))
        .collect();

    let mut hess = DMatrix::zeros(n_rho, n_rho);
    let entries: Vec<Vec<f64>> = (0..n_rho)
        .into_par_iter()
        .map(|k| {
            let mut row = vec![0.0; n_rho - k];
            for l in k..n_rho {
                let mut h = -2.0 * r_cols[k].dot(&d_cols[l]);
                // q_k lives entirely in one output coordinate, so cross terms
                // between different coordinates vanish.
                if g_coord(ld, k) == g_coord(ld, l) {
                    if let (Some(qk), Some(ql)) = (&q_cols[k], &q_cols[l]) {
                        h += 2.0 * qk.dot(ql);
                    }
                }
                row[l - k] = h;
            }
            row
        })
        .collect();
    for k in 0..n_rho {
        for l in k..n_rho {
            let h = entries[k][l - k];
            hess[(k, l)] = h;
            hess[(l, k)] = h;
        }
    }

    Ok(ObjectiveEval {
        value: val,
        delta_star: delta,
        grad_rho,
        hess_rho: hess,
        kkt_residual,
    })
}

/// Gradient entry: 2 (G Delta + eta)'(G_k Delta + eta_k)
/// - 2 Delta'(F_lift_k Delta - eps_lift_k).
fn grad_entry(ld: &LiftedData, delta: &DMatrix<f64>, s: &DMatrix<f64>, k: usize) -> f64 {
    let site = &ld.sites[k];
    let ser = &ld.series[site.series];
    let c = site.coord;
    let t_len = ld.t_len;
    let n_x = ld.n_x;
    let dot_grad = |t: usize, d: &DMatrix<f64>, row: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..n_x {
            acc += ser.grad[(t, j)] * d[(row, j)];
        }
        acc
    };
    match site.func {
        ModelFn::E => {
            // (F_lift_k Delta)_t = E_{t,k} Delta_t; eps_lift_k[t] = -val(t), t >= 1.
            let mut acc = 0.0;
            for t in 0..t_len {
                let gd = dot_grad(t, delta, t);
                let eps_l = if t > 0 { -ser.val[t] } else { 0.0 };
                acc += delta[(t, c)] * (gd - eps_l);
            }
            -2.0 * acc
        }
        ModelFn::F => {
            // (F_lift_k Delta)_t = -F_{t-1,k} Delta_{t-1}; eps_lift_k[t] = val(t-1).
            let mut acc = 0.0;
            for t in 1..t_len {
                let gd = dot_grad(t - 1, delta, t - 1);
                acc += delta[(t, c)] * (-gd - ser.val[t - 1]);
            }
            -2.0 * acc
        }
        ModelFn::G => {
            // q_k[t] = e_c (grad . Delta_t + val_t); gradient = 2 s' q_k.
            let mut acc = 0.0;
            for t in 0..t_len {
                let q = dot_grad(t, delta, t) + ser.val[t];
                acc += s[(t, c)] * q;
            }
            2.0 * acc
        }
    }
}

/// r_k = w_k - W_k Delta*, stored T x n_x.
fn r_column(ld: &LiftedData, blocks: &Blocks, delta: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let site = &ld.sites[k];
    let ser = &ld.series[site.series];
    let c = site.coord;
    let (t_len, n_x) = (ld.t_len, ld.n_x);
    let mut r = DMatrix::zeros(t_len, n_x);
    let dot_grad = |t: usize, row: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..n_x {
            acc += ser.grad[(t, j)] * delta[(row, j)];
        }
        acc
    };
    match site.func {
        ModelFn::E => {
            // w_k[t] = val(t) e_c for t >= 1 (from eps_lift_k = -val e_c);
            // (W_k Delta)_t = -(E_{t,k} + E_{t,k}') Delta_t.
            for t in 0..t_len {
                let gd = dot_grad(t, t);
                r[(t, c)] += gd;
                for j in 0..n_x {
                    r[(t, j)] += ser.grad[(t, j)] * delta[(t, c)];
                }
                if t > 0 {
                    r[(t, c)] += ser.val[t];
                }
            }
        }
        ModelFn::F => {
            // w_k[t] = -val(t-1) e_c for t >= 1;
            // (W_k Delta)_t = F_{t-1,k} Delta_{t-1} + F_{t,k}' Delta_{t+1}.
            for t in 0..t_len {
                if t > 0 {
                    r[(t, c)] -= ser.val[t - 1];
                    r[(t, c)] -= dot_grad(t - 1, t - 1);
                }
                if t + 1 < t_len {
                    for j in 0..n_x {
                        r[(t, j)] -= ser.grad[(t, j)] * delta[(t + 1, c)];
                    }
                }
            }
        }
        ModelFn::G => {
            // w_k[t] = -G_{t,k}' eta_t - G_t' eta_{t,k};
            // (W_k Delta)_t = G_{t,k}'(G_t Delta_t) + G_t' G_{t,k} Delta_t.
            for t in 0..t_len {
                let gd = &blocks.g[t] * delta.row(t).transpose();
                let gdk = dot_grad(t, t);
                for j in 0..n_x {
                    let gt_row_c = blocks.g[t][(c, j)];
                    r[(t, j)] -= ser.grad[(t, j)] * (blocks.eta[(t, c)] + gd[c])
                        + gt_row_c * (ser.val[t] + gdk);
                }
            }
        }
    }
    r
}

/// q_k = G_k Delta* + eta_k (nonzero only for output-map parameters),
/// flattened over (t, output coordinate).
fn q_column(ld: &LiftedData, delta: &DMatrix<f64>, k: usize) -> Option<DVector<f64>> {
    let site = &ld.sites[k];
    if site.func != ModelFn::G {
        return None;
    }
    let ser = &ld.series[site.series];
    let (t_len, n_x) = (ld.t_len, ld.n_x);
    let mut q = DVector::zeros(t_len);
    for t in 0..t_len {
        let mut gd = ser.val[t];
        for j in 0..n_x {
            gd += ser.grad[(t, j)] * delta[(t, j)];
        }
        q[t] = gd;
    }
    // Only the site's output coordinate is nonzero, so the T n_y vector
    // collapses to a T vector tagged by coordinate; dot products between
    // different coordinates vanish.
    Some(q)
}

/// Output coordinate of a G-parameter (used to mask q-column dot products).
fn g_coord(ld: &LiftedData, k: usize) -> Option<usize> {
    let site = &ld.sites[k];
    (site.func == ModelFn::G).then_some(site.coord)
}

/// Reference implementation with dense algebra and an explicit sup over
/// Delta; used only as an independent oracle in tests (T <= 200).
pub fn dense_reference_eval(
    ld: &LiftedData,
    _layout: &ThetaLayout,
    theta: &DVector<f64>,
) -> Result<ObjectiveEval> {
    if ld.t_len > 200 {
        return Err(Error::InvalidInput(
            "dense_reference_eval is limited to T <= 200".into(),
        ));
    }
    let rho = theta.rows(0, ld.n_rho).into_owned();
    let blocks = ld.blocks_at(&rho);
    let (t_len, n_x, n_y, n_rho) = (ld.t_len, ld.n_x, ld.n_y, ld.n_rho);
    let n = t_len * n_x;

    // Dense lifted operators.
    let mut f_lift = DMatrix::<f64>::zeros(n, n);
    let mut g_lift = DMatrix::<f64>::zeros(t_len * n_y, n);
    let mut eta = DVector::<f64>::zeros(t_len * n_y);
    let mut eps = DVector::<f64>::zeros(n);
    for t in 0..t_len {
        f_lift
            .view_mut((t * n_x, t * n_x), (n_x, n_x))
            .copy_from(&blocks.e[t]);
        if t > 0 {
            let mut v = f_lift.view_mut((t * n_x, (t - 1) * n_x), (n_x, n_x));
            v.copy_from(&blocks.f[t - 1]);
            v.neg_mut();
            for j in 0..n_x {
                eps[t * n_x + j] = blocks.eps[(t - 1, j)];
            }
        }
        g_lift
            .view_mut((t * n_y, t * n_x), (n_y, n_x))
            .copy_from(&blocks.g[t]);
        for j in 0..n_y {
            eta[t * n_y + j] = blocks.eta[(t, j)];
        }
    }
    let w_dense = g_lift.tr_mul(&g_lift) - &f_lift - f_lift.transpose();
    let wv = -g_lift.tr_mul(&eta) - &eps;
    let neg_w = -&w_dense;
    let chol = nalgebra::Cholesky::new(neg_w).ok_or(Error::NotDefiniteBlock { t: 0 })?;
    let delta = -chol.solve(&wv);
    let kkt_residual = inf_norm(&(&w_dense * &delta - &wv));

    let jval = |d: &DVector<f64>| -> f64 {
        let s = &g_lift * d + &eta;
        s.norm_squared() - 2.0 * d.dot(&(&f_lift * d - &eps))
    };
    let val = jval(&delta);

    // Per-parameter dense derivative operators.
    let mut grad_rho = DVector::zeros(n_rho);
    let mut dd = Vec::with_capacity(n_rho);
    let mut h_cross = Vec::with_capacity(n_rho);
    let mut q_list = Vec::with_capacity(n_rho);
    for k in 0..n_rho {
        let site = &ld.sites[k];
        let ser = &ld.series[site.series];
        let c = site.coord;
        let mut f_k = DMatrix::<f64>::zeros(n, n);
        let mut g_k = DMatrix::<f64>::zeros(t_len * n_y, n);
        let mut eta_k = DVector::<f64>::zeros(t_len * n_y);
        let mut eps_k = DVector::<f64>::zeros(n);
        match site.func {
            ModelFn::E => {
                for t in 0..t_len {
                    for j in 0..n_x {
                        f_k[(t * n_x + c, t * n_x + j)] = ser.grad[(t, j)];
                    }
                    if t > 0 {
                        eps_k[t * n_x + c] = -ser.val[t];
                    }
                }
            }
            ModelFn::F => {
                for t in 1..t_len {
                    for j in 0..n_x {
                        f_k[(t * n_x + c, (t - 1) * n_x + j)] = -ser.grad[(t - 1, j)];
                    }
                    eps_k[t * n_x + c] = ser.val[t - 1];
                }
            }
            ModelFn::G => {
                for t in 0..t_len {
                    for j in 0..n_x {
                        g_k[(t * n_y + c, t * n_x + j)] = ser.grad[(t, j)];
                    }
                    eta_k[t * n_y + c] = ser.val[t];
                }
            }
        }
        let s = &g_lift * &delta + &eta;
        let q_k = &g_k * &delta + &eta_k;
        grad_rho[k] = 2.0 * s.dot(&q_k) - 2.0 * delta.dot(&(&f_k * &delta - &eps_k));
        // dw/dtheta_k - dW/dtheta_k Delta*, with
        // W_k = G_k'G + G'G_k - F_k - F_k' and w_k = -G_k'eta - G'eta_k - eps_k.
        let w_k_delta = g_k.tr_mul(&(&g_lift * &delta))
            + g_lift.tr_mul(&(&g_k * &delta))
            - &f_k * &delta
            - f_k.tr_mul(&delta);
        let wv_k = -g_k.tr_mul(&eta) - g_lift.tr_mul(&eta_k) - &eps_k;
        let rhs = &wv_k - &w_k_delta;
        // Solve W d = rhs.
        let d_k = -chol.solve(&rhs);
        dd.push(d_k);
        // dJ^2/dDelta dtheta_k = 2 (G'G_k + G_k'G - F_k - F_k') Delta
        //                        + 2 (G_k'eta + G'eta_k + eps_k) = 2(W_k Delta - w_k).
        h_cross.push((w_k_delta - wv_k) * 2.0);
        q_list.push(q_k);
    }
    // Four-term exact Hessian.
    let mut hess = DMatrix::zeros(n_rho, n_rho);
    for k in 0..n_rho {
        for l in 0..n_rho {
            let mut h = 2.0 * q_list[k].dot(&q_list[l]);
            h += h_cross[k].dot(&dd[l]);
            h += h_cross[l].dot(&dd[k]);
            h += 2.0 * dd[l].dot(&(&w_dense * &dd[k]));
            hess[(k, l)] = h;
        }
    }
    // Symmetrize the float noise away.
    let hess = (&hess + hess.transpose()) * 0.5;

    let mut delta_rows = DMatrix::zeros(t_len, n_x);
    for t in 0..t_len {
        for j in 0..n_x {
            delta_rows[(t, j)] = delta[t * n_x + j];
        }
    }
    Ok(ObjectiveEval {
        value: val,
        delta_star: delta_rows,
        grad_rho,
        hess_rho: hess,
        kkt_residual,
    })
}

/// The relaxed objective as a solver oracle over theta = [rho; s2v(P); s2v(Q)].
pub struct LagrangianOracle {
    pub lifted: LiftedData,
    pub layout: ThetaLayout,
}

impl LagrangianOracle {
    pub fn new(ms: &ModelStructure, data: &Dataset, layout: ThetaLayout) -> Result<Self> {
        Ok(LagrangianOracle {
            lifted: assemble_lifted(ms, data)?,
            layout,
        })
    }
}

impl crate::ipm::Objective for LagrangianOracle {
    fn n_theta(&self) -> usize {
        self.layout.n_theta()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        value(&self.lifted, &self.layout, theta)
    }

    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        value_grad(&self.lifted, &self.layout, theta)
    }

    fn eval(&self, theta: &DVector<f64>) -> Result<crate::ipm::OracleEval> {
        let ev = evaluate(&self.lifted, &self.layout, theta)?;
        let mut grad = DVector::zeros(self.layout.n_theta());
        grad.rows_mut(0, self.lifted.n_rho).copy_from(&ev.grad_rho);
        Ok(crate::ipm::OracleEval {
            value: ev.value,
            grad,
            hess: crate::ipm::BlockHess {
                idx: (0..self.lifted.n_rho).collect(),
                h: ev.hess_rho,
            },
        })
    }
}
