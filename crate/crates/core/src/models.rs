//! Implicit polynomial state-space models e(x_{t+1}) = f(x_t, u_t),
//! y_t = g(x_t, u_t): structure declaration, evaluation, Jacobians,
//! simulation, residuals, and the error functionals J and J0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::inf_norm;
use crate::polyalg::{monomials_up_to, AffineCoeff, Monomial, Polynomial};

/// Which of the three model functions a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFn {
    E,
    F,
    G,
}

/// Where a model coefficient lives: function, output coordinate, monomial.
#[derive(Debug, Clone)]
pub struct ParamSite {
    pub func: ModelFn,
    pub coord: usize,
    pub mono: Monomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degrees {
    pub deg_e: u32,
    pub deg_fx: u32,
    pub deg_fu: u32,
    pub deg_g: u32,
}

/// Declarative description of a standard model family; the monomial bases and
/// the parameter layout are derived deterministically from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub degrees: Degrees,
    /// f_i = f_i^x(x) + f_i^u(u) when true; full joint monomials otherwise.
    pub separable_f: bool,
    /// Include degree-0 terms in f and g (never in e).
    pub constant_terms: bool,
}

impl StructureSpec {
    pub fn lti(n_x: usize, n_u: usize, n_y: usize) -> Self {
        StructureSpec {
            n_x,
            n_u,
            n_y,
            degrees: Degrees {
                deg_e: 1,
                deg_fx: 1,
                deg_fu: 1,
                deg_g: 1,
            },
            separable_f: true,
            constant_terms: false,
        }
    }

    pub fn is_lti(&self) -> bool {
        let d = &self.degrees;
        d.deg_e == 1 && d.deg_fx == 1 && d.deg_fu == 1 && d.deg_g == 1 && !self.constant_terms
    }
}

/// Model structure: per-coordinate polynomials for e, f, g with coefficients
/// affine in the model parameter vector rho, plus the frozen parameter layout.
///
/// Immutable after construction; evaluation and simulation are reentrant.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_rho: usize,
    e: Vec<Polynomial>,
    f: Vec<Polynomial>,
    g: Vec<Polynomial>,
    /// de[i][j] = d e_i / d x_j, and similarly for f and g.
    de: Vec<Vec<Polynomial>>,
    df: Vec<Vec<Polynomial>>,
    dg: Vec<Vec<Polynomial>>,
    sites: Vec<ParamSite>,
    spec: Option<StructureSpec>,
}

pub struct StructureBuilder {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    e: Vec<Polynomial>,
    f: Vec<Polynomial>,
    g: Vec<Polynomial>,
    sites: Vec<ParamSite>,
}

impl StructureBuilder {
    /// Register a free coefficient for `mono` in coordinate `coord` of `func`;
    /// returns its rho index. Indices are assigned in call order.
    pub fn param(&mut self, func: ModelFn, coord: usize, mono: Monomial) -> usize {
        let idx = self.sites.len();
        self.sites.push(ParamSite {
            func,
            coord,
            mono: mono.clone(),
        });
        self.target(func, coord)
            .add_term(mono, AffineCoeff::param(idx, 1.0));
        idx
    }

    /// Add a fixed (non-parametric) term.
    pub fn fixed(&mut self, func: ModelFn, coord: usize, mono: Monomial, c: f64) {
        self.target(func, coord).add_term(mono, AffineCoeff::constant(c));
    }

    fn target(&mut self, func: ModelFn, coord: usize) -> &mut Polynomial {
        match func {
            ModelFn::E => &mut self.e[coord],
            ModelFn::F => &mut self.f[coord],
            ModelFn::G => &mut self.g[coord],
        }
    }

    pub fn build(self) -> ModelStructure {
        ModelStructure::from_parts(
            self.n_x, self.n_u, self.n_y, self.e, self.f, self.g, self.sites, None,
        )
    }
}

impl ModelStructure {
    pub fn builder(n_x: usize, n_u: usize, n_y: usize) -> StructureBuilder {
        StructureBuilder {
            n_x,
            n_u,
            n_y,
            e: vec![Polynomial::zero(); n_x],
            f: vec![Polynomial::zero(); n_x],
            g: vec![Polynomial::zero(); n_y],
            sites: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        n_x: usize,
        n_u: usize,
        n_y: usize,
        e: Vec<Polynomial>,
        f: Vec<Polynomial>,
        g: Vec<Polynomial>,
        sites: Vec<ParamSite>,
        spec: Option<StructureSpec>,
    ) -> ModelStructure {
        let jac = |polys: &[Polynomial]| -> Vec<Vec<Polynomial>> {
            polys
                .iter()
                .map(|p| (0..n_x).map(|j| p.partial(j)).collect())
                .collect()
        };
        let (de, df, dg) = (jac(&e), jac(&f), jac(&g));
        ModelStructure {
            n_x,
            n_u,
            n_y,
            n_rho: sites.len(),
            e,
            f,
            g,
            de,
            df,
            dg,
            sites,
            spec,
        }
    }

    /// Standard family: all monomials up to the declared degrees, with the
    /// parameter layout frozen as (function, monomial, coordinate) in graded
    /// lexicographic monomial order. For degree-1 structures without constant
    /// terms this coincides with [vec(E); vec(F); vec(K); vec(C); vec(D)].
    pub fn from_spec(spec: &StructureSpec) -> ModelStructure {
        let (n_x, n_u, n_y) = (spec.n_x, spec.n_u, spec.n_y);
        let d = spec.degrees;
        let x_monos = |lo: u32, hi: u32| -> Vec<Monomial> {
            monomials_up_to(n_x, hi)
                .into_iter()
                .filter(|m| m.degree() >= lo)
                .collect()
        };
        let u_monos = |lo: u32, hi: u32| -> Vec<Monomial> {
            monomials_up_to(n_u, hi)
                .into_iter()
                .filter(|m| m.degree() >= lo)
                .map(|m| remap(&m, n_x))
                .collect()
        };

        let basis_e = x_monos(1, d.deg_e);
        let f_lo = if spec.constant_terms { 0 } else { 1 };
        let mut basis_f: Vec<Monomial> = if spec.separable_f {
            let mut b = x_monos(f_lo, d.deg_fx);
            b.extend(u_monos(1, d.deg_fu));
            b
        } else {
            monomials_up_to(n_x + n_u, d.deg_fx + d.deg_fu)
                .into_iter()
                .filter(|m| {
                    m.degree_in(0, n_x) <= d.deg_fx
                        && m.degree_in(n_x, n_x + n_u) <= d.deg_fu
                        && (spec.constant_terms || m.degree() >= 1)
                })
                .collect()
        };
        basis_f.sort();
        let mut basis_g = x_monos(f_lo, d.deg_g);
        basis_g.extend(u_monos(1, 1));
        basis_g.sort();

        let mut b = ModelStructure::builder(n_x, n_u, n_y);
        for m in &basis_e {
            for i in 0..n_x {
                b.param(ModelFn::E, i, m.clone());
            }
        }
        for m in &basis_f {
            for i in 0..n_x {
                b.param(ModelFn::F, i, m.clone());
            }
        }
        for m in &basis_g {
            for i in 0..n_y {
                b.param(ModelFn::G, i, m.clone());
            }
        }
        let mut ms = b.build();
        ms.spec = Some(spec.clone());
        ms
    }

    pub fn lti(n_x: usize, n_u: usize, n_y: usize) -> ModelStructure {
        ModelStructure::from_spec(&StructureSpec::lti(n_x, n_u, n_y))
    }

    pub fn spec(&self) -> Option<&StructureSpec> {
        self.spec.as_ref()
    }

    pub fn is_lti(&self) -> bool {
        self.spec.as_ref().map(|s| s.is_lti()).unwrap_or(false)
    }

    pub fn sites(&self) -> &[ParamSite] {
        &self.sites
    }

    pub fn param_index(&self, func: ModelFn, coord: usize, mono: &Monomial) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| s.func == func && s.coord == coord && &s.mono == mono)
    }

    pub fn e_poly(&self, i: usize) -> &Polynomial {
        &self.e[i]
    }
    pub fn f_poly(&self, i: usize) -> &Polynomial {
        &self.f[i]
    }
    pub fn g_poly(&self, i: usize) -> &Polynomial {
        &self.g[i]
    }
    pub fn de_poly(&self, i: usize, j: usize) -> &Polynomial {
        &self.de[i][j]
    }
    pub fn df_poly(&self, i: usize, j: usize) -> &Polynomial {
        &self.df[i][j]
    }
    pub fn dg_poly(&self, i: usize, j: usize) -> &Polynomial {
        &self.dg[i][j]
    }

    fn point(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_x + self.n_u);
        p.extend_from_slice(x.as_slice());
        p.extend_from_slice(u.as_slice());
        p
    }

    fn check_dims(&self, rho: &DVector<f64>, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if rho.len() != self.n_rho || x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::DimensionMismatch(format!(
                "expected (n_rho, n_x, n_u) = ({}, {}, {}), got ({}, {}, {})",
                self.n_rho,
                self.n_x,
                self.n_u,
                rho.len(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Evaluate e(x), f(x,u), g(x,u).
    pub fn eval_efg(
        &self,
        rho: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        self.check_dims(rho, x, u)?;
        let p = self.point(x, u);
        let th = rho.as_slice();
        let ev = |polys: &[Polynomial]| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(polys.len());
            for (i, poly) in polys.iter().enumerate() {
                v[i] = poly.eval(th, &p)?;
            }
            Ok(v)
        };
        Ok((ev(&self.e)?, ev(&self.f)?, ev(&self.g)?))
    }

    /// Exact model Jacobians E(x) = de/dx, F(x,u) = df/dx, G(x,u) = dg/dx,
    /// by formal differentiation.
    pub fn jacobians(
        &self,
        rho: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(rho, x, u)?;
        let p = self.point(x, u);
        let th = rho.as_slice();
        let ev = |dp: &[Vec<Polynomial>], rows: usize| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(rows, self.n_x);
            for i in 0..rows {
                for j in 0..self.n_x {
                    m[(i, j)] = dp[i][j].eval(th, &p)?;
                }
            }
            Ok(m)
        };
        Ok((
            ev(&self.de, self.n_x)?,
            ev(&self.df, self.n_x)?,
            ev(&self.dg, self.n_y)?,
        ))
    }

    fn eval_e(&self, rho: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut p = Vec::with_capacity(self.n_x + self.n_u);
        p.extend_from_slice(x.as_slice());
        p.extend(std::iter::repeat(0.0).take(self.n_u));
        let th = rho.as_slice();
        let mut v = DVector::zeros(self.n_x);
        for (i, poly) in self.e.iter().enumerate() {
            v[i] = poly.eval(th, &p)?;
        }
        Ok(v)
    }

    fn eval_e_jac(&self, rho: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut p = Vec::with_capacity(self.n_x + self.n_u);
        p.extend_from_slice(x.as_slice());
        p.extend(std::iter::repeat(0.0).take(self.n_u));
        let th = rho.as_slice();
        let mut m = DMatrix::zeros(self.n_x, self.n_x);
        for i in 0..self.n_x {
            for j in 0..self.n_x {
                m[(i, j)] = self.de[i][j].eval(th, &p)?;
            }
        }
        Ok(m)
    }

    /// Solve e(s) = b by damped Newton with residual-halving, starting at 0.
    pub fn implicit_step(
        &self,
        rho: &DVector<f64>,
        b: &DVector<f64>,
        opts: &RootOptions,
    ) -> Result<DVector<f64>> {
        self.implicit_step_from(rho, b, &DVector::zeros(self.n_x), opts)
    }

    /// As `implicit_step` with an explicit starting point (warm start).
    pub fn implicit_step_from(
        &self,
        rho: &DVector<f64>,
        b: &DVector<f64>,
        start: &DVector<f64>,
        opts: &RootOptions,
    ) -> Result<DVector<f64>> {
        let mut s = start.clone();
        let mut r = self.eval_e(rho, &s)? - b;
        let mut rn = inf_norm(&r);
        for _ in 0..opts.max_iters {
            if rn <= opts.tol {
                return Ok(s);
            }
            let jac = self.eval_e_jac(rho, &s)?;
            let lu = jac.lu();
            let step = lu.solve(&(-&r)).ok_or(Error::NoConvergence {
                iters: opts.max_iters,
                residual: rn,
            })?;
            // Halve until the residual norm decreases.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &s + &step * alpha;
                let rc = self.eval_e(rho, &cand)? - b;
                let rcn = inf_norm(&rc);
                if rcn < rn && rcn.is_finite() {
                    s = cand;
                    r = rc;
                    rn = rcn;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NoConvergence {
                    iters: opts.max_iters,
                    residual: rn,
                });
            }
        }
        if rn <= opts.tol {
            Ok(s)
        } else {
            Err(Error::NoConvergence {
                iters: opts.max_iters,
                residual: rn,
            })
        }
    }

    /// Open-loop simulation: x_{t+1} = e^{-1}(f(x_t, u_t)), y_t = g(x_t, u_t).
    pub fn simulate(
        &self,
        rho: &DVector<f64>,
        x1: &DVector<f64>,
        u: &DMatrix<f64>,
        opts: &RootOptions,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let t_len = u.nrows();
        let mut xs = DMatrix::zeros(t_len, self.n_x);
        let mut ys = DMatrix::zeros(t_len, self.n_y);
        let mut x = x1.clone();
        for t in 0..t_len {
            let ut = u.row(t).transpose();
            if t > 0 {
                let up = u.row(t - 1).transpose();
                let (_, fv, _) = self.eval_efg(rho, &x, &up).map_err(|e| Error::Simulation {
                    t,
                    source: Box::new(e),
                })?;
                x = self
                    .implicit_step_from(rho, &fv, &x, opts)
                    .map_err(|e| Error::Simulation {
                        t,
                        source: Box::new(e),
                    })?;
            }
            let (_, _, gv) = self.eval_efg(rho, &x, &ut).map_err(|e| Error::Simulation {
                t,
                source: Box::new(e),
            })?;
            xs.row_mut(t).copy_from(&x.transpose());
            ys.row_mut(t).copy_from(&gv.transpose());
        }
        Ok((xs, ys))
    }

    /// Equation errors at the surrogate states:
    /// eps_t = f(x_t, u_t) - e(x_{t+1}), eta_t = g(x_t, u_t) - y_t.
    pub fn residuals(&self, rho: &DVector<f64>, data: &Dataset) -> Result<Residuals> {
        let xs = data.states()?;
        let t_len = data.len();
        let mut eps = DMatrix::zeros(t_len - 1, self.n_x);
        let mut eta = DMatrix::zeros(t_len, self.n_y);
        for t in 0..t_len {
            let x = xs.row(t).transpose();
            let u = data.u.row(t).transpose();
            let (_, fv, gv) = self.eval_efg(rho, &x, &u)?;
            eta.row_mut(t)
                .copy_from(&(gv - data.y.row(t).transpose()).transpose());
            if t + 1 < t_len {
                let xn = xs.row(t + 1).transpose();
                let ev = self.eval_e(rho, &xn)?;
                eps.row_mut(t).copy_from(&(fv - ev).transpose());
            }
        }
        Ok(Residuals { eps, eta })
    }

    /// Linearized simulation error J0: propagate equation errors through the
    /// model Jacobians (Delta_1 = 0, E_{t+1} Delta_{t+1} = F_t Delta_t + eps_t)
    /// and accumulate |G_t Delta_t + eta_t|^2.
    pub fn linearized_sim_error(&self, rho: &DVector<f64>, data: &Dataset) -> Result<f64> {
        let xs = data.states()?;
        let res = self.residuals(rho, data)?;
        let t_len = data.len();
        let mut delta = DVector::<f64>::zeros(self.n_x);
        let mut j0 = 0.0;
        for t in 0..t_len {
            let x = xs.row(t).transpose();
            let u = data.u.row(t).transpose();
            let (_, ft, gt) = self.jacobians(rho, &x, &u)?;
            let out = &gt * &delta + res.eta.row(t).transpose();
            j0 += out.norm_squared();
            if t + 1 < t_len {
                let xn = xs.row(t + 1).transpose();
                let un = data.u.row(t + 1).transpose();
                let (en, _, _) = self.jacobians(rho, &xn, &un)?;
                let rhs = &ft * &delta + res.eps.row(t).transpose();
                delta = en
                    .lu()
                    .solve(&rhs)
                    .ok_or(Error::SingularJacobian { t: t + 1 })?;
            }
        }
        Ok(j0)
    }

    /// Simulation error J = sum_t |y_t - g(x_t, u_t)|^2 along the open-loop
    /// trajectory started at x1.
    pub fn sim_error(
        &self,
        rho: &DVector<f64>,
        data: &Dataset,
        x1: &DVector<f64>,
        opts: &RootOptions,
    ) -> Result<f64> {
        let (_, ys) = self.simulate(rho, x1, &data.u, opts)?;
        Ok((&data.y - &ys).norm_squared())
    }

    /// Pack LTI matrices into the canonical layout [vecE; vecF; vecK; vecC; vecD].
    pub fn lti_rho(
        e: &DMatrix<f64>,
        f: &DMatrix<f64>,
        k: &DMatrix<f64>,
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
    ) -> DVector<f64> {
        let mut v = Vec::new();
        for m in [e, f, k, c, d] {
            v.extend(m.iter().copied());
        }
        DVector::from_vec(v)
    }

    /// Unpack an LTI rho vector into (E, F, K, C, D).
    pub fn lti_matrices(
        &self,
        rho: &DVector<f64>,
    ) -> (
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
    ) {
        assert!(self.is_lti(), "lti_matrices requires an LTI structure");
        let (nx, nu, ny) = (self.n_x, self.n_u, self.n_y);
        let s = rho.as_slice();
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = DMatrix::from_column_slice(rows, cols, &s[off..off + rows * cols]);
            off += rows * cols;
            m
        };
        (
            take(nx, nx),
            take(nx, nx),
            take(nx, nu),
            take(ny, nx),
            take(ny, nu),
        )
    }
}

fn remap(m: &Monomial, offset: usize) -> Monomial {
    let pairs: Vec<(usize, u32)> = m
        .exponent_list()
        .iter()
        .map(|&(v, e)| (v + offset, e))
        .collect();
    Monomial::from_pairs(&pairs)
}

/// Newton options for the implicit step.
#[derive(Debug, Clone, Copy)]
pub struct RootOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        RootOptions {
            tol: 1e-9,
            max_iters: 100,
        }
    }
}

/// Input/output records with optional surrogate states, rows indexed by time.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x: Option<DMatrix<f64>>,
    pub sample_time: f64,
}

impl Dataset {
    pub fn new(
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        sample_time: f64,
    ) -> Result<Dataset> {
        let t_len = u.nrows();
        if t_len < 2 {
            return Err(Error::InvalidInput("dataset needs T >= 2".into()));
        }
        if y.nrows() != t_len {
            return Err(Error::DimensionMismatch(format!(
                "u has {} rows but y has {}",
                t_len,
                y.nrows()
            )));
        }
        if let Some(xs) = &x {
            if xs.nrows() != t_len {
                return Err(Error::DimensionMismatch(format!(
                    "u has {} rows but x has {}",
                    t_len,
                    xs.nrows()
                )));
            }
        }
        Ok(Dataset {
            u,
            y,
            x,
            sample_time,
        })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> Result<&DMatrix<f64>> {
        self.x.as_ref().ok_or(Error::MissingStates)
    }

    /// Initial simulation state: x_1 from the surrogate states when present,
    /// zero otherwise.
    pub fn x1(&self, n_x: usize) -> DVector<f64> {
        match &self.x {
            Some(xs) if xs.ncols() == n_x => xs.row(0).transpose(),
            _ => DVector::zeros(n_x),
        }
    }
}

/// Equation errors stacked over time.
#[derive(Debug, Clone)]
pub struct Residuals {
    /// (T-1) x n_x
    pub eps: DMatrix<f64>,
    /// T x n_y
    pub eta: DMatrix<f64>,
}

/// Serialized model: structure spec, coefficients, and stability certificate.
/// Field order is part of the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub structure: StructureSpec,
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
    pub mu: f64,
}

impl ModelDocument {
    pub fn to_structure(&self) -> ModelStructure {
        ModelStructure::from_spec(&self.structure)
    }

    pub fn rho_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.rho.clone())
    }
}

/// The scalar implicit model of the worked example:
/// e(x) = rho1 x + rho2 x^3, f(x,u) = rho3 x + u, g(x,u) = x.
pub fn example_scalar_structure() -> ModelStructure {
    let mut b = ModelStructure::builder(1, 1, 1);
    let x = Monomial::var(0);
    let x3 = Monomial::from_pairs(&[(0, 3)]);
    let u = Monomial::var(1);
    b.param(ModelFn::E, 0, x.clone());
    b.param(ModelFn::E, 0, x3);
    b.param(ModelFn::F, 0, x.clone());
    b.fixed(ModelFn::F, 0, u, 1.0);
    b.fixed(ModelFn::G, 0, x, 1.0);
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn example_structure_eval() {
        let ms = example_scalar_structure();
        let rho = dv(&[1.0, 1.0, 1.0]);
        let (e, f, g) = ms.eval_efg(&rho, &dv(&[2.0]), &dv(&[0.0])).unwrap();
        assert_eq!(e[0], 10.0);
        assert_eq!(f[0], 2.0);
        assert_eq!(g[0], 2.0);

        let zero = dv(&[0.0, 0.0, 0.0]);
        let (e0, f0, g0) = ms.eval_efg(&zero, &dv(&[2.0]), &dv(&[0.0])).unwrap();
        assert_eq!(e0[0], 0.0);
        assert_eq!(f0[0], 0.0);
        // g = x is fixed, not parametric.
        assert_eq!(g0[0], 2.0);
    }

    #[test]
    fn lti_structure_matches_matrix_products() {
        let (nx, nu, ny) = (3, 2, 2);
        let ms = ModelStructure::lti(nx, nu, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = DMatrix::from_fn(nx, nx, |_, _| rng.random::<f64>() - 0.5);
        let f = DMatrix::from_fn(nx, nx, |_, _| rng.random::<f64>() - 0.5);
        let k = DMatrix::from_fn(nx, nu, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(ny, nx, |_, _| rng.random::<f64>() - 0.5);
        let d = DMatrix::from_fn(ny, nu, |_, _| rng.random::<f64>() - 0.5);
        let rho = ModelStructure::lti_rho(&e, &f, &k, &c, &d);
        assert_eq!(rho.len(), ms.n_rho);
        let x = dv(&[0.3, -1.2, 0.7]);
        let u = dv(&[0.5, 2.0]);
        let (ev, fv, gv) = ms.eval_efg(&rho, &x, &u).unwrap();
        assert!((ev - &e * &x).norm() < 1e-12);
        assert!((fv - (&f * &x + &k * &u)).norm() < 1e-12);
        assert!((gv - (&c * &x + &d * &u)).norm() < 1e-12);

        let (em, fm, km, cm, dm) = ms.lti_matrices(&rho);
        assert_eq!(em, e);
        assert_eq!(fm, f);
        assert_eq!(km, k);
        assert_eq!(cm, c);
        assert_eq!(dm, d);
    }

    #[test]
    fn jacobian_example_and_identity_output() {
        let ms = example_scalar_structure();
        let rho = dv(&[2.0, 0.5, 0.1]);
        let (e, _, g) = ms.jacobians(&rho, &dv(&[1.0]), &dv(&[0.0])).unwrap();
        assert!((e[(0, 0)] - (2.0 + 3.0 * 0.5)).abs() < 1e-14);
        // g(x,u) = x so G = I.
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let spec = StructureSpec {
            n_x: 2,
            n_u: 1,
            n_y: 1,
            degrees: Degrees {
                deg_e: 3,
                deg_fx: 2,
                deg_fu: 1,
                deg_g: 1,
            },
            separable_f: false,
            constant_terms: true,
        };
        let ms = ModelStructure::from_spec(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..100 {
            let rho = DVector::from_fn(ms.n_rho, |_, _| rng.random::<f64>() - 0.5);
            let x = DVector::from_fn(2, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let u = DVector::from_fn(1, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let (ej, fj, gj) = ms.jacobians(&rho, &x, &u).unwrap();
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let (ep, fp, gp) = ms.eval_efg(&rho, &xp, &u).unwrap();
                let (em, fm, gm) = ms.eval_efg(&rho, &xm, &u).unwrap();
                let (ed, fd, gd) = (
                    (ep - em) / (2.0 * h),
                    (fp - fm) / (2.0 * h),
                    (gp - gm) / (2.0 * h),
                );
                for i in 0..2 {
                    assert!((ej[(i, j)] - ed[i]).abs() <= 1e-6 * (1.0 + ed[i].abs()));
                    assert!((fj[(i, j)] - fd[i]).abs() <= 1e-6 * (1.0 + fd[i].abs()));
                }
                assert!((gj[(0, j)] - gd[0]).abs() <= 1e-6 * (1.0 + gd[0].abs()));
            }
        }
    }

    #[test]
    fn implicit_step_linear_is_one_newton_solve() {
        let ms = ModelStructure::lti(2, 1, 1);
        let e = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let zero2 = DMatrix::zeros(2, 2);
        let rho = ModelStructure::lti_rho(
            &e,
            &zero2,
            &DMatrix::zeros(2, 1),
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(1, 1),
        );
        let b = dv(&[1.0, -2.0]);
        let s = ms.implicit_step(&rho, &b, &RootOptions::default()).unwrap();
        let expect = e.lu().solve(&b).unwrap();
        assert!((s - expect).norm() < 1e-9);
    }

    /// Bisection oracle for the scalar root of c1 s + c3 s^3 = b.
    fn bisect_cubic(c1: f64, c3: f64, b: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if c1 * mid + c3 * mid * mid * mid < b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn implicit_step_cubic_matches_bisection() {
        let ms = example_scalar_structure();
        // e(s) = s + s^3, b = 2: the root is exactly 1.
        let rho = dv(&[1.0, 1.0, 0.0]);
        let s = ms
            .implicit_step(&rho, &dv(&[2.0]), &RootOptions::default())
            .unwrap();
        let oracle = bisect_cubic(1.0, 1.0, 2.0);
        assert!((s[0] - oracle).abs() < 1e-9, "{} vs {}", s[0], oracle);
        assert!((s[0] - 1.0).abs() < 1e-9);

        // A genuinely irrational root: e(s) = s + 2 s^3, b = 2.
        let rho2 = dv(&[1.0, 2.0, 0.0]);
        let s2 = ms
            .implicit_step(&rho2, &dv(&[2.0]), &RootOptions::default())
            .unwrap();
        let oracle2 = bisect_cubic(1.0, 2.0, 2.0);
        assert!((s2[0] - oracle2).abs() < 1e-9, "{} vs {}", s2[0], oracle2);
        assert!((s2[0] - 0.8351223) .abs() < 1e-6);
    }

    #[test]
    fn implicit_step_round_trip() {
        // e(x) = A x + beta * x_i^3 with A + A' > 0 is strongly monotone.
        let spec = StructureSpec {
            n_x: 3,
            n_u: 1,
            n_y: 1,
            degrees: Degrees {
                deg_e: 3,
                deg_fx: 1,
                deg_fu: 1,
                deg_g: 1,
            },
            separable_f: true,
            constant_terms: false,
        };
        let ms = ModelStructure::from_spec(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut rho = DVector::zeros(ms.n_rho);
            for i in 0..3 {
                for j in 0..3 {
                    let idx = ms.param_index(ModelFn::E, i, &Monomial::var(j)).unwrap();
                    rho[idx] = if i == j {
                        2.0
                    } else {
                        0.3 * (rng.random::<f64>() - 0.5)
                    };
                }
                let cube = Monomial::from_pairs(&[(i, 3)]);
                let idx = ms.param_index(ModelFn::E, i, &cube).unwrap();
                rho[idx] = 0.5 * rng.random::<f64>();
            }
            let x0 = DVector::from_fn(3, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let b = ms.eval_e(&rho, &x0).unwrap();
            let s = ms.implicit_step(&rho, &b, &RootOptions::default()).unwrap();
            assert!((s - &x0).norm() <= 1e-7, "round trip failed");
        }
    }

    fn stable_lti_rho(ms: &ModelStructure, a_scale: f64) -> DVector<f64> {
        let _ = ms;
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let f = DMatrix::from_row_slice(2, 2, &[0.5 * a_scale, 0.2, -0.1, 0.4 * a_scale]);
        let k = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, -0.3]);
        let d = DMatrix::from_row_slice(1, 1, &[0.1]);
        ModelStructure::lti_rho(&e, &f, &k, &c, &d)
    }

    #[test]
    fn simulate_zero_input_zero_state() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let u = DMatrix::zeros(10, 1);
        let (xs, ys) = ms
            .simulate(&rho, &dv(&[0.0, 0.0]), &u, &RootOptions::default())
            .unwrap();
        assert!(xs.norm() == 0.0 && ys.norm() == 0.0);
    }

    #[test]
    fn simulate_matches_dense_linear_recursion() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let (e, f, k, c, d) = ms.lti_matrices(&rho);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_len = 40;
        let u = DMatrix::from_fn(t_len, 1, |_, _| rng.random::<f64>() - 0.5);
        let x1 = dv(&[0.2, -0.4]);
        let (xs, ys) = ms.simulate(&rho, &x1, &u, &RootOptions::default()).unwrap();
        // Independent dense recursion: x_{t+1} = E^{-1}(F x_t + K u_t).
        let elu = e.lu();
        let mut x = x1.clone();
        for t in 0..t_len {
            let yt = &c * &x + &d * u.row(t).transpose();
            assert!((ys.row(t).transpose() - yt).norm() < 1e-10);
            assert!((xs.row(t).transpose() - &x).norm() < 1e-10);
            x = elu.solve(&(&f * &x + &k * u.row(t).transpose())).unwrap();
        }
    }

    #[test]
    fn simulate_geometric_decay() {
        // Scalar f = 0.5 x + u with e = x: impulse input decays geometrically.
        let ms = example_scalar_structure();
        let rho = dv(&[1.0, 0.0, 0.5]);
        let mut u = DMatrix::zeros(10, 1);
        u[(0, 0)] = 1.0;
        let (xs, _) = ms
            .simulate(&rho, &dv(&[0.0]), &u, &RootOptions::default())
            .unwrap();
        for t in 1..10 {
            let expect = 0.5f64.powi(t as i32 - 1);
            assert!((xs[(t, 0)] - expect).abs() < 1e-12);
        }
    }

    fn dataset_from_model(
        ms: &ModelStructure,
        rho: &DVector<f64>,
        t_len: usize,
        seed: u64,
    ) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(t_len, ms.n_u, |_, _| rng.random::<f64>() - 0.5);
        let x1 = DVector::from_fn(ms.n_x, |_, _| 0.3 * (rng.random::<f64>() - 0.5));
        let (xs, ys) = ms.simulate(rho, &x1, &u, &RootOptions::default()).unwrap();
        Dataset::new(u, ys, Some(xs), 1.0).unwrap()
    }

    #[test]
    fn residuals_zero_for_exact_model() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let data = dataset_from_model(&ms, &rho, 30, 6);
        let res = ms.residuals(&rho, &data).unwrap();
        assert!(res.eps.norm() < 1e-9);
        assert!(res.eta.norm() < 1e-9);
    }

    #[test]
    fn residual_shapes_minimal_dataset() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let data = dataset_from_model(&ms, &rho, 2, 7);
        let res = ms.residuals(&rho, &data).unwrap();
        assert_eq!(res.eps.nrows(), 1);
        assert_eq!(res.eta.nrows(), 2);
    }

    #[test]
    fn residual_perturbation_is_exactly_linear() {
        let ms = example_scalar_structure();
        let rho = dv(&[1.0, 0.2, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t_len = 12;
        let u = DMatrix::from_fn(t_len, 1, |_, _| rng.random::<f64>() - 0.5);
        let xs = DMatrix::from_fn(t_len, 1, |_, _| rng.random::<f64>() - 0.5);
        let ys = DMatrix::from_fn(t_len, 1, |_, _| rng.random::<f64>() - 0.5);
        let data = Dataset::new(u, ys, Some(xs.clone()), 1.0).unwrap();
        let delta = 0.37;
        let mut rho2 = rho.clone();
        rho2[2] += delta;
        let r1 = ms.residuals(&rho, &data).unwrap();
        let r2 = ms.residuals(&rho2, &data).unwrap();
        for t in 0..t_len - 1 {
            let change = r2.eps[(t, 0)] - r1.eps[(t, 0)];
            assert!((change - delta * xs[(t, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_affine_in_rho() {
        let ms = ModelStructure::lti(2, 1, 1);
        let data = dataset_from_model(&ms, &stable_lti_rho(&ms, 1.0), 15, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r1 = DVector::from_fn(ms.n_rho, |_, _| rng.random::<f64>() - 0.5);
        let r2 = DVector::from_fn(ms.n_rho, |_, _| rng.random::<f64>() - 0.5);
        let alpha = 0.3;
        let mix = &r1 * alpha + &r2 * (1.0 - alpha);
        let ra = ms.residuals(&r1, &data).unwrap();
        let rb = ms.residuals(&r2, &data).unwrap();
        let rm = ms.residuals(&mix, &data).unwrap();
        let eps_mix = &ra.eps * alpha + &rb.eps * (1.0 - alpha);
        let eta_mix = &ra.eta * alpha + &rb.eta * (1.0 - alpha);
        assert!((&rm.eps - eps_mix).amax() < 1e-12);
        assert!((&rm.eta - eta_mix).amax() < 1e-12);
    }

    #[test]
    fn linearized_error_zero_when_exact() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let data = dataset_from_model(&ms, &rho, 25, 11);
        let j0 = ms.linearized_sim_error(&rho, &data).unwrap();
        assert!(j0 < 1e-18);
    }

    #[test]
    fn linearized_error_hand_recursion() {
        // T=2 scalar case: E=1, F=0.5, G=1, eps_1 = 1, eta = 0 => Delta_2 = 1, J0 = 1.
        let ms = ModelStructure::lti(1, 1, 1);
        let e = DMatrix::from_row_slice(1, 1, &[1.0]);
        let f = DMatrix::from_row_slice(1, 1, &[0.5]);
        let k = DMatrix::from_row_slice(1, 1, &[1.0]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let d = DMatrix::from_row_slice(1, 1, &[0.0]);
        let rho = ModelStructure::lti_rho(&e, &f, &k, &c, &d);
        // Choose data so that eps_1 = f(x_1,u_1) - e(x_2) = 1 and eta = 0.
        let xs = DMatrix::from_row_slice(2, 1, &[0.0, -1.0]);
        let u = DMatrix::zeros(2, 1);
        let ys = DMatrix::from_row_slice(2, 1, &[0.0, -1.0]);
        let data = Dataset::new(u, ys, Some(xs), 1.0).unwrap();
        let res = ms.residuals(&rho, &data).unwrap();
        assert!((res.eps[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(res.eta.norm() < 1e-14);
        let j0 = ms.linearized_sim_error(&rho, &data).unwrap();
        assert!((j0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_j_equals_j0() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho_true = stable_lti_rho(&ms, 1.0);
        let data = dataset_from_model(&ms, &rho_true, 40, 12);
        // Evaluate a *different* stable model on this data.
        let rho_other = stable_lti_rho(&ms, 0.6);
        let j = ms
            .sim_error(&rho_other, &data, &data.x1(2), &RootOptions::default())
            .unwrap();
        let j0 = ms.linearized_sim_error(&rho_other, &data).unwrap();
        assert!((j - j0).abs() <= 1e-10 * (1.0 + j));
    }

    #[test]
    fn sim_error_examples() {
        let ms = ModelStructure::lti(2, 1, 1);
        let rho = stable_lti_rho(&ms, 1.0);
        let data = dataset_from_model(&ms, &rho, 30, 13);
        let j = ms
            .sim_error(&rho, &data, &data.x1(2), &RootOptions::default())
            .unwrap();
        assert!(j <= 1e-16 * data.len() as f64 * data.y.norm_squared().max(1.0));

        // g == 0 model: J = sum |y|^2.
        let (e, f, k, _, _) = ms.lti_matrices(&rho);
        let rho_g0 = ModelStructure::lti_rho(
            &e,
            &f,
            &k,
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(1, 1),
        );
        let jg0 = ms
            .sim_error(&rho_g0, &data, &data.x1(2), &RootOptions::default())
            .unwrap();
        assert!((jg0 - data.y.norm_squared()).abs() < 1e-12 * (1.0 + data.y.norm_squared()));
    }
}
