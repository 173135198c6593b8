//! The convex stable-model set Theta: contraction LMI, its sum-of-squares
//! relaxation with monomial-basis selection, the exact LTI LMI, equality
//! elimination through an orthonormal nullspace, and phase-I feasibility.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::ipm::{newton_direction, wolfe_backtrack, AffineMap, SolverOptions};
use crate::linalg::{eig_extremes, inf_norm, min_norm_solve, nullspace_basis};
use crate::models::ModelStructure;
use crate::polyalg::{coeff_match, monomials_up_to, AffineCoeff, EqRow, Monomial, Polynomial};

/// Layout of the decision vector theta = [rho; s2v(P); s2v(Q)].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n_rho: usize,
    pub n_p: usize,
    pub n_q: usize,
}

impl ThetaLayout {
    pub fn n_theta(&self) -> usize {
        self.n_rho + self.n_p + self.n_q
    }
    pub fn rho_range(&self) -> std::ops::Range<usize> {
        0..self.n_rho
    }
    pub fn p_range(&self) -> std::ops::Range<usize> {
        self.n_rho..self.n_rho + self.n_p
    }
    pub fn q_range(&self) -> std::ops::Range<usize> {
        self.n_rho + self.n_p..self.n_theta()
    }
}

/// Length of s2v(S) for an n x n symmetric matrix.
pub fn s2v_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Index of entry (i, j), i <= j, in s2v ordering (columns of the upper
/// triangle stacked, duplicates omitted).
pub fn s2v_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Stack the upper triangle of a symmetric matrix into a vector.
pub fn s2v(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(s2v_len(n));
    for j in 0..n {
        for i in 0..=j {
            v[s2v_index(i, j)] = m[(i, j)];
        }
    }
    v
}

/// Inverse of `s2v`.
pub fn v2s(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let val = v[s2v_index(i, j)];
            m[(i, j)] = val;
            m[(j, i)] = val;
        }
    }
    m
}

/// A strictly feasible point of a constraint system.
#[derive(Debug, Clone)]
pub struct FeasiblePoint {
    pub theta: DVector<f64>,
    pub margin: f64,
}

/// The feasible set Theta = {theta : S(theta) >= 0, A_e theta = b_e} with the
/// equality constraints eliminated through an orthonormal nullspace basis.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub layout: ThetaLayout,
    pub map: AffineMap,
    pub a_e_rows: Vec<EqRow>,
    pub n_e: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    pub mu: f64,
    pub omega: Vec<Monomial>,
}

impl ConstraintSystem {
    pub fn n_theta(&self) -> usize {
        self.layout.n_theta()
    }

    pub fn n_nu(&self) -> usize {
        self.n_e.ncols()
    }

    pub fn n_s(&self) -> usize {
        self.map.n_s()
    }

    pub fn s_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.map.s_at(theta)
    }

    pub fn theta_of_nu(&self, nu: &DVector<f64>) -> DVector<f64> {
        &self.theta_star + &self.n_e * nu
    }

    pub fn barrier_value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.map.barrier_value(theta)
    }

    pub fn barrier(
        &self,
        theta: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, crate::ipm::BlockHess)> {
        self.map.barrier(theta)
    }

    pub fn a_e_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.a_e_rows.len();
        let mut a = DMatrix::zeros(rows, self.n_theta());
        let mut b = DVector::zeros(rows);
        for (r, (row, rhs)) in self.a_e_rows.iter().enumerate() {
            for &(c, w) in row {
                a[(r, c)] = w;
            }
            b[r] = *rhs;
        }
        (a, b)
    }

    /// Infinity-norm residual of the equality constraints at theta.
    pub fn eq_residual(&self, theta: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (row, rhs) in &self.a_e_rows {
            let mut acc = -rhs;
            for &(c, w) in row {
                acc += w * theta[c];
            }
            worst = worst.max(acc.abs());
        }
        worst
    }

    /// Membership test: equalities hold to 1e-8 and S(theta) >= 0.
    /// Returns the semidefinite margin lambda_min(S(theta)) either way.
    pub fn membership(&self, theta: &DVector<f64>) -> (bool, f64) {
        let s = self.s_at(theta);
        let margin = match eig_extremes(&s) {
            Ok((lo, _)) => lo,
            Err(_) => f64::NEG_INFINITY,
        };
        let ok = self.eq_residual(theta) <= 1e-8 && margin >= 0.0;
        (ok, margin)
    }

    /// Debug dump of the raw system for external inspection.
    pub fn dump_json(&self) -> serde_json::Value {
        let a_e: Vec<serde_json::Value> = self
            .a_e_rows
            .iter()
            .enumerate()
            .flat_map(|(r, (row, _))| {
                row.iter()
                    .map(move |&(c, w)| json!([r, c, w]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let b_e: Vec<f64> = self.a_e_rows.iter().map(|(_, b)| *b).collect();
        let a_s: Vec<serde_json::Value> = self
            .map
            .cols
            .iter()
            .enumerate()
            .flat_map(|(col, entries)| {
                entries
                    .iter()
                    .map(move |&(p, q, v)| json!([p * self.map.n_s() + q, col, v]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let omega: Vec<Vec<(usize, u32)>> =
            self.omega.iter().map(|m| m.exponent_list()).collect();
        json!({
            "n_theta": self.n_theta(),
            "n_s": self.n_s(),
            "mu": self.mu,
            "A_e": a_e,
            "b_e": b_e,
            "omega": omega,
            "A_s": a_s,
            "s0": self.map.s0.as_slice(),
        })
    }

    /// Build the nullspace parametrization from assembled parts and verify the
    /// structural identities.
    fn finalize(
        layout: ThetaLayout,
        map: AffineMap,
        a_e_rows: Vec<EqRow>,
        mu: f64,
        omega: Vec<Monomial>,
    ) -> Result<ConstraintSystem> {
        let n_theta = layout.n_theta();
        debug_assert_eq!(map.dims(), n_theta);
        let map = add_scale_cap(map);
        let mut cs = ConstraintSystem {
            layout,
            map,
            a_e_rows,
            n_e: DMatrix::identity(n_theta, n_theta),
            theta_star: DVector::zeros(n_theta),
            mu,
            omega,
        };
        if cs.a_e_rows.is_empty() {
            return Ok(cs);
        }
        let (a, b) = cs.a_e_dense();
        let theta_star = min_norm_solve(&a, &b, 1e-12)?;
        let resid = inf_norm(&(&a * &theta_star - &b));
        if resid > 1e-8 * (1.0 + inf_norm(&b)) {
            return Err(Error::InfeasibleEqualities { residual: resid });
        }
        let n_e = nullspace_basis(&a, 1e-10);
        debug_assert!((&a * &n_e).amax() <= 1e-10 * a.amax().max(1.0));
        debug_assert!(
            (n_e.tr_mul(&n_e) - DMatrix::identity(n_e.ncols(), n_e.ncols())).amax() <= 1e-10
        );
        cs.theta_star = theta_star;
        cs.n_e = n_e;
        Ok(cs)
    }
}

/// Upper bound on tr(S) enforced through the scale-cap row.
pub const SCALE_CAP: f64 = 1e6;

/// Append the affine row SCALE_CAP - tr(S(theta)) as an extra 1x1 diagonal
/// block of S. Without it the log-det barrier has recession directions (any
/// theta-ray that inflates S increases logdet forever), so the centering
/// subproblems of phase-I, and of the main solve on exactly-consistent data,
/// have no minimizer and Newton drifts. The cap bounds every barrier domain
/// while leaving the feasible set unchanged at all practical scales.
fn add_scale_cap(map: AffineMap) -> AffineMap {
    let n_s = map.n_s();
    let mut cols = map.cols;
    for col in cols.iter_mut() {
        let tr: f64 = col.iter().filter(|(r, c, _)| r == c).map(|&(_, _, v)| v).sum();
        if tr != 0.0 {
            col.push((n_s, n_s, -tr));
        }
    }
    let mut s0 = DMatrix::zeros(n_s + 1, n_s + 1);
    s0.view_mut((0, 0), (n_s, n_s)).copy_from(&map.s0);
    s0[(n_s, n_s)] = SCALE_CAP - map.s0.trace();
    AffineMap { cols, s0 }
}

/// The scalar contraction certificate polynomial p(z) = v' M(rho, P, x, u) v
/// with M in Schur-complement form (blocks E+E'-P-muI, F', G', P, I) and
/// z = (x, u, v). Coefficients are affine in theta = [rho; s2v(P); ...].
pub fn build_contraction_poly(ms: &ModelStructure, mu: f64) -> Polynomial {
    let (nx, nu, ny) = (ms.n_x, ms.n_u, ms.n_y);
    let vbase = nx + nu;
    let p_idx = |i: usize, j: usize| ms.n_rho + s2v_index(i.min(j), i.max(j));
    let mut p = Polynomial::zero();
    let vv = |a: usize, b: usize| Monomial::var(vbase + a).mul(&Monomial::var(vbase + b));

    // (1,1) block: E + E' - P - mu I on v_1..v_nx.
    for i in 0..nx {
        for j in 0..nx {
            let mut entry = ms.de_poly(i, j).clone();
            entry.add_assign(ms.de_poly(j, i));
            entry.add_term(Monomial::one(), AffineCoeff::param(p_idx(i, j), -1.0));
            if i == j {
                entry.add_term(Monomial::one(), AffineCoeff::constant(-mu));
            }
            let carrier = Polynomial::const_term(vv(i, j), if i == j { 1.0 } else { 0.5 });
            p.add_assign(&carrier.mul(&entry).expect("carrier is constant"));
        }
    }
    // (2,1) and (1,2) blocks: F.
    for i in 0..nx {
        for j in 0..nx {
            let carrier = Polynomial::const_term(vv(nx + i, j), 2.0);
            p.add_assign(&carrier.mul(ms.df_poly(i, j)).expect("carrier is constant"));
        }
    }
    // (2,2) block: P.
    for i in 0..nx {
        for j in 0..nx {
            let w = if i == j { 1.0 } else { 0.5 };
            p.add_term(vv(nx + i, nx + j), AffineCoeff::param(p_idx(i, j), w));
        }
    }
    // (3,1) and (1,3) blocks: G.
    for i in 0..ny {
        for j in 0..nx {
            let carrier = Polynomial::const_term(vv(2 * nx + i, j), 2.0);
            p.add_assign(&carrier.mul(ms.dg_poly(i, j)).expect("carrier is constant"));
        }
    }
    // (3,3) block: identity.
    for i in 0..ny {
        p.add_term(vv(2 * nx + i, 2 * nx + i), AffineCoeff::constant(1.0));
    }
    p
}

/// Well-posedness certificate polynomial for equation-error fitting:
/// p(x, y) = y' (E(x) + E(x)' - mu I) y with y in the v-variable slots.
pub fn build_wellposed_poly(ms: &ModelStructure, mu_wp: f64) -> Polynomial {
    let nx = ms.n_x;
    let vbase = nx + ms.n_u;
    let mut p = Polynomial::zero();
    for i in 0..nx {
        for j in 0..nx {
            let mut entry = ms.de_poly(i, j).clone();
            entry.add_assign(ms.de_poly(j, i));
            if i == j {
                entry.add_term(Monomial::one(), AffineCoeff::constant(-mu_wp));
            }
            let m = Monomial::var(vbase + i).mul(&Monomial::var(vbase + j));
            let carrier = Polynomial::const_term(m, if i == j { 1.0 } else { 0.5 });
            p.add_assign(&carrier.mul(&entry).expect("carrier is constant"));
        }
    }
    p
}

/// Select the Gram basis for a polynomial quadratic and homogeneous in the
/// v-block: candidates v_i * m(x,u) with deg m <= ceil(d_i / 2) where d_i is
/// the largest (x,u)-degree among terms containing v_i, then prune to a
/// fixpoint: drop omega_k whenever its squared monomial is outside supp(p)
/// and no other retained pair multiplies to it (the diagonal constraint would
/// force Q_kk = 0 and semidefiniteness would zero the whole row).
pub fn select_basis(p: &Polynomial, n_xu: usize, n_v: usize) -> Vec<Monomial> {
    let vbase = n_xu;
    debug_assert!(
        p.terms().all(|(m, _)| m.degree_in(vbase, vbase + n_v) == 2),
        "certificate polynomial must be homogeneous of degree 2 in v"
    );
    let mut dmax = vec![0u32; n_v];
    for (m, _) in p.terms() {
        let xu_deg = m.degree_in(0, n_xu);
        for (i, d) in dmax.iter_mut().enumerate() {
            if m.exp(vbase + i) > 0 {
                *d = (*d).max(xu_deg);
            }
        }
    }
    let mut cand: Vec<Monomial> = Vec::new();
    for (i, &d) in dmax.iter().enumerate() {
        let mut ms = monomials_up_to(n_xu, d.div_ceil(2));
        ms.reverse();
        for m in ms {
            cand.push(m.mul(&Monomial::var(vbase + i)));
        }
    }

    // Map from pair products to the pairs producing them.
    let mut pair_map: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
    for k in 0..cand.len() {
        for l in k..cand.len() {
            pair_map
                .entry(cand[k].mul(&cand[l]))
                .or_default()
                .push((k, l));
        }
    }
    let supp: std::collections::BTreeSet<Monomial> = p.support().cloned().collect();
    let mut alive = vec![true; cand.len()];
    loop {
        let mut changed = false;
        for k in 0..cand.len() {
            if !alive[k] {
                continue;
            }
            let sq = cand[k].square();
            if supp.contains(&sq) {
                continue;
            }
            let has_pair = pair_map
                .get(&sq)
                .map(|pairs| {
                    pairs
                        .iter()
                        .any(|&(l, m)| alive[l] && alive[m] && !(l == k && m == k))
                })
                .unwrap_or(false);
            if !has_pair {
                alive[k] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    cand.into_iter()
        .zip(alive)
        .filter_map(|(m, a)| a.then_some(m))
        .collect()
}

fn gram_poly(omega: &[Monomial], q_offset: usize) -> Polynomial {
    let mut gram = Polynomial::zero();
    for k in 0..omega.len() {
        for l in k..omega.len() {
            let m = omega[k].mul(&omega[l]);
            let w = if k == l { 1.0 } else { 2.0 };
            gram.add_term(m, AffineCoeff::param(q_offset + s2v_index(k, l), w));
        }
    }
    gram
}

fn gram_a_s(n_theta: usize, n_omega: usize, q_offset: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let mut cols = vec![Vec::new(); n_theta];
    for k in 0..n_omega {
        for l in k..n_omega {
            let col = &mut cols[q_offset + s2v_index(k, l)];
            col.push((k, l, 1.0));
            if k != l {
                col.push((l, k, 1.0));
            }
        }
    }
    cols
}

/// SOS relaxation of the contraction condition: S(theta) = Q with the
/// equalities matching omega' Q omega against p(z) coefficient by coefficient
/// (off-diagonal Gram entries carry weight 2).
pub fn assemble_sos(ms: &ModelStructure, mu: f64) -> Result<ConstraintSystem> {
    let p = build_contraction_poly(ms, mu);
    let n_xu = ms.n_x + ms.n_u;
    let n_v = 2 * ms.n_x + ms.n_y;
    let omega = select_basis(&p, n_xu, n_v);
    assemble_gram_system(ms, p, omega, s2v_len(ms.n_x), mu)
}

/// Constraint system for equation-error fitting: E(x) + E(x)' - mu_wp I must
/// admit a Gram certificate; f and g parameters are unconstrained.
pub fn assemble_wellposed(ms: &ModelStructure, mu_wp: f64) -> Result<ConstraintSystem> {
    let p = build_wellposed_poly(ms, mu_wp);
    let n_xu = ms.n_x + ms.n_u;
    let omega = select_basis(&p, n_xu, ms.n_x);
    assemble_gram_system(ms, p, omega, 0, mu_wp)
}

fn assemble_gram_system(
    ms: &ModelStructure,
    p: Polynomial,
    omega: Vec<Monomial>,
    n_p: usize,
    mu: f64,
) -> Result<ConstraintSystem> {
    let n_omega = omega.len();
    let layout = ThetaLayout {
        n_rho: ms.n_rho,
        n_p,
        n_q: s2v_len(n_omega),
    };
    let q_offset = layout.n_rho + layout.n_p;
    let gram = gram_poly(&omega, q_offset);
    let rows = coeff_match(&gram, &p);
    let map = AffineMap {
        cols: gram_a_s(layout.n_theta(), n_omega, q_offset),
        s0: DMatrix::zeros(n_omega, n_omega),
    };
    ConstraintSystem::finalize(layout, map, rows, mu, omega)
}

/// Exact LTI stability LMI over theta = [vecE; vecF; vecK; vecC; vecD; s2v(P)]:
/// S(theta) = [[E+E'-P-muI, F', C'], [F, P, 0], [C, 0, I]], no equalities.
pub fn assemble_lti(n_x: usize, n_u: usize, n_y: usize, mu: f64) -> Result<ConstraintSystem> {
    let n_rho = n_x * n_x + n_x * n_x + n_x * n_u + n_y * n_x + n_y * n_u;
    let layout = ThetaLayout {
        n_rho,
        n_p: s2v_len(n_x),
        n_q: 0,
    };
    let n_s = 2 * n_x + n_y;
    let mut cols: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); layout.n_theta()];
    let mut off = 0;
    // vec(E): E_{ij} contributes to S_{ij} and S_{ji} in the (1,1) block.
    for j in 0..n_x {
        for i in 0..n_x {
            let col = &mut cols[off + j * n_x + i];
            if i == j {
                col.push((i, i, 2.0));
            } else {
                col.push((i, j, 1.0));
                col.push((j, i, 1.0));
            }
        }
    }
    off += n_x * n_x;
    // vec(F): (2,1) block and its transpose.
    for j in 0..n_x {
        for i in 0..n_x {
            let col = &mut cols[off + j * n_x + i];
            col.push((n_x + i, j, 1.0));
            col.push((j, n_x + i, 1.0));
        }
    }
    off += n_x * n_x;
    off += n_x * n_u; // vec(K): does not enter the LMI.
    // vec(C): (3,1) block and its transpose.
    for j in 0..n_x {
        for i in 0..n_y {
            let col = &mut cols[off + j * n_y + i];
            col.push((2 * n_x + i, j, 1.0));
            col.push((j, 2 * n_x + i, 1.0));
        }
    }
    off += n_y * n_x;
    off += n_y * n_u; // vec(D): does not enter the LMI.
    // s2v(P): -P in the (1,1) block, +P in the (2,2) block.
    for j in 0..n_x {
        for i in 0..=j {
            let col = &mut cols[off + s2v_index(i, j)];
            col.push((i, j, -1.0));
            col.push((n_x + i, n_x + j, 1.0));
            if i != j {
                col.push((j, i, -1.0));
                col.push((n_x + j, n_x + i, 1.0));
            }
        }
    }
    let mut s0 = DMatrix::zeros(n_s, n_s);
    for i in 0..n_x {
        s0[(i, i)] = -mu;
    }
    for i in 0..n_y {
        s0[(2 * n_x + i, 2 * n_x + i)] = 1.0;
    }
    ConstraintSystem::finalize(layout, AffineMap { cols, s0 }, Vec::new(), mu, Vec::new())
}

/// Weighted equation-error LMI of the stable subspace baseline over
/// theta = [vecA; vecB; vecC; vecD; s2v(P)]: S = [[P - muI, A], [A', P]].
pub fn assemble_subspace(n_x: usize, n_u: usize, n_y: usize, mu: f64) -> Result<ConstraintSystem> {
    let n_rho = n_x * n_x + n_x * n_u + n_y * n_x + n_y * n_u;
    let layout = ThetaLayout {
        n_rho,
        n_p: s2v_len(n_x),
        n_q: 0,
    };
    let n_s = 2 * n_x;
    let mut cols: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); layout.n_theta()];
    // vec(A) in the (1,2) block and its transpose.
    for j in 0..n_x {
        for i in 0..n_x {
            let col = &mut cols[j * n_x + i];
            col.push((i, n_x + j, 1.0));
            col.push((n_x + j, i, 1.0));
        }
    }
    let off = n_x * n_x + n_x * n_u + n_y * n_x + n_y * n_u;
    for j in 0..n_x {
        for i in 0..=j {
            let col = &mut cols[off + s2v_index(i, j)];
            col.push((i, j, 1.0));
            col.push((n_x + i, n_x + j, 1.0));
            if i != j {
                col.push((j, i, 1.0));
                col.push((n_x + j, n_x + i, 1.0));
            }
        }
    }
    let mut s0 = DMatrix::zeros(n_s, n_s);
    for i in 0..n_x {
        s0[(i, i)] = -mu;
    }
    ConstraintSystem::finalize(layout, AffineMap { cols, s0 }, Vec::new(), mu, Vec::new())
}

/// Phase-I: find theta with A_e theta = b_e and lambda_min(S(theta)) >=
/// feas_margin by barrier minimization of t - tau log det(S(theta* + N_e nu)
/// + t I) over (nu, t), stopping as soon as t < -feas_margin.
pub fn phase_one(cs: &ConstraintSystem, opts: &SolverOptions) -> Result<FeasiblePoint> {
    let n_nu = cs.n_nu();
    let n_s = cs.n_s();
    // Augmented affine map over w = (nu, t).
    let mut cols: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(n_nu + 1);
    for j in 0..n_nu {
        let mut dense = DMatrix::<f64>::zeros(n_s, n_s);
        for (k, entries) in cs.map.cols.iter().enumerate() {
            let w = cs.n_e[(k, j)];
            if w == 0.0 {
                continue;
            }
            for &(r, c, v) in entries {
                dense[(r, c)] += w * v;
            }
        }
        let mut entries = Vec::new();
        for r in 0..n_s {
            for c in 0..n_s {
                if dense[(r, c)] != 0.0 {
                    entries.push((r, c, dense[(r, c)]));
                }
            }
        }
        cols.push(entries);
    }
    cols.push((0..n_s).map(|i| (i, i, 1.0)).collect());
    let aug = AffineMap {
        cols,
        s0: cs.s_at(&cs.theta_star),
    };

    let (lmin0, _) = eig_extremes(&aug.s0)?;
    let t0 = (-lmin0).max(0.0) + 1.0;
    let mut w = DVector::<f64>::zeros(n_nu + 1);
    w[n_nu] = t0;
    let mut best_t = t0;
    let mut tau = opts.phase1_tau0;

    // The barrier centers equilibrate near the scale cap, so the raw point can
    // be needlessly large. Shrink back toward theta* along the nullspace ray
    // to the smallest scale holding a moderate margin; lambda_min is concave
    // along the ray, so the feasible scales form an interval and bisection on
    // its lower edge is exact.
    let finish = |w: &DVector<f64>| -> FeasiblePoint {
        let nu = w.rows(0, n_nu).into_owned();
        let margin_at = |s: f64| -> f64 {
            let theta = cs.theta_of_nu(&(&nu * s));
            cs.membership(&theta).1
        };
        let m1 = margin_at(1.0);
        let target = m1.min(1e-2).max(opts.feas_margin);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if margin_at(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let theta = cs.theta_of_nu(&(&nu * hi));
        let (_, margin) = cs.membership(&theta);
        FeasiblePoint { theta, margin }
    };

    let trace = std::env::var("LRSID_TRACE").is_ok();
    while tau >= opts.tau_min {
        let mut inner = 0usize;
        for _ in 0..opts.maxit {
            inner += 1;
            let (phi, gphi, hphi) = aug.barrier(&w)?;
            let f_cur = w[n_nu] + tau * phi;
            if trace && inner % 100 == 0 {
                eprintln!(
                    "phase1 tau={tau:.1e} inner={inner} t={:.3e} |w|={:.3e} f={f_cur:.6e}",
                    w[n_nu],
                    w.norm()
                );
            }
            let mut g = gphi * tau;
            g[n_nu] += 1.0;
            if inf_norm(&g) < opts.delta_g {
                break;
            }
            let h = hphi.to_dense(n_nu + 1) * tau;
            let (dir, _) = newton_direction(&h, &g, opts.hess_mod_floor);
            let g0 = g.dot(&dir);
            if g0 >= 0.0 {
                break;
            }
            let alpha = wolfe_backtrack(
                |a| {
                    let wt = &w + &dir * a;
                    Ok(wt[n_nu] + tau * aug.barrier_value(&wt)?)
                },
                |a| {
                    let wt = &w + &dir * a;
                    let (_, gp, _) = aug.barrier(&wt)?;
                    let mut gt = gp * tau;
                    gt[n_nu] += 1.0;
                    Ok(gt.dot(&dir))
                },
                f_cur,
                g0,
                opts,
            )?;
            let step = &dir * alpha;
            w += &step;
            best_t = best_t.min(w[n_nu]);
            if w[n_nu] < -opts.feas_margin {
                return Ok(finish(&w));
            }
            let f_new = w[n_nu] + tau * aug.barrier_value(&w)?;
            if (f_new - f_cur).abs() < opts.delta_f || inf_norm(&step) < opts.delta_f {
                break;
            }
        }
        tau /= opts.beta;
    }
    Err(Error::Infeasible {
        best_margin: -best_t,
    })
}

/// Draw strictly feasible points around a phase-I output: random nullspace
/// directions, shrunk by halving until membership holds with a positive
/// margin. Deterministic in the seed.
pub fn sample_interior(
    cs: &ConstraintSystem,
    fp: &FeasiblePoint,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_nu = cs.n_nu();
    let nu0 = cs.n_e.tr_mul(&(&fp.theta - &cs.theta_star));
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let dir: DVector<f64> = DVector::from_fn(n_nu, |_, _| StandardNormal.sample(&mut rng));
        let scale = fp.theta.norm().max(1.0) / dir.norm().max(1e-12);
        let mut s = scale;
        for _ in 0..60 {
            let theta = cs.theta_of_nu(&(&nu0 + &dir * s));
            let (ok, margin) = cs.membership(&theta);
            if ok && margin >= 1e-8 {
                out.push(theta);
                break;
            }
            s *= 0.5;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::example_scalar_structure;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MU: f64 = 1e-3;

    fn mono(pairs: &[(usize, u32)]) -> Monomial {
        Monomial::from_pairs(pairs)
    }

    /// Expected contraction polynomial for the worked example:
    /// (2 rho1 - P - mu) v1^2 + 6 rho2 x^2 v1^2 + 2 rho3 v1 v2 + P v2^2
    /// + 2 v1 v3 + v3^2, with z = (x, u, v1, v2, v3) and
    /// theta = [rho1, rho2, rho3, P, ...].
    fn example_expected_poly() -> Polynomial {
        let (x, v1, v2, v3) = (0usize, 2usize, 3usize, 4usize);
        let mut p = Polynomial::zero();
        let mut c = AffineCoeff::param(0, 2.0);
        c.add_assign(&AffineCoeff::param(3, -1.0));
        c.add_assign(&AffineCoeff::constant(-MU));
        p.add_term(mono(&[(v1, 2)]), c);
        p.add_term(mono(&[(x, 2), (v1, 2)]), AffineCoeff::param(1, 6.0));
        p.add_term(mono(&[(v1, 1), (v2, 1)]), AffineCoeff::param(2, 2.0));
        p.add_term(mono(&[(v2, 2)]), AffineCoeff::param(3, 1.0));
        p.add_term(mono(&[(v1, 1), (v3, 1)]), AffineCoeff::constant(2.0));
        p.add_term(mono(&[(v3, 2)]), AffineCoeff::constant(1.0));
        p
    }

    #[test]
    fn contraction_poly_matches_example() {
        let ms = example_scalar_structure();
        let p = build_contraction_poly(&ms, MU);
        assert_eq!(p, example_expected_poly());
    }

    #[test]
    fn contraction_poly_linear_structure_is_constant_in_xu() {
        let ms = ModelStructure::lti(2, 1, 1);
        let p = build_contraction_poly(&ms, MU);
        assert_eq!(p.max_degree_in(0, 3), 0, "no x,u dependence for LTI");
    }

    #[test]
    fn contraction_poly_g_row_structure() {
        // n_y = 1, g = x1: the G row contributes only 2 z1 v_last.
        let mut b = ModelStructure::builder(2, 1, 1);
        b.param(crate::models::ModelFn::E, 0, mono(&[(0, 1)]));
        b.param(crate::models::ModelFn::E, 1, mono(&[(1, 1)]));
        b.fixed(crate::models::ModelFn::G, 0, mono(&[(0, 1)]), 1.0);
        let ms = b.build();
        let p = build_contraction_poly(&ms, MU);
        // v-slot base = 3, v_last = index 3+4 = 7 (v = 2*2+1 = 5 slots).
        let vlast = 3 + 4;
        let cross = p.coeff(&mono(&[(3, 1), (vlast, 1)]));
        assert_eq!(cross, AffineCoeff::constant(2.0));
        let cross2 = p.coeff(&mono(&[(4, 1), (vlast, 1)]));
        assert!(cross2.is_zero());
    }

    #[test]
    fn basis_selection_example() {
        let ms = example_scalar_structure();
        let p = build_contraction_poly(&ms, MU);
        let omega = select_basis(&p, 2, 3);
        // omega = [v1 x, v1, v2, v3] in that order (v index, then degree desc).
        let expect = vec![
            mono(&[(0, 1), (2, 1)]),
            mono(&[(2, 1)]),
            mono(&[(3, 1)]),
            mono(&[(4, 1)]),
        ];
        assert_eq!(omega, expect);
    }

    #[test]
    fn basis_selection_linear() {
        let mut b = ModelStructure::builder(1, 1, 1);
        b.param(crate::models::ModelFn::E, 0, mono(&[(0, 1)]));
        b.param(crate::models::ModelFn::F, 0, mono(&[(0, 1)]));
        b.fixed(crate::models::ModelFn::G, 0, mono(&[(0, 1)]), 1.0);
        let ms = b.build();
        let p = build_contraction_poly(&ms, MU);
        let omega = select_basis(&p, 2, 3);
        let expect = vec![mono(&[(2, 1)]), mono(&[(3, 1)]), mono(&[(4, 1)])];
        assert_eq!(omega, expect);
    }

    #[test]
    fn basis_representability_where_adequate() {
        // For structures whose cross blocks fit the balanced degree split,
        // every term of p must be a product of two retained basis elements.
        let ms = example_scalar_structure();
        let p = build_contraction_poly(&ms, MU);
        let omega = select_basis(&p, 2, 3);
        for (m, _) in p.terms() {
            let mut found = false;
            'search: for k in 0..omega.len() {
                for l in k..omega.len() {
                    if omega[k].mul(&omega[l]) == *m {
                        found = true;
                        break 'search;
                    }
                }
            }
            assert!(found, "unrepresentable term {m}");
        }
    }

    #[test]
    fn assemble_sos_example_rows() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        assert_eq!(cs.omega.len(), 4);
        assert_eq!(cs.layout.n_rho, 3);
        assert_eq!(cs.layout.n_p, 1);
        assert_eq!(cs.layout.n_q, 10);
        // Row count = union of supports (all Gram products also occur in the
        // zero-coefficient rows): 10 monomials.
        assert_eq!(cs.a_e_rows.len(), 10);

        // Check the specific constraints by solving for Q at a chosen (rho, P).
        let (rho1, rho2, rho3, pval) = (2.0, 1.5, 0.3, 0.8);
        let (a, b) = cs.a_e_dense();
        // Solve the equality system with (rho, P) pinned.
        let mut theta = min_norm_solve(&a, &b, 1e-12).unwrap();
        // Reconstruct: theta minus particular must lie in nullspace; instead
        // solve with pinned leading coordinates by substitution:
        // A [rho; P; q] = b  =>  A_q q = b - A_rp [rho; P].
        let n_q = cs.layout.n_q;
        let a_q = a.columns(4, n_q).into_owned();
        let rp = DVector::from_vec(vec![rho1, rho2, rho3, pval]);
        let rhs = &b - a.columns(0, 4) * &rp;
        let q = min_norm_solve(&a_q, &rhs, 1e-12).unwrap();
        assert!(((&a_q * &q) - &rhs).amax() < 1e-10, "solvable for any (rho,P)");
        for (i, v) in rp.iter().enumerate() {
            theta[i] = *v;
        }
        for (i, v) in q.iter().enumerate() {
            theta[4 + i] = *v;
        }
        let qmat = cs.s_at(&theta);
        // Q11 = 6 rho2, Q22 = 2 rho1 - P - mu, Q33 = P, Q44 = 1,
        // Q23 = rho3, Q24 = 1, everything else 0.
        assert!((qmat[(0, 0)] - 6.0 * rho2).abs() < 1e-9);
        assert!((qmat[(1, 1)] - (2.0 * rho1 - pval - MU)).abs() < 1e-9);
        assert!((qmat[(2, 2)] - pval).abs() < 1e-9);
        assert!((qmat[(3, 3)] - 1.0).abs() < 1e-9);
        assert!((qmat[(1, 2)] - rho3).abs() < 1e-9);
        assert!((qmat[(1, 3)] - 1.0).abs() < 1e-9);
        for (i, j) in [(0, 1), (0, 2), (0, 3), (2, 3)] {
            assert!(qmat[(i, j)].abs() < 1e-9, "Q[{i},{j}] should vanish");
        }
    }

    #[test]
    fn nullspace_identities_hold() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let (a, b) = cs.a_e_dense();
        assert!(inf_norm(&(&a * &cs.theta_star - &b)) <= 1e-10);
        assert!((&a * &cs.n_e).amax() <= 1e-12 * a.amax().max(1.0));
        let g = cs.n_e.tr_mul(&cs.n_e);
        assert!((g - DMatrix::identity(cs.n_nu(), cs.n_nu())).amax() <= 1e-12);
    }

    #[test]
    fn assemble_lti_scalar_pattern() {
        let cs = assemble_lti(1, 1, 1, 0.1).unwrap();
        // theta = [E, F, K, C, D, P]
        let theta = DVector::from_vec(vec![1.5, 0.0, 0.7, 0.0, 0.2, 1.0]);
        let s = cs.s_at(&theta);
        // S = [[2E - P - mu, F, C], [F, P, 0], [C, 0, 1]]
        assert!((s[(0, 0)] - (2.0 * 1.5 - 1.0 - 0.1)).abs() < 1e-14);
        assert_eq!(s[(1, 0)], 0.0);
        assert_eq!(s[(2, 0)], 0.0);
        assert!((s[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((s[(2, 2)] - 1.0).abs() < 1e-14);
        let (lo, _) = eig_extremes(&s).unwrap();
        assert!(lo > 0.0, "margin strictly positive");

        // theta = 0: fixed part only, indefinite.
        let s0 = cs.s_at(&DVector::zeros(6));
        let (lo0, hi0) = eig_extremes(&s0).unwrap();
        assert!(lo0 < 0.0 && hi0 > 0.0);
    }

    #[test]
    fn assemble_lti_general_pattern() {
        let (nx, nu, ny) = (2, 1, 2);
        let cs = assemble_lti(nx, nu, ny, MU).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = DMatrix::from_fn(nx, nx, |_, _| rng.random::<f64>() - 0.5);
        let f = DMatrix::from_fn(nx, nx, |_, _| rng.random::<f64>() - 0.5);
        let k = DMatrix::from_fn(nx, nu, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(ny, nx, |_, _| rng.random::<f64>() - 0.5);
        let d = DMatrix::from_fn(ny, nu, |_, _| rng.random::<f64>() - 0.5);
        let pm = {
            let a = DMatrix::from_fn(nx, nx, |_, _| rng.random::<f64>() - 0.5);
            &a * a.transpose() + DMatrix::identity(nx, nx)
        };
        let rho = ModelStructure::lti_rho(&e, &f, &k, &c, &d);
        let mut theta = DVector::zeros(cs.n_theta());
        theta.rows_mut(0, rho.len()).copy_from(&rho);
        theta
            .rows_mut(rho.len(), s2v_len(nx))
            .copy_from(&s2v(&pm));
        let s = cs.s_at(&theta);
        let ee = &e + e.transpose() - &pm - DMatrix::identity(nx, nx) * MU;
        for i in 0..nx {
            for j in 0..nx {
                assert!((s[(i, j)] - ee[(i, j)]).abs() < 1e-12);
                assert!((s[(nx + i, j)] - f[(i, j)]).abs() < 1e-12);
                assert!((s[(nx + i, nx + j)] - pm[(i, j)]).abs() < 1e-12);
            }
        }
        for i in 0..ny {
            for j in 0..nx {
                assert!((s[(2 * nx + i, j)] - c[(i, j)]).abs() < 1e-12);
            }
            for j in 0..ny {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s[(2 * nx + i, 2 * nx + j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_one_lti_succeeds() {
        let cs = assemble_lti(2, 1, 1, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        assert!(fp.margin >= 1e-6, "margin {}", fp.margin);
        let (ok, _) = cs.membership(&fp.theta);
        assert!(ok);
    }

    #[test]
    fn phase_one_example_succeeds() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        assert!(fp.margin >= 1e-6);
        let q = cs.s_at(&fp.theta);
        let (lo, _) = eig_extremes(&q).unwrap();
        assert!(lo > 0.0, "returned Gram matrix must be positive definite");
    }

    #[test]
    fn phase_one_infeasible_detected() {
        // S(theta) = diag(theta_0, theta_1) with theta_1 pinned to -1.
        let layout = ThetaLayout {
            n_rho: 2,
            n_p: 0,
            n_q: 0,
        };
        let cols = vec![vec![(0, 0, 1.0)], vec![(1, 1, 1.0)]];
        let map = AffineMap {
            cols,
            s0: DMatrix::zeros(2, 2),
        };
        let rows = vec![(vec![(1usize, 1.0)], -1.0)];
        let cs = ConstraintSystem::finalize(layout, map, rows, MU, Vec::new()).unwrap();
        let mut opts = SolverOptions::default();
        opts.tau_min = 1e-3; // keep the negative test quick
        let err = phase_one(&cs, &opts).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }

    #[test]
    fn membership_examples() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        let (ok, margin) = cs.membership(&fp.theta);
        assert!(ok && margin >= 1e-6);
        // The min-norm particular solution satisfies the equalities but is
        // generically not semidefinite.
        let (ok_star, margin_star) = cs.membership(&cs.theta_star);
        assert!(cs.eq_residual(&cs.theta_star) <= 1e-8);
        assert!(!ok_star && margin_star < 0.0);
    }

    #[test]
    fn membership_boundary_margin_goes_to_zero() {
        // Deflate a feasible Gram matrix along its smallest eigenvector.
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        let q = cs.s_at(&fp.theta);
        let eig = q.clone().symmetric_eigen();
        let (mut lmin, mut idx) = (f64::INFINITY, 0);
        for (i, &v) in eig.eigenvalues.iter().enumerate() {
            if v < lmin {
                lmin = v;
                idx = i;
            }
        }
        let v = eig.eigenvectors.column(idx).into_owned();
        let deflated = &q - (&v * v.transpose()) * lmin;
        let (lo, _) = eig_extremes(&deflated).unwrap();
        assert!(lo.abs() < 1e-8, "deflated margin ~ 0, got {lo}");
    }

    #[test]
    fn sos_soundness_sampled() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        let p = build_contraction_poly(&ms, MU);
        let theta: Vec<f64> = fp.theta.iter().copied().collect();
        let norm_theta = fp.theta.norm();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..5).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let val = p.eval(&theta, &z).unwrap();
            let znorm2: f64 = z.iter().map(|x| x * x).sum();
            let bound = -1e-9 * (1.0 + znorm2 * znorm2 * norm_theta);
            assert!(val >= bound, "p(z) = {val} below {bound}");
        }
    }

    #[test]
    fn lti_membership_implies_spectral_radius() {
        let cs = assemble_lti(2, 1, 1, MU).unwrap();
        let fp = phase_one(&cs, &SolverOptions::default()).unwrap();
        let ms = ModelStructure::lti(2, 1, 1);
        for theta in sample_interior(&cs, &fp, 50, 17) {
            let (ok, _) = cs.membership(&theta);
            assert!(ok);
            let rho = theta.rows(0, ms.n_rho).into_owned();
            let (e, f, _, _, _) = ms.lti_matrices(&rho);
            let a = e.lu().solve(&f).expect("E invertible on the feasible set");
            let sr = crate::linalg::spectral_radius(&a);
            assert!(sr < 1.0, "spectral radius {sr} for a feasible point");
        }
    }

    #[test]
    fn pruning_is_lossless() {
        // The pruned solution embeds into the unpruned system: zero-padding
        // the Gram matrix onto the full candidate basis satisfies the
        // unpruned equalities exactly (the pruned rows were forced to zero).
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let nx = 1 + (seed as usize % 2);
            let spec = crate::models::StructureSpec {
                n_x: nx,
                n_u: 1,
                n_y: 1,
                degrees: crate::models::Degrees {
                    deg_e: [1, 3][rng.random_range(0..2)],
                    deg_fx: [1, 2][rng.random_range(0..2)],
                    deg_fu: 1,
                    deg_g: 1,
                },
                separable_f: true,
                constant_terms: false,
            };
            let ms = ModelStructure::from_spec(&spec);
            let p = build_contraction_poly(&ms, MU);
            let n_xu = ms.n_x + ms.n_u;
            let n_v = 2 * ms.n_x + ms.n_y;
            let pruned = select_basis(&p, n_xu, n_v);
            // Unpruned candidates: same degree bounds, no pruning pass.
            let mut dmax = vec![0u32; n_v];
            for (m, _) in p.terms() {
                let d = m.degree_in(0, n_xu);
                for (i, dm) in dmax.iter_mut().enumerate() {
                    if m.exp(n_xu + i) > 0 {
                        *dm = (*dm).max(d);
                    }
                }
            }
            let mut unpruned: Vec<Monomial> = Vec::new();
            for (i, &d) in dmax.iter().enumerate() {
                let mut mons = monomials_up_to(n_xu, d.div_ceil(2));
                mons.reverse();
                for m in mons {
                    unpruned.push(m.mul(&Monomial::var(n_xu + i)));
                }
            }
            let cs_p = assemble_gram_system(&ms, p.clone(), pruned.clone(), s2v_len(nx), MU).unwrap();
            let fp = match phase_one(&cs_p, &SolverOptions::default()) {
                Ok(fp) => fp,
                Err(_) => continue,
            };
            // Embed.
            let q_small = cs_p.s_at(&fp.theta);
            let pos: Vec<usize> = pruned
                .iter()
                .map(|m| unpruned.iter().position(|c| c == m).unwrap())
                .collect();
            let mut q_big = DMatrix::zeros(unpruned.len(), unpruned.len());
            for (a, &pa) in pos.iter().enumerate() {
                for (b, &pb) in pos.iter().enumerate() {
                    q_big[(pa, pb)] = q_small[(a, b)];
                }
            }
            let cs_u = assemble_gram_system(&ms, p.clone(), unpruned.clone(), s2v_len(nx), MU).unwrap();
            let mut theta_u = DVector::zeros(cs_u.n_theta());
            for i in 0..ms.n_rho + s2v_len(nx) {
                theta_u[i] = fp.theta[i];
            }
            let qv = s2v(&q_big);
            for (i, v) in qv.iter().enumerate() {
                theta_u[ms.n_rho + s2v_len(nx) + i] = *v;
            }
            assert!(
                cs_u.eq_residual(&theta_u) <= 1e-8,
                "embedded point violates unpruned equalities (seed {seed})"
            );
            let (lo, _) = eig_extremes(&cs_u.s_at(&theta_u)).unwrap();
            assert!(lo >= -1e-9, "embedded Gram not PSD");
        }
    }

    #[test]
    fn dump_json_has_fields() {
        let ms = example_scalar_structure();
        let cs = assemble_sos(&ms, MU).unwrap();
        let d = cs.dump_json();
        for key in ["A_e", "b_e", "omega", "A_s", "s0"] {
            assert!(d.get(key).is_some());
        }
    }
}
