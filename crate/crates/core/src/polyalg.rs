//! Sparse multivariate polynomial algebra over indexed variables with
//! coefficients that are affine functions of a parameter vector theta.
//!
//! Variables are indexed in the fixed order (x_1..x_nx, u_1..u_nu,
//! v_1..v_{2nx+ny}); monomials are ordered graded-lexicographically so that
//! derived constraint rows are reproducible bit-for-bit across runs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// A power product of variables. No zero exponents are stored; the empty map
/// is the constant monomial 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    exps: BTreeMap<usize, u32>,
}

impl Monomial {
    pub fn one() -> Self {
        Monomial::default()
    }

    pub fn var(v: usize) -> Self {
        Monomial::from_pairs(&[(v, 1)])
    }

    pub fn from_pairs(pairs: &[(usize, u32)]) -> Self {
        let mut exps = BTreeMap::new();
        for &(v, e) in pairs {
            if e > 0 {
                *exps.entry(v).or_insert(0) += e;
            }
        }
        Monomial { exps }
    }

    pub fn degree(&self) -> u32 {
        self.exps.values().sum()
    }

    /// Total degree restricted to variables in [lo, hi).
    pub fn degree_in(&self, lo: usize, hi: usize) -> u32 {
        self.exps
            .iter()
            .filter(|(v, _)| **v >= lo && **v < hi)
            .map(|(_, e)| *e)
            .sum()
    }

    pub fn exp(&self, v: usize) -> u32 {
        self.exps.get(&v).copied().unwrap_or(0)
    }

    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = usize> + '_ {
        self.exps.keys().copied()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut exps = self.exps.clone();
        for (&v, &e) in &other.exps {
            *exps.entry(v).or_insert(0) += e;
        }
        Monomial { exps }
    }

    pub fn square(&self) -> Monomial {
        let exps = self.exps.iter().map(|(&v, &e)| (v, 2 * e)).collect();
        Monomial { exps }
    }

    /// Formal partial derivative: returns (exponent, m / var) or None if the
    /// variable does not occur.
    pub fn partial(&self, v: usize) -> Option<(u32, Monomial)> {
        let e = self.exp(v);
        if e == 0 {
            return None;
        }
        let mut exps = self.exps.clone();
        if e == 1 {
            exps.remove(&v);
        } else {
            exps.insert(v, e - 1);
        }
        Some((e, Monomial { exps }))
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        let mut acc = 1.0;
        for (&v, &e) in &self.exps {
            let x = *point.get(v).ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "monomial uses variable {v} but point has length {}",
                    point.len()
                ))
            })?;
            acc *= x.powi(e as i32);
        }
        Ok(acc)
    }

    pub fn exponent_list(&self) -> Vec<(usize, u32)> {
        self.exps.iter().map(|(&v, &e)| (v, e)).collect()
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: lower total degree first; within a degree, the
    /// monomial with the larger exponent on the earliest differing variable
    /// comes first (so x1^2 < x1 x2 < x2^2).
    fn cmp(&self, other: &Self) -> Ordering {
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        let vars: BTreeSet<usize> = self.vars().chain(other.vars()).collect();
        for v in vars {
            let (a, b) = (self.exp(v), other.exp(v));
            if a != b {
                return b.cmp(&a);
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (&v, &e) in &self.exps {
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "z{v}")?;
            } else {
                write!(f, "z{v}^{e}")?;
            }
        }
        Ok(())
    }
}

/// All monomials in variables 0..n_vars of total degree <= degree, in graded
/// lexicographic order. The count equals C(n_vars + degree, degree).
pub fn monomials_up_to(n_vars: usize, degree: u32) -> Vec<Monomial> {
    assert!(n_vars >= 1, "monomials_up_to requires n_vars >= 1");
    let mut out = Vec::new();
    let mut exps = vec![0u32; n_vars];
    enumerate_rec(&mut out, &mut exps, 0, degree);
    out.sort();
    out
}

fn enumerate_rec(out: &mut Vec<Monomial>, exps: &mut [u32], var: usize, budget: u32) {
    if var == exps.len() {
        let pairs: Vec<(usize, u32)> = exps
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(v, &e)| (v, e))
            .collect();
        out.push(Monomial::from_pairs(&pairs));
        return;
    }
    for e in 0..=budget {
        exps[var] = e;
        enumerate_rec(out, exps, var + 1, budget - e);
    }
    exps[var] = 0;
}

/// A coefficient c(theta) = constant + sum_i weight_i * theta_i.
/// Exact zero entries are never stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineCoeff {
    pub constant: f64,
    pub linear: BTreeMap<usize, f64>,
}

impl AffineCoeff {
    pub fn constant(c: f64) -> Self {
        AffineCoeff {
            constant: c,
            linear: BTreeMap::new(),
        }
    }

    pub fn param(idx: usize, weight: f64) -> Self {
        let mut linear = BTreeMap::new();
        if weight != 0.0 {
            linear.insert(idx, weight);
        }
        AffineCoeff {
            constant: 0.0,
            linear,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.linear.is_empty()
    }

    pub fn is_const(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn add_assign(&mut self, other: &AffineCoeff) {
        self.constant += other.constant;
        for (&i, &w) in &other.linear {
            let e = self.linear.entry(i).or_insert(0.0);
            *e += w;
            if *e == 0.0 {
                self.linear.remove(&i);
            }
        }
    }

    pub fn scale(&self, s: f64) -> AffineCoeff {
        if s == 0.0 {
            return AffineCoeff::default();
        }
        AffineCoeff {
            constant: self.constant * s,
            linear: self.linear.iter().map(|(&i, &w)| (i, w * s)).collect(),
        }
    }

    pub fn eval(&self, theta: &[f64]) -> Result<f64> {
        let mut acc = self.constant;
        for (&i, &w) in &self.linear {
            let t = *theta.get(i).ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "coefficient uses theta[{i}] but theta has length {}",
                    theta.len()
                ))
            })?;
            acc += w * t;
        }
        Ok(acc)
    }
}

/// Sparse polynomial in canonical form: terms with identically-zero affine
/// coefficients are removed after every operation, and two polynomials are
/// equal iff their term maps are equal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, AffineCoeff>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(Monomial::one(), AffineCoeff::constant(c));
        p
    }

    /// weight * theta_idx * monomial
    pub fn param_term(m: Monomial, idx: usize, weight: f64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(m, AffineCoeff::param(idx, weight));
        p
    }

    /// c * monomial with a constant coefficient.
    pub fn const_term(m: Monomial, c: f64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(m, AffineCoeff::constant(c));
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: AffineCoeff) {
        if c.is_zero() {
            return;
        }
        let e = self.terms.entry(m.clone()).or_default();
        e.add_assign(&c);
        if e.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn add_assign(&mut self, other: &Polynomial) {
        for (m, c) in &other.terms {
            self.add_term(m.clone(), c.clone());
        }
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.scale(-1.0));
        }
        out
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c.scale(s));
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, m: &Monomial) -> AffineCoeff {
        self.terms.get(m).cloned().unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffineCoeff)> {
        self.terms.iter()
    }

    pub fn support(&self) -> impl Iterator<Item = &Monomial> {
        self.terms.keys()
    }

    /// True iff no coefficient depends on theta.
    pub fn is_const_coeff(&self) -> bool {
        self.terms.values().all(|c| c.is_const())
    }

    /// Highest total degree over the variable range [lo, hi).
    pub fn max_degree_in(&self, lo: usize, hi: usize) -> u32 {
        self.terms
            .keys()
            .map(|m| m.degree_in(lo, hi))
            .max()
            .unwrap_or(0)
    }

    /// Product p * q where p must have purely constant coefficients;
    /// otherwise the product would be quadratic in theta.
    pub fn mul(&self, q: &Polynomial) -> Result<Polynomial> {
        let (c, v) = if self.is_const_coeff() {
            (self, q)
        } else if q.is_const_coeff() {
            (q, self)
        } else {
            return Err(Error::NonAffineProduct);
        };
        let mut out = Polynomial::zero();
        for (mc, cc) in &c.terms {
            for (mv, cv) in &v.terms {
                out.add_term(mc.mul(mv), cv.scale(cc.constant));
            }
        }
        Ok(out)
    }

    /// Formal partial derivative with respect to a variable.
    pub fn partial(&self, var: usize) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            if let Some((e, m2)) = m.partial(var) {
                out.add_term(m2, c.scale(e as f64));
            }
        }
        out
    }

    /// Substitute theta into the coefficients, then evaluate at a point.
    pub fn eval(&self, theta: &[f64], point: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            acc += c.eval(theta)? * m.eval(point)?;
        }
        Ok(acc)
    }

    /// Evaluate with theta fixed to the coefficient constants (requires
    /// constant coefficients in debug builds, used for fixed model parts).
    pub fn eval_const(&self, point: &[f64]) -> Result<f64> {
        debug_assert!(self.is_const_coeff());
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            acc += c.constant * m.eval(point)?;
        }
        Ok(acc)
    }
}

/// One linear equation over theta: row . theta = rhs, with the row stored as
/// sorted (index, weight) pairs.
pub type EqRow = (Vec<(usize, f64)>, f64);

/// Equate coefficients of two polynomials monomial by monomial.
///
/// Returns one equation per monomial in the union of supports, asserting
/// lhs_coeff(theta) = rhs_coeff(theta), in graded-lex order. Trivial 0 = 0
/// rows are pruned; an inconsistent 0 = c row is kept so that rank checks can
/// flag it downstream.
pub fn coeff_match(lhs: &Polynomial, rhs: &Polynomial) -> Vec<EqRow> {
    let monos: BTreeSet<&Monomial> = lhs.support().chain(rhs.support()).collect();
    let mut rows = Vec::new();
    for m in monos {
        let l = lhs.coeff(m);
        let r = rhs.coeff(m);
        let mut diff = l.clone();
        diff.add_assign(&r.scale(-1.0));
        let rhs_const = r.constant - l.constant;
        let row: Vec<(usize, f64)> = diff.linear.iter().map(|(&i, &w)| (i, w)).collect();
        if row.is_empty() && rhs_const == 0.0 {
            continue;
        }
        rows.push((row, rhs_const));
    }
    rows
}
