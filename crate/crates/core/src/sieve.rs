//! Polynomial sieve regression with a ridge penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{poly_kernel_integrals, KernelOrder, ScaledKernel};
use crate::models::ActionValue;

pub const MAX_DEGREE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    /// Features in `s` only.
    State,
    /// Features in `(s, a)`.
    StateAction,
}

/// Monomial basis of total degree at most `degree`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolySieve {
    arity: Arity,
    degree: usize,
    /// `(power of s, power of a)` per basis function
    exponents: Vec<(usize, usize)>,
}

impl PolySieve {
    pub fn new(arity: Arity, degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "sieve degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        let mut exponents = Vec::new();
        for total in 0..=degree {
            match arity {
                Arity::State => exponents.push((total, 0)),
                Arity::StateAction => {
                    for pa in 0..=total {
                        exponents.push((total - pa, pa));
                    }
                }
            }
        }
        Ok(Self {
            arity,
            degree,
            exponents,
        })
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[(usize, usize)] {
        &self.exponents
    }

    pub fn features_into(&self, s: f64, a: f64, out: &mut [f64]) {
        let mut sp = [1.0; MAX_DEGREE + 1];
        let mut ap = [1.0; MAX_DEGREE + 1];
        for k in 1..=self.degree {
            sp[k] = sp[k - 1] * s;
            ap[k] = ap[k - 1] * a;
        }
        for (o, &(ps, pa)) in out.iter_mut().zip(&self.exponents) {
            *o = sp[ps] * ap[pa];
        }
    }

    pub fn features(&self, s: f64, a: f64) -> Vec<f64> {
        let mut f = vec![0.0; self.len()];
        self.features_into(s, a, &mut f);
        f
    }
}

/// A fitted linear combination of sieve features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveModel {
    pub sieve: PolySieve,
    pub coef: Vec<f64>,
}

impl SieveModel {
    pub fn zero(sieve: PolySieve) -> Self {
        let coef = vec![0.0; sieve.len()];
        Self { sieve, coef }
    }

    pub fn constant(sieve: PolySieve, value: f64) -> Self {
        let mut m = Self::zero(sieve);
        m.coef[0] = value;
        m
    }

    pub fn eval(&self, s: f64, a: f64) -> f64 {
        let mut sp = [1.0; MAX_DEGREE + 1];
        let mut ap = [1.0; MAX_DEGREE + 1];
        for k in 1..=self.sieve.degree {
            sp[k] = sp[k - 1] * s;
            ap[k] = ap[k - 1] * a;
        }
        self.sieve
            .exponents
            .iter()
            .zip(&self.coef)
            .map(|(&(ps, pa), c)| c * sp[ps] * ap[pa])
            .sum()
    }

    pub fn eval_state(&self, s: f64) -> f64 {
        self.eval(s, 0.0)
    }

    /// Coefficients of `a -> f(s, a)` at fixed `s`, constant term first.
    fn action_poly(&self, s: f64) -> [f64; MAX_DEGREE + 1] {
        let mut sp = [1.0; MAX_DEGREE + 1];
        for k in 1..=self.sieve.degree {
            sp[k] = sp[k - 1] * s;
        }
        let mut out = [0.0; MAX_DEGREE + 1];
        for (&(ps, pa), c) in self.sieve.exponents.iter().zip(&self.coef) {
            out[pa] += c * sp[ps];
        }
        out
    }
}

impl ActionValue for SieveModel {
    fn value(&self, s: f64, a: f64) -> f64 {
        self.eval(s, a)
    }

    fn d_action(&self, s: f64, a: f64) -> f64 {
        let p = self.action_poly(s);
        let mut total = 0.0;
        let mut pow = 1.0;
        for (j, c) in p.iter().enumerate().skip(1).take(self.sieve.degree) {
            total += j as f64 * c * pow;
            pow *= a;
        }
        total
    }

    fn smooth(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        let p = self.action_poly(s);
        poly_kernel_integrals(&p[..=self.sieve.degree], center, kernel, KernelOrder::Value)
    }

    fn smooth_d1(&self, s: f64, center: f64, kernel: &ScaledKernel) -> f64 {
        let p = self.action_poly(s);
        poly_kernel_integrals(&p[..=self.sieve.degree], center, kernel, KernelOrder::Derivative)
    }
}

/// Accumulated ridge normal equations `(X'X + lambda I) b = X'y` for a shared
/// design and several responses.
pub struct RidgeProblem {
    sieve: PolySieve,
    gram: DMatrix<f64>,
    rhs: Vec<DVector<f64>>,
    rows: usize,
    buf: Vec<f64>,
}

impl RidgeProblem {
    pub fn new(sieve: PolySieve, responses: usize) -> Self {
        let p = sieve.len();
        Self {
            gram: DMatrix::zeros(p, p),
            rhs: vec![DVector::zeros(p); responses],
            rows: 0,
            buf: vec![0.0; p],
            sieve,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Adds one observation with one response per target.
    pub fn push(&mut self, s: f64, a: f64, ys: &[f64]) {
        debug_assert_eq!(ys.len(), self.rhs.len());
        self.sieve.features_into(s, a, &mut self.buf);
        let p = self.buf.len();
        for i in 0..p {
            let fi = self.buf[i];
            for j in i..p {
                self.gram[(i, j)] += fi * self.buf[j];
            }
        }
        for (r, &y) in self.rhs.iter_mut().zip(ys) {
            for i in 0..p {
                r[i] += self.buf[i] * y;
            }
        }
        self.rows += 1;
    }

    /// Solves for every response. `ridge` is the absolute penalty added to
    /// the diagonal.
    pub fn solve(self, ridge: f64, context: &str) -> Result<Vec<SieveModel>> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        let p = self.sieve.len();
        let mut gram = self.gram;
        for i in 0..p {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        let max_diag = (0..p).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        let singular = || Error::Singular {
            context: context.to_string(),
        };
        let chol = gram.clone().cholesky().ok_or_else(singular)?;
        let l = chol.l_dirty();
        let scale = (max_diag + ridge).max(f64::MIN_POSITIVE);
        if (0..p).any(|i| !(l[(i, i)] * l[(i, i)] > 1e-13 * scale)) {
            return Err(singular());
        }
        self.rhs
            .into_iter()
            .map(|r| {
                let b = chol.solve(&r);
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(singular());
                }
                Ok(SieveModel {
                    sieve: self.sieve.clone(),
                    coef: b.iter().copied().collect(),
                })
            })
            .collect()
    }
}

/// Ridge fit of a single response on sieve features of `(s, a)` pairs.
pub fn fit(sieve: &PolySieve, inputs: &[(f64, f64)], targets: &[f64], ridge: f64) -> Result<SieveModel> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidArgument("inputs and targets differ in length".into()));
    }
    let mut prob = RidgeProblem::new(sieve.clone(), 1);
    for (&(s, a), &y) in inputs.iter().zip(targets) {
        prob.push(s, a, &[y]);
    }
    Ok(prob.solve(ridge, "sieve fit")?.remove(0))
}
