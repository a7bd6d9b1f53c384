//! Sparse multivariate polynomial arithmetic over `f64` coefficients.
//!
//! A polynomial is a map from exponent vectors to coefficients. Exponents
//! are stored one byte per variable, which bounds every per-variable
//! exponent at 255, comfortably above the propagation degree cap. The
//! `BTreeMap` key order makes every iteration, and therefore every
//! reduction built on top, deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Coefficients with absolute value below this are dropped after every
/// operation. Far below double-precision relevance; keeps exact-zero
/// cancellations from inflating the term count.
pub const PRUNE_EPS: f64 = 1e-30;

/// Hard per-variable exponent limit imposed by the byte-packed keys.
pub const MAX_EXPONENT: usize = u8::MAX as usize;

/// A sparse polynomial over a fixed number of variables.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiPoly {
    num_vars: usize,
    terms: BTreeMap<Vec<u8>, f64>,
}

impl MultiPoly {
    /// The zero polynomial.
    pub fn zero(num_vars: usize) -> Self {
        Self { num_vars, terms: BTreeMap::new() }
    }

    /// A constant polynomial.
    pub fn constant(num_vars: usize, c: f64) -> Self {
        let mut p = Self::zero(num_vars);
        if c.abs() >= PRUNE_EPS {
            p.terms.insert(vec![0; num_vars], c);
        }
        p
    }

    /// The polynomial `x_index`.
    pub fn var(num_vars: usize, index: usize) -> Result<Self> {
        if index >= num_vars {
            return Err(Error::Dim(format!(
                "variable index {index} out of range for {num_vars} variables"
            )));
        }
        let mut key = vec![0u8; num_vars];
        key[index] = 1;
        let mut p = Self::zero(num_vars);
        p.terms.insert(key, 1.0);
        Ok(p)
    }

    /// A single monomial `coef * prod_i x_i^{exps[i]}`.
    pub fn monomial(num_vars: usize, exps: &[usize], coef: f64) -> Result<Self> {
        if exps.len() != num_vars {
            return Err(Error::Dim(format!(
                "exponent vector has {} entries for {} variables",
                exps.len(),
                num_vars
            )));
        }
        if !coef.is_finite() {
            return Err(Error::NonFinite("monomial coefficient".into()));
        }
        let mut key = vec![0u8; num_vars];
        for (slot, &e) in key.iter_mut().zip(exps) {
            if e > MAX_EXPONENT {
                return Err(Error::MonomialDegreeExceeded { degree: e, max: MAX_EXPONENT });
            }
            *slot = e as u8;
        }
        let mut p = Self::zero(num_vars);
        if coef.abs() >= PRUNE_EPS {
            p.terms.insert(key, coef);
        }
        Ok(p)
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs,
    /// accumulating duplicates.
    pub fn from_terms<I>(num_vars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<usize>, f64)>,
    {
        let mut acc = Self::zero(num_vars);
        for (exps, coef) in terms {
            let one = Self::monomial(num_vars, &exps, coef)?;
            acc = acc.add(&one)?;
        }
        Ok(acc)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms in deterministic (lexicographic key) order.
    pub fn terms(&self) -> impl Iterator<Item = (&[u8], f64)> {
        self.terms.iter().map(|(k, &c)| (k.as_slice(), c))
    }

    /// Coefficient of the given monomial (zero when absent).
    pub fn coef(&self, exps: &[usize]) -> f64 {
        if exps.len() != self.num_vars || exps.iter().any(|&e| e > MAX_EXPONENT) {
            return 0.0;
        }
        let key: Vec<u8> = exps.iter().map(|&e| e as u8).collect();
        self.terms.get(&key).copied().unwrap_or(0.0)
    }

    /// Largest total degree over all terms (zero polynomial gives 0).
    pub fn total_degree(&self) -> usize {
        self.terms.keys().map(|k| key_degree(k)).max().unwrap_or(0)
    }

    /// Largest exponent of variable `i` over all terms.
    pub fn var_degree(&self, i: usize) -> usize {
        self.terms.keys().map(|k| k[i] as usize).max().unwrap_or(0)
    }

    fn check_vars(&self, rhs: &Self) -> Result<()> {
        if self.num_vars != rhs.num_vars {
            return Err(Error::Dim(format!(
                "polynomials over {} and {} variables",
                self.num_vars, rhs.num_vars
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.check_vars(rhs)?;
        let mut terms = self.terms.clone();
        for (k, &c) in &rhs.terms {
            *terms.entry(k.clone()).or_insert(0.0) += c;
        }
        terms.retain(|_, c| c.abs() >= PRUNE_EPS);
        Ok(Self { num_vars: self.num_vars, terms })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        for (k, &v) in &self.terms {
            let cv = c * v;
            if cv.abs() >= PRUNE_EPS {
                terms.insert(k.clone(), cv);
            }
        }
        Self { num_vars: self.num_vars, terms }
    }

    /// Product, rejecting any produced monomial whose total degree would
    /// exceed `degree_cap` (checked before accumulation, so cancellation
    /// cannot hide a breach). The byte-packed keys additionally bound the
    /// cap at [`MAX_EXPONENT`].
    pub fn mul(&self, rhs: &Self, degree_cap: usize) -> Result<Self> {
        self.check_vars(rhs)?;
        let cap = degree_cap.min(MAX_EXPONENT);
        let mut terms: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
        for (ka, &ca) in &self.terms {
            let da = key_degree(ka);
            for (kb, &cb) in &rhs.terms {
                let degree = da + key_degree(kb);
                if degree > cap {
                    return Err(Error::DegreeCapExceeded { degree, cap, step: 0 });
                }
                let key: Vec<u8> = ka.iter().zip(kb).map(|(&a, &b)| a + b).collect();
                *terms.entry(key).or_insert(0.0) += ca * cb;
            }
        }
        terms.retain(|_, c| c.abs() >= PRUNE_EPS);
        Ok(Self { num_vars: self.num_vars, terms })
    }

    /// Integer power by a multiplication ladder (keeps intermediate
    /// degrees monotone for cap bookkeeping).
    pub fn pow(&self, e: usize, degree_cap: usize) -> Result<Self> {
        let mut acc = Self::constant(self.num_vars, 1.0);
        for _ in 0..e {
            acc = acc.mul(self, degree_cap)?;
        }
        Ok(acc)
    }

    /// Substitutes `map[i]` for variable `i`. All replacement polynomials
    /// must share one target variable space; powers of each replacement
    /// are memoized across terms.
    pub fn substitute(&self, map: &[Self], degree_cap: usize) -> Result<Self> {
        if map.len() != self.num_vars {
            return Err(Error::Dim(format!(
                "substitution map has {} polynomials for {} variables",
                map.len(),
                self.num_vars
            )));
        }
        let target_vars = match map.first() {
            Some(p) => p.num_vars,
            None => {
                return Err(Error::Dim("substitution into an empty variable space".into()));
            }
        };
        for p in map {
            if p.num_vars != target_vars {
                return Err(Error::Dim(format!(
                    "substitution map mixes {} and {} target variables",
                    target_vars, p.num_vars
                )));
            }
        }

        // pows[i][e] = map[i]^e, built on demand.
        let one = Self::constant(target_vars, 1.0);
        let mut pows: Vec<Vec<Self>> = vec![vec![one.clone()]; map.len()];
        let mut acc = Self::zero(target_vars);
        for (key, &c) in &self.terms {
            let mut term = Self::constant(target_vars, c);
            for (i, &e) in key.iter().enumerate() {
                let e = e as usize;
                while pows[i].len() <= e {
                    let next = pows[i].last().unwrap().mul(&map[i], degree_cap)?;
                    pows[i].push(next);
                }
                term = term.mul(&pows[i][e], degree_cap)?;
            }
            acc = acc.add(&term)?;
        }
        Ok(acc)
    }

    /// Numeric evaluation at a point.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_vars {
            return Err(Error::Dim(format!(
                "evaluation point has {} coordinates for {} variables",
                x.len(),
                self.num_vars
            )));
        }
        let mut total = 0.0;
        for (key, &c) in &self.terms {
            let mut term = c;
            for (&e, &xi) in key.iter().zip(x) {
                if e > 0 {
                    term *= xi.powi(e as i32);
                }
            }
            total += term;
        }
        Ok(total)
    }
}

fn key_degree(key: &[u8]) -> usize {
    key.iter().map(|&e| e as usize).sum()
}
