//! Polynomial control systems with polynomial-feature Gaussian policies:
//! exact estimator moments and NSR by symbolic propagation and Gaussian
//! moment evaluation.
//!
//! The dynamics are `s_{t+1} = P(s_t, a_t)` for a polynomial map `P`,
//! reward `r(s_{t+1}, a_t)` polynomial in the successor state and
//! action, and policy `a = mu(s) + eps` with
//! `mu_j(s) = sum_k theta[k][j] Phi[k][j](s)` over polynomial features
//! and `eps ~ N(0, Sigma)`, `Sigma = diag(exp(2 ell))`. Every state,
//! action, reward, and estimator entry is then a polynomial in the
//! stacked noise vector `xi = (s_0, eps_0, ..., eps_{T-1})`, whose
//! coordinates are independent zero-mean Gaussians, so every moment the
//! NSR needs is exactly computable.

mod multi_poly;
mod propagate;
mod quadrature;

pub use multi_poly::{MultiPoly, MAX_EXPONENT, PRUNE_EPS};
pub use propagate::{
    estimator_polys, linear_as_poly_system, propagate, EstimatorPolys, Trajectory,
};
pub use quadrature::{poly_nsr, poly_objective_and_grads};

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{DiagCov, Mat};
use crate::moments::{gaussian_monomial_moment, MultiIndex};

/// Default cap on the propagated state degree. Sized so the benchmark
/// horizons fit exactly: the quadratic system reaches degree `2^6 = 64`
/// at `T = 6` and the cubic system degree `3^3 = 27` at `T = 3`.
pub const DEFAULT_DEGREE_CAP: usize = 64;

/// Polynomial system: dynamics, reward, policy features, horizon, and
/// the two diagonal noise covariances.
#[derive(Clone, Debug)]
pub struct PolySystem {
    state_dim: usize,
    action_dim: usize,
    /// One polynomial per state coordinate, over `(s, a)` stacked as
    /// `n + m` variables.
    transition: Vec<MultiPoly>,
    /// Reward polynomial over `(s, a)`, applied to `(s_{t+1}, a_t)`.
    reward: MultiPoly,
    /// Feature matrix: `features[k][j]` is a polynomial in the `n` state
    /// variables; output `j` of the policy mean is
    /// `sum_k theta[k][j] features[k][j](s)`.
    features: Vec<Vec<MultiPoly>>,
    horizon_t: usize,
    gamma: f64,
    sigma0: DiagCov,
    sigma: DiagCov,
    degree_cap: usize,
}

impl PolySystem {
    /// Validates dimensions and ranges. `sigma0` fixes the state
    /// dimension and `sigma` the action dimension; every polynomial is
    /// checked against them. The degree cap also bounds what one byte
    /// per exponent can hold.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        transition: Vec<MultiPoly>,
        reward: MultiPoly,
        features: Vec<Vec<MultiPoly>>,
        horizon_t: usize,
        gamma: f64,
        sigma0: DiagCov,
        sigma: DiagCov,
        degree_cap: usize,
    ) -> Result<Self> {
        let n = sigma0.dim();
        let m = sigma.dim();
        if transition.len() != n {
            return Err(Error::Dim(format!(
                "{} transition polynomials for state dimension {n}",
                transition.len()
            )));
        }
        for (i, p) in transition.iter().enumerate() {
            if p.num_vars() != n + m {
                return Err(Error::Dim(format!(
                    "transition polynomial {i} has {} variables, expected n + m = {}",
                    p.num_vars(),
                    n + m
                )));
            }
        }
        if reward.num_vars() != n + m {
            return Err(Error::Dim(format!(
                "reward polynomial has {} variables, expected n + m = {}",
                reward.num_vars(),
                n + m
            )));
        }
        for (k, row) in features.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dim(format!(
                    "feature row {k} has {} columns, action dimension is {m}",
                    row.len()
                )));
            }
            for (j, p) in row.iter().enumerate() {
                if p.num_vars() != n {
                    return Err(Error::Dim(format!(
                        "feature ({k}, {j}) has {} variables, state dimension is {n}",
                        p.num_vars()
                    )));
                }
            }
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if degree_cap == 0 || degree_cap > MAX_EXPONENT {
            return Err(Error::Config(format!(
                "degree cap must lie in 1..={MAX_EXPONENT}, got {degree_cap}"
            )));
        }
        Ok(Self {
            state_dim: n,
            action_dim: m,
            transition,
            reward,
            features,
            horizon_t,
            gamma,
            sigma0,
            sigma,
            degree_cap,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Number of feature rows `d`; policy parameters are `d x m`.
    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }

    pub fn transition(&self) -> &[MultiPoly] {
        &self.transition
    }

    pub fn reward(&self) -> &MultiPoly {
        &self.reward
    }

    pub fn features(&self) -> &[Vec<MultiPoly>] {
        &self.features
    }

    pub fn horizon_t(&self) -> usize {
        self.horizon_t
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma0(&self) -> &DiagCov {
        &self.sigma0
    }

    pub fn sigma(&self) -> &DiagCov {
        &self.sigma
    }

    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    /// Number of variables in the stacked noise space
    /// `xi = (s_0, eps_0, ..., eps_{T-1})`.
    pub fn xi_dim(&self) -> usize {
        self.state_dim + self.action_dim * self.horizon_t
    }

    /// Per-coordinate variances of `xi`: `sigma0` then `sigma` repeated
    /// once per step.
    pub fn xi_cov(&self) -> DiagCov {
        let mut vars = self.sigma0.vars().to_vec();
        for _ in 0..self.horizon_t {
            vars.extend_from_slice(self.sigma.vars());
        }
        DiagCov::new(vars).expect("xi covariance built from validated parts")
    }

    /// Same system with a different horizon.
    pub fn with_horizon(&self, horizon_t: usize) -> Self {
        let mut out = self.clone();
        out.horizon_t = horizon_t;
        out
    }

    /// Same system with a different reward polynomial over
    /// `(next_state, action)`.
    pub fn with_reward(&self, reward: MultiPoly) -> Result<Self> {
        if reward.num_vars() != self.state_dim + self.action_dim {
            return Err(Error::Dim(format!(
                "reward reads {} variables, expected state + action = {}",
                reward.num_vars(),
                self.state_dim + self.action_dim
            )));
        }
        let mut out = self.clone();
        out.reward = reward;
        Ok(out)
    }

    /// Same system with a different action-noise covariance. The NSR
    /// entry point uses this to keep the noise consistent with the
    /// policy's log-std parameters.
    pub fn with_sigma(&self, sigma: DiagCov) -> Result<Self> {
        if sigma.dim() != self.action_dim {
            return Err(Error::Dim(format!(
                "sigma has {} entries, action dimension is {}",
                sigma.dim(),
                self.action_dim
            )));
        }
        let mut out = self.clone();
        out.sigma = sigma;
        Ok(out)
    }
}

/// Policy parameters for the polynomial-feature Gaussian policy:
/// feature gains `theta` (`d x m`) and per-action log standard
/// deviations `ell`.
#[derive(Clone, Debug, Serialize)]
pub struct PolyPolicyParams {
    theta: Mat,
    ell: Vec<f64>,
}

#[derive(Deserialize)]
struct PolyPolicyParamsRepr {
    theta: Mat,
    ell: Vec<f64>,
}

impl<'de> Deserialize<'de> for PolyPolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = PolyPolicyParamsRepr::deserialize(de)?;
        PolyPolicyParams::new(r.theta, r.ell).map_err(serde::de::Error::custom)
    }
}

impl PolyPolicyParams {
    pub fn new(theta: Mat, ell: Vec<f64>) -> Result<Self> {
        if theta.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        if ell.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ell".into()));
        }
        Ok(Self { theta, ell })
    }

    pub fn theta(&self) -> &Mat {
        &self.theta
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    /// `Sigma = diag(exp(2 ell))`.
    pub fn sigma(&self) -> DiagCov {
        DiagCov::new(self.ell.iter().map(|l| (2.0 * l).exp()).collect())
            .expect("exp(2 ell) entries are positive and finite")
    }

    /// Checks the parameter shapes against a system.
    pub fn check_dims(&self, sys: &PolySystem) -> Result<()> {
        let (d, m) = (sys.feature_dim(), sys.action_dim());
        if self.theta.rows() != d || self.theta.cols() != m {
            return Err(Error::Dim(format!(
                "theta is {}x{}, system wants {d}x{m}",
                self.theta.rows(),
                self.theta.cols()
            )));
        }
        if self.ell.len() != m {
            return Err(Error::Dim(format!(
                "ell has {} entries, action dimension is {m}",
                self.ell.len()
            )));
        }
        Ok(())
    }
}

/// Exact expectation of a polynomial in `xi` under the system's noise
/// distribution: sum of coefficient times the product of per-coordinate
/// Gaussian moments. Linear in the polynomial; exactly zero on
/// odd-total-degree terms.
pub fn expect(p: &MultiPoly, sys: &PolySystem) -> Result<f64> {
    let cov = sys.xi_cov();
    if p.num_vars() != cov.dim() {
        return Err(Error::Dim(format!(
            "polynomial over {} variables, xi space has {}",
            p.num_vars(),
            cov.dim()
        )));
    }
    let mut total = 0.0;
    for (key, coef) in p.terms() {
        let alpha = MultiIndex::new(key.iter().map(|&e| e as usize).collect());
        total += coef * gaussian_monomial_moment(&alpha, &cov)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exp: Vec<usize>,
    coef: f64,
}

fn poly_to_terms(p: &MultiPoly) -> Vec<TermRepr> {
    p.terms()
        .map(|(key, coef)| TermRepr { exp: key.iter().map(|&e| e as usize).collect(), coef })
        .collect()
}

fn poly_from_terms(num_vars: usize, terms: Vec<TermRepr>, what: &str) -> Result<MultiPoly> {
    for t in &terms {
        if t.exp.len() != num_vars {
            return Err(Error::Dim(format!(
                "{what}: term exponent vector has {} entries, expected {num_vars}",
                t.exp.len()
            )));
        }
    }
    MultiPoly::from_terms(num_vars, terms.into_iter().map(|t| (t.exp, t.coef)))
}

impl Serialize for PolySystem {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = ser.serialize_struct("PolySystem", 10)?;
        s.serialize_field("state_dim", &self.state_dim)?;
        s.serialize_field("action_dim", &self.action_dim)?;
        s.serialize_field(
            "transition",
            &self.transition.iter().map(poly_to_terms).collect::<Vec<_>>(),
        )?;
        s.serialize_field("reward", &poly_to_terms(&self.reward))?;
        s.serialize_field(
            "features",
            &self
                .features
                .iter()
                .map(|row| row.iter().map(poly_to_terms).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )?;
        s.serialize_field("T", &self.horizon_t)?;
        s.serialize_field("gamma", &self.gamma)?;
        s.serialize_field("Sigma0", &self.sigma0)?;
        s.serialize_field("Sigma", &self.sigma)?;
        s.serialize_field("degree_cap", &self.degree_cap)?;
        s.end()
    }
}

#[derive(Deserialize)]
struct PolySystemRepr {
    transition: Vec<Vec<TermRepr>>,
    reward: Vec<TermRepr>,
    features: Vec<Vec<Vec<TermRepr>>>,
    #[serde(rename = "T")]
    horizon_t: usize,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(rename = "Sigma0")]
    sigma0: DiagCov,
    #[serde(rename = "Sigma")]
    sigma: DiagCov,
    #[serde(default = "default_degree_cap")]
    degree_cap: usize,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_degree_cap() -> usize {
    DEFAULT_DEGREE_CAP
}

impl<'de> Deserialize<'de> for PolySystem {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = PolySystemRepr::deserialize(de)?;
        let n = r.sigma0.dim();
        let m = r.sigma.dim();
        let build = || -> Result<PolySystem> {
            let transition = r
                .transition
                .into_iter()
                .map(|t| poly_from_terms(n + m, t, "transition"))
                .collect::<Result<Vec<_>>>()?;
            let reward = poly_from_terms(n + m, r.reward, "reward")?;
            let features = r
                .features
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|t| poly_from_terms(n, t, "features"))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            PolySystem::new(
                transition,
                reward,
                features,
                r.horizon_t,
                r.gamma,
                r.sigma0,
                r.sigma,
                r.degree_cap,
            )
        };
        build().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------
// Built-in benchmark systems
// ---------------------------------------------------------------------

/// Named built-in systems with their reference policy parameters.
pub const BUILTIN_POLY_SYSTEMS: [&str; 2] = ["quadratic-1d", "cubic-1d"];

/// Scalar benchmark systems.
///
/// `quadratic-1d`: `s' = s + 0.05 (-s^2 + a)`, reward `-s'^2 - a^2`,
/// features `(s, s^2)`, horizon 6. `cubic-1d`: `s' = s + 0.05 (-s^3 + a)`,
/// reward `-1.25 s'^6 - a^2`, features `(s, s^3)`, horizon 3. Both use
/// `Sigma0 = 0.1`, `gamma = 1`, and start from `theta = 0` with noise
/// `sigma = 0.3`.
pub fn builtin_poly_system(name: &str) -> Result<(PolySystem, PolyPolicyParams)> {
    let h = 0.05;
    let s = MultiPoly::var(2, 0)?;
    let a = MultiPoly::var(2, 1)?;
    let sigma = 0.3f64;
    let (transition, reward, features, horizon) = match name {
        "quadratic-1d" => {
            // s + h (-s^2 + a)
            let trans = s.add(&s.mul(&s, DEFAULT_DEGREE_CAP)?.scale(-h))?.add(&a.scale(h))?;
            // -(s^2 + a^2) on (s_{t+1}, a_t)
            let rew = s
                .mul(&s, DEFAULT_DEGREE_CAP)?
                .scale(-1.0)
                .add(&a.mul(&a, DEFAULT_DEGREE_CAP)?.scale(-1.0))?;
            let phi1 = MultiPoly::var(1, 0)?;
            let phi2 = phi1.mul(&phi1, DEFAULT_DEGREE_CAP)?;
            (vec![trans], rew, vec![vec![phi1], vec![phi2]], 6)
        }
        "cubic-1d" => {
            let s3 = s.pow(3, DEFAULT_DEGREE_CAP)?;
            let trans = s.add(&s3.scale(-h))?.add(&a.scale(h))?;
            // -(1.25 s^6 + a^2) on (s_{t+1}, a_t)
            let rew = s
                .pow(6, DEFAULT_DEGREE_CAP)?
                .scale(-1.25)
                .add(&a.mul(&a, DEFAULT_DEGREE_CAP)?.scale(-1.0))?;
            let phi1 = MultiPoly::var(1, 0)?;
            let phi3 = phi1.pow(3, DEFAULT_DEGREE_CAP)?;
            (vec![trans], rew, vec![vec![phi1], vec![phi3]], 3)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown polynomial system '{other}'; available: {BUILTIN_POLY_SYSTEMS:?}"
            )));
        }
    };
    let sys = PolySystem::new(
        transition,
        reward,
        features,
        horizon,
        1.0,
        DiagCov::new(vec![0.1])?,
        DiagCov::isotropic(1, sigma * sigma)?,
        DEFAULT_DEGREE_CAP,
    )?;
    let params = PolyPolicyParams::new(Mat::zeros(2, 1), vec![sigma.ln()])?;
    Ok((sys, params))
}
