//! Nonlinear environments, differentiable Gaussian policies, and the
//! variance upper bound for sampled gradients.
//!
//! The closed loop is `s_{t+1} = f(s_t, a_t)` with
//! `a_t = mu_theta(s_t) + eps_t`, `eps_t ~ N(0, Sigma)`. All
//! stochasticity lives in the policy noise and the initial draw;
//! environments are deterministic maps. Exact estimator moments are out
//! of reach here, so the module provides one unbiased estimator sample
//! per rollout and assembled upper bounds on the estimator's
//! conditional second moments.

mod bound;
mod mlp;

pub use bound::{second_moment_bounds, InitialCondition};
pub use bound::{assemble_gain_bound, assemble_log_std_bound, BoundReport};
pub use mlp::{fd_param_jacobian, MlpPolicy};

use crate::error::{Error, Result};
use crate::lqg::{GaussianLinearPolicy, LinearSystem};
use crate::mat::{cholesky_semidefinite, DiagCov, Mat};
use crate::poly::{MultiPoly, PolyPolicyParams, PolySystem};
use crate::rng::{standard_normal, INIT_STATE_STEP};

/// A deterministic control system: dynamics, reward on the successor
/// state, and an initial-state distribution.
///
/// `step` and `reward` are pure functions; the initial draw is
/// deterministic in `(seed, rollout)` through the counter-based
/// streams, so every trajectory is reproducible from its indices.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Successor state `f(s, a)`.
    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
    /// Stage reward evaluated on `(s_{t+1}, a_t)`.
    fn reward(&self, next_state: &[f64], action: &[f64]) -> f64;
    /// Initial state for the given rollout of the given seed.
    fn sample_initial(&self, seed: u64, rollout: u64) -> Vec<f64>;
}

/// A Gaussian policy `a ~ N(mu_theta(s), diag(exp(2 ell)))` whose mean
/// is differentiable in its parameters.
///
/// The flat parameter layout is the mean block first, then the
/// log-stds; `param_count` counts only the mean block. The score of a
/// sampled action factors through the `m x p` Jacobian of the mean, so
/// this interface is exactly what the sampled gradient needs.
pub trait GaussianPolicy {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Number of mean parameters `p`.
    fn param_count(&self) -> usize;
    fn mean(&self, state: &[f64]) -> Vec<f64>;
    /// Jacobian of the mean in the flat mean parameters, `m x p`.
    fn param_jacobian(&self, state: &[f64]) -> Mat;
    fn ell(&self) -> &[f64];
    /// Flat parameters: mean block then log-stds, length `p + m`.
    fn params_flat(&self) -> Vec<f64>;
    /// Replaces all parameters from the flat layout.
    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;

    /// Policy covariance `diag(exp(2 ell))`.
    fn sigma(&self) -> DiagCov {
        DiagCov::new(self.ell().iter().map(|l| (2.0 * l).exp()).collect())
            .expect("exp(2l) is finite and positive for finite l")
    }
}

// ---------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------

/// Linear dynamics `s' = A s + B a` with quadratic stage reward
/// `-(s'^T Qs s' + a^T Qa a)` and initial draw `N(0, Sigma0)`.
pub struct LinearEnv {
    sys: LinearSystem,
    chol0: Mat,
}

impl LinearEnv {
    pub fn new(sys: LinearSystem) -> Self {
        let chol0 = cholesky_semidefinite(sys.sigma0());
        Self { sys, chol0 }
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }
}

impl Environment for LinearEnv {
    fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.sys.action_dim()
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut next = self.sys.a().matvec(state);
        for (x, y) in next.iter_mut().zip(self.sys.b().matvec(action)) {
            *x += y;
        }
        next
    }

    fn reward(&self, next_state: &[f64], action: &[f64]) -> f64 {
        let qs = self.sys.qs().matvec(next_state);
        let qa = self.sys.qa().matvec(action);
        let s_cost: f64 = next_state.iter().zip(&qs).map(|(a, b)| a * b).sum();
        let a_cost: f64 = action.iter().zip(&qa).map(|(a, b)| a * b).sum();
        -(s_cost + a_cost)
    }

    fn sample_initial(&self, seed: u64, rollout: u64) -> Vec<f64> {
        let n = self.sys.state_dim();
        let z: Vec<f64> = (0..n)
            .map(|i| standard_normal(seed, rollout, INIT_STATE_STEP, i as u64))
            .collect();
        self.chol0.matvec(&z)
    }
}

/// Polynomial dynamics and reward with diagonal initial covariance.
pub struct PolyEnv {
    sys: PolySystem,
}

impl PolyEnv {
    pub fn new(sys: PolySystem) -> Self {
        Self { sys }
    }

    pub fn system(&self) -> &PolySystem {
        &self.sys
    }

    fn eval_pair(&self, first: &[f64], action: &[f64], p: &MultiPoly) -> f64 {
        let mut args = Vec::with_capacity(first.len() + action.len());
        args.extend_from_slice(first);
        args.extend_from_slice(action);
        // Polynomial coefficients are finite by construction; a
        // non-finite value here means the argument already diverged and
        // is caught by the rollout's state check.
        p.eval(&args).unwrap_or(f64::NAN)
    }
}

impl Environment for PolyEnv {
    fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.sys.action_dim()
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.sys
            .transition()
            .iter()
            .map(|p| self.eval_pair(state, action, p))
            .collect()
    }

    fn reward(&self, next_state: &[f64], action: &[f64]) -> f64 {
        self.eval_pair(next_state, action, self.sys.reward())
    }

    fn sample_initial(&self, seed: u64, rollout: u64) -> Vec<f64> {
        self.sys
            .sigma0()
            .sqrt_vars()
            .iter()
            .enumerate()
            .map(|(i, sd)| sd * standard_normal(seed, rollout, INIT_STATE_STEP, i as u64))
            .collect()
    }
}

/// Inverted pendulum with torque input.
///
/// Dynamics `theta_dd = (g/l) sin(theta) + u/(m l^2)` integrated
/// semi-implicitly at `dt = 0.05` with `g = 10`, `m = l = 1`; the
/// angle wraps to `[-pi, pi]` and the velocity clips to `[-8, 8]`.
/// Reward on the successor is `-(theta^2 + 0.1 theta_dot^2 +
/// 0.001 u^2)`; the initial state is `N(0, diag(0.7^2, 0.7^2))` around
/// the upright. The constants follow the de-facto benchmark
/// conventions for this task.
pub struct PendulumEnv {
    dt: f64,
    gravity: f64,
    mass: f64,
    length: f64,
    init_std: f64,
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self { dt: 0.05, gravity: 10.0, mass: 1.0, length: 1.0, init_std: 0.7 }
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI).rem_euclid(two_pi);
    if t < 0.0 {
        t += two_pi;
    }
    t - std::f64::consts::PI
}

impl Environment for PendulumEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let (theta, omega) = (state[0], state[1]);
        let u = action[0];
        let accel = (self.gravity / self.length) * theta.sin()
            + u / (self.mass * self.length * self.length);
        let omega_next = (omega + self.dt * accel).clamp(-8.0, 8.0);
        let theta_next = wrap_angle(theta + self.dt * omega_next);
        vec![theta_next, omega_next]
    }

    fn reward(&self, next_state: &[f64], action: &[f64]) -> f64 {
        let (theta, omega) = (next_state[0], next_state[1]);
        let u = action[0];
        -(theta * theta + 0.1 * omega * omega + 0.001 * u * u)
    }

    fn sample_initial(&self, seed: u64, rollout: u64) -> Vec<f64> {
        (0..2)
            .map(|i| {
                self.init_std * standard_normal(seed, rollout, INIT_STATE_STEP, i as u64)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------

impl GaussianPolicy for GaussianLinearPolicy {
    fn state_dim(&self) -> usize {
        self.k().cols()
    }

    fn action_dim(&self) -> usize {
        self.k().rows()
    }

    fn param_count(&self) -> usize {
        self.k().rows() * self.k().cols()
    }

    fn mean(&self, state: &[f64]) -> Vec<f64> {
        self.k().matvec(state)
    }

    fn param_jacobian(&self, state: &[f64]) -> Mat {
        // Row-major K: d a_i / d K_{i,k} = s_k.
        let (m, n) = (self.k().rows(), self.k().cols());
        let mut jac = Mat::zeros(m, m * n);
        for i in 0..m {
            for (k, &s) in state.iter().enumerate() {
                jac.set(i, i * n + k, s);
            }
        }
        jac
    }

    fn ell(&self) -> &[f64] {
        GaussianLinearPolicy::ell(self)
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = self.k().data().to_vec();
        flat.extend_from_slice(GaussianLinearPolicy::ell(self));
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let (m, n) = (self.k().rows(), self.k().cols());
        if flat.len() != m * n + m {
            return Err(Error::Dim(format!(
                "flat parameter vector has {} entries, policy needs {}",
                flat.len(),
                m * n + m
            )));
        }
        let k = Mat::new(m, n, flat[..m * n].to_vec())?;
        *self = GaussianLinearPolicy::new(k, flat[m * n..].to_vec())?;
        Ok(())
    }
}

/// Gaussian policy whose mean is a linear combination of polynomial
/// state features: `mu_j(s) = sum_k theta_{k j} Phi_{k j}(s)`.
pub struct PolyFeaturePolicy {
    features: Vec<Vec<MultiPoly>>,
    params: PolyPolicyParams,
    state_dim: usize,
}

impl PolyFeaturePolicy {
    /// Binds a polynomial system's feature map to policy parameters.
    pub fn new(sys: &PolySystem, params: PolyPolicyParams) -> Result<Self> {
        params.check_dims(sys)?;
        Ok(Self {
            features: sys.features().to_vec(),
            params,
            state_dim: sys.state_dim(),
        })
    }

    pub fn params(&self) -> &PolyPolicyParams {
        &self.params
    }

    fn feature_value(&self, k: usize, j: usize, state: &[f64]) -> f64 {
        self.features[k][j].eval(state).unwrap_or(f64::NAN)
    }
}

impl GaussianPolicy for PolyFeaturePolicy {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.params.ell().len()
    }

    fn param_count(&self) -> usize {
        self.params.theta().rows() * self.params.theta().cols()
    }

    fn mean(&self, state: &[f64]) -> Vec<f64> {
        let theta = self.params.theta();
        let (d, m) = (theta.rows(), theta.cols());
        let mut mean = vec![0.0; m];
        for j in 0..m {
            for k in 0..d {
                let w = theta.get(k, j);
                if w != 0.0 {
                    mean[j] += w * self.feature_value(k, j, state);
                }
            }
        }
        mean
    }

    fn param_jacobian(&self, state: &[f64]) -> Mat {
        // Row-major theta (d x m): d a_j / d theta_{k j} = Phi_{k j}(s).
        let theta = self.params.theta();
        let (d, m) = (theta.rows(), theta.cols());
        let mut jac = Mat::zeros(m, d * m);
        for j in 0..m {
            for k in 0..d {
                jac.set(j, k * m + j, self.feature_value(k, j, state));
            }
        }
        jac
    }

    fn ell(&self) -> &[f64] {
        self.params.ell()
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = self.params.theta().data().to_vec();
        flat.extend_from_slice(self.params.ell());
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let theta = self.params.theta();
        let (d, m) = (theta.rows(), theta.cols());
        if flat.len() != d * m + m {
            return Err(Error::Dim(format!(
                "flat parameter vector has {} entries, policy needs {}",
                flat.len(),
                d * m + m
            )));
        }
        let theta = Mat::new(d, m, flat[..d * m].to_vec())?;
        self.params = PolyPolicyParams::new(theta, flat[d * m..].to_vec())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Sampled gradients
// ---------------------------------------------------------------------

/// One rollout's estimator sample:
/// `Ghat_theta = R sum_t J_theta(s_t)^T Sigma^-1 eps_t` and
/// `Ghat_ell = R sum_t (Sigma^-1 (eps_t . eps_t) - 1)`, plus the
/// realized discounted return. The scores carry no discount factors.
///
/// The noise stream is keyed by `(seed, rollout, step, coordinate)`, so
/// a sample is a pure function of its arguments.
pub fn reinforce_sample<E: Environment + ?Sized, P: GaussianPolicy + ?Sized>(
    env: &E,
    pol: &P,
    gamma: f64,
    horizon_t: usize,
    seed: u64,
    rollout: u64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    reinforce_sample_with(env, pol, gamma, horizon_t, seed, rollout, |_, _, _| {})
}

/// [`reinforce_sample`] with a per-step observer of the visited state
/// and the mean's parameter Jacobian there, for callers that estimate
/// trajectory functionals alongside the gradient sample.
pub(crate) fn reinforce_sample_with<E, P, F>(
    env: &E,
    pol: &P,
    gamma: f64,
    horizon_t: usize,
    seed: u64,
    rollout: u64,
    mut observe: F,
) -> Result<(Vec<f64>, Vec<f64>, f64)>
where
    E: Environment + ?Sized,
    P: GaussianPolicy + ?Sized,
    F: FnMut(usize, &[f64], &Mat),
{
    let (n, m, p) = (env.state_dim(), env.action_dim(), pol.param_count());
    if pol.state_dim() != n || pol.action_dim() != m {
        return Err(Error::Dim(format!(
            "policy is {}-state {}-action, environment is {n}-state {m}-action",
            pol.state_dim(),
            pol.action_dim()
        )));
    }
    let sigma = pol.sigma();
    let std = sigma.sqrt_vars();
    let inv = sigma.inv_vars()?;

    let mut state = env.sample_initial(seed, rollout);
    let mut score_theta = vec![0.0; p];
    let mut score_ell = vec![0.0; m];
    let mut ret = 0.0;
    let mut gpow = 1.0;
    for t in 0..horizon_t {
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedRollout { rollout, step: t });
        }
        let jac = pol.param_jacobian(&state);
        observe(t, &state, &jac);
        let mut action = pol.mean(&state);
        let mut eps = vec![0.0; m];
        for j in 0..m {
            let z = standard_normal(seed, rollout, t as u64, j as u64);
            eps[j] = std[j] * z;
            action[j] += eps[j];
        }
        // J^T Sigma^-1 eps accumulated into the score.
        for j in 0..m {
            let scaled = inv[j] * eps[j];
            if scaled != 0.0 {
                for c in 0..p {
                    score_theta[c] += jac.get(j, c) * scaled;
                }
            }
            score_ell[j] += eps[j] * eps[j] * inv[j] - 1.0;
        }
        let next = env.step(&state, &action);
        ret += gpow * env.reward(&next, &action);
        gpow *= gamma;
        state = next;
    }
    if state.iter().any(|v| !v.is_finite()) || !ret.is_finite() {
        return Err(Error::DivergedRollout { rollout, step: horizon_t });
    }

    let ghat_theta: Vec<f64> = score_theta.iter().map(|s| ret * s).collect();
    let ghat_ell: Vec<f64> = score_ell.iter().map(|s| ret * s).collect();
    Ok((ghat_theta, ghat_ell, ret))
}

/// Wraps an environment with a pinned initial state; everything else
/// passes through. Used to condition Monte Carlo runs on `s0`.
pub(crate) struct PinnedStart<'a, E: ?Sized> {
    pub inner: &'a E,
    pub s0: &'a [f64],
}

impl<E: Environment + ?Sized> Environment for PinnedStart<'_, E> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.inner.step(state, action)
    }

    fn reward(&self, next_state: &[f64], action: &[f64]) -> f64 {
        self.inner.reward(next_state, action)
    }

    fn sample_initial(&self, _seed: u64, _rollout: u64) -> Vec<f64> {
        self.s0.to_vec()
    }
}
