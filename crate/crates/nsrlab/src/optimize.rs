//! Gradient-ascent drivers (GD, SGD, Adam) over policy parameters,
//! recording objective, gradient norm, and NSR along the trajectory,
//! plus exact NSR evaluation over two-parameter grids.
//!
//! Collapse is surfaced, not prevented: non-finite parameters, runaway
//! log-stds, and diverged rollouts terminate the run with a tagged
//! reason and the trajectory up to the failure.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqg::{
    self, multi_step_mean_grads, GaussianLinearPolicy, LinearSystem, DEFAULT_GRAD_FLOOR,
};
use crate::mc::{estimate_nsr, McConfig};
use crate::nonlinear::{
    reinforce_sample, Environment, GaussianPolicy, LinearEnv, MlpPolicy, PolyEnv,
    PolyFeaturePolicy,
};
use crate::poly::{poly_nsr, poly_objective_and_grads, PolyPolicyParams, PolySystem};

/// Log-std threshold below which a run is declared collapsed; at
/// `exp(-20)` the policy is effectively deterministic and the estimator
/// variance has left the representable range.
pub const RUNAWAY_LOG_STD: f64 = -20.0;

/// Update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    Sgd,
    Adam,
}

/// How NSR annotations along the trajectory are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsrEval {
    Exact,
    MonteCarlo,
}

/// Optimizer settings. The defaults are this crate's choices: GD with
/// learning rate 1e-3; SGD with 1e-3 and batch 64; Adam with 3e-3,
/// beta1 0.9, beta2 0.999, eps 1e-8, batch 64; 2000 iterations; NSR
/// recorded every 10 iterations for exact evaluation and every 50 for
/// Monte Carlo.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "OptimizerConfigRepr")]
pub struct OptimizerConfig {
    method: Method,
    learning_rate: f64,
    iters: usize,
    batch_size: usize,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    seed: u64,
    nsr_eval: NsrEval,
    nsr_every: usize,
    nsr_rollouts: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerConfigRepr {
    method: Method,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default)]
    iters: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    adam_beta1: Option<f64>,
    #[serde(default)]
    adam_beta2: Option<f64>,
    #[serde(default)]
    adam_eps: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    nsr_eval: Option<NsrEval>,
    #[serde(default)]
    nsr_every: Option<usize>,
    #[serde(default)]
    nsr_rollouts: Option<u64>,
}

impl TryFrom<OptimizerConfigRepr> for OptimizerConfig {
    type Error = Error;

    fn try_from(r: OptimizerConfigRepr) -> Result<Self> {
        let mut cfg = match r.method {
            Method::Gd => OptimizerConfig::gd(),
            Method::Sgd => OptimizerConfig::sgd(),
            Method::Adam => OptimizerConfig::adam(),
        };
        if let Some(v) = r.learning_rate {
            cfg = cfg.with_learning_rate(v)?;
        }
        if let Some(v) = r.iters {
            cfg = cfg.with_iters(v)?;
        }
        if let Some(v) = r.batch_size {
            cfg = cfg.with_batch_size(v)?;
        }
        let b1 = r.adam_beta1.unwrap_or(cfg.adam_beta1);
        let b2 = r.adam_beta2.unwrap_or(cfg.adam_beta2);
        let eps = r.adam_eps.unwrap_or(cfg.adam_eps);
        cfg = cfg.with_adam_constants(b1, b2, eps)?;
        if let Some(v) = r.seed {
            cfg = cfg.with_seed(v);
        }
        if let Some(v) = r.nsr_eval {
            cfg = cfg.with_nsr_eval(v);
        }
        // Cadence default follows the evaluation mode unless given.
        match r.nsr_every {
            Some(v) => cfg = cfg.with_nsr_every(v)?,
            None => {
                cfg.nsr_every = match cfg.nsr_eval {
                    NsrEval::Exact => 10,
                    NsrEval::MonteCarlo => 50,
                }
            }
        }
        if let Some(v) = r.nsr_rollouts {
            cfg = cfg.with_nsr_rollouts(v)?;
        }
        Ok(cfg)
    }
}

impl OptimizerConfig {
    fn base(method: Method, learning_rate: f64) -> Self {
        Self {
            method,
            learning_rate,
            iters: 2000,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            nsr_eval: NsrEval::Exact,
            nsr_every: 10,
            nsr_rollouts: 4096,
        }
    }

    /// Exact-gradient ascent; requires a problem with exact gradients.
    pub fn gd() -> Self {
        Self::base(Method::Gd, 1e-3)
    }

    /// Minibatch REINFORCE ascent.
    pub fn sgd() -> Self {
        Self::base(Method::Sgd, 1e-3)
    }

    /// Minibatch REINFORCE ascent with Adam preconditioning.
    pub fn adam() -> Self {
        Self::base(Method::Adam, 3e-3)
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(self)
    }

    pub fn with_iters(mut self, iters: usize) -> Result<Self> {
        if iters == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        self.iters = iters;
        Ok(self)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    pub fn with_adam_constants(mut self, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {beta1} and {beta2}"
            )));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Config(format!("Adam eps must be positive, got {eps}")));
        }
        self.adam_beta1 = beta1;
        self.adam_beta2 = beta2;
        self.adam_eps = eps;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_nsr_eval(mut self, eval: NsrEval) -> Self {
        self.nsr_eval = eval;
        self
    }

    pub fn with_nsr_every(mut self, every: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::Config("NSR cadence must be at least 1".into()));
        }
        self.nsr_every = every;
        Ok(self)
    }

    /// Rollout budget for each Monte Carlo NSR annotation.
    pub fn with_nsr_rollouts(mut self, n: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("Monte Carlo NSR needs at least 2 rollouts".into()));
        }
        self.nsr_rollouts = n;
        Ok(self)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nsr_eval(&self) -> NsrEval {
        self.nsr_eval
    }

    pub fn nsr_every(&self) -> usize {
        self.nsr_every
    }
}

/// One recorded point along an optimization trajectory. `variance` and
/// `nsr` are NaN on iterations without an NSR annotation and whenever
/// the ratio is undetermined (gradient statistically or numerically
/// zero).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iter: usize,
    /// Flat parameters at this iterate: mean block, then log-stds.
    pub params: Vec<f64>,
    /// Exact objective under GD; minibatch mean return under SGD/Adam.
    pub objective: f64,
    /// Norm of the gradient used for the step at this iterate.
    pub grad_norm: f64,
    pub variance: f64,
    pub nsr: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

/// Why a run terminated early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CollapseReason {
    /// An update produced a non-finite parameter, or a log-std large
    /// enough that the policy covariance `exp(2 ell)` overflows.
    ParamsNonFinite,
    /// A log-std fell below [`RUNAWAY_LOG_STD`].
    LogStdRunaway { min_ell: f64 },
    /// A rollout left the finite range while sampling gradients or NSR.
    RolloutDiverged { rollout: u64, step: usize },
}

/// Early-termination tag: the iterate index at which the run died plus
/// the reason. Records cover every completed iterate before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub iter: usize,
    pub reason: CollapseReason,
}

/// A finished or collapsed run.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub records: Vec<TrajectoryRecord>,
    pub collapse: Option<Collapse>,
}

/// An optimization problem: a system with its policy. Exact gradients
/// and exact NSR exist for the linear and polynomial variants; the
/// nonlinear variant is sampled-only.
pub enum Problem {
    Linear { sys: LinearSystem, pol: GaussianLinearPolicy },
    Poly { sys: PolySystem, pol: PolyFeaturePolicy },
    Nonlinear {
        env: std::sync::Arc<dyn Environment + Send + Sync>,
        pol: MlpPolicy,
        gamma: f64,
        horizon_t: usize,
    },
}

impl Problem {
    pub fn linear(sys: LinearSystem, pol: GaussianLinearPolicy) -> Result<Self> {
        if pol.k().rows() != sys.action_dim() || pol.k().cols() != sys.state_dim() {
            return Err(Error::Dim(format!(
                "policy gain is {}x{}, system is {}-state {}-action",
                pol.k().rows(),
                pol.k().cols(),
                sys.state_dim(),
                sys.action_dim()
            )));
        }
        Ok(Problem::Linear { sys, pol })
    }

    pub fn poly(sys: PolySystem, params: PolyPolicyParams) -> Result<Self> {
        let pol = PolyFeaturePolicy::new(&sys, params)?;
        Ok(Problem::Poly { sys, pol })
    }

    pub fn nonlinear(
        env: Box<dyn Environment + Send + Sync>,
        pol: MlpPolicy,
        gamma: f64,
        horizon_t: usize,
    ) -> Result<Self> {
        if GaussianPolicy::state_dim(&pol) != env.state_dim()
            || GaussianPolicy::action_dim(&pol) != env.action_dim()
        {
            return Err(Error::Dim(format!(
                "policy is {}-state {}-action, environment is {}-state {}-action",
                GaussianPolicy::state_dim(&pol),
                GaussianPolicy::action_dim(&pol),
                env.state_dim(),
                env.action_dim()
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if horizon_t == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(Problem::Nonlinear { env: std::sync::Arc::from(env), pol, gamma, horizon_t })
    }

    pub fn has_exact_gradients(&self) -> bool {
        !matches!(self, Problem::Nonlinear { .. })
    }

    fn gamma(&self) -> f64 {
        match self {
            Problem::Linear { sys, .. } => sys.gamma(),
            Problem::Poly { sys, .. } => sys.gamma(),
            Problem::Nonlinear { gamma, .. } => *gamma,
        }
    }

    fn horizon_t(&self) -> usize {
        match self {
            Problem::Linear { sys, .. } => sys.horizon_t(),
            Problem::Poly { sys, .. } => sys.horizon_t(),
            Problem::Nonlinear { horizon_t, .. } => *horizon_t,
        }
    }

    fn policy(&self) -> &(dyn GaussianPolicy + Sync) {
        match self {
            Problem::Linear { pol, .. } => pol,
            Problem::Poly { pol, .. } => pol,
            Problem::Nonlinear { pol, .. } => pol,
        }
    }

    fn policy_mut(&mut self) -> &mut dyn GaussianPolicy {
        match self {
            Problem::Linear { pol, .. } => pol,
            Problem::Poly { pol, .. } => pol,
            Problem::Nonlinear { pol, .. } => pol,
        }
    }

    /// Flat parameters, mean block then log-stds.
    pub fn params_flat(&self) -> Vec<f64> {
        self.policy().params_flat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.policy_mut().set_params_flat(flat)
    }

    /// Exact objective and flat mean-then-log-std gradient.
    fn exact_objective_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        match self {
            Problem::Linear { sys, pol } => {
                let obj = lqg::objective(sys, pol)?;
                let (gk, gl) = multi_step_mean_grads(sys, pol)?;
                let mut flat = gk.data().to_vec();
                flat.extend_from_slice(&gl);
                Ok((obj, flat))
            }
            Problem::Poly { sys, pol } => {
                let (obj, gt, gl) = poly_objective_and_grads(sys, pol.params())?;
                let mut flat = gt.data().to_vec();
                flat.extend_from_slice(&gl);
                Ok((obj, flat))
            }
            Problem::Nonlinear { .. } => Err(Error::Config(
                "exact gradients are not available for nonlinear problems".into(),
            )),
        }
    }

    /// Exact NSR at the current parameters; `None` when the gradient is
    /// below the evaluation floor.
    fn exact_nsr(&self) -> Result<Option<(f64, f64)>> {
        let report = match self {
            Problem::Linear { sys, pol } => lqg::nsr(sys, pol, DEFAULT_GRAD_FLOOR),
            Problem::Poly { sys, pol } => poly_nsr(sys, pol.params(), DEFAULT_GRAD_FLOOR),
            Problem::Nonlinear { .. } => {
                return Err(Error::Config(
                    "exact NSR is not available for nonlinear problems".into(),
                ))
            }
        };
        match report {
            Ok(r) => Ok(Some((r.variance, r.nsr))),
            Err(Error::GradientTooSmall { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// The sampling environment for minibatch gradients and Monte Carlo
    /// NSR annotations. Owned, so the problem stays free for parameter
    /// updates while sampling runs.
    fn sample_env(&self) -> SampleEnv {
        match self {
            Problem::Linear { sys, .. } => SampleEnv::Linear(LinearEnv::new(sys.clone())),
            Problem::Poly { sys, .. } => SampleEnv::Poly(PolyEnv::new(sys.clone())),
            Problem::Nonlinear { env, .. } => SampleEnv::Ext(env.clone()),
        }
    }
}

enum SampleEnv {
    Linear(LinearEnv),
    Poly(PolyEnv),
    Ext(std::sync::Arc<dyn Environment + Send + Sync>),
}

impl SampleEnv {
    fn as_dyn(&self) -> &(dyn Environment + Sync) {
        match self {
            SampleEnv::Linear(e) => e,
            SampleEnv::Poly(e) => e,
            SampleEnv::Ext(e) => &**e,
        }
    }
}

/// Minibatch mean return and mean stacked gradient at the current
/// policy; rollout indices advance with the iteration so no noise is
/// ever reused.
fn minibatch(
    env: &(dyn Environment + Sync),
    pol: &(dyn GaussianPolicy + Sync),
    gamma: f64,
    horizon_t: usize,
    seed: u64,
    iter: usize,
    batch: usize,
) -> Result<(f64, Vec<f64>)> {
    let p = pol.param_count() + pol.action_dim();
    let mut grad = vec![0.0; p];
    let mut ret_sum = 0.0;
    let base = iter as u64 * batch as u64;
    for b in 0..batch {
        let (gt, gl, ret) = reinforce_sample(env, pol, gamma, horizon_t, seed, base + b as u64)?;
        for (g, v) in grad.iter_mut().zip(gt.iter().chain(gl.iter())) {
            *g += v;
        }
        ret_sum += ret;
    }
    let scale = 1.0 / batch as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((ret_sum * scale, grad))
}

/// Runs the configured optimizer on the problem, mutating its policy in
/// place, and returns one record per visited iterate (initial point
/// included). Ascent convention: parameters move along the gradient of
/// the expected return.
///
/// Collapse (non-finite parameters, runaway log-std, diverged rollout)
/// terminates the run and is reported in the outcome; structural
/// problems (dimension mismatches, invalid configuration) are errors.
pub fn run(problem: &mut Problem, cfg: &OptimizerConfig) -> Result<RunOutcome> {
    if cfg.method == Method::Gd && !problem.has_exact_gradients() {
        return Err(Error::Config(
            "GD needs exact gradients; use SGD or Adam on nonlinear problems".into(),
        ));
    }
    if cfg.nsr_eval == NsrEval::Exact && !problem.has_exact_gradients() {
        return Err(Error::Config(
            "exact NSR annotations need a linear or polynomial problem".into(),
        ));
    }

    let start = Instant::now();
    let gamma = problem.gamma();
    let horizon_t = problem.horizon_t();
    let env = problem.sample_env();
    let mut params = problem.params_flat();
    let p = params.len();
    let mean_count = problem.policy().param_count();

    let mut adam_m = vec![0.0; p];
    let mut adam_v = vec![0.0; p];
    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(cfg.iters + 1);
    let mut collapse = None;

    for i in 0..=cfg.iters {
        let sampled = match cfg.method {
            Method::Gd => problem.exact_objective_and_grad(),
            Method::Sgd | Method::Adam => minibatch(
                env.as_dyn(),
                problem.policy(),
                gamma,
                horizon_t,
                cfg.seed,
                i,
                cfg.batch_size,
            ),
        };
        let (objective, grad) = match sampled {
            Ok(v) => v,
            Err(Error::DivergedRollout { rollout, step }) => {
                collapse = Some(Collapse {
                    iter: i,
                    reason: CollapseReason::RolloutDiverged { rollout, step },
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();

        let annotate = i % cfg.nsr_every == 0 || i == cfg.iters;
        let (variance, nsr) = if annotate {
            let evaluated = match cfg.nsr_eval {
                NsrEval::Exact => problem.exact_nsr().map(|o| o.map(|(v, n)| (v, Some(n)))),
                NsrEval::MonteCarlo => {
                    // Annotation streams live under a different seed so
                    // they never overlap the trajectory's minibatches.
                    let nsr_seed =
                        (cfg.seed ^ 0xa076_1d64_78bd_642f).wrapping_add(i as u64);
                    let mc_cfg = McConfig::new(cfg.nsr_rollouts, nsr_seed, horizon_t, gamma)?;
                    estimate_nsr(env.as_dyn(), problem.policy(), &mc_cfg)
                        .map(|est| Some((est.variance, est.nsr)))
                }
            };
            match evaluated {
                Ok(Some((v, n))) => (v, n.unwrap_or(f64::NAN)),
                Ok(None) => (f64::NAN, f64::NAN),
                Err(Error::DivergedRollout { rollout, step }) => {
                    collapse = Some(Collapse {
                        iter: i,
                        reason: CollapseReason::RolloutDiverged { rollout, step },
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            (f64::NAN, f64::NAN)
        };

        records.push(TrajectoryRecord {
            iter: i,
            params: params.clone(),
            objective,
            grad_norm,
            variance,
            nsr,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if i == cfg.iters {
            break;
        }

        match cfg.method {
            Method::Gd | Method::Sgd => {
                for (x, g) in params.iter_mut().zip(&grad) {
                    *x += cfg.learning_rate * g;
                }
            }
            Method::Adam => {
                let t = (i + 1) as i32;
                let bc1 = 1.0 - cfg.adam_beta1.powi(t);
                let bc2 = 1.0 - cfg.adam_beta2.powi(t);
                for c in 0..p {
                    adam_m[c] = cfg.adam_beta1 * adam_m[c] + (1.0 - cfg.adam_beta1) * grad[c];
                    adam_v[c] =
                        cfg.adam_beta2 * adam_v[c] + (1.0 - cfg.adam_beta2) * grad[c] * grad[c];
                    let m_hat = adam_m[c] / bc1;
                    let v_hat = adam_v[c] / bc2;
                    params[c] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                }
            }
        }

        // A log-std can stay finite while exp(2l) overflows; the policy
        // covariance is then non-finite, so the run is just as dead as
        // with a NaN parameter.
        let cov_overflow =
            params[mean_count..].iter().any(|&l| !(2.0 * l).exp().is_finite());
        if params.iter().any(|v| !v.is_finite()) || cov_overflow {
            collapse =
                Some(Collapse { iter: i + 1, reason: CollapseReason::ParamsNonFinite });
            break;
        }
        let min_ell = params[mean_count..].iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if min_ell < RUNAWAY_LOG_STD {
            collapse = Some(Collapse {
                iter: i + 1,
                reason: CollapseReason::LogStdRunaway { min_ell },
            });
            break;
        }
        problem.set_params_flat(&params)?;
    }

    Ok(RunOutcome { records, collapse })
}

// ---------------------------------------------------------------------
// NSR grids
// ---------------------------------------------------------------------

/// What a grid axis varies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisTarget {
    /// One flat parameter coordinate (mean block then log-stds).
    Param(usize),
    /// Isotropic initial-state standard deviation: `Sigma0 = v^2 I`.
    /// Linear problems only.
    InitStd,
    /// Shared policy standard deviation: every log-std set to `ln v`.
    PolicyStd,
}

/// One grid axis: the target, an inclusive range, and the number of
/// evaluation points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridAxis {
    target: AxisTarget,
    lo: f64,
    hi: f64,
    resolution: usize,
    log_spaced: bool,
}

impl GridAxis {
    pub fn new(
        target: AxisTarget,
        lo: f64,
        hi: f64,
        resolution: usize,
        log_spaced: bool,
    ) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Config("axis resolution must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("axis range [{lo}, {hi}] is not ordered")));
        }
        if log_spaced && lo <= 0.0 {
            return Err(Error::Config(format!(
                "log-spaced axis needs a positive lower bound, got {lo}"
            )));
        }
        if matches!(target, AxisTarget::InitStd | AxisTarget::PolicyStd) && lo <= 0.0 {
            return Err(Error::Config(format!(
                "standard-deviation axis needs positive values, got lower bound {lo}"
            )));
        }
        Ok(Self { target, lo, hi, resolution, log_spaced })
    }

    /// The evaluation points, endpoints included.
    pub fn values(&self) -> Vec<f64> {
        if self.resolution == 1 {
            return vec![self.lo];
        }
        let n = self.resolution;
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                if self.log_spaced {
                    (self.lo.ln() + f * (self.hi.ln() - self.lo.ln())).exp()
                } else {
                    self.lo + f * (self.hi - self.lo)
                }
            })
            .collect()
    }
}

/// Cell evaluation status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Mean gradient below the evaluation floor; values are NaN.
    Undetermined,
}

/// One evaluated grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub axis1: f64,
    pub axis2: f64,
    pub nsr: f64,
    pub variance: f64,
    pub grad_norm_sq: f64,
    pub status: CellStatus,
}

/// Evaluates the exact NSR on the Cartesian grid `axis1 x axis2`
/// (axis1 outer, row-major). Each cell is a pure function of its
/// coordinates: the problem is copied, the two axis targets applied,
/// and the exact evaluator run. Cells whose mean gradient sits below
/// the floor are marked undetermined rather than failing the grid.
pub fn nsr_grid(problem: &Problem, axis1: &GridAxis, axis2: &GridAxis) -> Result<Vec<GridCell>> {
    if !problem.has_exact_gradients() {
        return Err(Error::Config("NSR grids need a linear or polynomial problem".into()));
    }
    let v1 = axis1.values();
    let v2 = axis2.values();
    let mut cells = Vec::with_capacity(v1.len() * v2.len());
    for &a in &v1 {
        for &b in &v2 {
            cells.push(eval_cell(problem, (axis1.target, a), (axis2.target, b))?);
        }
    }
    Ok(cells)
}

fn eval_cell(
    problem: &Problem,
    c1: (AxisTarget, f64),
    c2: (AxisTarget, f64),
) -> Result<GridCell> {
    let report = match problem {
        Problem::Linear { sys, pol } => {
            let mut sys = sys.clone();
            let mut pol = pol.clone();
            for (target, v) in [c1, c2] {
                apply_linear_target(&mut sys, &mut pol, target, v)?;
            }
            lqg::nsr(&sys, &pol, DEFAULT_GRAD_FLOOR)
        }
        Problem::Poly { sys, pol } => {
            let mut params = pol.params().clone();
            for (target, v) in [c1, c2] {
                apply_poly_target(&mut params, target, v)?;
            }
            poly_nsr(sys, &params, DEFAULT_GRAD_FLOOR)
        }
        Problem::Nonlinear { .. } => unreachable!("rejected before evaluation"),
    };
    let cell = match report {
        Ok(r) => GridCell {
            axis1: c1.1,
            axis2: c2.1,
            nsr: r.nsr,
            variance: r.variance,
            grad_norm_sq: r.grad_norm_sq,
            status: CellStatus::Ok,
        },
        Err(Error::GradientTooSmall { .. }) => GridCell {
            axis1: c1.1,
            axis2: c2.1,
            nsr: f64::NAN,
            variance: f64::NAN,
            grad_norm_sq: f64::NAN,
            status: CellStatus::Undetermined,
        },
        Err(e) => return Err(e),
    };
    Ok(cell)
}

fn apply_linear_target(
    sys: &mut LinearSystem,
    pol: &mut GaussianLinearPolicy,
    target: AxisTarget,
    v: f64,
) -> Result<()> {
    match target {
        AxisTarget::Param(idx) => {
            let mut flat = pol.params_flat();
            if idx >= flat.len() {
                return Err(Error::Dim(format!(
                    "parameter index {idx} out of range for {} parameters",
                    flat.len()
                )));
            }
            flat[idx] = v;
            pol.set_params_flat(&flat)
        }
        AxisTarget::InitStd => {
            let eye = crate::mat::Mat::eye(sys.state_dim());
            *sys = sys.with_sigma0(eye.scale(v * v))?;
            Ok(())
        }
        AxisTarget::PolicyStd => {
            let mut flat = pol.params_flat();
            let mean = GaussianPolicy::param_count(pol);
            for e in flat[mean..].iter_mut() {
                *e = v.ln();
            }
            pol.set_params_flat(&flat)
        }
    }
}

fn apply_poly_target(params: &mut PolyPolicyParams, target: AxisTarget, v: f64) -> Result<()> {
    match target {
        AxisTarget::Param(idx) => {
            let theta = params.theta().clone();
            let (d, m) = (theta.rows(), theta.cols());
            let mut flat = theta.data().to_vec();
            flat.extend_from_slice(params.ell());
            if idx >= flat.len() {
                return Err(Error::Dim(format!(
                    "parameter index {idx} out of range for {} parameters",
                    flat.len()
                )));
            }
            flat[idx] = v;
            *params = PolyPolicyParams::new(
                crate::mat::Mat::new(d, m, flat[..d * m].to_vec())?,
                flat[d * m..].to_vec(),
            )?;
            Ok(())
        }
        AxisTarget::InitStd => Err(Error::Config(
            "initial-state axes are only supported on linear problems".into(),
        )),
        AxisTarget::PolicyStd => {
            let ell = vec![v.ln(); params.ell().len()];
            *params = PolyPolicyParams::new(params.theta().clone(), ell)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------

/// Trajectory CSV:
/// `iter,objective,grad_norm,variance,nsr,param_0..param_{p-1},wall_time`.
/// Floats use the shortest representation that parses back exactly.
pub fn trajectory_csv(records: &[TrajectoryRecord]) -> String {
    let p = records.first().map_or(0, |r| r.params.len());
    let mut out = String::from("iter,objective,grad_norm,variance,nsr");
    for i in 0..p {
        out.push_str(&format!(",param_{i}"));
    }
    out.push_str(",wall_time\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.iter, r.objective, r.grad_norm, r.variance, r.nsr
        ));
        for v in &r.params {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.wall_time));
    }
    out
}

/// Grid CSV: `axis1,axis2,nsr,variance,grad_norm_sq,status`.
pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("axis1,axis2,nsr,variance,grad_norm_sq,status\n");
    for c in cells {
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Undetermined => "undetermined",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{status}\n",
            c.axis1, c.axis2, c.nsr, c.variance, c.grad_norm_sq
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg::builtin_system;
    use crate::poly::builtin_poly_system;

    fn double_integrator_problem() -> Problem {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        Problem::linear(sys, pol).unwrap()
    }

    #[test]
    fn gd_on_the_double_integrator_ascends_and_ends_noisier() {
        let mut problem = double_integrator_problem();
        let cfg = OptimizerConfig::gd();
        let out = run(&mut problem, &cfg).unwrap();

        assert!(out.collapse.is_none());
        assert_eq!(out.records.len(), cfg.iters() + 1);
        let rec = &out.records;
        for w in rec.windows(2) {
            assert!(w[1].iter > w[0].iter);
            assert!(w[1].wall_time >= w[0].wall_time);
            assert!(
                w[1].objective >= w[0].objective,
                "objective fell from {} to {} at iter {}",
                w[0].objective,
                w[1].objective,
                w[1].iter
            );
            // Action costs are strictly positive, so the exact log-std
            // gradient is strictly negative and ascent lowers ell.
            let p = w[0].params.len();
            assert!(
                w[1].params[p - 1] < w[0].params[p - 1],
                "log-std did not fall at iter {}",
                w[1].iter
            );
        }
        let first_nsr = rec.first().unwrap().nsr;
        let last_nsr = rec.last().unwrap().nsr;
        assert!(first_nsr.is_finite() && last_nsr.is_finite());
        assert!(
            last_nsr >= first_nsr,
            "NSR fell along the run: {first_nsr} -> {last_nsr}"
        );
    }

    #[test]
    fn gd_rejects_problems_without_exact_gradients() {
        let env = Box::new(crate::nonlinear::PendulumEnv::default());
        let pol = MlpPolicy::random(&[2, 4, 1], vec![0.3f64.ln()], 3, 1.0).unwrap();
        let mut problem = Problem::nonlinear(env, pol, 0.99, 10).unwrap();
        assert!(matches!(run(&mut problem, &OptimizerConfig::gd()), Err(Error::Config(_))));
        let mc_less = OptimizerConfig::sgd();
        assert!(matches!(run(&mut problem, &mc_less), Err(Error::Config(_))),
            "exact NSR annotations must be rejected on nonlinear problems");
    }

    struct ZeroReward;

    impl Environment for ZeroReward {
        fn state_dim(&self) -> usize {
            1
        }

        fn action_dim(&self) -> usize {
            1
        }

        fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
            vec![0.9 * state[0] + 0.1 * action[0]]
        }

        fn reward(&self, _next_state: &[f64], _action: &[f64]) -> f64 {
            0.0
        }

        fn sample_initial(&self, _seed: u64, _rollout: u64) -> Vec<f64> {
            vec![1.0]
        }
    }

    #[test]
    fn adam_with_a_zero_gradient_stream_leaves_parameters_unchanged() {
        let pol = MlpPolicy::random(&[1, 4, 1], vec![-0.2], 7, 1.0).unwrap();
        let mut problem = Problem::nonlinear(Box::new(ZeroReward), pol, 1.0, 5).unwrap();
        let start = problem.params_flat();
        let cfg = OptimizerConfig::adam()
            .with_iters(20)
            .unwrap()
            .with_nsr_eval(NsrEval::MonteCarlo)
            .with_nsr_every(50)
            .unwrap();
        let out = run(&mut problem, &cfg).unwrap();
        assert!(out.collapse.is_none());
        assert_eq!(problem.params_flat(), start);
        assert!(out.records.iter().all(|r| r.grad_norm == 0.0));
    }

    #[test]
    fn sgd_is_deterministic_given_the_seed() {
        let run_once = |seed: u64| {
            let (sys, pol) = builtin_system("double-integrator").unwrap();
            let sys = sys.with_horizon(5).unwrap();
            let mut problem = Problem::linear(sys, pol).unwrap();
            let cfg = OptimizerConfig::sgd()
                .with_iters(25)
                .unwrap()
                .with_batch_size(8)
                .unwrap()
                .with_seed(seed);
            run(&mut problem, &cfg).unwrap()
        };
        let a = run_once(3);
        let b = run_once(3);
        let c = run_once(4);
        let flat =
            |o: &RunOutcome| o.records.iter().flat_map(|r| r.params.clone()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        let objs = |o: &RunOutcome| o.records.iter().map(|r| r.objective).collect::<Vec<_>>();
        assert_eq!(objs(&a), objs(&b));
    }

    #[test]
    fn aggressive_sgd_on_the_quadratic_benchmark_collapses_with_a_tag() {
        let (sys, params) = builtin_poly_system("quadratic-1d").unwrap();
        let mut problem = Problem::poly(sys, params).unwrap();
        // Exact NSR at this horizon needs an astronomically fine
        // quadrature grid (state degree doubles per step), so collapse
        // studies annotate by Monte Carlo.
        let cfg = OptimizerConfig::sgd()
            .with_learning_rate(2.0)
            .unwrap()
            .with_batch_size(2)
            .unwrap()
            .with_iters(400)
            .unwrap()
            .with_nsr_eval(NsrEval::MonteCarlo)
            .with_nsr_every(1_000_000)
            .unwrap()
            .with_nsr_rollouts(256)
            .unwrap()
            .with_seed(1);
        let out = run(&mut problem, &cfg).unwrap();
        let collapse = out.collapse.expect("aggressive run should collapse");
        assert!(collapse.iter <= 400);
        assert!(out.records.len() <= collapse.iter + 1);
        assert!(out.records.iter().all(|r| r.iter < collapse.iter || r.iter == collapse.iter));
    }

    #[test]
    fn single_cell_grid_matches_the_direct_evaluation() {
        let problem = double_integrator_problem();
        let a1 = GridAxis::new(AxisTarget::InitStd, 1.0, 1.0, 1, false).unwrap();
        let a2 = GridAxis::new(AxisTarget::PolicyStd, 0.5, 0.5, 1, false).unwrap();
        let cells = nsr_grid(&problem, &a1, &a2).unwrap();
        assert_eq!(cells.len(), 1);

        // The builtin already has Sigma0 = I and std 0.5, so the cell
        // must agree with the direct evaluation bit for bit.
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let direct = lqg::nsr(&sys, &pol, DEFAULT_GRAD_FLOOR).unwrap();
        assert_eq!(cells[0].nsr, direct.nsr);
        assert_eq!(cells[0].variance, direct.variance);
        assert_eq!(cells[0].status, CellStatus::Ok);
    }

    #[test]
    fn one_step_heatmap_peaks_where_initial_spread_dwarfs_policy_noise() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(1).unwrap();
        let problem = Problem::linear(sys, pol).unwrap();
        let res = 16;
        let a1 = GridAxis::new(AxisTarget::InitStd, 0.1, 10.0, res, true).unwrap();
        let a2 = GridAxis::new(AxisTarget::PolicyStd, 0.1, 10.0, res, true).unwrap();
        let cells = nsr_grid(&problem, &a1, &a2).unwrap();
        assert_eq!(cells.len(), res * res);
        assert!(cells.iter().all(|c| c.status == CellStatus::Ok));

        let argmax = cells
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.nsr.total_cmp(&b.1.nsr))
            .map(|(i, _)| i)
            .unwrap();
        // axis1 outer: largest sigma0 is the last row, smallest sigma
        // the first column.
        assert_eq!(argmax, (res - 1) * res, "max NSR off the sigma0/sigma corner");
    }

    #[test]
    fn zero_reward_grid_cells_are_marked_undetermined() {
        let (sys, params) = builtin_poly_system("quadratic-1d").unwrap();
        // Short horizon keeps the score degrees, and with them the
        // quadrature grid, small.
        let sys = sys.with_horizon(2).with_reward(crate::poly::MultiPoly::zero(2)).unwrap();
        let problem = Problem::poly(sys, params).unwrap();
        let a1 = GridAxis::new(AxisTarget::Param(0), -1.0, 1.0, 2, false).unwrap();
        let a2 = GridAxis::new(AxisTarget::PolicyStd, 0.2, 0.4, 2, false).unwrap();
        let cells = nsr_grid(&problem, &a1, &a2).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert_eq!(c.status, CellStatus::Undetermined);
            assert!(c.nsr.is_nan() && c.variance.is_nan());
        }
    }

    #[test]
    fn csv_outputs_carry_the_documented_headers() {
        let mut problem = double_integrator_problem();
        let cfg = OptimizerConfig::gd().with_iters(3).unwrap();
        let out = run(&mut problem, &cfg).unwrap();
        let csv = trajectory_csv(&out.records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,objective,grad_norm,variance,nsr,param_0,param_1,param_2,wall_time"
        );
        assert_eq!(csv.lines().count(), 1 + out.records.len());
        let first = lines.next().unwrap();
        let obj: f64 = first.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(obj, out.records[0].objective);

        let p2 = double_integrator_problem();
        let a1 = GridAxis::new(AxisTarget::InitStd, 0.5, 2.0, 2, true).unwrap();
        let a2 = GridAxis::new(AxisTarget::PolicyStd, 0.3, 0.7, 2, false).unwrap();
        let cells = nsr_grid(&p2, &a1, &a2).unwrap();
        let gcsv = grid_csv(&cells);
        assert_eq!(gcsv.lines().next().unwrap(), "axis1,axis2,nsr,variance,grad_norm_sq,status");
        assert!(gcsv.lines().skip(1).all(|l| l.ends_with(",ok")));
    }

    #[test]
    fn config_files_fill_method_specific_defaults() {
        let cfg: OptimizerConfig = serde_json::from_str(r#"{"method":"adam"}"#).unwrap();
        assert_eq!(cfg.method(), Method::Adam);
        assert_eq!(cfg.learning_rate(), 3e-3);
        assert_eq!(cfg.batch_size(), 64);
        assert_eq!(cfg.nsr_every(), 10);

        let cfg: OptimizerConfig =
            serde_json::from_str(r#"{"method":"sgd","nsr_eval":"monte_carlo"}"#).unwrap();
        assert_eq!(cfg.nsr_every(), 50);

        let bad = serde_json::from_str::<OptimizerConfig>(r#"{"method":"sgd","learning_rate":-1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn monte_carlo_annotations_work_on_exact_problems_too() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(3).unwrap();
        let mut problem = Problem::linear(sys, pol).unwrap();
        let cfg = OptimizerConfig::gd()
            .with_iters(10)
            .unwrap()
            .with_nsr_eval(NsrEval::MonteCarlo)
            .with_nsr_every(5)
            .unwrap()
            .with_nsr_rollouts(2_000)
            .unwrap();
        let out = run(&mut problem, &cfg).unwrap();
        assert!(out.collapse.is_none());
        let annotated: Vec<&TrajectoryRecord> =
            out.records.iter().filter(|r| !r.variance.is_nan()).collect();
        assert_eq!(annotated.len(), 3);
        assert!(annotated.iter().all(|r| r.variance > 0.0));
    }
}
