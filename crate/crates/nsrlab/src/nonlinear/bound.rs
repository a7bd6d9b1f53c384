//! Variance upper bounds for generic nonlinear systems.
//!
//! The conditional second moments of both estimator blocks admit
//! closed-form bounds in terms of two trajectory moments, `E[R^4|s0]`
//! and `E[||J_theta(s_t)||_F^4|s0]`, which are estimated here by Monte
//! Carlo; everything else in the bound is evaluated exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mat::DiagCov;
use crate::mc::{batch_stats, McConfig};
use crate::moments::{gaussian_norm4, qscore_norm4};

use super::{reinforce_sample_with, Environment, GaussianPolicy, PinnedStart};

/// Smallest rollout budget accepted by [`second_moment_bounds`]; the
/// fourth moments feeding the bound are heavy-tailed and anything less
/// gives standard errors too wide to interpret.
pub const MIN_BOUND_ROLLOUTS: u64 = 10_000;

/// How the bound conditions on the initial state.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    /// Condition every rollout on this state.
    Fixed(Vec<f64>),
    /// Draw `draws` initial states from the environment's sampler,
    /// evaluate the bound conditioned on each, and average. The rollout
    /// budget is split evenly over the draws.
    Averaged { draws: u64 },
}

impl InitialCondition {
    /// The default protocol: condition on the origin.
    pub fn origin(state_dim: usize) -> Self {
        InitialCondition::Fixed(vec![0.0; state_dim])
    }
}

/// Upper bounds on `E[||Ghat_theta||^2 | s0]` and
/// `E[||Ghat_ell||^2 | s0]`, together with the Monte Carlo moment
/// estimates they were assembled from and direct estimates of the two
/// second moments for comparison.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    /// `T ||Sigma^-1||_2^2 sqrt(E[R^4]) sqrt((tr Sigma)^2 + 2 tr(Sigma^2))
    ///  * sum_t sqrt(E[||J_theta(s_t)||_F^4])`.
    pub bound_theta: f64,
    /// `2 T^2 sqrt(m(m+14)) sqrt(E[R^4])`.
    pub bound_ell: f64,
    /// Directly sampled `E[||Ghat_theta||^2 | s0]` with its
    /// batch-means standard error.
    pub mc_second_moment_theta: f64,
    pub mc_second_moment_theta_se: f64,
    /// Directly sampled `E[||Ghat_ell||^2 | s0]`.
    pub mc_second_moment_ell: f64,
    pub mc_second_moment_ell_se: f64,
    /// Estimated `E[R^4 | s0]`.
    pub r4: f64,
    pub r4_se: f64,
    /// Estimated `E[||J_theta(s_t)||_F^4 | s0]` for `t = 0..T`.
    pub jac4: Vec<f64>,
    pub jac4_se: Vec<f64>,
    pub horizon_t: usize,
    pub action_dim: usize,
    pub sigma: DiagCov,
    pub n_rollouts: u64,
}

/// Assembles the gain-block bound from its ingredients:
/// `T ||Sigma^-1||_2^2 sqrt(r4) sqrt((tr Sigma)^2 + 2 tr(Sigma^2))
///  * sum_t sqrt(jac4[t])`.
///
/// `r4` and each `jac4[t]` are means of fourth powers and must be
/// nonnegative. Split out so the bound's scaling in `Sigma` can be
/// examined with the moment estimates held fixed.
pub fn assemble_gain_bound(
    horizon_t: usize,
    sigma: &DiagCov,
    r4: f64,
    jac4: &[f64],
) -> Result<f64> {
    if jac4.len() != horizon_t {
        return Err(Error::Dim(format!(
            "need one Jacobian moment per step: got {} for horizon {horizon_t}",
            jac4.len()
        )));
    }
    let inv = sigma.inv_vars()?;
    // Operator norm of a diagonal inverse covariance.
    let op = inv.iter().fold(0.0_f64, |a, &v| a.max(v));
    let jsum: f64 = jac4.iter().map(|&v| v.sqrt()).sum();
    Ok(horizon_t as f64 * op * op * r4.sqrt() * gaussian_norm4(sigma).sqrt() * jsum)
}

/// Assembles the log-std-block bound `2 T^2 sqrt(m(m+14)) sqrt(r4)`;
/// the leading constant is `sqrt(E||q||^4)` for the chi-square score
/// `q` of an `m`-dimensional Gaussian.
pub fn assemble_log_std_bound(horizon_t: usize, action_dim: usize, r4: f64) -> f64 {
    let t = horizon_t as f64;
    t * t * qscore_norm4(action_dim).sqrt() * r4.sqrt()
}

/// Evaluates both block bounds by estimating `E[R^4|s0]` and the
/// per-step `E[||J_theta(s_t)||_F^4|s0]` over `cfg.n_rollouts()`
/// pinned-start rollouts, then assembling the closed forms exactly.
///
/// Conditioning comes from `init`; a fixed state set on `cfg` itself is
/// overridden. Rollouts that leave the finite range abort the run with
/// the offending rollout and step. The direct second-moment estimates
/// in the report are for dominance checks; the bounds do not use them.
pub fn second_moment_bounds<E, P>(
    env: &E,
    pol: &P,
    cfg: &McConfig,
    init: &InitialCondition,
) -> Result<BoundReport>
where
    E: Environment + ?Sized + Sync,
    P: GaussianPolicy + ?Sized + Sync,
{
    if cfg.n_rollouts() < MIN_BOUND_ROLLOUTS {
        return Err(Error::Config(format!(
            "fourth-moment estimation needs at least {MIN_BOUND_ROLLOUTS} rollouts, got {}",
            cfg.n_rollouts()
        )));
    }
    match init {
        InitialCondition::Fixed(s0) => {
            if s0.len() != env.state_dim() {
                return Err(Error::Dim(format!(
                    "initial state has {} coordinates, environment expects {}",
                    s0.len(),
                    env.state_dim()
                )));
            }
            bound_at(env, pol, cfg, s0)
        }
        InitialCondition::Averaged { draws } => {
            let draws = *draws;
            if draws < 2 {
                return Err(Error::Config(
                    "averaged conditioning needs at least 2 initial draws".into(),
                ));
            }
            let per_draw = cfg.n_rollouts() / draws;
            if per_draw < 2 {
                return Err(Error::Config(format!(
                    "budget {} spread over {draws} draws leaves fewer than 2 rollouts each",
                    cfg.n_rollouts()
                )));
            }
            // Draw keys reuse the environment's initial sampler, which
            // occupies a step index no rollout step reaches; per-draw
            // runs then reseed so their noise streams are disjoint.
            let mut reports = Vec::with_capacity(draws as usize);
            for d in 0..draws {
                let s0 = env.sample_initial(cfg.seed(), d);
                let sub = McConfig::new(per_draw, cfg.seed().wrapping_add(1 + d), cfg.horizon_t(), cfg.gamma())?
                    .with_batch_count(cfg.batch_count().min(per_draw as usize))?;
                reports.push(bound_at(env, pol, &sub, &s0)?);
            }
            Ok(average_reports(&reports, cfg.n_rollouts()))
        }
    }
}

/// One pinned-start estimation run.
fn bound_at<E, P>(env: &E, pol: &P, cfg: &McConfig, s0: &[f64]) -> Result<BoundReport>
where
    E: Environment + ?Sized + Sync,
    P: GaussianPolicy + ?Sized + Sync,
{
    let t_len = cfg.horizon_t();
    let m = pol.action_dim();
    let sigma = pol.sigma();
    let pinned = PinnedStart { inner: env, s0 };

    // Per-rollout statistic: [R^4, ||Ghat_theta||^2, ||Ghat_ell||^2,
    // ||J(s_0)||_F^4, .., ||J(s_{T-1})||_F^4].
    let stat_len = 3 + t_len;
    let stats = batch_stats(cfg, stat_len, |rollout, out: &mut [f64]| {
        let (gt, gl, ret) = reinforce_sample_with(
            &pinned,
            pol,
            cfg.gamma(),
            t_len,
            cfg.seed(),
            rollout,
            |t, _state, jac| {
                let f2 = jac.frob_norm().powi(2);
                out[3 + t] = f2 * f2;
            },
        )?;
        let r2 = ret * ret;
        out[0] = r2 * r2;
        out[1] = gt.iter().map(|v| v * v).sum();
        out[2] = gl.iter().map(|v| v * v).sum();
        Ok(())
    })?;

    let r4 = stats.overall[0];
    let jac4: Vec<f64> = stats.overall[3..].to_vec();
    let jac4_se: Vec<f64> = (0..t_len).map(|t| stats.se(3 + t)).collect();
    let report = BoundReport {
        bound_theta: assemble_gain_bound(t_len, &sigma, r4, &jac4)?,
        bound_ell: assemble_log_std_bound(t_len, m, r4),
        mc_second_moment_theta: stats.overall[1],
        mc_second_moment_theta_se: stats.se(1),
        mc_second_moment_ell: stats.overall[2],
        mc_second_moment_ell_se: stats.se(2),
        r4,
        r4_se: stats.se(0),
        jac4,
        jac4_se,
        horizon_t: t_len,
        action_dim: m,
        sigma,
        n_rollouts: cfg.n_rollouts(),
    };
    Ok(report)
}

/// Averages per-draw reports field by field; the standard errors are
/// the spread of the per-draw values over `sqrt(draws)`, which folds
/// both the initial-state and the rollout sampling noise together.
fn average_reports(reports: &[BoundReport], total_rollouts: u64) -> BoundReport {
    let d = reports.len() as f64;
    let t_len = reports[0].horizon_t;
    let mean = |f: &dyn Fn(&BoundReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / d;
    let spread_se = |f: &dyn Fn(&BoundReport) -> f64| {
        let mu = mean(f);
        let ss: f64 = reports.iter().map(|r| (f(r) - mu).powi(2)).sum();
        (ss / (d * (d - 1.0))).sqrt()
    };

    BoundReport {
        bound_theta: mean(&|r| r.bound_theta),
        bound_ell: mean(&|r| r.bound_ell),
        mc_second_moment_theta: mean(&|r| r.mc_second_moment_theta),
        mc_second_moment_theta_se: spread_se(&|r| r.mc_second_moment_theta),
        mc_second_moment_ell: mean(&|r| r.mc_second_moment_ell),
        mc_second_moment_ell_se: spread_se(&|r| r.mc_second_moment_ell),
        r4: mean(&|r| r.r4),
        r4_se: spread_se(&|r| r.r4),
        jac4: (0..t_len).map(|t| mean(&|r: &BoundReport| r.jac4[t])).collect(),
        jac4_se: (0..t_len).map(|t| spread_se(&|r: &BoundReport| r.jac4[t])).collect(),
        horizon_t: t_len,
        action_dim: reports[0].action_dim,
        sigma: reports[0].sigma.clone(),
        n_rollouts: total_rollouts,
    }
}
