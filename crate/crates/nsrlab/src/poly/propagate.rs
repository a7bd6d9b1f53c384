//! Symbolic propagation through polynomial dynamics: states, actions,
//! discounted return, and both REINFORCE estimator blocks as
//! polynomials in the stacked noise vector `xi`.

use super::{MultiPoly, PolyPolicyParams, PolySystem};
use crate::error::{Error, Result};

/// States `s_0..s_T` and actions `a_0..a_{T-1}` as polynomials over
/// `xi = (s_0, eps_0, ..., eps_{T-1})`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `T + 1` entries of `n` polynomials each; entry 0 is the identity
    /// embedding of the initial state.
    pub states: Vec<Vec<MultiPoly>>,
    /// `T` entries of `m` polynomials each.
    pub actions: Vec<Vec<MultiPoly>>,
}

/// Return, score, and estimator polynomials for one parameter point.
///
/// `ghat_theta[k][j] = return_poly * score_theta[k][j]` and likewise for
/// the log-std block; the score blocks carry no discount factors.
#[derive(Clone, Debug)]
pub struct EstimatorPolys {
    pub return_poly: MultiPoly,
    pub score_theta: Vec<Vec<MultiPoly>>,
    pub score_ell: Vec<MultiPoly>,
    pub ghat_theta: Vec<Vec<MultiPoly>>,
    pub ghat_ell: Vec<MultiPoly>,
}

fn retag_step(e: Error, step: usize) -> Error {
    match e {
        Error::DegreeCapExceeded { degree, cap, .. } => {
            Error::DegreeCapExceeded { degree, cap, step }
        }
        other => other,
    }
}

/// Composed feature values `Phi[k][j](s_t)` for every step, plus the
/// trajectory itself. Internal: the public entry points expose only the
/// parts they promise.
fn propagate_full(
    sys: &PolySystem,
    params: &PolyPolicyParams,
) -> Result<(Trajectory, Vec<Vec<Vec<MultiPoly>>>)> {
    params.check_dims(sys)?;
    let (n, m) = (sys.state_dim(), sys.action_dim());
    let d = sys.feature_dim();
    let t_horizon = sys.horizon_t();
    let cap = sys.degree_cap();
    let nv = sys.xi_dim();
    let theta = params.theta();

    let mut states: Vec<Vec<MultiPoly>> = Vec::with_capacity(t_horizon + 1);
    let mut actions: Vec<Vec<MultiPoly>> = Vec::with_capacity(t_horizon);
    let mut feature_vals: Vec<Vec<Vec<MultiPoly>>> = Vec::with_capacity(t_horizon);

    states.push((0..n).map(|i| MultiPoly::var(nv, i)).collect::<Result<Vec<_>>>()?);

    for t in 0..t_horizon {
        // Phi[k][j] composed with s_t. The state cap does not bind
        // feature polynomials; any breach they would cause shows up in
        // the next state's substitution.
        let mut phi_t: Vec<Vec<MultiPoly>> = Vec::with_capacity(d);
        for row in sys.features() {
            let composed = row
                .iter()
                .map(|p| {
                    p.substitute(&states[t], super::MAX_EXPONENT)
                        .map_err(|e| retag_step(e, t))
                })
                .collect::<Result<Vec<_>>>()?;
            phi_t.push(composed);
        }

        // a_t[j] = sum_k theta[k][j] Phi[k][j](s_t) + eps_{t,j}; the
        // mean/noise split is kept explicit so the score's symbolic
        // cancellation can be asserted right here.
        let mut a_t: Vec<MultiPoly> = Vec::with_capacity(m);
        for j in 0..m {
            let mut mean = MultiPoly::zero(nv);
            for (k, phi_row) in phi_t.iter().enumerate() {
                let w = theta.get(k, j);
                if w != 0.0 {
                    mean = mean.add(&phi_row[j].scale(w))?;
                }
            }
            let eps = MultiPoly::var(nv, n + t * m + j)?;
            let action = mean.add(&eps)?;
            debug_assert_eq!(
                action.sub(&mean).unwrap(),
                eps,
                "action minus mean must cancel symbolically to the noise variable"
            );
            a_t.push(action);
        }

        // s_{t+1} = P(s_t, a_t).
        let mut sa = states[t].clone();
        sa.extend(a_t.iter().cloned());
        let next = sys
            .transition()
            .iter()
            .map(|p| p.substitute(&sa, cap).map_err(|e| retag_step(e, t + 1)))
            .collect::<Result<Vec<_>>>()?;

        states.push(next);
        actions.push(a_t);
        feature_vals.push(phi_t);
    }

    Ok((Trajectory { states, actions }, feature_vals))
}

/// Unrolls the closed-loop system symbolically.
pub fn propagate(sys: &PolySystem, params: &PolyPolicyParams) -> Result<Trajectory> {
    propagate_full(sys, params).map(|(traj, _)| traj)
}

/// Builds the discounted return and both estimator blocks as explicit
/// polynomials. Feasible only when the return stays small enough to
/// materialize; the NSR entry point evaluates moments without this
/// expansion.
///
/// The state degree cap does not bind here; only the byte-packed
/// exponent limit does.
pub fn estimator_polys(sys: &PolySystem, params: &PolyPolicyParams) -> Result<EstimatorPolys> {
    let (traj, feature_vals) = propagate_full(sys, params)?;
    let (n, m, d) = (sys.state_dim(), sys.action_dim(), sys.feature_dim());
    let t_horizon = sys.horizon_t();
    let nv = sys.xi_dim();
    let inv_sigma = sys.sigma().inv_vars()?;
    let loose_cap = super::MAX_EXPONENT;

    let mut return_poly = MultiPoly::zero(nv);
    let mut gpow = 1.0;
    for t in 0..t_horizon {
        let mut sa = traj.states[t + 1].clone();
        sa.extend(traj.actions[t].iter().cloned());
        let r_t = sys.reward().substitute(&sa, loose_cap).map_err(|e| retag_step(e, t))?;
        return_poly = return_poly.add(&r_t.scale(gpow))?;
        gpow *= sys.gamma();
    }

    // score_theta[k][j] = sum_t Phi[k][j](s_t) eps_{t,j} / sigma_j^2,
    // score_ell[j] = sum_t (eps_{t,j}^2 / sigma_j^2 - 1); undiscounted.
    let mut score_theta = vec![vec![MultiPoly::zero(nv); m]; d];
    let mut score_ell = vec![MultiPoly::zero(nv); m];
    for t in 0..t_horizon {
        for j in 0..m {
            let eps = MultiPoly::var(nv, n + t * m + j)?;
            for k in 0..d {
                let contrib =
                    feature_vals[t][k][j].mul(&eps, loose_cap)?.scale(inv_sigma[j]);
                score_theta[k][j] = score_theta[k][j].add(&contrib)?;
            }
            let quad = eps.mul(&eps, loose_cap)?.scale(inv_sigma[j]);
            score_ell[j] =
                score_ell[j].add(&quad)?.add(&MultiPoly::constant(nv, -1.0))?;
        }
    }

    let mut ghat_theta = vec![vec![MultiPoly::zero(nv); m]; d];
    for k in 0..d {
        for j in 0..m {
            ghat_theta[k][j] = return_poly.mul(&score_theta[k][j], loose_cap)?;
        }
    }
    let ghat_ell = score_ell
        .iter()
        .map(|s| return_poly.mul(s, loose_cap))
        .collect::<Result<Vec<_>>>()?;

    Ok(EstimatorPolys { return_poly, score_theta, score_ell, ghat_theta, ghat_ell })
}

/// Encodes a linear system with linear state features as a degree-1
/// polynomial system, with `theta = K^T` reproducing the gain-feedback
/// policy. Shared by the cross-module consistency tests and the CLI.
pub fn linear_as_poly_system(
    sys: &crate::lqg::LinearSystem,
    pol: &crate::lqg::GaussianLinearPolicy,
) -> Result<(PolySystem, PolyPolicyParams)> {
    let (n, m) = (sys.state_dim(), sys.action_dim());
    let nv = n + m;
    let mut transition = Vec::with_capacity(n);
    for i in 0..n {
        let mut terms = Vec::new();
        for j in 0..n {
            terms.push((unit_exp(nv, j), sys.a().get(i, j)));
        }
        for j in 0..m {
            terms.push((unit_exp(nv, n + j), sys.b().get(i, j)));
        }
        transition.push(MultiPoly::from_terms(nv, terms)?);
    }

    // r(s', a) = -(s'^T Qs s' + a^T Qa a).
    let mut reward_terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            reward_terms.push((pair_exp(nv, i, j), -sys.qs().get(i, j)));
        }
    }
    for i in 0..m {
        for j in 0..m {
            reward_terms.push((pair_exp(nv, n + i, n + j), -sys.qa().get(i, j)));
        }
    }
    let reward = MultiPoly::from_terms(nv, reward_terms)?;

    // Feature row k is the state coordinate s_k for every output; the
    // policy mean (K s)_j = sum_k K[j][k] s_k then matches theta = K^T.
    let mut features = Vec::with_capacity(n);
    for k in 0..n {
        let phi = MultiPoly::var(n, k)?;
        features.push(vec![phi; m]);
    }

    let sigma0_diag: Vec<f64> = (0..n).map(|i| sys.sigma0().get(i, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && sys.sigma0().get(i, j) != 0.0 {
                return Err(Error::Config(
                    "polynomial encoding requires a diagonal Sigma0".into(),
                ));
            }
        }
    }

    let poly_sys = PolySystem::new(
        transition,
        reward,
        features,
        sys.horizon_t(),
        sys.gamma(),
        crate::mat::DiagCov::new(sigma0_diag)?,
        pol.sigma(),
        super::DEFAULT_DEGREE_CAP,
    )?;
    let params = PolyPolicyParams::new(pol.k().transpose(), pol.ell().to_vec())?;
    Ok((poly_sys, params))
}

fn unit_exp(nv: usize, i: usize) -> Vec<usize> {
    let mut e = vec![0; nv];
    e[i] = 1;
    e
}

fn pair_exp(nv: usize, i: usize, j: usize) -> Vec<usize> {
    let mut e = vec![0; nv];
    e[i] += 1;
    e[j] += 1;
    e
}
