//! Variance upper bounds that avoid the full pairwise decomposition,
//! and the spectral sandwich for the lifted state map norm.
//!
//! The gain-block bound replaces the per-pair score selectors with the
//! whole-trajectory Gram matrices `S = FS' FS` and `E = FE' FE`, paying
//! a Cauchy-Schwarz factor of 2 across the state/noise split; the
//! log-std bound drops cross-step correlations, paying a factor of
//! `T` (score coordinates) plus `2mT` from the weight bound.

use crate::error::{Error, Result};
use crate::mat::{spectral_norm, Mat};
use crate::moments::{is_moment, QuadFormList};

use super::LiftedSystem;

/// Upper bounds `(bound_K, bound_ell)` on the Frobenius variances of
/// the two estimator blocks.
pub fn variance_upper_bound(l: &LiftedSystem) -> Result<(f64, f64)> {
    if l.horizon_t < 1 {
        return Err(Error::Config("lifted system has zero horizon".into()));
    }
    let inv = l.sigma_bar.inv_vars()?;
    let sd = l.sigma_bar.vars();
    let big = l.m * l.horizon_t;
    let sbar = l.sigma_bar.to_mat();
    let sigma0 = &l.sigma0;

    let is0 = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sigma0.clone(), factors.to_vec())?)
    };
    let isb = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sbar.clone(), factors.to_vec())?)
    };

    let mss = sym(&l.mss_bar);
    let mee = sym(&l.mee_bar);
    let mse = &l.mse_bar;

    let s_gram = sym(&l.fs.transpose().matmul(&l.fs));
    let e_gram = sym(&l.fe.transpose().matmul(&l.fe));
    let inv2 = Mat::from_diag(&inv.iter().map(|d| d * d).collect::<Vec<_>>());
    let inv1 = Mat::from_diag(&inv);

    let mse_s = scale_cols(mse, sd);
    let u = sym(&mse.matmul(&mse.transpose()));
    let v = sym(&mse_s.matmul(&mse.transpose()));
    let w = sym(&mse_s.matmul(&e_gram).matmul(&mse_s.transpose()));
    let z = sym(&mse.matmul(&e_gram).matmul(&mse_s.transpose()));

    // State-score half: scores weighted by the stacked state Gram.
    let star = isb(&[inv2.clone()])? * is0(&[s_gram.clone(), mss.clone(), mss.clone()])?
        + is0(&[s_gram.clone()])? * isb(&[inv2.clone(), mee.clone(), mee.clone()])?
        + 2.0 * is0(&[s_gram.clone(), mss.clone()])? * isb(&[inv2.clone(), mee.clone()])?
        + 4.0
            * (isb(&[inv2.clone()])? * is0(&[s_gram.clone(), v.clone()])?
                + 2.0 * is0(&[s_gram, u.clone()])?);
    // Noise-score half: scores weighted by the noise-map Gram.
    let dagger = isb(&[inv2.clone(), e_gram.clone()])? * is0(&[mss.clone(), mss.clone()])?
        + isb(&[inv2.clone(), e_gram.clone(), mee.clone(), mee.clone()])?
        + 2.0 * is0(&[mss.clone()])? * isb(&[inv2.clone(), e_gram.clone(), mee.clone()])?
        + 4.0 * isb(&[inv2.clone(), e_gram.clone()])? * is0(&[v.clone()])?
        + 8.0 * isb(&[e_gram])? * is0(&[u])?
        + 8.0 * isb(&[inv2])? * is0(&[w])?
        + 32.0 * is0(&[z])?;
    let bound_k = 2.0 * star + 2.0 * dagger;

    // Log-std block: per-step scores are identically distributed, so a
    // factor T covers the score sum and the remaining moments are
    // whole-trajectory quantities; d = mT is the lifted noise dimension.
    let d = big as f64;
    let t_f = l.horizon_t as f64;
    let m_f = l.m as f64;
    let ell_core = is0(&[mss.clone(), mss.clone()])? * isb(&[inv1.clone(), inv1.clone()])?
        + isb(&[inv1.clone(), inv1.clone(), mee.clone(), mee.clone()])?
        + 2.0 * is0(&[mss.clone()])? * isb(&[inv1.clone(), inv1.clone(), mee.clone()])?
        + 4.0 * (d + 2.0) * (d + 4.0) * is0(&[v.clone()])?;
    let ell_tail = is0(&[mss.clone(), mss.clone()])?
        + isb(&[mee.clone(), mee.clone()])?
        + 2.0 * is0(&[mss])? * isb(&[mee])?
        + 4.0 * is0(&[v])?;
    let bound_ell = t_f * (2.0 * ell_core + 2.0 * m_f * t_f * ell_tail);

    Ok((bound_k, bound_ell))
}

/// Spectral sandwich for the squared norm of the lifted state map:
/// returns `(max_t ||F^t||_2^2, ||FS||_2^2, sum_t ||F^t||_2^2)` over
/// `t = 0 .. T-1`; lower <= exact <= upper always.
pub fn lifted_state_map_norm_bounds(f: &Mat, horizon_t: usize) -> Result<(f64, f64, f64)> {
    if !f.is_square() {
        return Err(Error::Dim(format!(
            "state map must be square, got {}x{}",
            f.rows(),
            f.cols()
        )));
    }
    if horizon_t < 1 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let n = f.rows();
    let fpow = crate::mat::powers(f, horizon_t - 1)?;
    let tol = 1e-12;
    let mut lower = 0.0f64;
    let mut upper = 0.0f64;
    let mut stacked = Mat::zeros(n * horizon_t, n);
    for (t, ft) in fpow.iter().enumerate() {
        let s = spectral_norm(ft, tol);
        lower = lower.max(s * s);
        upper += s * s;
        stacked.set_block(t * n, 0, ft);
    }
    let exact = spectral_norm(&stacked, tol);
    Ok((lower, exact * exact, upper))
}

fn sym(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

fn scale_cols(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[c])
}

#[cfg(test)]
mod tests {
    use super::super::{
        builtin_system, lift, multi_step_mean_grads, multi_step_second_moments,
        GaussianLinearPolicy, LinearSystem,
    };
    use super::*;

    #[test]
    fn zero_costs_give_zero_bounds() {
        let sys = LinearSystem::new(
            Mat::new(2, 2, vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
            Mat::new(2, 1, vec![0.0, 0.1]).unwrap(),
            Mat::zeros(2, 2),
            Mat::zeros(1, 1),
            1.0,
            3,
            Mat::eye(2),
        )
        .unwrap();
        let pol = GaussianLinearPolicy::with_isotropic_std(
            Mat::new(1, 2, vec![-1.0, -3.0]).unwrap(),
            0.5,
        )
        .unwrap();
        let lifted = lift(&sys, &pol).unwrap();
        assert_eq!(variance_upper_bound(&lifted).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn bound_dominates_exact_variance_on_double_integrator() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(5).unwrap();
        let lifted = lift(&sys, &pol).unwrap();
        let (sm_k, sm_ell) = multi_step_second_moments(&lifted).unwrap();
        let (gk, gl) = multi_step_mean_grads(&sys, &pol).unwrap();
        let gk2: f64 = gk.data().iter().map(|v| v * v).sum();
        let gl2: f64 = gl.iter().map(|v| v * v).sum();
        let (bk, bl) = variance_upper_bound(&lifted).unwrap();
        let var_k = sm_k - gk2;
        let var_ell = sm_ell - gl2;
        assert!(var_k <= bk && bk.is_finite(), "K: var {var_k} vs bound {bk}");
        assert!(var_ell <= bl && bl.is_finite(), "ell: var {var_ell} vs bound {bl}");
    }

    #[test]
    fn state_map_sandwich_on_identity_and_nilpotent() {
        let (lo, ex, hi) = lifted_state_map_norm_bounds(&Mat::eye(2), 3).unwrap();
        assert!((lo - 1.0).abs() < 1e-12);
        assert!((ex - 3.0).abs() < 1e-9);
        assert!((hi - 3.0).abs() < 1e-12);
        let (lo, ex, hi) = lifted_state_map_norm_bounds(&Mat::zeros(2, 2), 3).unwrap();
        assert!((lo - 1.0).abs() < 1e-12);
        assert!((ex - 1.0).abs() < 1e-9);
        assert!((hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_map_sandwich_is_ordered_on_random_maps() {
        for case in 0..30u64 {
            let vals: Vec<f64> =
                (0..4).map(|i| crate::rng::standard_normal(13, 0, case, i)).collect();
            let f = Mat::new(2, 2, vals).unwrap();
            let t_h = 1 + (case as usize % 7);
            let (lo, ex, hi) = lifted_state_map_norm_bounds(&f, t_h).unwrap();
            assert!(
                lo <= ex + 1e-10 && ex <= hi + 1e-10,
                "case {case}: {lo} <= {ex} <= {hi} violated"
            );
        }
    }
}
