//! Closed-form estimator moments for horizon 1, where the return is a
//! single quadratic `R = -(s0' Mss s0 + 2 s0' Mse eps + eps' Mee eps)`.
//! Serves as the independent reduction target for the multi-step path.

use crate::error::Result;
use crate::mat::Mat;
use crate::moments::{is_moment, w_mean, w_times_quad, w_times_quad_sq, QuadFormList};

use super::{check_policy_dims, GaussianLinearPolicy, LinearSystem, OneStepCore};

/// Quadratic blocks of the single-step return:
/// `Mss = F' Qs F + K' Qa K`, `Mse = F' Qs B + K' Qa`,
/// `Mee = B' Qs B + Qa`, with `F = A + B K`.
pub fn one_step_core(sys: &LinearSystem, pol: &GaussianLinearPolicy) -> Result<OneStepCore> {
    check_policy_dims(sys, pol)?;
    let f = sys.closed_loop(pol)?;
    let k = pol.k();
    let ft_qs = f.transpose().matmul(sys.qs());
    let kt_qa = k.transpose().matmul(sys.qa());
    let mss = ft_qs.matmul(&f).add(&kt_qa.matmul(k));
    let mse = ft_qs.matmul(sys.b()).add(&kt_qa);
    let mee = sys.b().transpose().matmul(sys.qs()).matmul(sys.b()).add(sys.qa());
    Ok(OneStepCore { mss, mse, mee })
}

/// Exact single-step mean gradients `grad_K = -2 Mse' Sigma0` and
/// `grad_ell = -2 diag(Sigma Mee)`.
pub fn one_step_mean_grads(
    sys: &LinearSystem,
    pol: &GaussianLinearPolicy,
) -> Result<(Mat, Vec<f64>)> {
    let core = one_step_core(sys, pol)?;
    let grad_k = core.mse.transpose().matmul(sys.sigma0()).scale(-2.0);
    let sigma = pol.sigma();
    let grad_ell =
        (0..sys.action_dim()).map(|i| -2.0 * sigma.var(i) * core.mee.get(i, i)).collect();
    Ok((grad_k, grad_ell))
}

/// Exact single-step second moments `(E||Ghat_K||_F^2, E||Ghat_ell||^2)`.
///
/// The gain part sums four closed-form pieces built from Gaussian
/// quadratic-form moments; the log-std part uses the chi-square score
/// weight moments. Requires a nondegenerate policy covariance.
pub fn one_step_second_moments(
    sys: &LinearSystem,
    pol: &GaussianLinearPolicy,
) -> Result<(f64, f64)> {
    let core = one_step_core(sys, pol)?;
    let sigma = pol.sigma();
    let inv = sigma.inv_vars()?;
    let m = sys.action_dim();
    let n = sys.state_dim();
    let sigma0 = sys.sigma0().clone();
    let sigma_mat = sigma.to_mat();

    let mss = sym2(&core.mss);
    let mee = sym2(&core.mee);
    let inv2 = Mat::from_diag(&inv.iter().map(|d| d * d).collect::<Vec<_>>());
    let eye_n = Mat::eye(n);

    let is0 = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sigma0.clone(), factors.to_vec())?)
    };
    let ise = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sigma_mat.clone(), factors.to_vec())?)
    };

    // E||Ghat_K||^2 with Ghat_K = Sigma^-1 eps s0' R:
    // ||Ghat_K||_F^2 = (eps' Sigma^-2 eps)(s0' s0) R^2, expanded over
    // R = -(x + 2y + z).
    let e1 = ise(&[inv2.clone()])? * is0(&[eye_n.clone(), mss.clone(), mss.clone()])?;
    let e2 = is0(&[eye_n.clone()])? * ise(&[inv2.clone(), mee.clone(), mee.clone()])?;
    let e3 = 2.0 * is0(&[eye_n.clone(), mss.clone()])? * ise(&[inv2.clone(), mee.clone()])?;
    // U = Mse Mse', V = Mse Sigma Mse'.
    let u = core.mse.matmul(&core.mse.transpose());
    let v = scale_cols(&core.mse, sigma.vars()).matmul(&core.mse.transpose());
    let e4 = 4.0 * (2.0 * is0(&[eye_n.clone(), sym2(&u)])? + ise(&[inv2])? * is0(&[eye_n, sym2(&v)])?);
    let sm_k = e1 + e2 + e3 + e4;

    // E||Ghat_ell||^2 with the chi-square score weight
    // w = ||Sigma^-1(eps.eps) - 1||^2; S = Sigma^{1/2} Mee Sigma^{1/2}.
    let sqrt_vars = sigma.sqrt_vars();
    let s_mat = sym2(&Mat::from_fn(m, m, |r, c| sqrt_vars[r] * mee.get(r, c) * sqrt_vars[c]));
    let l1 = w_mean(m) * is0(&[mss.clone(), mss.clone()])?;
    let l2 = w_times_quad_sq(&s_mat)?;
    let l3 = 2.0 * is0(&[mss])? * w_times_quad(&s_mat)?;
    let l4 = 4.0 * (2.0 * m as f64 + 8.0) * is0(&[sym2(&v)])?;
    let sm_ell = l1 + l2 + l3 + l4;

    Ok((sm_k, sm_ell))
}

fn sym2(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

fn scale_cols(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[c])
}

#[cfg(test)]
mod tests {
    use super::super::{builtin_system, objective, GaussianLinearPolicy, LinearSystem};
    use super::*;

    fn double_integrator_t1() -> (LinearSystem, GaussianLinearPolicy) {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        (sys.with_horizon(1).unwrap(), pol)
    }

    #[test]
    fn core_blocks_on_double_integrator() {
        let (sys, pol) = double_integrator_t1();
        let core = one_step_core(&sys, &pol).unwrap();
        // Mee = B'B + Qa = 0.01 + 0.01.
        assert!((core.mee.get(0, 0) - 0.02).abs() < 1e-15);
        // F = A + BK.
        let f = sys.closed_loop(&pol).unwrap();
        let expect_f = Mat::new(2, 2, vec![1.0, 0.1, -0.1, 0.7]).unwrap();
        assert!(f.sub(&expect_f).max_abs() < 1e-15);
    }

    #[test]
    fn core_with_zero_input_matrix() {
        // B = 0: Mse = K' Qa, Mee = Qa.
        let sys = LinearSystem::new(
            Mat::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
            Mat::zeros(2, 1),
            Mat::eye(2),
            Mat::new(1, 1, vec![0.3]).unwrap(),
            1.0,
            1,
            Mat::eye(2),
        )
        .unwrap();
        let pol =
            GaussianLinearPolicy::with_isotropic_std(Mat::new(1, 2, vec![2.0, -1.0]).unwrap(), 1.0)
                .unwrap();
        let core = one_step_core(&sys, &pol).unwrap();
        let kt_qa = pol.k().transpose().scale(0.3);
        assert!(core.mse.sub(&kt_qa).max_abs() < 1e-15);
        assert!((core.mee.get(0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn core_with_zero_costs_is_zero() {
        let sys = LinearSystem::new(
            Mat::new(2, 2, vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
            Mat::new(2, 1, vec![0.0, 0.1]).unwrap(),
            Mat::zeros(2, 2),
            Mat::zeros(1, 1),
            1.0,
            1,
            Mat::eye(2),
        )
        .unwrap();
        let pol = GaussianLinearPolicy::with_isotropic_std(
            Mat::new(1, 2, vec![-1.0, -3.0]).unwrap(),
            0.5,
        )
        .unwrap();
        let core = one_step_core(&sys, &pol).unwrap();
        assert!(core.mss.max_abs() == 0.0 && core.mse.max_abs() == 0.0 && core.mee.max_abs() == 0.0);
    }

    #[test]
    fn mean_grads_on_double_integrator() {
        let (sys, pol) = double_integrator_t1();
        let (gk, gl) = one_step_mean_grads(&sys, &pol).unwrap();
        assert!((gk.get(0, 0) - 0.04).abs() < 1e-14);
        assert!((gk.get(0, 1) + 0.08).abs() < 1e-14);
        // grad_ell = -2 sigma^2 Mee = -2 * 0.25 * 0.02.
        assert!((gl[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn mean_grads_match_finite_differences_of_objective() {
        let (sys, pol) = double_integrator_t1();
        let (gk, gl) = one_step_mean_grads(&sys, &pol).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut kp = pol.k().clone();
            kp.set(0, j, kp.get(0, j) + h);
            let mut km = pol.k().clone();
            km.set(0, j, km.get(0, j) - h);
            let jp = objective(&sys, &GaussianLinearPolicy::new(kp, pol.ell().to_vec()).unwrap())
                .unwrap();
            let jm = objective(&sys, &GaussianLinearPolicy::new(km, pol.ell().to_vec()).unwrap())
                .unwrap();
            let fd = (jp - jm) / (2.0 * h);
            assert!((fd - gk.get(0, j)).abs() < 1e-6 * (1.0 + fd.abs()), "K[{j}]: {fd} vs analytic");
        }
        let jp = objective(
            &sys,
            &GaussianLinearPolicy::new(pol.k().clone(), vec![pol.ell()[0] + h]).unwrap(),
        )
        .unwrap();
        let jm = objective(
            &sys,
            &GaussianLinearPolicy::new(pol.k().clone(), vec![pol.ell()[0] - h]).unwrap(),
        )
        .unwrap();
        let fd = (jp - jm) / (2.0 * h);
        assert!((fd - gl[0]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn degenerate_system_keeps_only_the_pure_noise_term() {
        // A = 0, B = 0, Qs arbitrary, Qa = I, Sigma0 = 0, sigma = 1:
        // Ghat_K vanishes and E||Ghat_ell||^2 = E[(eps^2-1)^2 eps^4] = 78.
        let sys = LinearSystem::new(
            Mat::zeros(1, 1),
            Mat::zeros(1, 1),
            Mat::zeros(1, 1),
            Mat::eye(1),
            1.0,
            1,
            Mat::zeros(1, 1),
        )
        .unwrap();
        let pol =
            GaussianLinearPolicy::with_isotropic_std(Mat::new(1, 1, vec![0.0]).unwrap(), 1.0)
                .unwrap();
        let (sm_k, sm_ell) = one_step_second_moments(&sys, &pol).unwrap();
        assert!(sm_k.abs() < 1e-12);
        assert!((sm_ell - 78.0).abs() < 1e-10);
    }

    #[test]
    fn nsr_scaling_slope_is_near_one() {
        // NSR grows linearly in alpha = sigma0^2 / sigma^2 at fixed
        // small sigma; regression slope on a log-log grid stays in
        // [0.9, 1.1].
        let sigma = 0.05f64;
        let alphas = [1e2, 3.16e2, 1e3, 3.16e3, 1e4];
        let mut pts = Vec::new();
        for &alpha in &alphas {
            let sigma0sq = alpha * sigma * sigma;
            let sys = LinearSystem::new(
                Mat::new(2, 2, vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
                Mat::new(2, 1, vec![0.0, 0.1]).unwrap(),
                Mat::eye(2),
                Mat::new(1, 1, vec![0.01]).unwrap(),
                1.0,
                1,
                Mat::eye(2).scale(sigma0sq),
            )
            .unwrap();
            let pol = GaussianLinearPolicy::with_isotropic_std(
                Mat::new(1, 2, vec![-1.0, -3.0]).unwrap(),
                sigma,
            )
            .unwrap();
            let (sm_k, sm_ell) = one_step_second_moments(&sys, &pol).unwrap();
            let (gk, gl) = one_step_mean_grads(&sys, &pol).unwrap();
            let g: f64 = gk.data().iter().map(|v| v * v).sum::<f64>()
                + gl.iter().map(|v| v * v).sum::<f64>();
            let nsr = (sm_k + sm_ell - g) / g;
            pts.push((alpha.ln(), nsr.ln()));
        }
        let slope = least_squares_slope(&pts);
        assert!((0.9..=1.1).contains(&slope), "slope {slope}");
    }

    fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }
}
