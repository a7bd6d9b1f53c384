//! Horizon lift: stacks the closed-loop rollout into block operator
//! form so the return becomes a single quadratic in `(s_0, eps_bar)`.

use crate::error::Result;
use crate::mat::Mat;

use super::{check_policy_dims, GaussianLinearPolicy, LiftedSystem, LinearSystem};

/// Builds the lifted operators for the system's horizon.
///
/// With `F = A + B K` and `eps_bar = (eps_0, .., eps_{T-1})`, the
/// stacked states satisfy `s_vec = FS s_0 + FE eps_bar` (current) and
/// `s_vec' = FSp s_0 + FEp eps_bar` (successor), the stacked actions
/// `a_vec = KS s_0 + KE eps_bar`, and the return is
/// `R = -(s0' Mss_bar s0 + 2 s0' Mse_bar eps_bar + eps_bar' Mee_bar eps_bar)`
/// where the bars fold the discount weights into the cost blocks.
pub fn lift(sys: &LinearSystem, pol: &GaussianLinearPolicy) -> Result<LiftedSystem> {
    check_policy_dims(sys, pol)?;
    let f = sys.closed_loop(pol)?;
    let (n, m) = (sys.state_dim(), sys.action_dim());
    let t_horizon = sys.horizon_t();
    let k = pol.k();
    let b = sys.b();

    // F^0 .. F^T.
    let fpow = crate::mat::powers(&f, t_horizon)?;
    // F^j B for j = 0 .. T-1 (highest power of F multiplying B is T-1).
    let fb: Vec<Mat> = (0..t_horizon).map(|j| fpow[j].matmul(b)).collect();
    let kf: Vec<Mat> = (0..=t_horizon).map(|j| k.matmul(&fpow[j])).collect();
    let kfb: Vec<Mat> = (0..t_horizon).map(|j| k.matmul(&fb[j])).collect();

    let big_n = n * t_horizon;
    let big_m = m * t_horizon;

    let mut fs = Mat::zeros(big_n, n);
    let mut fsp = Mat::zeros(big_n, n);
    let mut fe = Mat::zeros(big_n, big_m);
    let mut fep = Mat::zeros(big_n, big_m);
    let mut ks = Mat::zeros(big_m, n);
    let mut ke = Mat::zeros(big_m, big_m);

    for t in 0..t_horizon {
        fs.set_block(t * n, 0, &fpow[t]);
        fsp.set_block(t * n, 0, &fpow[t + 1]);
        ks.set_block(t * m, 0, &kf[t]);
        for i in 0..=t {
            // FE block (t, i) = F^{t-1-i} B is strictly block lower.
            if i + 1 <= t {
                fe.set_block(t * n, i * m, &fb[t - 1 - i]);
                ke.set_block(t * m, i * m, &kfb[t - 1 - i]);
            }
            fep.set_block(t * n, i * m, &fb[t - i]);
        }
        ke.set_block(t * m, t * m, &Mat::eye(m));
    }

    let dgamma: Vec<f64> = {
        let mut w = Vec::with_capacity(t_horizon);
        let mut g = 1.0;
        for _ in 0..t_horizon {
            w.push(g);
            g *= sys.gamma();
        }
        w
    };

    // (Dgamma (x) Q) X applied blockwise: row block t becomes gamma^t Q X_t.
    let weighted = |x: &Mat, q: &Mat| -> Mat {
        let a = q.rows();
        let mut out = Mat::zeros(x.rows(), x.cols());
        for t in 0..t_horizon {
            let xt = x.block(t * a, 0, a, x.cols());
            out.set_block(t * a, 0, &q.matmul(&xt).scale(dgamma[t]));
        }
        out
    };

    let wq_fsp = weighted(&fsp, sys.qs());
    let wq_fep = weighted(&fep, sys.qs());
    let wa_ks = weighted(&ks, sys.qa());
    let wa_ke = weighted(&ke, sys.qa());

    let fsp_t = fsp.transpose();
    let ks_t = ks.transpose();
    let mss_bar = symmetrize(&fsp_t.matmul(&wq_fsp).add(&ks_t.matmul(&wa_ks)));
    let mse_bar = fsp_t.matmul(&wq_fep).add(&ks_t.matmul(&wa_ke));
    let mee_bar = symmetrize(&fep.transpose().matmul(&wq_fep).add(&ke.transpose().matmul(&wa_ke)));

    let sigma = pol.sigma();
    let mut vars = Vec::with_capacity(big_m);
    for _ in 0..t_horizon {
        vars.extend_from_slice(sigma.vars());
    }
    let sigma_bar = crate::mat::DiagCov::new(vars)?;

    Ok(LiftedSystem {
        fs,
        fsp,
        fe,
        fep,
        ks,
        ke,
        mss_bar,
        mse_bar,
        mee_bar,
        sigma_bar,
        dgamma,
        sigma0: sys.sigma0().clone(),
        n,
        m,
        horizon_t: t_horizon,
    })
}

fn symmetrize(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

#[cfg(test)]
mod tests {
    use super::super::{builtin_system, one_step_core, GaussianLinearPolicy, LinearSystem};
    use super::*;

    #[test]
    fn horizon_one_lift_matches_one_step_blocks() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(1).unwrap();
        let core = one_step_core(&sys, &pol).unwrap();
        let l = lift(&sys, &pol).unwrap();
        assert!(l.mss_bar.sub(&core.mss).max_abs() < 1e-14);
        assert!(l.mse_bar.sub(&core.mse).max_abs() < 1e-14);
        assert!(l.mee_bar.sub(&core.mee).max_abs() < 1e-14);
    }

    #[test]
    fn zero_closed_loop_state_map_is_identity_then_zero() {
        // F = 0: FS stacks I, 0, 0.
        let sys = LinearSystem::new(
            Mat::zeros(2, 2),
            Mat::new(2, 1, vec![0.0, 1.0]).unwrap(),
            Mat::eye(2),
            Mat::new(1, 1, vec![0.5]).unwrap(),
            1.0,
            3,
            Mat::eye(2),
        )
        .unwrap();
        let pol =
            GaussianLinearPolicy::with_isotropic_std(Mat::new(1, 2, vec![0.0, 0.0]).unwrap(), 1.0)
                .unwrap();
        let l = lift(&sys, &pol).unwrap();
        let mut expect = Mat::zeros(6, 2);
        expect.set_block(0, 0, &Mat::eye(2));
        assert!(l.fs.sub(&expect).max_abs() == 0.0);
    }

    #[test]
    fn noise_map_is_strictly_block_lower_and_ke_has_unit_diagonal() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(4).unwrap();
        let l = lift(&sys, &pol).unwrap();
        let (n, m) = (l.n, l.m);
        for t in 0..l.horizon_t {
            for i in t..l.horizon_t {
                assert!(l.fe.block(t * n, i * m, n, m).max_abs() == 0.0);
            }
            let diag = l.ke.block(t * m, t * m, m, m);
            assert!(diag.sub(&Mat::eye(m)).max_abs() == 0.0);
        }
    }

    #[test]
    fn lifted_return_matches_simulated_rollout() {
        // R computed from the quadratic blocks must equal the rollout sum
        // for arbitrary (s0, eps) draws.
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(5).unwrap();
        let l = lift(&sys, &pol).unwrap();
        let gamma = sys.gamma();
        for case in 0..20u64 {
            let s0: Vec<f64> =
                (0..2).map(|i| crate::rng::standard_normal(7, 0, case, i as u64)).collect();
            let eps: Vec<f64> =
                (0..5).map(|i| crate::rng::standard_normal(7, 1, case, i as u64)).collect();
            // Direct rollout.
            let mut s = s0.clone();
            let mut ret = 0.0;
            let mut gpow = 1.0;
            for t in 0..5 {
                let mean_a: f64 = (0..2).map(|j| pol.k().get(0, j) * s[j]).sum();
                let a = mean_a + eps[t];
                let mut s_next = vec![0.0; 2];
                for r in 0..2 {
                    s_next[r] =
                        (0..2).map(|c| sys.a().get(r, c) * s[c]).sum::<f64>() + sys.b().get(r, 0) * a;
                }
                let cost_s: f64 = s_next.iter().map(|v| v * v).sum();
                ret -= gpow * (cost_s + 0.01 * a * a);
                s = s_next;
                gpow *= gamma;
            }
            // Quadratic form.
            let s0m = Mat::col_vec(&s0);
            let em = Mat::col_vec(&eps);
            let x = s0m.transpose().matmul(&l.mss_bar).matmul(&s0m).get(0, 0);
            let y = s0m.transpose().matmul(&l.mse_bar).matmul(&em).get(0, 0);
            let z = em.transpose().matmul(&l.mee_bar).matmul(&em).get(0, 0);
            let quad = -(x + 2.0 * y + z);
            assert!(
                (quad - ret).abs() < 1e-9 * (1.0 + ret.abs()),
                "case {case}: quad {quad} vs rollout {ret}"
            );
        }
    }
}
