//! Production evaluator for the multi-step estimator second moments.
//!
//! Same per-timestep-pair decomposition as the reference evaluator,
//! but the lifted-noise expectations are collapsed to closed forms:
//! the score selector matrices touch only coordinate block `(t, p)`,
//! so every trace against them reduces to a handful of entry lookups
//! into precomputed products. Cost is `O(T^2)` small-matrix work after
//! an `O((mT)^3)` setup, against the reference's dense lifted algebra
//! per pair.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::moments::{is_moment, QuadFormList};

use super::LiftedSystem;

/// `(E||Ghat_K||_F^2, E||Ghat_ell||^2)` for the lifted system.
pub fn multi_step_second_moments(l: &LiftedSystem) -> Result<(f64, f64)> {
    let (k_terms, ell_terms) = term_sums(l)?;
    Ok((k_terms.iter().sum(), ell_terms.iter().sum()))
}

/// Per-term totals, kept separate so tests can localize a disagreement
/// with the reference evaluator.
pub(crate) fn term_sums(l: &LiftedSystem) -> Result<([f64; 6], [f64; 4])> {
    if l.horizon_t < 1 {
        return Err(Error::Config("lifted system has zero horizon".into()));
    }
    let c = Caches::build(l)?;
    let mut k_terms = [0.0; 6];
    let mut ell_terms = [0.0; 4];
    for t in 0..l.horizon_t {
        for p in t..l.horizon_t {
            let weight = if t == p { 1.0 } else { 2.0 };
            let (dk, dl) = pair_contribution(l, &c, t, p)?;
            for (acc, v) in k_terms.iter_mut().zip(dk) {
                *acc += weight * v;
            }
            for (acc, v) in ell_terms.iter_mut().zip(dl) {
                *acc += weight * v;
            }
        }
    }
    Ok((k_terms, ell_terms))
}

/// Products shared by every timestep pair.
struct Caches {
    /// Per-coordinate inverse noise variances.
    inv: Vec<f64>,
    tr_sinv: f64,
    mss: Mat,
    mee: Mat,
    /// `Sigma_bar Mee` and its square.
    bm: Mat,
    p2: Mat,
    mu: f64,
    tr_p2: f64,
    bm_diag: Vec<f64>,
    p2_diag: Vec<f64>,
    /// Per-step sums of `bm_diag` / `p2_diag` over the step's coordinates.
    sum_bm: Vec<f64>,
    sum_p2: Vec<f64>,
    /// `Mee Sigma_bar`.
    ms: Mat,
    /// Per-step slices and products: closed-loop power block, noise map
    /// block, and its scaled variants.
    f_blk: Vec<Mat>,
    e_blk: Vec<Mat>,
    es: Vec<Mat>,
    ebm: Vec<Mat>,
    ep2: Vec<Mat>,
    h: Vec<Mat>,
    h2: Vec<Mat>,
    bmset: Vec<Mat>,
    p2set: Vec<Mat>,
    /// Gain-column blocks of `Mse`.
    c_blk: Vec<Mat>,
    /// `V0 = Mse Sigma_bar Mse'` and the global initial-state moments.
    v0: Mat,
    is0_v0: f64,
    is0_m: f64,
    is0_mm: f64,
    /// `c_a' Sigma0 c_a` per lifted noise coordinate.
    c_quad: Vec<f64>,
    sd: Vec<f64>,
}

impl Caches {
    fn build(l: &LiftedSystem) -> Result<Self> {
        let (n, m, t_h) = (l.n, l.m, l.horizon_t);
        let big = m * t_h;
        let inv = l.sigma_bar.inv_vars()?;
        let sd = l.sigma_bar.vars().to_vec();
        // tr(Sigma^-1) over one step's coordinates: the score selector
        // for pair (t, t) occupies a single m-block of the lifted
        // diagonal.
        let tr_sinv: f64 = inv[..m].iter().sum();

        let mss = sym(&l.mss_bar);
        let mee = sym(&l.mee_bar);
        let mse = &l.mse_bar;

        let bm = scale_rows(&mee, &sd);
        let p2 = bm.matmul(&bm);
        let mu = bm.trace();
        let tr_p2 = p2.trace();
        let bm_diag = bm.diag();
        let p2_diag = p2.diag();
        let sum_bm: Vec<f64> =
            (0..t_h).map(|t| (0..m).map(|i| bm_diag[t * m + i]).sum()).collect();
        let sum_p2: Vec<f64> =
            (0..t_h).map(|t| (0..m).map(|i| p2_diag[t * m + i]).sum()).collect();

        let mse_s = scale_cols(mse, &sd);
        let ms = scale_cols(&mee, &sd);
        let k2s = mse_s.matmul(&ms);
        let bms = scale_cols(&bm, &sd);
        let p2s = scale_cols(&p2, &sd);

        let f_blk: Vec<Mat> = (0..t_h).map(|t| l.fs.block(t * n, 0, n, n)).collect();
        let e_blk: Vec<Mat> = (0..t_h).map(|t| l.fe.block(t * n, 0, n, big)).collect();
        let es: Vec<Mat> = e_blk.iter().map(|e| scale_cols(e, &sd)).collect();
        let ebm: Vec<Mat> = e_blk.iter().map(|e| e.matmul(&bm)).collect();
        let ep2: Vec<Mat> = e_blk.iter().map(|e| e.matmul(&p2)).collect();
        let h: Vec<Mat> = e_blk.iter().map(|e| mse_s.matmul(&e.transpose())).collect();
        let h2: Vec<Mat> = e_blk.iter().map(|e| k2s.matmul(&e.transpose())).collect();
        let bmset: Vec<Mat> = e_blk.iter().map(|e| bms.matmul(&e.transpose())).collect();
        let p2set: Vec<Mat> = e_blk.iter().map(|e| p2s.matmul(&e.transpose())).collect();
        let c_blk: Vec<Mat> = (0..t_h).map(|t| mse.block(0, t * m, n, m)).collect();

        let v0 = sym(&mse_s.matmul(&mse.transpose()));
        let sigma0 = l.sigma0.clone();
        let is0 = |factors: &[Mat]| -> Result<f64> {
            is_moment(&QuadFormList::new(sigma0.clone(), factors.to_vec())?)
        };
        let is0_v0 = is0(&[v0.clone()])?;
        let is0_m = is0(&[mss.clone()])?;
        let is0_mm = is0(&[mss.clone(), mss.clone()])?;

        let s0_mse = l.sigma0.matmul(mse);
        let c_quad: Vec<f64> =
            (0..big).map(|a| (0..n).map(|r| mse.get(r, a) * s0_mse.get(r, a)).sum()).collect();

        Ok(Self {
            inv,
            tr_sinv,
            mss,
            mee,
            bm,
            p2,
            mu,
            tr_p2,
            bm_diag,
            p2_diag,
            sum_bm,
            sum_p2,
            ms,
            f_blk,
            e_blk,
            es,
            ebm,
            ep2,
            h,
            h2,
            bmset,
            p2set,
            c_blk,
            v0,
            is0_v0,
            is0_m,
            is0_mm,
            c_quad,
            sd,
        })
    }
}

/// Unweighted contribution of the ordered pair `(t, p)`, `t <= p`.
fn pair_contribution(
    l: &LiftedSystem,
    c: &Caches,
    t: usize,
    p: usize,
) -> Result<([f64; 6], [f64; 4])> {
    let (n, m) = (l.n, l.m);
    let same = t == p;
    let sigma0 = &l.sigma0;
    let is0 = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sigma0.clone(), factors.to_vec())?)
    };

    // Column a of x dotted with column b of y (both row blocks, n rows).
    let dotcol = |x: &Mat, a: usize, y: &Mat, b: usize| -> f64 {
        (0..n).map(|r| x.get(r, a) * y.get(r, b)).sum()
    };
    // Row a of x (mT x n) dotted with column b of y (n x mT).
    let dotrow = |x: &Mat, a: usize, y: &Mat, b: usize| -> f64 {
        (0..n).map(|r| x.get(a, r) * y.get(r, b)).sum()
    };

    let (et, ep) = (&c.e_blk[t], &c.e_blk[p]);
    let (est, esp) = (&c.es[t], &c.es[p]);
    let (ebmt, ebmp) = (&c.ebm[t], &c.ebm[p]);
    let (ep2t, ep2p) = (&c.ep2[t], &c.ep2[p]);

    // Score-selector traces: tr(Sigma W' Y) and tr(Sigma W' Sigma Y)
    // need only the 2m entries of Y in blocks (t,p) and (p,t).
    let tr_w = |entry: &dyn Fn(usize, usize) -> f64| -> f64 {
        (0..m)
            .map(|i| {
                0.5 * c.inv[t * m + i] * (entry(p * m + i, t * m + i) + entry(t * m + i, p * m + i))
            })
            .sum()
    };

    let alpha = if same { c.tr_sinv } else { 0.0 };
    let beta = est.frob_inner(ep);
    // U'[a,b] entries on demand.
    let u_entry =
        |a: usize, b: usize| -> f64 { 0.5 * (dotcol(et, a, ep, b) + dotcol(ep, a, et, b)) };
    let delta: f64 = (0..m).map(|i| u_entry(t * m + i, p * m + i)).sum();
    let kappa: f64 = (0..m).map(|i| c.mee.get(t * m + i, p * m + i)).sum();
    let tau_um = 0.5 * (est.frob_inner(ebmp) + esp.frob_inner(ebmt));
    let tau_u_p2 = 0.5 * (est.frob_inner(ep2p) + esp.frob_inner(ep2t));
    let kw_p2 = tr_w(&|a, b| c.p2.get(a, b));
    // kappa({W,U,Mee}) = 4 [tr(SW SU BM) + tr(SW BM SU)].
    let y1_entry = |a: usize, b: usize| -> f64 {
        c.sd[a] * 0.5 * (dotcol(et, a, ebmp, b) + dotcol(ep, a, ebmt, b))
    };
    let y2_entry = |a: usize, b: usize| -> f64 {
        0.5 * (dotrow(&c.bmset[t], a, ep, b) + dotrow(&c.bmset[p], a, et, b))
    };
    let k3_wum = 4.0 * (tr_w(&y1_entry) + tr_w(&y2_entry));
    // Fourth-cumulant traces for kappa({W,U,Mee,Mee}).
    let z1_entry = |a: usize, b: usize| -> f64 {
        c.sd[a] * 0.5 * (dotcol(et, a, ep2p, b) + dotcol(ep, a, ep2t, b))
    };
    let z2_entry = |a: usize, b: usize| -> f64 {
        0.5 * (dotrow(&c.bmset[t], a, ebmp, b) + dotrow(&c.bmset[p], a, ebmt, b))
    };
    let z3_entry = |a: usize, b: usize| -> f64 {
        0.5 * (dotrow(&c.p2set[t], a, ep, b) + dotrow(&c.p2set[p], a, et, b))
    };
    let tr_wumm = tr_w(&z1_entry);
    let tr_wmum = tr_w(&z2_entry);
    let tr_wmmu = tr_w(&z3_entry);

    let mu = c.mu;
    let tr_p2 = c.tr_p2;
    // Lifted-noise moments against the score selectors, by cumulant
    // partition sums.
    let is_wu = alpha * beta + 2.0 * delta;
    let is_wm = alpha * mu + 2.0 * kappa;
    let is_wmm = alpha * mu * mu + 4.0 * kappa * mu + 2.0 * alpha * tr_p2 + 8.0 * kw_p2;
    let is_wum = alpha * beta * mu
        + 2.0 * delta * mu
        + 2.0 * kappa * beta
        + 2.0 * tau_um * alpha
        + k3_wum;
    let is_wumm = alpha * beta * mu * mu
        + 2.0 * delta * mu * mu
        + 4.0 * kappa * beta * mu
        + 4.0 * tau_um * alpha * mu
        + 2.0 * tr_p2 * alpha * beta
        + 4.0 * delta * tr_p2
        + 8.0 * kappa * tau_um
        + 2.0 * k3_wum * mu
        + 8.0 * kw_p2 * beta
        + 8.0 * tau_u_p2 * alpha
        + 16.0 * (tr_wumm + tr_wmum + tr_wmmu);

    // Initial-state-side factor matrices (all n x n).
    let (ft, fp) = (&c.f_blk[t], &c.f_blk[p]);
    let g = sym(&ft.transpose().matmul(fp));
    let (ct, cp) = (&c.c_blk[t], &c.c_blk[p]);
    let v_tp = ct.matmul(&cp.transpose()).add(&cp.matmul(&ct.transpose())).scale(0.5);
    let (ht, hp) = (&c.h[t], &c.h[p]);
    let v_tilde = ht.matmul(&hp.transpose()).add(&hp.matmul(&ht.transpose())).scale(0.5);
    // Ecol(q, r): n x m block r of the step-q noise map row.
    let ecol = |q: usize, r: usize| -> Mat { c.e_blk[q].block(0, r * m, n, m) };
    let v_hat = {
        let row_p = ecol(t, p).transpose().matmul(&hp.transpose()); // (m x n), Ecol(p,p) = 0
        let row_t = ecol(p, t).transpose().matmul(&ht.transpose());
        sym(&ct.matmul(&row_p).add(&cp.matmul(&row_t)).scale(0.25))
    };
    let v_0 = sym(&hp.matmul(ft).add(&ht.matmul(fp)));
    let v_1 = {
        let lhs = ct.matmul(&ecol(t, p).transpose()).matmul(fp);
        let rhs = cp.matmul(&ecol(p, t).transpose()).matmul(ft);
        sym(&lhs.add(&rhs).scale(0.5))
    };
    let (h2t, h2p) = (&c.h2[t], &c.h2[p]);
    let v_2 = sym(&h2p.matmul(ft).add(&h2t.matmul(fp)));
    let v_3 = {
        // X = Sigma W' Sigma Mee Sigma; rows of Mee Sigma per step.
        let ms_row = |q: usize| -> Mat { c.ms.block(q * m, 0, m, l.m * l.horizon_t) };
        let (msp, mst) = (ms_row(p), ms_row(t));
        let x_j = {
            let a = msp.matmul(&ep.transpose()).matmul(ft).add(&msp.matmul(&et.transpose()).matmul(fp));
            let b = mst.matmul(&ep.transpose()).matmul(ft).add(&mst.matmul(&et.transpose()).matmul(fp));
            ct.matmul(&a).add(&cp.matmul(&b)).scale(0.5)
        };
        let xt_j = {
            let mse_msp = l.mse_bar.matmul(&msp.transpose()); // Mse (Mee Sigma)_p'
            let mse_mst = l.mse_bar.matmul(&mst.transpose());
            // J block column q, transposed.
            let ja_t = ft.transpose().matmul(&ecol(p, t)).add(&fp.transpose().matmul(&ecol(t, t)));
            let ja_p = ft.transpose().matmul(&ecol(p, p)).add(&fp.transpose().matmul(&ecol(t, p)));
            mse_msp.matmul(&ja_t.transpose()).add(&mse_mst.matmul(&ja_p.transpose())).scale(0.5)
        };
        sym(&x_j.add(&xt_j).scale(0.5))
    };

    let e1 = is0(&[g.clone(), c.mss.clone(), c.mss.clone()])? * alpha + c.is0_mm * is_wu;
    let e2 = is0(&[g.clone()])? * is_wmm + is_wumm;
    let e3 = 2.0 * is0(&[g.clone(), c.mss.clone()])? * is_wm + 2.0 * c.is0_m * is_wum;
    let e4 = 4.0
        * (alpha * is0(&[g.clone(), c.v0.clone()])?
            + 2.0 * is0(&[g, v_tp.clone()])?
            + (alpha * beta + 2.0 * delta) * c.is0_v0
            + 2.0 * beta * is0(&[v_tp])?
            + 2.0 * alpha * is0(&[v_tilde])?
            + 8.0 * is0(&[v_hat])?);
    let e5 = 4.0
        * (alpha * is0(&[c.mss.clone(), v_0.clone()])?
            + 2.0 * is0(&[c.mss.clone(), v_1.clone()])?);
    let e6 = 4.0
        * ((alpha * mu + 2.0 * kappa) * is0(&[v_0])?
            + 2.0 * mu * is0(&[v_1])?
            + 2.0 * alpha * is0(&[v_2])?
            + 8.0 * is0(&[v_3])?);

    // Log-std block: per-coordinate chi-square scores reduce to entry
    // sums over bm / p2 at the paired coordinates.
    let e_ind = if same { 1.0 } else { 0.0 };
    let mf = m as f64;
    let mut quart = 0.0;
    let mut trip = 0.0;
    for i in 0..m {
        let (a, b) = (t * m + i, p * m + i);
        let (bmaa, bmbb) = (c.bm_diag[a], c.bm_diag[b]);
        let (p2aa, p2bb) = (c.p2_diag[a], c.p2_diag[b]);
        let bmab = c.bm.get(a, b);
        let bmba = c.bm.get(b, a);
        quart += mu * mu * (1.0 + 2.0 * e_ind)
            + 4.0 * mu * (bmaa + bmbb)
            + 16.0 * e_ind * mu * bmaa
            + 2.0 * tr_p2
            + 4.0 * e_ind * tr_p2
            + 8.0 * bmaa * bmbb
            + 8.0 * (p2aa + p2bb)
            + 16.0 * bmab * bmba
            + 32.0 * e_ind * p2aa;
        trip += mu * (1.0 + 2.0 * e_ind) + 2.0 * (bmaa + bmbb) + 8.0 * e_ind * bmaa;
    }
    let is3l = |q: usize| -> f64 {
        mf * mu * mu + 4.0 * mu * c.sum_bm[q] + 2.0 * mf * tr_p2 + 8.0 * c.sum_p2[q]
    };
    let is2l = |q: usize| -> f64 { mf * mu + 2.0 * c.sum_bm[q] };
    let e2l = quart - is3l(t) - is3l(p) + mf * (mu * mu + 2.0 * tr_p2);
    let e3l = 2.0 * c.is0_m * (trip - is2l(t) - is2l(p) + mf * mu);
    let mut e1l = 0.0;
    let mut e4l = 0.0;
    if same {
        e1l = 2.0 * mf * c.is0_mm;
        let noise32: f64 = (0..m).map(|i| c.sd[t * m + i] * c.c_quad[t * m + i]).sum();
        e4l = 8.0 * mf * c.is0_v0 + 32.0 * noise32;
    }
    Ok(([e1, e2, e3, e4, e5, e6], [e1l, e2l, e3l, e4l]))
}

fn sym(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

fn scale_cols(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[c])
}

fn scale_rows(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[r])
}

#[cfg(test)]
mod tests {
    use super::super::{
        builtin_system, lift, multi_step_second_moments_reference, one_step_second_moments,
        GaussianLinearPolicy, LinearSystem,
    };
    use super::*;
    use crate::mat::DiagCov;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn horizon_one_matches_one_step_closed_forms() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(1).unwrap();
        let (k1, l1) = one_step_second_moments(&sys, &pol).unwrap();
        let lifted = lift(&sys, &pol).unwrap();
        let (k2, l2) = multi_step_second_moments(&lifted).unwrap();
        assert!(rel_close(k1, k2, 1e-10), "K: {k1} vs {k2}");
        assert!(rel_close(l1, l2, 1e-10), "ell: {l1} vs {l2}");
    }

    #[test]
    fn fast_path_matches_reference_on_double_integrator() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        for t_h in [2usize, 3] {
            let sys = sys.with_horizon(t_h).unwrap();
            let lifted = lift(&sys, &pol).unwrap();
            let (kf, lf) = multi_step_second_moments(&lifted).unwrap();
            let (kr, lr) = multi_step_second_moments_reference(&lifted).unwrap();
            assert!(rel_close(kf, kr, 1e-10), "T={t_h} K: {kf} vs {kr}");
            assert!(rel_close(lf, lr, 1e-10), "T={t_h} ell: {lf} vs {lr}");
        }
    }

    #[test]
    fn fast_path_matches_reference_on_random_wide_systems() {
        // Two-dimensional actions and gamma < 1 exercise every block.
        for case in 0..6u64 {
            let rnd = |stream: u64, k: usize| -> Vec<f64> {
                (0..k).map(|i| crate::rng::standard_normal(11, stream, case, i as u64)).collect()
            };
            let a = Mat::new(2, 2, rnd(0, 4).iter().map(|v| 0.4 * v).collect()).unwrap();
            let b = Mat::new(2, 2, rnd(1, 4)).unwrap();
            let qs_half = Mat::new(2, 2, rnd(2, 4)).unwrap();
            let qs = qs_half.matmul(&qs_half.transpose());
            let qa_half = Mat::new(2, 2, rnd(3, 4)).unwrap();
            let qa = qa_half.matmul(&qa_half.transpose());
            let s0_half = Mat::new(2, 2, rnd(4, 4)).unwrap();
            let sigma0 = s0_half.matmul(&s0_half.transpose());
            let sys = LinearSystem::new(a, b, qs, qa, 0.9, 3, sigma0).unwrap();
            let k = Mat::new(2, 2, rnd(5, 4).iter().map(|v| 0.3 * v).collect()).unwrap();
            let ell: Vec<f64> = rnd(6, 2).iter().map(|v| 0.3 * v - 0.5).collect();
            let pol = GaussianLinearPolicy::new(k, ell).unwrap();
            let lifted = lift(&sys, &pol).unwrap();
            let (kf, lf) = multi_step_second_moments(&lifted).unwrap();
            let (kr, lr) = multi_step_second_moments_reference(&lifted).unwrap();
            assert!(rel_close(kf, kr, 1e-9), "case {case} K: {kf} vs {kr}");
            assert!(rel_close(lf, lr, 1e-9), "case {case} ell: {lf} vs {lr}");
        }
    }

    #[test]
    fn zero_costs_give_zero_moments() {
        let sys = LinearSystem::new(
            Mat::new(2, 2, vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
            Mat::new(2, 1, vec![0.0, 0.1]).unwrap(),
            Mat::zeros(2, 2),
            Mat::zeros(1, 1),
            1.0,
            4,
            Mat::eye(2),
        )
        .unwrap();
        let pol = GaussianLinearPolicy::with_isotropic_std(
            Mat::new(1, 2, vec![-1.0, -3.0]).unwrap(),
            0.5,
        )
        .unwrap();
        let lifted = lift(&sys, &pol).unwrap();
        let (k, l) = multi_step_second_moments(&lifted).unwrap();
        assert_eq!((k, l), (0.0, 0.0));
    }

    #[test]
    fn degenerate_noise_and_zero_horizon_are_rejected() {
        let (sys, pol) = builtin_system("double-integrator").unwrap();
        let sys = sys.with_horizon(2).unwrap();
        let mut lifted = lift(&sys, &pol).unwrap();
        lifted.sigma_bar = DiagCov::new(vec![0.0, 0.1]).unwrap();
        assert!(multi_step_second_moments(&lifted).is_err());
        let mut lifted = lift(&sys, &pol).unwrap();
        lifted.horizon_t = 0;
        assert!(multi_step_second_moments(&lifted).is_err());
    }
}
