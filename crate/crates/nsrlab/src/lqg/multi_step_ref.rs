//! Reference evaluator for the multi-step estimator second moments.
//!
//! Transliterates the per-timestep-pair decomposition with every
//! Gaussian expectation routed through the set-partition moment engine
//! and every intermediate built as a dense matrix. Quadratic cost in
//! the lifted noise dimension per pair, so only suitable for small
//! horizons; [`super::multi_step_second_moments`] is the production
//! path and must agree with this one to near machine precision.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::moments::{is_moment, QuadFormList};

use super::LiftedSystem;

/// `(E||Ghat_K||_F^2, E||Ghat_ell||^2)` by direct expansion.
pub fn multi_step_second_moments_reference(l: &LiftedSystem) -> Result<(f64, f64)> {
    let (k_terms, ell_terms) = term_sums_reference(l)?;
    Ok((k_terms.iter().sum(), ell_terms.iter().sum()))
}

/// Per-term totals in the same layout as the production evaluator.
pub(crate) fn term_sums_reference(l: &LiftedSystem) -> Result<([f64; 6], [f64; 4])> {
    let t_h = l.horizon_t;
    if t_h < 1 {
        return Err(Error::Config("lifted system has zero horizon".into()));
    }
    let (n, m) = (l.n, l.m);
    let big = m * t_h;
    let inv = l.sigma_bar.inv_vars()?;
    let sbar = l.sigma_bar.to_mat();
    let sigma0 = &l.sigma0;

    let mss = sym(&l.mss_bar);
    let mee = sym(&l.mee_bar);
    let mse = &l.mse_bar;

    let is0 = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sigma0.clone(), factors.to_vec())?)
    };
    let isb = |factors: &[Mat]| -> Result<f64> {
        is_moment(&QuadFormList::new(sbar.clone(), factors.to_vec())?)
    };

    // Block row t of FS / FE.
    let f_blk: Vec<Mat> = (0..t_h).map(|t| l.fs.block(t * n, 0, n, n)).collect();
    let e_blk: Vec<Mat> = (0..t_h).map(|t| l.fe.block(t * n, 0, n, big)).collect();

    let mse_s = scale_cols(mse, sbar_diag(l));
    let v0 = sym(&mse_s.matmul(&mse.transpose()));
    let is0_v0 = is0(&[v0.clone()])?;
    let is0_mm = is0(&[mss.clone(), mss.clone()])?;
    let is0_m = is0(&[mss.clone()])?;
    let isb_m = isb(&[mee.clone()])?;
    let isb_mm = isb(&[mee.clone(), mee.clone()])?;

    let mut k_terms = [0.0; 6];
    let mut ell_terms = [0.0; 4];

    for t in 0..t_h {
        for p in 0..t_h {
            // ---- Gain block ----
            // W' = sym(Pi_t' Sigma^-2 Pi_p) as a full lifted matrix.
            let mut w = Mat::zeros(big, big);
            for i in 0..m {
                let (a, b) = (t * m + i, p * m + i);
                let d2 = inv[a] * inv[b];
                w.add_at(a, b, 0.5 * d2);
                w.add_at(b, a, 0.5 * d2);
            }
            let u = sym(&e_blk[t].transpose().matmul(&e_blk[p]));
            let g = sym(&f_blk[t].transpose().matmul(&f_blk[p]));
            let j = f_blk[t]
                .transpose()
                .matmul(&e_blk[p])
                .add(&f_blk[p].transpose().matmul(&e_blk[t]));

            let alpha = isb(&[w.clone()])?;
            let beta = isb(&[u.clone()])?;
            let is_wu = isb(&[w.clone(), u.clone()])?;
            let is_wm = isb(&[w.clone(), mee.clone()])?;
            let is_wmm = isb(&[w.clone(), mee.clone(), mee.clone()])?;
            let is_wum = isb(&[w.clone(), u.clone(), mee.clone()])?;
            let is_wumm = isb(&[w.clone(), u.clone(), mee.clone(), mee.clone()])?;
            // IS(W,U) = alpha beta + 2 delta recovers delta.
            let delta = 0.5 * (is_wu - alpha * beta);

            let sd = sbar_diag(l);
            let ws = scale_rows(&scale_cols(&w, sd), sd); // Sigma W Sigma
            let us = scale_rows(&scale_cols(&u, sd), sd);
            let ms_full = scale_rows(&scale_cols(&mee, sd), sd);
            let sigma_mse_t = scale_cols(mse, sd).transpose(); // Sigma Mse'
            let v_tp = sym(&mse.matmul(&ws).matmul(&mse.transpose()));
            let v_tilde = sym(&mse.matmul(&us).matmul(&mse.transpose()));
            let v_hat = sym(&mse.matmul(&ws).matmul(&u).matmul(&sigma_mse_t));
            let a0 = sbar.clone();
            let a1 = ws.clone();
            let a2 = ms_full.clone();
            let a3 = sym(&ws.matmul(&scale_cols(&mee, sd)));
            let vj = |a_mat: &Mat| -> Mat { sym(&mse.matmul(a_mat).matmul(&j.transpose())) };
            let v_0 = vj(&a0);
            let v_1 = vj(&a1);
            let v_2 = vj(&a2);
            let v_3 = vj(&a3);

            let mu = isb_m;
            let kappa = 0.5 * (is_wm - alpha * mu); // tr(S W S Mee)

            let e1 = is0(&[g.clone(), mss.clone(), mss.clone()])? * alpha + is0_mm * is_wu;
            let e2 = is0(&[g.clone()])? * is_wmm + is_wumm;
            let e3 = 2.0 * is0(&[g.clone(), mss.clone()])? * is_wm + 2.0 * is0_m * is_wum;
            let e4 = 4.0
                * (alpha * is0(&[g.clone(), v0.clone()])?
                    + 2.0 * is0(&[g.clone(), v_tp.clone()])?
                    + (alpha * beta + 2.0 * delta) * is0_v0
                    + 2.0 * beta * is0(&[v_tp])?
                    + 2.0 * alpha * is0(&[v_tilde])?
                    + 8.0 * is0(&[v_hat])?);
            let e5 = 4.0
                * (alpha * is0(&[mss.clone(), v_0.clone()])?
                    + 2.0 * is0(&[mss.clone(), v_1.clone()])?);
            let e6 = 4.0
                * ((alpha * mu + 2.0 * kappa) * is0(&[v_0])?
                    + 2.0 * mu * is0(&[v_1])?
                    + 2.0 * alpha * is0(&[v_2])?
                    + 8.0 * is0(&[v_3])?);
            for (acc, v) in k_terms.iter_mut().zip([e1, e2, e3, e4, e5, e6]) {
                *acc += v;
            }

            // ---- Log-std block ----
            let same = t == p;
            if same {
                ell_terms[0] += 2.0 * m as f64 * is0_mm;
            }
            // Per-coordinate chi-square scores expanded over the lifted
            // noise: coordinate i of step q is lifted index q*m+i.
            let mut wl_t = Mat::zeros(big, big);
            let mut wl_p = Mat::zeros(big, big);
            for i in 0..m {
                wl_t.add_at(t * m + i, t * m + i, inv[t * m + i]);
                wl_p.add_at(p * m + i, p * m + i, inv[p * m + i]);
            }
            let mut quart = 0.0;
            let mut trip = 0.0;
            for i in 0..m {
                let (a, b) = (t * m + i, p * m + i);
                let d2 = inv[a] * inv[b];
                let mut qa = Mat::zeros(big, big);
                qa.add_at(a, a, 1.0);
                let mut qb = Mat::zeros(big, big);
                qb.add_at(b, b, 1.0);
                quart += d2 * isb(&[qa.clone(), qb.clone(), mee.clone(), mee.clone()])?;
                trip += d2 * isb(&[qa, qb, mee.clone()])?;
            }
            let e2l = quart - isb(&[wl_t.clone(), mee.clone(), mee.clone()])?
                - isb(&[wl_p.clone(), mee.clone(), mee.clone()])?
                + m as f64 * isb_mm;
            let e3l = 2.0
                * is0_m
                * (trip - isb(&[wl_t, mee.clone()])? - isb(&[wl_p, mee.clone()])?
                    + m as f64 * isb_m);
            ell_terms[1] += e2l;
            ell_terms[2] += e3l;
            if same {
                let sd = sbar_diag(l);
                let mut e4l = 8.0 * m as f64 * is0_v0;
                for i in 0..m {
                    let a = t * m + i;
                    let mut qa = Mat::zeros(big, big);
                    qa.add_at(a, a, 1.0);
                    let qs = scale_rows(&scale_cols(&qa, sd), sd);
                    let chain = sym(
                        &mse.matmul(&qs).matmul(&qa).matmul(&scale_cols(mse, sd).transpose()),
                    );
                    e4l += 32.0 * inv[a] * inv[a] * is0(&[chain])?;
                }
                ell_terms[3] += e4l;
            }
        }
    }
    Ok((k_terms, ell_terms))
}

fn sym(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

fn sbar_diag(l: &LiftedSystem) -> &[f64] {
    l.sigma_bar.vars()
}

fn scale_cols(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[c])
}

fn scale_rows(a: &Mat, w: &[f64]) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w[r])
}
