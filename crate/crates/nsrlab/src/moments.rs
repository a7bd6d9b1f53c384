//! Exact Gaussian moments: expectations of products of quadratic forms,
//! monomial moments, and the handful of fourth-moment identities the
//! estimator formulas consume.
//!
//! The central routine, [`is_moment`], computes `E[prod_i x^T A_i x]`
//! for `x ~ N(0, Omega)` by summing block cumulants over set
//! partitions: the cumulant of a block `S` is
//! `2^(|S|-1) * sum over cyclic orderings of tr(Omega A_{i1} Omega A_{i2} ...)`,
//! and the moment is the sum over all partitions of the product of the
//! block cumulants. Cumulants are memoized per subset bitmask, and the
//! partition sum collapses to a subset-convolution recurrence, so the
//! hard cap of eight factors stays cheap.
//!
//! The independent oracle for this engine is [`monomial_moment_general`]
//! (a direct Isserlis pairing sum), plus Monte Carlo checks in the
//! validation suites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{sym, DiagCov, Mat};

/// Maximum number of quadratic-form factors [`is_moment`] accepts.
pub const MAX_FACTORS: usize = 8;

/// Maximum total monomial degree [`monomial_moment_general`] accepts.
pub const MAX_MONOMIAL_DEGREE: usize = 12;

/// A Gaussian covariance together with the quadratic-form factor
/// matrices whose product moment is wanted.
///
/// The covariance must be symmetric to 1e-12 (relative to its largest
/// entry); factors are symmetrized on construction since only their
/// symmetric parts contribute.
#[derive(Clone, Debug)]
pub struct QuadFormList {
    omega: Mat,
    factors: Vec<Mat>,
}

impl QuadFormList {
    pub fn new(omega: Mat, factors: Vec<Mat>) -> Result<Self> {
        if !omega.is_square() {
            return Err(Error::Dim(format!(
                "covariance must be square, got {}x{}",
                omega.rows(),
                omega.cols()
            )));
        }
        let n = omega.rows();
        let tol = 1e-12 * omega.max_abs().max(1.0);
        for r in 0..n {
            for c in (r + 1)..n {
                if (omega.get(r, c) - omega.get(c, r)).abs() > tol {
                    return Err(Error::Dim(format!(
                        "covariance not symmetric at ({r},{c}): {} vs {}",
                        omega.get(r, c),
                        omega.get(c, r)
                    )));
                }
            }
        }
        let omega = sym(&omega)?;
        if factors.is_empty() {
            return Err(Error::Dim("need at least one quadratic-form factor".into()));
        }
        let mut symmed = Vec::with_capacity(factors.len());
        for (i, f) in factors.iter().enumerate() {
            if f.rows() != n || f.cols() != n {
                return Err(Error::Dim(format!(
                    "factor {i} is {}x{}, covariance is {n}x{n}",
                    f.rows(),
                    f.cols()
                )));
            }
            symmed.push(sym(f)?);
        }
        Ok(Self { omega, factors: symmed })
    }

    pub fn omega(&self) -> &Mat {
        &self.omega
    }

    pub fn factors(&self) -> &[Mat] {
        &self.factors
    }
}

/// Multi-exponent for a monomial `prod_i x_i^{e_i}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex {
    pub exponents: Vec<usize>,
}

impl MultiIndex {
    pub fn new(exponents: Vec<usize>) -> Self {
        Self { exponents }
    }

    pub fn total_degree(&self) -> usize {
        self.exponents.iter().sum()
    }
}

/// Exact `E[prod_i x^T A_i x]` for `x ~ N(0, Omega)`.
///
/// Up to [`MAX_FACTORS`] factors; more is rejected rather than silently
/// slow.
pub fn is_moment(q: &QuadFormList) -> Result<f64> {
    let k = q.factors.len();
    if k > MAX_FACTORS {
        return Err(Error::FactorCountExceeded { k, max: MAX_FACTORS });
    }
    // B_i = Omega * A_i; every block cumulant is a sum of traces of
    // chains of these.
    let b: Vec<Mat> = q.factors.iter().map(|a| q.omega.matmul(a)).collect();
    let kappa = block_cumulants(&b);
    Ok(moment_from_block_cumulants(k, |mask| kappa[mask as usize]))
}

/// All block cumulants indexed by subset bitmask.
///
/// `kappa[S] = 2^(|S|-1) * sum over orderings of S fixing its smallest
/// element of tr(B_{i1} B_{i2} ... B_{is})`.
fn block_cumulants(b: &[Mat]) -> Vec<f64> {
    let k = b.len();
    let mut kappa = vec![0.0; 1 << k];
    for mask in 1u32..(1 << k) as u32 {
        let elems: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let s = elems.len();
        if s == 1 {
            kappa[mask as usize] = b[elems[0]].trace();
            continue;
        }
        let first = elems[0];
        let mut rest: Vec<usize> = elems[1..].to_vec();
        let mut sum = 0.0;
        for_each_permutation(&mut rest, &mut |perm| {
            let mut chain = b[first].clone();
            for &i in perm {
                chain = chain.matmul(&b[i]);
            }
            sum += chain.trace();
        });
        kappa[mask as usize] = sum * f64::powi(2.0, (s - 1) as i32);
    }
    kappa
}

/// Sum over set partitions of `{0..k}` of the product of per-block
/// cumulants, where `kappa(mask)` gives the cumulant of the block with
/// that element bitmask.
///
/// Uses the recurrence `G(M) = sum_{S : lowest(M) in S, S subset M}
/// kappa(S) G(M \ S)` with `G(empty) = 1`, memoized over masks, which
/// enumerates every partition exactly once.
pub(crate) fn moment_from_block_cumulants(k: usize, kappa: impl Fn(u32) -> f64) -> f64 {
    assert!(k >= 1 && k <= 16);
    let full: u32 = ((1u64 << k) - 1) as u32;
    let mut g = vec![f64::NAN; (full as usize) + 1];
    g[0] = 1.0;
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg(); // lowest set bit
        let others = mask ^ low;
        // Enumerate subsets of `others`; each union'd with `low` is a
        // candidate first block.
        let mut sub = others;
        let mut total = 0.0;
        loop {
            let block = sub | low;
            total += kappa(block) * g[(mask ^ block) as usize];
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & others;
        }
        g[mask as usize] = total;
    }
    g[full as usize]
}

/// Calls `f` with every permutation of `items` (Heap's algorithm).
fn for_each_permutation(items: &mut [usize], f: &mut impl FnMut(&[usize])) {
    let n = items.len();
    if n <= 1 {
        f(items);
        return;
    }
    let mut c = vec![0usize; n];
    f(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            f(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Exact `E[prod_i x_i^{e_i}]` for independent zero-mean Gaussians with
/// the given per-coordinate variances.
///
/// Zero if any exponent is odd; otherwise the product of
/// `(e_i - 1)!! var_i^{e_i / 2}`.
pub fn gaussian_monomial_moment(alpha: &MultiIndex, variances: &DiagCov) -> Result<f64> {
    if alpha.exponents.len() != variances.dim() {
        return Err(Error::Dim(format!(
            "multi-index has {} entries, covariance has {}",
            alpha.exponents.len(),
            variances.dim()
        )));
    }
    let mut prod = 1.0;
    for (i, &e) in alpha.exponents.iter().enumerate() {
        if e % 2 == 1 {
            return Ok(0.0);
        }
        prod *= double_factorial_odd(e) * variances.var(i).powi((e / 2) as i32);
    }
    Ok(prod)
}

/// `(e-1)!!` for even `e` (`e = 0` gives 1).
fn double_factorial_odd(e: usize) -> f64 {
    let mut acc = 1.0;
    let mut v = 1;
    while v < e {
        acc *= v as f64;
        v += 2;
    }
    acc
}

/// Exact `E[prod_i x_i^{e_i}]` for `x ~ N(0, cov)` with a full
/// covariance, via the Isserlis pairing sum.
///
/// Independent of the cumulant engine; serves as its oracle. Total
/// degree above [`MAX_MONOMIAL_DEGREE`] is rejected (the pairing count
/// is `(d-1)!!`).
pub fn monomial_moment_general(alpha: &MultiIndex, cov: &Mat) -> Result<f64> {
    if !cov.is_square() || cov.rows() != alpha.exponents.len() {
        return Err(Error::Dim(format!(
            "covariance {}x{} does not match multi-index of {} variables",
            cov.rows(),
            cov.cols(),
            alpha.exponents.len()
        )));
    }
    let deg = alpha.total_degree();
    if deg > MAX_MONOMIAL_DEGREE {
        return Err(Error::MonomialDegreeExceeded { degree: deg, max: MAX_MONOMIAL_DEGREE });
    }
    if deg == 0 {
        return Ok(1.0);
    }
    if deg % 2 == 1 {
        return Ok(0.0);
    }
    let cov = sym(cov)?;
    let mut idx = Vec::with_capacity(deg);
    for (i, &e) in alpha.exponents.iter().enumerate() {
        for _ in 0..e {
            idx.push(i);
        }
    }
    Ok(pairing_sum(&idx, &cov))
}

/// Sum over perfect matchings of the index multiset of the product of
/// covariance entries.
fn pairing_sum(idx: &[usize], cov: &Mat) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    let first = idx[0];
    let mut total = 0.0;
    for j in 1..idx.len() {
        let c = cov.get(first, idx[j]);
        if c == 0.0 {
            continue;
        }
        let mut rest = Vec::with_capacity(idx.len() - 2);
        rest.extend_from_slice(&idx[1..j]);
        rest.extend_from_slice(&idx[j + 1..]);
        total += c * pairing_sum(&rest, cov);
    }
    total
}

// Fourth-moment identities of the quadratic score weight
// `w(xi) = sum_i (xi_i^2 - 1)^2` for `xi ~ N(0, I_m)`, used by the
// log-std block of the estimator second moments.

/// `E[w(xi)] = 2m`.
pub fn w_mean(m: usize) -> f64 {
    2.0 * m as f64
}

/// `E[w(xi) (xi^T u)^2] = (2m + 8) ||u||^2`.
pub fn w_times_linear_sq(u: &[f64]) -> f64 {
    let m = u.len() as f64;
    let norm_sq: f64 = u.iter().map(|v| v * v).sum();
    (2.0 * m + 8.0) * norm_sq
}

/// `E[w(xi) xi^T S xi] = (2m + 8) tr S` (only the symmetric part of `S`
/// contributes).
pub fn w_times_quad(s: &Mat) -> Result<f64> {
    if !s.is_square() {
        return Err(Error::Dim("quadratic form matrix must be square".into()));
    }
    let m = s.rows() as f64;
    Ok((2.0 * m + 8.0) * s.trace())
}

/// `E[w(xi) (xi^T S xi)^2]
///  = (2m + 16) (tr S)^2 + (4m + 32) tr(S^2) + 24 sum_i S_ii^2`
/// for the symmetrized `S`.
pub fn w_times_quad_sq(s: &Mat) -> Result<f64> {
    let s = sym(s)?;
    let m = s.rows() as f64;
    let tr = s.trace();
    let tr_sq = s.frob_inner(&s); // tr(S^2) for symmetric S
    let diag_sq: f64 = s.diag().iter().map(|v| v * v).sum();
    Ok((2.0 * m + 16.0) * tr * tr + (4.0 * m + 32.0) * tr_sq + 24.0 * diag_sq)
}

/// `E[||eps||^4]` for `eps ~ N(0, Sigma)` with diagonal `Sigma`:
/// `(tr Sigma)^2 + 2 tr(Sigma^2)`.
pub fn gaussian_norm4(sigma: &DiagCov) -> f64 {
    let tr = sigma.trace();
    let tr2: f64 = sigma.vars().iter().map(|v| v * v).sum();
    tr * tr + 2.0 * tr2
}

/// `E[w(xi)^2] = 4m(m + 14)`: the fourth moment of the quadratic score
/// norm.
pub fn qscore_norm4(m: usize) -> f64 {
    let m = m as f64;
    4.0 * m * (m + 14.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(omega: Mat, factors: Vec<Mat>) -> f64 {
        is_moment(&QuadFormList::new(omega, factors).unwrap()).unwrap()
    }

    #[test]
    fn single_identity_factor_gives_dimension() {
        assert_eq!(quad(Mat::eye(2), vec![Mat::eye(2)]), 2.0);
        assert_eq!(quad(Mat::eye(5), vec![Mat::eye(5)]), 5.0);
    }

    #[test]
    fn two_identity_factors_give_chi_square_second_moment() {
        // E[(||x||^2)^2] = n^2 + 2n for x ~ N(0, I_n).
        for n in 1..6 {
            let v = quad(Mat::eye(n), vec![Mat::eye(n); 2]);
            assert!((v - (n * n + 2 * n) as f64).abs() < 1e-12, "n={n}: {v}");
        }
    }

    #[test]
    fn scalar_fourth_power_gives_105() {
        // E[x^8] with four factors [1] in one dimension.
        let one = Mat::eye(1);
        let v = quad(one.clone(), vec![one; 4]);
        assert!((v - 105.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rejects_too_many_factors_and_empty_list() {
        let nine = vec![Mat::eye(1); 9];
        let q = QuadFormList::new(Mat::eye(1), nine).unwrap();
        assert!(matches!(is_moment(&q), Err(Error::FactorCountExceeded { k: 9, .. })));
        assert!(QuadFormList::new(Mat::eye(1), vec![]).is_err());
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        let omega = Mat::new(2, 2, vec![1.0, 0.5, 0.2, 1.0]).unwrap();
        assert!(QuadFormList::new(omega, vec![Mat::eye(2)]).is_err());
    }

    /// k = 2 closed form: tr(WA) tr(WB) + 2 tr(WAWB).
    fn closed_form_2(w: &Mat, a: &Mat, b: &Mat) -> f64 {
        let wa = w.matmul(a);
        let wb = w.matmul(b);
        wa.trace() * wb.trace() + 2.0 * wa.matmul(&wb).trace()
    }

    /// k = 3 closed form.
    fn closed_form_3(w: &Mat, a: &Mat, b: &Mat, c: &Mat) -> f64 {
        let wa = w.matmul(a);
        let wb = w.matmul(b);
        let wc = w.matmul(c);
        let (ta, tb, tc) = (wa.trace(), wb.trace(), wc.trace());
        let tab = wa.matmul(&wb).trace();
        let tac = wa.matmul(&wc).trace();
        let tbc = wb.matmul(&wc).trace();
        let tabc = wa.matmul(&wb).matmul(&wc).trace();
        ta * tb * tc + 2.0 * (ta * tbc + tb * tac + tc * tab) + 8.0 * tabc
    }

    fn random_psd(n: usize, seed: u64, stream: u64) -> Mat {
        let l = Mat::from_fn(n, n, |r, c| {
            crate::rng::standard_normal(seed, stream, r as u64, c as u64)
        });
        l.matmul(&l.transpose())
    }

    #[test]
    fn matches_low_order_closed_forms_on_random_psd_inputs() {
        for case in 0..40u64 {
            let n = 1 + (case % 4) as usize;
            let w = random_psd(n, 11, 4 * case);
            let a = random_psd(n, 11, 4 * case + 1);
            let b = random_psd(n, 11, 4 * case + 2);
            let c = random_psd(n, 11, 4 * case + 3);

            let v2 = quad(w.clone(), vec![a.clone(), b.clone()]);
            let want2 = closed_form_2(&w, &a, &b);
            assert!(
                (v2 - want2).abs() <= 1e-10 * want2.abs().max(1.0),
                "k=2 case {case}: {v2} vs {want2}"
            );

            let v3 = quad(w.clone(), vec![a.clone(), b.clone(), c.clone()]);
            let want3 = closed_form_3(&w, &a, &b, &c);
            assert!(
                (v3 - want3).abs() <= 1e-10 * want3.abs().max(1.0),
                "k=3 case {case}: {v3} vs {want3}"
            );
        }
    }

    #[test]
    fn agrees_with_pairing_oracle_on_coordinate_squares() {
        // prod_i (x_i^2)^{e_i} is a product of quadratic forms with
        // factors e_i e_i^T, so both evaluators must agree.
        let cases: &[&[usize]] = &[&[2, 0, 0], &[1, 1, 0], &[2, 1, 1], &[1, 1, 1], &[4, 0, 0]];
        for (ci, exps) in cases.iter().enumerate() {
            let n = exps.len();
            let cov = random_psd(n, 23, ci as u64);
            let mut factors = Vec::new();
            for (i, &e) in exps.iter().enumerate() {
                let mut unit = Mat::zeros(n, n);
                unit.set(i, i, 1.0);
                for _ in 0..e {
                    factors.push(unit.clone());
                }
            }
            let via_quad = quad(cov.clone(), factors);
            let alpha = MultiIndex::new(exps.iter().map(|&e| 2 * e).collect());
            let via_pairing = monomial_moment_general(&alpha, &cov).unwrap();
            assert!(
                (via_quad - via_pairing).abs() <= 1e-10 * via_pairing.abs().max(1.0),
                "case {ci}: {via_quad} vs {via_pairing}"
            );
        }
    }

    #[test]
    fn pairing_oracle_matches_diagonal_specialization() {
        let alpha = MultiIndex::new(vec![2, 4, 0]);
        let vars = DiagCov::new(vec![2.0, 0.5, 1.0]).unwrap();
        let via_diag = gaussian_monomial_moment(&alpha, &vars).unwrap();
        let via_general = monomial_moment_general(&alpha, &vars.to_mat()).unwrap();
        // 1!! * 2^1 * 3!! * 0.5^2 = 2 * 3 * 0.25 = 1.5
        assert!((via_diag - 1.5).abs() < 1e-14);
        assert!((via_general - via_diag).abs() < 1e-12);
    }

    #[test]
    fn odd_total_degree_is_zero_and_cap_is_enforced() {
        let cov = Mat::eye(2);
        let odd = MultiIndex::new(vec![2, 1]);
        assert_eq!(monomial_moment_general(&odd, &cov).unwrap(), 0.0);
        let big = MultiIndex::new(vec![8, 6]);
        assert!(matches!(
            monomial_moment_general(&big, &cov),
            Err(Error::MonomialDegreeExceeded { degree: 14, .. })
        ));
    }

    #[test]
    fn w_identities_on_hand_checkable_cases() {
        assert_eq!(w_mean(3), 6.0);
        // m = 1, u = [1]: E[(xi^2-1)^2 xi^2] = 10.
        assert!((w_times_linear_sq(&[1.0]) - 10.0).abs() < 1e-12);
        // m = 1, S = [1]: E[(xi^2-1)^2 xi^4] = 78.
        let s1 = Mat::eye(1);
        assert!((w_times_quad_sq(&s1).unwrap() - 78.0).abs() < 1e-12);
        assert!((w_times_quad(&s1).unwrap() - 10.0).abs() < 1e-12);
        assert!((qscore_norm4(1) - 60.0).abs() < 1e-12);
        assert!((qscore_norm4(2) - 128.0).abs() < 1e-12);
        assert!((qscore_norm4(5) - 380.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_norm4_identity() {
        let sigma = DiagCov::new(vec![1.0, 2.0]).unwrap();
        // (1+2)^2 + 2*(1+4) = 19.
        assert!((gaussian_norm4(&sigma) - 19.0).abs() < 1e-12);
    }

    #[test]
    fn omega_scaling_multiplies_by_power_of_c() {
        let a = random_psd(3, 31, 0);
        let b = random_psd(3, 31, 1);
        let omega = random_psd(3, 31, 2);
        let c = 1.7;
        for k in 1..4usize {
            let mut factors = vec![a.clone(); k - 1];
            factors.push(b.clone());
            let base = quad(omega.clone(), factors.clone());
            let scaled = quad(omega.scale(c), factors);
            assert!(
                (scaled - c.powi(k as i32) * base).abs() <= 1e-10 * scaled.abs().max(1.0),
                "k={k}"
            );
        }
    }
}
