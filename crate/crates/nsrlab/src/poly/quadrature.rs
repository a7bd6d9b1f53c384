//! Exact moment evaluation for polynomial systems by tensor
//! Gauss-Hermite quadrature.
//!
//! Every quantity the NSR needs is the expectation of a polynomial in
//! the independent Gaussian vector `xi`. A tensor-product Gauss rule
//! with `q_i` nodes in coordinate `i` integrates exactly any polynomial
//! of per-variable degree at most `2 q_i - 1`, so sizing each axis from
//! a tracked degree bound gives exact values without materializing the
//! return or estimator polynomials, whose term counts explode with the
//! horizon. Node evaluation is a deterministic rollout of the closed
//! loop, so the cost is the grid size times one dynamics step.

use std::collections::HashMap;

use super::{MultiPoly, PolyPolicyParams, PolySystem};
use crate::error::{Error, Result};
use crate::lqg::{MethodTag, NsrReport};
use crate::mat::Mat;

/// Refuse grids beyond this many nodes; evaluation time would be days.
const MAX_GRID_NODES: u128 = 1_000_000_000_000;

// ---------------------------------------------------------------------
// Gauss-Hermite rules for the standard normal weight
// ---------------------------------------------------------------------

/// Orthonormal probabilists' Hermite values `(p_{n-1}(x), p_n(x))`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0f64;
    let mut cur = 1.0f64;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Nodes and weights of the `q`-point Gauss rule for `N(0, 1)`:
/// exact for polynomials of degree `2q - 1`. Roots located by the
/// interlacing ladder (each level's roots bracket the next level's),
/// polished by safeguarded Newton; weights are inverse Christoffel
/// sums. Symmetrized so odd moments vanish exactly.
fn gauss_hermite(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1);
    let mut roots: Vec<f64> = vec![];
    for k in 1..=q {
        let bound = 2.0 * (k as f64).sqrt() + 2.0;
        let mut brackets: Vec<(f64, f64)> = Vec::with_capacity(k);
        if roots.is_empty() {
            brackets.push((-bound, bound));
        } else {
            brackets.push((-bound, roots[0]));
            for w in roots.windows(2) {
                brackets.push((w[0], w[1]));
            }
            brackets.push((*roots.last().unwrap(), bound));
        }
        let mut next: Vec<f64> = Vec::with_capacity(k);
        for (mut lo, mut hi) in brackets {
            let f = |x: f64| hermite_pair(k, x).1;
            let (mut flo, fhi) = (f(lo), f(hi));
            debug_assert!(flo * fhi < 0.0 || flo == 0.0 || fhi == 0.0);
            let mut x = 0.5 * (lo + hi);
            for _ in 0..80 {
                let (pm1, p) = hermite_pair(k, x);
                let deriv = (k as f64).sqrt() * pm1;
                let step = p / deriv;
                let newton = x - step;
                let inside = newton > lo && newton < hi;
                let nx = if deriv != 0.0 && inside { newton } else { 0.5 * (lo + hi) };
                if p == 0.0 || (nx - x).abs() <= 1e-15 * (1.0 + x.abs()) {
                    x = nx;
                    break;
                }
                if (p > 0.0) == (flo > 0.0) {
                    lo = x;
                    flo = p;
                } else {
                    hi = x;
                }
                x = nx;
            }
            next.push(x);
        }
        roots = next;
    }

    // Enforce exact antisymmetry of the node set.
    for i in 0..q / 2 {
        let v = 0.5 * (roots[q - 1 - i] - roots[i]);
        roots[i] = -v;
        roots[q - 1 - i] = v;
    }
    if q % 2 == 1 {
        roots[q / 2] = 0.0;
    }

    let mut weights = Vec::with_capacity(q);
    for &x in &roots {
        let mut prev = 0.0f64;
        let mut cur = 1.0f64;
        let mut sum = cur * cur;
        for k in 0..q - 1 {
            let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
            prev = cur;
            cur = next;
            sum += cur * cur;
        }
        weights.push(1.0 / sum);
    }
    for i in 0..q / 2 {
        let w = 0.5 * (weights[i] + weights[q - 1 - i]);
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    (roots, weights)
}

// ---------------------------------------------------------------------
// Degree bookkeeping
// ---------------------------------------------------------------------

/// Per-variable and total degree bounds of a polynomial in `xi`.
#[derive(Clone, Debug)]
struct DegBound {
    per_var: Vec<usize>,
    total: usize,
}

impl DegBound {
    fn zero(nv: usize) -> Self {
        Self { per_var: vec![0; nv], total: 0 }
    }

    fn var(nv: usize, i: usize) -> Self {
        let mut per_var = vec![0; nv];
        per_var[i] = 1;
        Self { per_var, total: 1 }
    }

    fn max_with(&mut self, other: &Self) {
        for (a, b) in self.per_var.iter_mut().zip(&other.per_var) {
            *a = (*a).max(*b);
        }
        self.total = self.total.max(other.total);
    }

    fn plus(&self, other: &Self) -> Self {
        Self {
            per_var: self.per_var.iter().zip(&other.per_var).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        }
    }

    fn doubled(&self) -> Self {
        Self { per_var: self.per_var.iter().map(|d| 2 * d).collect(), total: 2 * self.total }
    }
}

/// Bound on `p` composed with arguments whose bounds are `source`:
/// per monomial, exponents weight the argument bounds; the result is
/// the maximum over monomials.
fn compose_bound(p: &MultiPoly, source: &[DegBound]) -> DegBound {
    let nv = source.first().map(|d| d.per_var.len()).unwrap_or(0);
    let mut out = DegBound::zero(nv);
    for (key, _) in p.terms() {
        let mut cand = DegBound::zero(nv);
        for (v, &e) in key.iter().enumerate() {
            if e > 0 {
                for _ in 0..e {
                    cand = cand.plus(&source[v]);
                }
            }
        }
        out.max_with(&cand);
    }
    out
}

/// Degree bounds for the return, both score blocks, and the states,
/// tracked through the recursion without any symbolic expansion.
struct EstimatorBounds {
    ret: DegBound,
    score_theta: Vec<Vec<DegBound>>,
    score_ell: Vec<DegBound>,
}

fn estimator_bounds(sys: &PolySystem, params: &PolyPolicyParams) -> Result<EstimatorBounds> {
    let (n, m, d) = (sys.state_dim(), sys.action_dim(), sys.feature_dim());
    let t_horizon = sys.horizon_t();
    let nv = sys.xi_dim();
    let cap = sys.degree_cap();
    let theta = params.theta();

    let mut state: Vec<DegBound> = (0..n).map(|i| DegBound::var(nv, i)).collect();
    let mut ret = DegBound::zero(nv);
    let mut score_theta = vec![vec![DegBound::zero(nv); m]; d];
    let mut score_ell = vec![DegBound::zero(nv); m];

    for t in 0..t_horizon {
        // Feature bounds at s_t and the action bounds they induce.
        let mut phi = vec![vec![DegBound::zero(nv); m]; d];
        for (k, row) in sys.features().iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                phi[k][j] = compose_bound(p, &state);
            }
        }
        let mut action: Vec<DegBound> = Vec::with_capacity(m);
        for j in 0..m {
            let mut b = DegBound::var(nv, n + t * m + j);
            for (k, phi_row) in phi.iter().enumerate() {
                if theta.get(k, j) != 0.0 {
                    b.max_with(&phi_row[j]);
                }
            }
            action.push(b);
        }

        // Scores: Phi (eps / sigma^2) for theta, (eps^2 / sigma^2 - 1)
        // for the log-std block.
        for j in 0..m {
            let eps = DegBound::var(nv, n + t * m + j);
            for (k, phi_row) in phi.iter().enumerate() {
                score_theta[k][j].max_with(&phi_row[j].plus(&eps));
            }
            score_ell[j].max_with(&eps.doubled());
        }

        // Successor state and its cap check.
        let mut source = state.clone();
        source.extend(action.iter().cloned());
        let next: Vec<DegBound> =
            sys.transition().iter().map(|p| compose_bound(p, &source)).collect();
        for b in &next {
            if b.total > cap {
                return Err(Error::DegreeCapExceeded { degree: b.total, cap, step: t + 1 });
            }
        }

        // Reward on (s_{t+1}, a_t).
        let mut rsource = next.clone();
        rsource.extend(action.iter().cloned());
        ret.max_with(&compose_bound(sys.reward(), &rsource));

        state = next;
    }

    Ok(EstimatorBounds { ret, score_theta, score_ell })
}

// ---------------------------------------------------------------------
// The sweep
// ---------------------------------------------------------------------

/// Which moments a sweep must deliver; the grid is sized accordingly.
#[derive(Clone, Copy, PartialEq)]
enum Profile {
    /// Objective and mean gradients only.
    Mean,
    /// Mean plus the squared-estimator second moments.
    Full,
}

struct SweepOutput {
    objective: f64,
    mean_theta: Mat,
    mean_ell: Vec<f64>,
    /// `E[(R * score)^2]` per entry; zero-filled in mean-only sweeps.
    sm_theta: Mat,
    sm_ell: Vec<f64>,
}

struct Sweeper<'a> {
    sys: &'a PolySystem,
    theta: &'a Mat,
    inv_sigma: Vec<f64>,
    t_horizon: usize,
    n: usize,
    m: usize,
    d: usize,
    /// Scaled node values and weights per xi coordinate.
    axes: Vec<(Vec<f64>, Vec<f64>)>,
    // Per-depth scratch, preallocated: prefix state, return, scores.
    states: Vec<Vec<f64>>,
    rets: Vec<f64>,
    scores_theta: Vec<Vec<f64>>,
    scores_ell: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    mean_a: Vec<Vec<f64>>,
    eps: Vec<Vec<f64>>,
    sa: Vec<f64>,
    gamma_pows: Vec<f64>,
    want_second: bool,
    obj: f64,
    mean_theta: Vec<f64>,
    mean_ell: Vec<f64>,
    sm_theta: Vec<f64>,
    sm_ell: Vec<f64>,
}

impl<'a> Sweeper<'a> {
    fn run(&mut self) -> Result<()> {
        self.init_state(0, 1.0)
    }

    fn init_state(&mut self, dim: usize, w: f64) -> Result<()> {
        if dim == self.n {
            return self.step(0, w);
        }
        for idx in 0..self.axes[dim].0.len() {
            let x = self.axes[dim].0[idx];
            let wx = self.axes[dim].1[idx];
            self.states[0][dim] = x;
            self.init_state(dim + 1, w * wx)?;
        }
        Ok(())
    }

    fn step(&mut self, t: usize, w: f64) -> Result<()> {
        if t == self.t_horizon {
            self.leaf(w);
            return Ok(());
        }
        if self.states[t].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("quadrature rollout state at step {t}")));
        }
        // Features and mean action depend only on s_t; hoist them out
        // of the noise loop.
        for (k, row) in self.sys.features().iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                self.phi[t][k * self.m + j] = p.eval(&self.states[t])?;
            }
        }
        for j in 0..self.m {
            let mut mean = 0.0;
            for k in 0..self.d {
                mean += self.theta.get(k, j) * self.phi[t][k * self.m + j];
            }
            self.mean_a[t][j] = mean;
        }
        self.noise_axis(t, 0, w)
    }

    fn noise_axis(&mut self, t: usize, j: usize, w: f64) -> Result<()> {
        if j == self.m {
            return self.advance(t, w);
        }
        let dim = self.n + t * self.m + j;
        for idx in 0..self.axes[dim].0.len() {
            let x = self.axes[dim].0[idx];
            let wx = self.axes[dim].1[idx];
            self.eps[t][j] = x;
            self.noise_axis(t, j + 1, w * wx)?;
        }
        Ok(())
    }

    fn advance(&mut self, t: usize, w: f64) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        self.sa[..n].copy_from_slice(&self.states[t]);
        for j in 0..m {
            self.sa[n + j] = self.mean_a[t][j] + self.eps[t][j];
        }
        for i in 0..n {
            let v = self.sys.transition()[i].eval(&self.sa)?;
            self.states[t + 1][i] = v;
        }
        // Reward reads (s_{t+1}, a_t); reuse the eval buffer.
        self.sa[..n].copy_from_slice(&self.states[t + 1]);
        let r = self.sys.reward().eval(&self.sa)?;
        self.rets[t + 1] = self.rets[t] + self.gamma_pows[t] * r;

        // Score prefixes.
        for idx in 0..d * m {
            let j = idx % m;
            self.scores_theta[t + 1][idx] = self.scores_theta[t][idx]
                + self.phi[t][idx] * self.eps[t][j] * self.inv_sigma[j];
        }
        for j in 0..m {
            let e = self.eps[t][j];
            self.scores_ell[t + 1][j] =
                self.scores_ell[t][j] + e * e * self.inv_sigma[j] - 1.0;
        }
        self.step(t + 1, w)
    }

    fn leaf(&mut self, w: f64) {
        let t = self.t_horizon;
        let r = self.rets[t];
        self.obj += w * r;
        for (idx, &s) in self.scores_theta[t].iter().enumerate() {
            let g = r * s;
            self.mean_theta[idx] += w * g;
            if self.want_second {
                self.sm_theta[idx] += w * g * g;
            }
        }
        for (j, &s) in self.scores_ell[t].iter().enumerate() {
            let g = r * s;
            self.mean_ell[j] += w * g;
            if self.want_second {
                self.sm_ell[j] += w * g * g;
            }
        }
    }
}

/// Runs one exact sweep. The noise covariance is read from the system;
/// callers that carry log-std parameters refresh it first.
fn sweep(sys: &PolySystem, params: &PolyPolicyParams, profile: Profile) -> Result<SweepOutput> {
    params.check_dims(sys)?;
    let bounds = estimator_bounds(sys, params)?;
    let (n, m, d) = (sys.state_dim(), sys.action_dim(), sys.feature_dim());
    let t_horizon = sys.horizon_t();
    let nv = sys.xi_dim();

    // Master integrand bound per profile.
    let mut master = bounds.ret.clone();
    let mut worst_score = DegBound::zero(nv);
    for row in &bounds.score_theta {
        for b in row {
            worst_score.max_with(b);
        }
    }
    for b in &bounds.score_ell {
        worst_score.max_with(b);
    }
    let mean_bound = bounds.ret.plus(&worst_score);
    master.max_with(&mean_bound);
    if profile == Profile::Full {
        master.max_with(&mean_bound.doubled());
    }

    // Axis sizes; a degree-0 axis still gets one node at the mean.
    let mut axes = Vec::with_capacity(nv);
    let mut grid: u128 = 1;
    let mut rules: HashMap<usize, (Vec<f64>, Vec<f64>)> = HashMap::new();
    let xi_cov = sys.xi_cov();
    for i in 0..nv {
        let q = master.per_var[i] / 2 + 1;
        grid = grid.saturating_mul(q as u128);
        let (nodes, weights) =
            rules.entry(q).or_insert_with(|| gauss_hermite(q)).clone();
        let std = xi_cov.var(i).sqrt();
        axes.push((nodes.iter().map(|x| x * std).collect::<Vec<f64>>(), weights));
    }
    if grid > MAX_GRID_NODES {
        return Err(Error::Config(format!(
            "quadrature grid needs {grid} nodes; reduce the horizon or polynomial degrees"
        )));
    }

    let mut sw = Sweeper {
        sys,
        theta: params.theta(),
        inv_sigma: sys.sigma().inv_vars()?,
        t_horizon,
        n,
        m,
        d,
        axes,
        states: vec![vec![0.0; n]; t_horizon + 1],
        rets: vec![0.0; t_horizon + 1],
        scores_theta: vec![vec![0.0; d * m]; t_horizon + 1],
        scores_ell: vec![vec![0.0; m]; t_horizon + 1],
        phi: vec![vec![0.0; d * m]; t_horizon + 1],
        mean_a: vec![vec![0.0; m]; t_horizon + 1],
        eps: vec![vec![0.0; m]; t_horizon.max(1)],
        sa: vec![0.0; n + m],
        gamma_pows: (0..t_horizon.max(1)).map(|t| sys.gamma().powi(t as i32)).collect(),
        want_second: profile == Profile::Full,
        obj: 0.0,
        mean_theta: vec![0.0; d * m],
        mean_ell: vec![0.0; m],
        sm_theta: vec![0.0; d * m],
        sm_ell: vec![0.0; m],
    };
    sw.run()?;

    Ok(SweepOutput {
        objective: sw.obj,
        mean_theta: Mat::new(d, m, sw.mean_theta)?,
        mean_ell: sw.mean_ell,
        sm_theta: Mat::new(d, m, sw.sm_theta)?,
        sm_ell: sw.sm_ell,
    })
}

/// Exact objective `E[R]` and mean gradients for a polynomial system,
/// with the noise covariance taken from the policy's log-std
/// parameters.
pub fn poly_objective_and_grads(
    sys: &PolySystem,
    params: &PolyPolicyParams,
) -> Result<(f64, Mat, Vec<f64>)> {
    let sys_eff = sys.with_sigma(params.sigma())?;
    let out = sweep(&sys_eff, params, Profile::Mean)?;
    Ok((out.objective, out.mean_theta, out.mean_ell))
}

/// Exact NSR for a polynomial system at one parameter point.
///
/// Mean gradients are the expectations of the estimator entries; second
/// moments the expectations of their squares; variance and ratio follow
/// the linear-Gaussian report's conventions. The noise covariance is
/// `diag(exp(2 ell))` from the policy parameters.
pub fn poly_nsr(
    sys: &PolySystem,
    params: &PolyPolicyParams,
    grad_floor: f64,
) -> Result<NsrReport> {
    if !(grad_floor > 0.0) {
        return Err(Error::Config(format!("grad_floor must be positive, got {grad_floor}")));
    }
    let sys_eff = sys.with_sigma(params.sigma())?;
    let out = sweep(&sys_eff, params, Profile::Full)?;

    let second_moment_k: f64 = out.sm_theta.data().iter().sum();
    let second_moment_ell: f64 = out.sm_ell.iter().sum();
    let grad_norm_sq: f64 = out.mean_theta.data().iter().map(|v| v * v).sum::<f64>()
        + out.mean_ell.iter().map(|v| v * v).sum::<f64>();
    if grad_norm_sq < grad_floor {
        return Err(Error::GradientTooSmall { grad_norm_sq, floor: grad_floor });
    }
    let variance = second_moment_k + second_moment_ell - grad_norm_sq;
    Ok(NsrReport {
        grad_k: out.mean_theta,
        grad_ell: out.mean_ell,
        second_moment_k,
        second_moment_ell,
        variance,
        nsr: variance / grad_norm_sq,
        grad_norm_sq,
        method_tag: MethodTag::Exact,
        stderr: None,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{builtin_poly_system, estimator_polys, expect, PolyPolicyParams};
    use super::*;
    use crate::lqg::{nsr, GaussianLinearPolicy, LinearSystem, DEFAULT_GRAD_FLOOR};
    use crate::poly::propagate::linear_as_poly_system;

    #[test]
    fn small_rules_match_tabulated_nodes_and_weights() {
        let (x1, w1) = gauss_hermite(1);
        assert_eq!(x1, vec![0.0]);
        assert!((w1[0] - 1.0).abs() <= 1e-15);

        let (x2, w2) = gauss_hermite(2);
        assert!((x2[0] + 1.0).abs() <= 1e-12 && (x2[1] - 1.0).abs() <= 1e-12);
        assert!((w2[0] - 0.5).abs() <= 1e-12 && (w2[1] - 0.5).abs() <= 1e-12);

        let (x3, w3) = gauss_hermite(3);
        let s3 = 3.0f64.sqrt();
        assert!((x3[0] + s3).abs() <= 1e-12);
        assert_eq!(x3[1], 0.0);
        assert!((x3[2] - s3).abs() <= 1e-12);
        assert!((w3[1] - 2.0 / 3.0).abs() <= 1e-12);
        assert!((w3[0] - 1.0 / 6.0).abs() <= 1e-12);
    }

    #[test]
    fn rules_reproduce_normal_moments_up_to_their_exactness_degree() {
        for q in [4usize, 9, 17, 40, 120] {
            let (x, w) = gauss_hermite(q);
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "q = {q}: weights sum to {total}");
            // E[z^(2k)] = (2k - 1)!! while 2k <= 2q - 1.
            let mut expected = 1.0;
            let mut k = 1usize;
            while 2 * k <= 2 * q - 1 && k <= 12 {
                expected *= (2 * k - 1) as f64;
                let got: f64 =
                    x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(2 * k as i32)).sum();
                assert!(
                    (got - expected).abs() <= 1e-10 * expected,
                    "q = {q}, moment 2k = {}: {got} vs {expected}",
                    2 * k
                );
                let odd: f64 =
                    x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(2 * k as i32 - 1)).sum();
                assert!(odd.abs() <= 1e-12 * expected.max(1.0));
                k += 1;
            }
        }
    }

    #[test]
    fn degree_bounds_match_symbolic_degrees_on_the_quadratic_benchmark() {
        let (sys, _) = builtin_poly_system("quadratic-1d").unwrap();
        let sys = sys.with_horizon(3);
        let params =
            PolyPolicyParams::new(Mat::col_vec(&[-1.0, 0.2]), vec![0.3f64.ln()]).unwrap();
        let bounds = estimator_bounds(&sys, &params).unwrap();
        let est = estimator_polys(&sys, &params).unwrap();
        for v in 0..sys.xi_dim() {
            assert!(
                est.return_poly.var_degree(v) <= bounds.ret.per_var[v],
                "return bound too small on variable {v}"
            );
            for k in 0..2 {
                assert!(
                    est.score_theta[k][0].var_degree(v)
                        <= bounds.score_theta[k][0].per_var[v]
                );
            }
        }
        assert!(est.return_poly.total_degree() <= bounds.ret.total);
    }

    #[test]
    fn quadrature_matches_symbolic_expectations_on_the_quadratic_benchmark() {
        let (sys, _) = builtin_poly_system("quadratic-1d").unwrap();
        let sys = sys.with_horizon(2);
        let params =
            PolyPolicyParams::new(Mat::col_vec(&[-0.6, 0.15]), vec![0.3f64.ln()]).unwrap();
        let out = sweep(&sys, &params, Profile::Full).unwrap();
        let est = estimator_polys(&sys, &params).unwrap();

        let obj = expect(&est.return_poly, &sys).unwrap();
        assert!((out.objective - obj).abs() <= 1e-10 * obj.abs().max(1.0));

        for k in 0..2 {
            let mean = expect(&est.ghat_theta[k][0], &sys).unwrap();
            let got = out.mean_theta.get(k, 0);
            assert!(
                (got - mean).abs() <= 1e-9 * mean.abs().max(1.0),
                "mean theta[{k}]: {got} vs {mean}"
            );
            let sq = est.ghat_theta[k][0]
                .mul(&est.ghat_theta[k][0], crate::poly::MAX_EXPONENT)
                .unwrap();
            let sm = expect(&sq, &sys).unwrap();
            let got_sm = out.sm_theta.get(k, 0);
            assert!(
                (got_sm - sm).abs() <= 1e-9 * sm.abs().max(1.0),
                "second moment theta[{k}]: {got_sm} vs {sm}"
            );
        }
        let mean_l = expect(&est.ghat_ell[0], &sys).unwrap();
        assert!((out.mean_ell[0] - mean_l).abs() <= 1e-9 * mean_l.abs().max(1.0));
        let sq_l =
            est.ghat_ell[0].mul(&est.ghat_ell[0], crate::poly::MAX_EXPONENT).unwrap();
        let sm_l = expect(&sq_l, &sys).unwrap();
        assert!((out.sm_ell[0] - sm_l).abs() <= 1e-9 * sm_l.abs().max(1.0));
    }

    #[test]
    fn linear_embedding_reproduces_the_exact_linear_nsr() {
        let a = Mat::new(1, 1, vec![0.9]).unwrap();
        let b = Mat::new(1, 1, vec![0.4]).unwrap();
        let qs = Mat::new(1, 1, vec![1.0]).unwrap();
        let qa = Mat::new(1, 1, vec![0.2]).unwrap();
        let sys = LinearSystem::new(a, b, qs, qa, 1.0, 3, Mat::new(1, 1, vec![0.8]).unwrap())
            .unwrap();
        let pol = GaussianLinearPolicy::new(Mat::new(1, 1, vec![-0.5]).unwrap(), vec![-0.7])
            .unwrap();
        let (poly_sys, params) = linear_as_poly_system(&sys, &pol).unwrap();

        let exact = nsr(&sys, &pol, DEFAULT_GRAD_FLOOR).unwrap();
        let got = poly_nsr(&poly_sys, &params, DEFAULT_GRAD_FLOOR).unwrap();

        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
        // theta = K^T: the 1x1 case needs no transpose.
        assert!(rel(got.grad_k.get(0, 0), exact.grad_k.get(0, 0)) <= 1e-8);
        assert!(rel(got.grad_ell[0], exact.grad_ell[0]) <= 1e-8);
        assert!(rel(got.second_moment_k, exact.second_moment_k) <= 1e-8);
        assert!(rel(got.second_moment_ell, exact.second_moment_ell) <= 1e-8);
        assert!(rel(got.variance, exact.variance) <= 1e-8);
        assert!(rel(got.nsr, exact.nsr) <= 1e-8);
    }

    #[test]
    fn mean_profile_agrees_with_the_full_profile() {
        let (sys, _) = builtin_poly_system("cubic-1d").unwrap();
        let sys = sys.with_horizon(2);
        let params =
            PolyPolicyParams::new(Mat::col_vec(&[0.0, -0.5]), vec![0.3f64.ln()]).unwrap();
        let full = sweep(&sys, &params, Profile::Full).unwrap();
        let (obj, mt, ml) = poly_objective_and_grads(&sys, &params).unwrap();
        assert!((obj - full.objective).abs() <= 1e-10 * full.objective.abs().max(1.0));
        for k in 0..2 {
            let a = mt.get(k, 0);
            let b = full.mean_theta.get(k, 0);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "theta[{k}]: {a} vs {b}");
        }
        assert!((ml[0] - full.mean_ell[0]).abs() <= 1e-9 * full.mean_ell[0].abs().max(1e-12));
    }

    #[test]
    fn mean_gradients_match_central_differences_of_the_objective() {
        // E[R score] must equal the gradient of E[R]: the likelihood
        // ratio route and the objective route go through different
        // formulas, so central differences give an independent check.
        let (sys, _) = builtin_poly_system("cubic-1d").unwrap();
        let theta0 = Mat::col_vec(&[0.1, -0.3]);
        let ell0 = vec![0.3f64.ln()];
        let params = PolyPolicyParams::new(theta0.clone(), ell0.clone()).unwrap();
        let (_, gt, gl) = poly_objective_and_grads(&sys, &params).unwrap();

        let objective_at = |theta: &Mat, ell: &[f64]| {
            let p = PolyPolicyParams::new(theta.clone(), ell.to_vec()).unwrap();
            poly_objective_and_grads(&sys, &p).unwrap().0
        };
        let h = 1e-5;
        for k in 0..2 {
            let mut plus = theta0.clone();
            plus.set(k, 0, theta0.get(k, 0) + h);
            let mut minus = theta0.clone();
            minus.set(k, 0, theta0.get(k, 0) - h);
            let fd = (objective_at(&plus, &ell0) - objective_at(&minus, &ell0)) / (2.0 * h);
            let g = gt.get(k, 0);
            assert!(
                (g - fd).abs() <= 5e-6 * g.abs().max(1e-3),
                "theta[{k}]: analytic {g} vs central difference {fd}"
            );
        }
        let fd_ell = (objective_at(&theta0, &[ell0[0] + h])
            - objective_at(&theta0, &[ell0[0] - h]))
            / (2.0 * h);
        assert!(
            (gl[0] - fd_ell).abs() <= 5e-6 * gl[0].abs().max(1e-3),
            "ell: analytic {} vs central difference {fd_ell}",
            gl[0]
        );
    }

    #[test]
    fn zero_reward_reports_gradient_too_small() {
        let (sys, params) = builtin_poly_system("quadratic-1d").unwrap();
        let mut sys = sys.with_horizon(2);
        sys.reward = MultiPoly::zero(2);
        match poly_nsr(&sys, &params, DEFAULT_GRAD_FLOOR) {
            Err(Error::GradientTooSmall { .. }) => {}
            other => panic!("expected GradientTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn criterion_point_runs_fast_and_reports_positive_nsr() {
        let (sys, _) = builtin_poly_system("quadratic-1d").unwrap();
        let sys = sys.with_horizon(3);
        let params =
            PolyPolicyParams::new(Mat::col_vec(&[-1.0, 0.2]), vec![0.3f64.ln()]).unwrap();
        let start = std::time::Instant::now();
        let rep = poly_nsr(&sys, &params, DEFAULT_GRAD_FLOOR).unwrap();
        assert!(start.elapsed().as_secs_f64() < 60.0);
        assert!(rep.nsr > 0.0);
        assert!(rep.variance > 0.0);
        assert!(rep.grad_norm_sq > 0.0);
    }
}
