//! Linear-Gaussian systems with linear-Gaussian feedback policies:
//! exact REINFORCE estimator moments, NSR, variance upper bounds, and
//! the spectral-norm sandwich for the lifted state map.
//!
//! The dynamics are `s_{t+1} = A s_t + B a_t` with reward
//! `r(s', a) = -(s'^T Qs s' + a^T Qa a)` applied to the successor
//! state, policy `a ~ N(K s, Sigma)` with diagonal
//! `Sigma = diag(exp(2 ell))`, initial state `s_0 ~ N(0, Sigma0)`, and
//! discounted return `R = sum_t gamma^t r(s_{t+1}, a_t)` over horizon
//! `T`. The REINFORCE estimator multiplies the (undiscounted) score sum
//! by `R`:
//! `Ghat_K = (sum_t Sigma^-1 eps_t s_t^T) R`,
//! `Ghat_ell = (sum_t (Sigma^-1 (eps_t . eps_t) - 1)) R`.

mod bounds;
mod lift;
mod multi_step;
mod multi_step_ref;
mod one_step;

pub use bounds::{lifted_state_map_norm_bounds, variance_upper_bound};
pub use lift::lift;
pub use multi_step::multi_step_second_moments;
pub use multi_step_ref::multi_step_second_moments_reference;
pub use one_step::{one_step_core, one_step_mean_grads, one_step_second_moments};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{validate_psd, DiagCov, Mat};

/// Linear system with quadratic costs and Gaussian initial state.
#[derive(Clone, Debug, Serialize)]
pub struct LinearSystem {
    #[serde(rename = "A")]
    a: Mat,
    #[serde(rename = "B")]
    b: Mat,
    #[serde(rename = "Qs")]
    qs: Mat,
    #[serde(rename = "Qa")]
    qa: Mat,
    gamma: f64,
    #[serde(rename = "T")]
    horizon_t: usize,
    #[serde(rename = "Sigma0")]
    sigma0: Mat,
}

#[derive(Deserialize)]
struct LinearSystemRepr {
    #[serde(rename = "A")]
    a: Mat,
    #[serde(rename = "B")]
    b: Mat,
    #[serde(rename = "Qs")]
    qs: Mat,
    #[serde(rename = "Qa")]
    qa: Mat,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(rename = "T")]
    horizon_t: usize,
    #[serde(rename = "Sigma0")]
    sigma0: Mat,
}

fn default_gamma() -> f64 {
    1.0
}

impl<'de> Deserialize<'de> for LinearSystem {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = LinearSystemRepr::deserialize(de)?;
        LinearSystem::new(r.a, r.b, r.qs, r.qa, r.gamma, r.horizon_t, r.sigma0)
            .map_err(serde::de::Error::custom)
    }
}

impl LinearSystem {
    /// Validates dimensions, the discount range, the horizon, and
    /// positive semidefiniteness of the cost and covariance matrices
    /// (symmetrization plus eigenvalue floor -1e-10).
    pub fn new(
        a: Mat,
        b: Mat,
        qs: Mat,
        qa: Mat,
        gamma: f64,
        horizon_t: usize,
        sigma0: Mat,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dim(format!("A must be square, got {}x{}", a.rows(), a.cols())));
        }
        let n = a.rows();
        if b.rows() != n {
            return Err(Error::Dim(format!("B has {} rows, state dimension is {n}", b.rows())));
        }
        let m = b.cols();
        if qs.rows() != n || qs.cols() != n {
            return Err(Error::Dim(format!("Qs must be {n}x{n}, got {}x{}", qs.rows(), qs.cols())));
        }
        if qa.rows() != m || qa.cols() != m {
            return Err(Error::Dim(format!("Qa must be {m}x{m}, got {}x{}", qa.rows(), qa.cols())));
        }
        if sigma0.rows() != n || sigma0.cols() != n {
            return Err(Error::Dim(format!(
                "Sigma0 must be {n}x{n}, got {}x{}",
                sigma0.rows(),
                sigma0.cols()
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if horizon_t < 1 {
            return Err(Error::Config("horizon T must be at least 1".into()));
        }
        let qs = validate_psd("Qs", &qs)?;
        let qa = validate_psd("Qa", &qa)?;
        let sigma0 = validate_psd("Sigma0", &sigma0)?;
        Ok(Self { a, b, qs, qa, gamma, horizon_t, sigma0 })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn qs(&self) -> &Mat {
        &self.qs
    }

    pub fn qa(&self) -> &Mat {
        &self.qa
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon_t(&self) -> usize {
        self.horizon_t
    }

    pub fn sigma0(&self) -> &Mat {
        &self.sigma0
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.cols()
    }

    /// Same system with a different horizon.
    pub fn with_horizon(&self, horizon_t: usize) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.qs.clone(),
            self.qa.clone(),
            self.gamma,
            horizon_t,
            self.sigma0.clone(),
        )
    }

    /// Same system with a different initial-state covariance.
    pub fn with_sigma0(&self, sigma0: Mat) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.qs.clone(),
            self.qa.clone(),
            self.gamma,
            self.horizon_t,
            sigma0,
        )
    }

    /// Closed-loop transition `F = A + B K`.
    pub fn closed_loop(&self, pol: &GaussianLinearPolicy) -> Result<Mat> {
        check_policy_dims(self, pol)?;
        Ok(self.a.add(&self.b.matmul(pol.k())))
    }
}

/// Gaussian feedback policy `a ~ N(K s, diag(exp(2 ell)))`.
#[derive(Clone, Debug, Serialize)]
pub struct GaussianLinearPolicy {
    #[serde(rename = "K")]
    k: Mat,
    ell: Vec<f64>,
}

#[derive(Deserialize)]
struct PolicyRepr {
    #[serde(rename = "K")]
    k: Mat,
    ell: Vec<f64>,
}

impl<'de> Deserialize<'de> for GaussianLinearPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = PolicyRepr::deserialize(de)?;
        GaussianLinearPolicy::new(r.k, r.ell).map_err(serde::de::Error::custom)
    }
}

impl GaussianLinearPolicy {
    pub fn new(k: Mat, ell: Vec<f64>) -> Result<Self> {
        if k.rows() != ell.len() {
            return Err(Error::Dim(format!(
                "K has {} rows but ell has {} entries",
                k.rows(),
                ell.len()
            )));
        }
        if ell.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log-std".into()));
        }
        Ok(Self { k, ell })
    }

    /// Gain `K` with every log-std set to `ln(sigma)`.
    pub fn with_isotropic_std(k: Mat, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("policy std must be positive, got {sigma}")));
        }
        let m = k.rows();
        Self::new(k, vec![sigma.ln(); m])
    }

    pub fn k(&self) -> &Mat {
        &self.k
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn action_dim(&self) -> usize {
        self.ell.len()
    }

    /// Policy covariance `Sigma = diag(exp(2 ell))`; strictly positive
    /// by construction.
    pub fn sigma(&self) -> DiagCov {
        DiagCov::new(self.ell.iter().map(|l| (2.0 * l).exp()).collect())
            .expect("exp(2l) is finite and positive for finite l")
    }
}

pub(crate) fn check_policy_dims(sys: &LinearSystem, pol: &GaussianLinearPolicy) -> Result<()> {
    if pol.k.rows() != sys.action_dim() || pol.k.cols() != sys.state_dim() {
        return Err(Error::Dim(format!(
            "policy gain is {}x{}, system needs {}x{}",
            pol.k.rows(),
            pol.k.cols(),
            sys.action_dim(),
            sys.state_dim()
        )));
    }
    Ok(())
}

/// The three quadratic blocks of the single-step return decomposition:
/// `R = -(s0^T Mss s0 + 2 s0^T Mse eps + eps^T Mee eps)`.
#[derive(Clone, Debug)]
pub struct OneStepCore {
    pub mss: Mat,
    pub mse: Mat,
    pub mee: Mat,
}

/// Lifted horizon-`T` operators: the block maps taking `(s0, eps_bar)`
/// to the stacked states/actions, and the quadratic blocks of
/// `R = -(x + 2y + z)` with `x = s0^T Mss_bar s0`,
/// `y = s0^T Mse_bar eps_bar`, `z = eps_bar^T Mee_bar eps_bar`.
///
/// Built by [`lift`]; the initial-state covariance and dimensions are
/// carried along because the second-moment and bound evaluators take
/// only the lift.
#[derive(Clone, Debug)]
pub struct LiftedSystem {
    /// `(nT x n)`: block row `t` is `F^t` (stacked states `s_0..s_{T-1}`).
    pub fs: Mat,
    /// `(nT x n)`: block row `t` is `F^{t+1}` (stacked successors `s_1..s_T`).
    pub fsp: Mat,
    /// `(nT x mT)`: block `(t, i)` is `F^{t-1-i} B` for `i <= t-1`, else 0.
    pub fe: Mat,
    /// `(nT x mT)`: block `(t, i)` is `F^{t-i} B` for `i <= t`, else 0.
    pub fep: Mat,
    /// `(mT x n)`: block row `t` is `K F^t` (stacked action means).
    pub ks: Mat,
    /// `(mT x mT)`: block `(t, i)` is `K F^{t-1-i} B` for `i < t`, `I_m`
    /// at `i = t`, else 0.
    pub ke: Mat,
    /// `(n x n)` initial-state quadratic block.
    pub mss_bar: Mat,
    /// `(n x mT)` cross block.
    pub mse_bar: Mat,
    /// `(mT x mT)` noise quadratic block.
    pub mee_bar: Mat,
    /// Lifted noise covariance `I_T (x) Sigma` as per-coordinate variances.
    pub sigma_bar: DiagCov,
    /// Discount weights `gamma^0 .. gamma^{T-1}`.
    pub dgamma: Vec<f64>,
    /// Initial-state covariance (copied from the system).
    pub sigma0: Mat,
    /// State dimension.
    pub n: usize,
    /// Action dimension.
    pub m: usize,
    /// Horizon.
    pub horizon_t: usize,
}

/// How an [`NsrReport`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Exact,
    MonteCarlo,
}

/// Mean gradient, second moments, variance, and noise-to-signal ratio
/// of the stacked REINFORCE estimator `[Ghat_K, Ghat_ell]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NsrReport {
    /// Gain-block mean gradient. For linear policies this is the `m x n`
    /// gradient in `K`; the polynomial path stores its `d x m`
    /// feature-gain gradient here.
    pub grad_k: Mat,
    /// Log-std mean gradient.
    pub grad_ell: Vec<f64>,
    /// `E ||Ghat_K||_F^2`.
    pub second_moment_k: f64,
    /// `E ||Ghat_ell||^2`.
    pub second_moment_ell: f64,
    /// Frobenius variance of the stacked estimator:
    /// `second_moment_k + second_moment_ell - grad_norm_sq`.
    pub variance: f64,
    /// `variance / grad_norm_sq`.
    pub nsr: f64,
    /// `||grad_K||_F^2 + ||grad_ell||^2`.
    pub grad_norm_sq: f64,
    pub method_tag: MethodTag,
    /// Standard error of the NSR estimate (Monte Carlo reports only).
    pub stderr: Option<f64>,
}

impl NsrReport {
    /// NSR of the gain block alone, if its gradient is nonzero.
    pub fn nsr_k(&self) -> Option<f64> {
        let g: f64 = self.grad_k.data().iter().map(|v| v * v).sum();
        (g > 0.0).then(|| (self.second_moment_k - g) / g)
    }

    /// NSR of the log-std block alone, if its gradient is nonzero.
    pub fn nsr_ell(&self) -> Option<f64> {
        let g: f64 = self.grad_ell.iter().map(|v| v * v).sum();
        (g > 0.0).then(|| (self.second_moment_ell - g) / g)
    }
}

/// Exact mean gradients of the discounted objective at any horizon.
///
/// Forward covariance recursion `P_0 = Sigma0`,
/// `P_{t+1} = F P_t F^T + B Sigma B^T`; backward cost-to-go recursion
/// `Lambda_T = Qs / gamma`,
/// `Lambda_t = Qs / gamma + K^T Qa K + gamma F^T Lambda_{t+1} F`; then
/// `grad_K = -2 sum_t gamma^t (Qa K P_t + gamma B^T Lambda_{t+1} F P_t)`
/// and
/// `grad_ell = -2 diag(Sigma sum_t gamma^t (Qa + gamma B^T Lambda_{t+1} B))`.
pub fn multi_step_mean_grads(
    sys: &LinearSystem,
    pol: &GaussianLinearPolicy,
) -> Result<(Mat, Vec<f64>)> {
    check_policy_dims(sys, pol)?;
    let t_horizon = sys.horizon_t;
    let f = sys.closed_loop(pol)?;
    let k = pol.k();
    let sigma = pol.sigma();
    let gamma = sys.gamma;

    let p_seq = state_covariances(sys, pol, &f, &sigma);
    let lambdas = cost_to_go(sys, pol, &f);

    let (n, m) = (sys.state_dim(), sys.action_dim());
    let mut grad_k = Mat::zeros(m, n);
    let mut ell_core = Mat::zeros(m, m);
    let bt = sys.b.transpose();
    let mut gpow = 1.0;
    for t in 0..t_horizon {
        let qak_pt = sys.qa.matmul(k).matmul(&p_seq[t]);
        let bl_fp = bt.matmul(&lambdas[t + 1]).matmul(&f).matmul(&p_seq[t]).scale(gamma);
        grad_k = grad_k.add(&qak_pt.add(&bl_fp).scale(gpow));
        let blb = bt.matmul(&lambdas[t + 1]).matmul(&sys.b).scale(gamma);
        ell_core = ell_core.add(&sys.qa.add(&blb).scale(gpow));
        gpow *= gamma;
    }
    let grad_k = grad_k.scale(-2.0);
    let grad_ell: Vec<f64> =
        (0..m).map(|i| -2.0 * sigma.var(i) * ell_core.get(i, i)).collect();
    Ok((grad_k, grad_ell))
}

/// Exact expected discounted return
/// `J = -sum_t gamma^t (tr(Qs P_{t+1}) + tr(Qa K P_t K^T) + tr(Qa Sigma))`.
pub fn objective(sys: &LinearSystem, pol: &GaussianLinearPolicy) -> Result<f64> {
    check_policy_dims(sys, pol)?;
    let f = sys.closed_loop(pol)?;
    let sigma = pol.sigma();
    let k = pol.k();
    let p_seq = state_covariances(sys, pol, &f, &sigma);
    let tr_qa_sigma: f64 = (0..sys.action_dim()).map(|i| sys.qa.get(i, i) * sigma.var(i)).sum();
    let mut j = 0.0;
    let mut gpow = 1.0;
    for t in 0..sys.horizon_t {
        let tr_qs = sys.qs.frob_inner(&p_seq[t + 1]); // tr(Qs P), both symmetric
        let kpk = k.matmul(&p_seq[t]).matmul(&k.transpose());
        let tr_qa = sys.qa.frob_inner(&kpk);
        j -= gpow * (tr_qs + tr_qa + tr_qa_sigma);
        gpow *= gamma_of(sys);
    }
    Ok(j)
}

fn gamma_of(sys: &LinearSystem) -> f64 {
    sys.gamma
}

/// State covariances `P_0 .. P_T` under the closed loop.
fn state_covariances(
    sys: &LinearSystem,
    _pol: &GaussianLinearPolicy,
    f: &Mat,
    sigma: &DiagCov,
) -> Vec<Mat> {
    let mut seq = Vec::with_capacity(sys.horizon_t + 1);
    seq.push(sys.sigma0.clone());
    // B Sigma B^T with diagonal Sigma: scale columns of B.
    let m = sys.action_dim();
    let b_sigma = Mat::from_fn(sys.state_dim(), m, |r, c| sys.b.get(r, c) * sigma.var(c));
    let bsbt = b_sigma.matmul(&sys.b.transpose());
    for t in 0..sys.horizon_t {
        let next = f.matmul(&seq[t]).matmul(&f.transpose()).add(&bsbt);
        seq.push(next);
    }
    seq
}

/// Cost-to-go weights `Lambda_1 .. Lambda_T` (index 0 unused).
fn cost_to_go(sys: &LinearSystem, pol: &GaussianLinearPolicy, f: &Mat) -> Vec<Mat> {
    let t_horizon = sys.horizon_t;
    let gamma = sys.gamma;
    let qs_over_gamma = sys.qs.scale(1.0 / gamma);
    let ktqak = pol.k().transpose().matmul(&sys.qa).matmul(pol.k());
    let mut lambdas = vec![Mat::zeros(sys.state_dim(), sys.state_dim()); t_horizon + 1];
    lambdas[t_horizon] = qs_over_gamma.clone();
    for t in (1..t_horizon).rev() {
        let propagated = f.transpose().matmul(&lambdas[t + 1]).matmul(f).scale(gamma);
        lambdas[t] = qs_over_gamma.add(&ktqak).add(&propagated);
    }
    lambdas
}

/// Exact NSR report for the stacked estimator at the system's horizon.
///
/// Errors with [`Error::GradientTooSmall`] when the stacked gradient
/// norm falls below `grad_floor` (the ratio is meaningless near
/// stationary points).
pub fn nsr(sys: &LinearSystem, pol: &GaussianLinearPolicy, grad_floor: f64) -> Result<NsrReport> {
    if !(grad_floor > 0.0) {
        return Err(Error::Config(format!("grad_floor must be positive, got {grad_floor}")));
    }
    let lifted = lift(sys, pol)?;
    let (sm_k, sm_ell) = multi_step_second_moments(&lifted)?;
    let (grad_k, grad_ell) = multi_step_mean_grads(sys, pol)?;
    let gnorm: f64 = grad_k.data().iter().map(|v| v * v).sum::<f64>()
        + grad_ell.iter().map(|v| v * v).sum::<f64>();
    if gnorm < grad_floor {
        return Err(Error::GradientTooSmall { grad_norm_sq: gnorm, floor: grad_floor });
    }
    let variance = sm_k + sm_ell - gnorm;
    Ok(NsrReport {
        grad_k,
        grad_ell,
        second_moment_k: sm_k,
        second_moment_ell: sm_ell,
        variance,
        nsr: variance / gnorm,
        grad_norm_sq: gnorm,
        method_tag: MethodTag::Exact,
        stderr: None,
    })
}

/// Default gradient floor for [`nsr`].
pub const DEFAULT_GRAD_FLOOR: f64 = 1e-12;

/// Built-in named systems for the CLI and the validation suites.
///
/// `"double-integrator"`: position/velocity chain with timestep 0.1,
/// unit state cost, action cost 0.01, horizon 30, `Sigma0 = I`, policy
/// `K = [-1, -3]` with std 0.5.
pub fn builtin_system(name: &str) -> Option<(LinearSystem, GaussianLinearPolicy)> {
    match name {
        "double-integrator" => {
            let sys = LinearSystem::new(
                Mat::new(2, 2, vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
                Mat::new(2, 1, vec![0.0, 0.1]).unwrap(),
                Mat::eye(2),
                Mat::new(1, 1, vec![0.01]).unwrap(),
                1.0,
                30,
                Mat::eye(2),
            )
            .unwrap();
            let pol = GaussianLinearPolicy::with_isotropic_std(
                Mat::new(1, 2, vec![-1.0, -3.0]).unwrap(),
                0.5,
            )
            .unwrap();
            Some((sys, pol))
        }
        _ => None,
    }
}

/// Names accepted by [`builtin_system`].
pub const BUILTIN_SYSTEMS: &[&str] = &["double-integrator"];

/// Planar rotation family used by the horizon sweep: closed loop
/// `F = rho * R(0.3)` (the policy gain is zero, so `F = A`),
/// `B = [0; 1]`, `Qs = I2`, `Qa = [[0.01]]`, `Sigma0 = I2`, noise
/// variance 0.1, discount 0.9. The spectral radius of `F` is exactly
/// `rho`. The spectral radii and covariances are the load-bearing
/// choices; the cost weights and discount are this crate's own. The
/// discount keeps the stable branch's return (and hence its variance
/// curve) saturating instead of drifting with the stage-cost sum, so
/// the three stability regimes separate cleanly.
pub fn rotation_family(rho: f64, horizon_t: usize) -> Result<(LinearSystem, GaussianLinearPolicy)> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive and finite, got {rho}")));
    }
    let phi = 0.3f64;
    let a = Mat::new(
        2,
        2,
        vec![rho * phi.cos(), -rho * phi.sin(), rho * phi.sin(), rho * phi.cos()],
    )?;
    let sys = LinearSystem::new(
        a,
        Mat::new(2, 1, vec![0.0, 1.0])?,
        Mat::eye(2),
        Mat::new(1, 1, vec![0.01])?,
        0.9,
        horizon_t,
        Mat::eye(2),
    )?;
    let pol = GaussianLinearPolicy::with_isotropic_std(
        Mat::new(1, 2, vec![0.0, 0.0])?,
        0.1f64.sqrt(),
    )?;
    Ok((sys, pol))
}
