//! nsrlab: exact and Monte Carlo noise-to-signal analysis for REINFORCE
//! policy gradients.
//!
//! The library computes the exact mean, variance, and noise-to-signal
//! ratio (NSR) of the REINFORCE gradient estimator for linear-Gaussian
//! control systems at any horizon, the same quantities symbolically for
//! polynomial systems, variance upper bounds for nonlinear systems with
//! MLP policies, and NSR traces along optimizer trajectories. A
//! deterministic counter-based Monte Carlo engine serves as the
//! independent oracle for every exact formula.
//!
//! Module map:
//! - [`mat`]: dense matrices, spectral norm/radius, diagonal covariances
//! - [`rng`]: stateless counter-based random streams
//! - [`moments`]: exact Gaussian moments of quadratic-form products
//! - [`lqg`]: linear-Gaussian systems; exact estimator moments, NSR,
//!   and variance upper bounds
//! - [`poly`]: polynomial systems; symbolic propagation and exact NSR
//! - [`nonlinear`]: environments, MLP policies, sampled gradients, and
//!   the nonlinear variance bound
//! - [`mc`]: Monte Carlo NSR estimation with batch-means errors
//! - [`optimize`]: GD/SGD/Adam trajectories with NSR recording, NSR
//!   grids
//! - [`validate`]: the numbered validation battery behind
//!   `nsrlab validate`

pub mod error;
pub mod lqg;
pub mod mat;
pub mod mc;
pub mod moments;
pub mod nonlinear;
pub mod optimize;
pub mod poly;
pub mod rng;
pub mod validate;

pub use error::{Error, Result};

use std::sync::OnceLock;

/// Worker-thread count used by the parallel helpers: `NSRLAB_THREADS`
/// if set to a positive integer, else the machine's available
/// parallelism. Results never depend on this value, only wall time.
pub fn thread_count() -> usize {
    static COUNT: OnceLock<usize> = OnceLock::new();
    *COUNT.get_or_init(|| {
        if let Ok(v) = std::env::var("NSRLAB_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    })
}
