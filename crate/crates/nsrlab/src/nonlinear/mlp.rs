//! Feedforward Gaussian-mean policies with exact parameter Jacobians.

use serde::{Deserialize, Serialize};

use super::GaussianPolicy;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::standard_normal;

/// Multilayer perceptron policy mean: tanh hidden layers, identity
/// output, Gaussian exploration `diag(exp(2 ell))`.
///
/// Parameters are stored per layer as a row-major weight matrix
/// (`fan_out x fan_in`) followed by the bias vector; the flat layout
/// concatenates the layers in order and appends `ell`. The mean
/// parameter count is `p = sum (fan_in + 1) fan_out`.
#[derive(Clone, Debug)]
pub struct MlpPolicy {
    layer_dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    ell: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    ell: Vec<f64>,
}

impl Serialize for MlpPolicy {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        MlpRepr {
            layer_dims: self.layer_dims.clone(),
            params: self.mean_params_flat(),
            ell: self.ell.clone(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for MlpPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = MlpRepr::deserialize(de)?;
        MlpPolicy::from_flat(&r.layer_dims, &r.params, r.ell).map_err(serde::de::Error::custom)
    }
}

impl MlpPolicy {
    /// All-zero parameters for the given layer sizes
    /// (input, hidden..., output).
    pub fn zeros(layer_dims: &[usize], ell: Vec<f64>) -> Result<Self> {
        Self::check_dims(layer_dims, &ell)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| Mat::zeros(w[1], w[0]))
            .collect::<Vec<_>>();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, ell })
    }

    /// Gaussian initialization with per-layer scale `c / sqrt(fan_in)`
    /// and zero biases, drawn from the deterministic stream of `seed`.
    pub fn random(layer_dims: &[usize], ell: Vec<f64>, seed: u64, c: f64) -> Result<Self> {
        let mut pol = Self::zeros(layer_dims, ell)?;
        let mut coord = 0u64;
        for w in &mut pol.weights {
            let scale = c / (w.cols() as f64).sqrt();
            for r in 0..w.rows() {
                for cc in 0..w.cols() {
                    w.set(r, cc, scale * standard_normal(seed, 0, 0, coord));
                    coord += 1;
                }
            }
        }
        Ok(pol)
    }

    /// A single affine layer `W s + b = K s`: the linear policy as the
    /// no-hidden-layer special case.
    pub fn linear(k: &Mat, ell: Vec<f64>) -> Result<Self> {
        let mut pol = Self::zeros(&[k.cols(), k.rows()], ell)?;
        pol.weights[0] = k.clone();
        Ok(pol)
    }

    /// Rebuilds a policy from the flat mean-parameter layout.
    pub fn from_flat(layer_dims: &[usize], flat: &[f64], ell: Vec<f64>) -> Result<Self> {
        let mut pol = Self::zeros(layer_dims, ell)?;
        pol.load_mean_params(flat)?;
        Ok(pol)
    }

    fn check_dims(layer_dims: &[usize], ell: &[f64]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::Dim(format!(
                "an MLP needs input and output sizes, got {} layer dims",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Dim("zero-width layer".into()));
        }
        let m = *layer_dims.last().unwrap();
        if ell.len() != m {
            return Err(Error::Dim(format!(
                "output dim {m} needs {m} log-stds, got {}",
                ell.len()
            )));
        }
        if ell.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log-std".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Mean parameter count `p = sum (fan_in + 1) fan_out`.
    pub fn mean_param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn mean_params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.mean_param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        flat
    }

    fn load_mean_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.mean_param_count() {
            return Err(Error::Dim(format!(
                "flat mean parameters have {} entries, policy needs {}",
                flat.len(),
                self.mean_param_count()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.rows() * w.cols();
            *w = Mat::new(w.rows(), w.cols(), flat[at..at + wn].to_vec())?;
            at += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }

    /// Pre-activations and activations per layer, input included.
    fn forward_trace(&self, s: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let layers = self.weights.len();
        let mut pre = Vec::with_capacity(layers);
        let mut act = Vec::with_capacity(layers + 1);
        act.push(s.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(act.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            let h = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|v| v.tanh()).collect()
            };
            pre.push(z);
            act.push(h);
        }
        (pre, act)
    }
}

impl GaussianPolicy for MlpPolicy {
    fn state_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn action_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn param_count(&self) -> usize {
        self.mean_param_count()
    }

    fn mean(&self, state: &[f64]) -> Vec<f64> {
        self.forward_trace(state).1.pop().unwrap()
    }

    /// Exact Jacobian by reverse accumulation, one backward pass per
    /// output coordinate. `tanh' = 1 - h^2` reuses the stored
    /// activations.
    fn param_jacobian(&self, state: &[f64]) -> Mat {
        let (_, act) = self.forward_trace(state);
        let m = self.action_dim();
        let p = self.mean_param_count();
        let layers = self.weights.len();
        let mut jac = Mat::zeros(m, p);

        // Flat offsets of each layer's weight block.
        let mut offsets = Vec::with_capacity(layers);
        let mut at = 0;
        for w in &self.weights {
            offsets.push(at);
            at += w.rows() * w.cols() + w.rows();
        }

        for out in 0..m {
            // delta over the output layer's pre-activation.
            let mut delta = vec![0.0; m];
            delta[out] = 1.0;
            for l in (0..layers).rev() {
                let w = &self.weights[l];
                let input = &act[l];
                let base = offsets[l];
                let wn = w.rows() * w.cols();
                for r in 0..w.rows() {
                    let dr = delta[r];
                    if dr != 0.0 {
                        for c in 0..w.cols() {
                            jac.set(out, base + r * w.cols() + c, dr * input[c]);
                        }
                    }
                    jac.set(out, base + wn + r, dr);
                }
                if l > 0 {
                    // Pull delta through W and the tanh gate below.
                    let mut prev = vec![0.0; w.cols()];
                    for r in 0..w.rows() {
                        let dr = delta[r];
                        if dr != 0.0 {
                            for c in 0..w.cols() {
                                prev[c] += dr * w.get(r, c);
                            }
                        }
                    }
                    let h = &act[l];
                    for (pv, hv) in prev.iter_mut().zip(h) {
                        *pv *= 1.0 - hv * hv;
                    }
                    delta = prev;
                }
            }
        }
        jac
    }

    fn ell(&self) -> &[f64] {
        &self.ell
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = self.mean_params_flat();
        flat.extend_from_slice(&self.ell);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let p = self.mean_param_count();
        let m = self.action_dim();
        if flat.len() != p + m {
            return Err(Error::Dim(format!(
                "flat parameter vector has {} entries, policy needs {}",
                flat.len(),
                p + m
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        self.load_mean_params(&flat[..p])?;
        self.ell.copy_from_slice(&flat[p..]);
        Ok(())
    }
}

/// Reference Jacobian by central differences on the mean, step `h`.
/// Exists for validation; the reverse-mode path is the production one.
pub fn fd_param_jacobian(pol: &MlpPolicy, state: &[f64], h: f64) -> Mat {
    let p = pol.mean_param_count();
    let m = pol.action_dim();
    let base = pol.mean_params_flat();
    let mut jac = Mat::zeros(m, p);
    let mut probe = pol.clone();
    for c in 0..p {
        let mut plus = base.clone();
        plus[c] += h;
        probe.load_mean_params(&plus).unwrap();
        let fp = probe.mean(state);
        let mut minus = base.clone();
        minus[c] -= h;
        probe.load_mean_params(&minus).unwrap();
        let fm = probe.mean(state);
        for out in 0..m {
            jac.set(out, c, (fp[out] - fm[out]) / (2.0 * h));
        }
    }
    jac
}
