//! Lipschitz certification of trained models and the linear-Gaussian
//! denoising check.

mod empirical;
mod prop2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use empirical::{
    certify, empirical_lipschitz, lipschitz_attention, local_jacobian_norm, Certificate, CertifyOptions,
};
pub use prop2::{
    gauss_hermite_noise_margin, oracle_projector, verify_prop2, Prop2Config, Prop2Rep, Prop2Report,
    SignalNoiseModel,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// Iterations without convergence after which the power operator is
/// replaced by its square.
const SQUARE_EVERY: usize = 32;

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    spectral_norm_with(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
}

/// As [`spectral_norm`]; converged once the unit iterate moves less than
/// `tol`. Iterates on the smaller of `MᵀM` and `MMᵀ`; when the top two
/// singular values are close the iterate stalls, so every
/// [`SQUARE_EVERY`] steps the operator is squared (and rescaled), which
/// squares the ratio of its two leading eigenvalues.
pub fn spectral_norm_with(m: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    if m.rank() != 2 {
        return Err(Error::shape("spectral_norm", m.shape(), &[0, 0]));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("spectral_norm"));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    if r == 0 || c == 0 || m.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let a = m.data();
    let tall = c <= r;
    let n = if tall { c } else { r };
    let entry = |i: usize, j: usize| if tall { a[i * c + j] } else { a[j * c + i] };
    let outer = if tall { r } else { c };
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..outer).map(|k| entry(k, i) * entry(k, j)).sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    // sigma of M along a unit vector of the Gram side
    let sigma = |v: &[f64]| -> f64 {
        let u: Vec<f64> = (0..outer).map(|k| (0..n).map(|i| entry(k, i) * v[i]).sum()).collect();
        norm(&u)
    };

    let mut rng = rng::keyed(0, Stream::Certify, &[r as u64, c as u64]);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut change = f64::INFINITY;
    for step in 1..=max_iter {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = g[i * n..(i + 1) * n].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        if norm(&w) == 0.0 {
            return Ok(sigma(&v));
        }
        normalize(&mut w);
        change = w.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut w);
        if change < tol {
            return Ok(sigma(&v));
        }
        if step % SQUARE_EVERY == 0 {
            let mut sq = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let gik = g[i * n + k];
                    for j in 0..n {
                        sq[i * n + j] += gik * g[k * n + j];
                    }
                }
            }
            let scale = sq.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            sq.iter_mut().for_each(|x| *x /= scale);
            g = sq;
        }
    }
    Err(Error::Estimation {
        iterations: max_iter,
        change,
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

/// A layer of a feed-forward map, for global Lipschitz products.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x W` with `W` of shape `(in, out)`. Biases do not matter.
    Linear(Tensor),
    Relu,
    Tanh,
    Sigmoid,
    /// Per-feature gain of a layer norm with variance floor `eps`.
    LayerNorm { gamma: Vec<f64>, eps: f64 },
    /// Anything without a known global constant, e.g. a recurrent cell.
    Unsupported(String),
}

impl Layer {
    pub fn constant(&self) -> Result<f64> {
        match self {
            Layer::Linear(w) => spectral_norm(w),
            Layer::Relu | Layer::Tanh => Ok(1.0),
            Layer::Sigmoid => Ok(0.25),
            // sup of the Jacobian norm, attained as the input variance -> 0
            Layer::LayerNorm { gamma, eps } => {
                if !(*eps > 0.0) {
                    return Err(Error::Certification("layer norm needs eps > 0".into()));
                }
                Ok(gamma.iter().fold(0.0f64, |m, g| m.max(g.abs())) / eps.sqrt())
            }
            Layer::Unsupported(kind) => Err(Error::Certification(format!(
                "no global Lipschitz constant for layer kind {kind:?}"
            ))),
        }
    }
}

/// Product of per-layer constants.
pub fn lipschitz_mlp(layers: &[Layer]) -> Result<f64> {
    layers.iter().try_fold(1.0, |acc, l| Ok(acc * l.constant()?))
}

/// Bound for `F(x ‖ A(x, e - Φ(e)))` from the three component constants.
pub fn combine_bound(l_forecaster: f64, l_attention: f64, l_projection: f64) -> f64 {
    l_forecaster * l_attention * (1.0 + l_projection)
}

/// Decomposition of the mean squared residual of a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    /// `mean ‖y - p‖²`.
    pub mse: f64,
    /// `‖mean (y - p)‖²`.
    pub bias_sq: f64,
    /// `mean ‖(y - p) - mean (y - p)‖²`.
    pub variance: f64,
}

/// Residual statistics over rows of equal length.
pub fn bias_variance(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<BiasVariance> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape("bias_variance", &[preds.len()], &[targets.len()]));
    }
    let dim = preds[0].len();
    if preds.iter().chain(targets).any(|r| r.len() != dim) {
        return Err(Error::Contract("rows of unequal length".into()));
    }
    let n = preds.len() as f64;
    let residual = |k: usize| preds[k].iter().zip(&targets[k]).map(|(p, y)| y - p);
    let mut mean = vec![Neumaier::default(); dim];
    for k in 0..preds.len() {
        for (m, r) in mean.iter_mut().zip(residual(k)) {
            m.add(r);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m.total() / n).collect();
    let (mut mse, mut variance) = (Neumaier::default(), Neumaier::default());
    for k in 0..preds.len() {
        for (m, r) in mean.iter().zip(residual(k)) {
            mse.add(r * r);
            variance.add((r - m).powi(2));
        }
    }
    Ok(BiasVariance {
        mse: mse.total() / n,
        bias_sq: mean.iter().map(|m| m * m).sum(),
        variance: variance.total() / n,
    })
}

/// Compensated summation; keeps the decomposition exact to a few ulps
/// regardless of how many terms are summed.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    carry: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

#[cfg(test)]
mod tests;
