//! Linear-Gaussian check that projecting out the noise subspace lowers the
//! expected squared error, and that the removed variance obeys the
//! Lipschitz bound.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bias_variance, spectral_norm, BiasVariance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prop2Config {
    pub dim: usize,
    pub signal_dim: usize,
    pub out_dim: usize,
    /// Noise scale inside the noise subspace.
    pub sigma: f64,
    /// Observation noise on the target.
    pub obs_sigma: f64,
    pub trials: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for Prop2Config {
    fn default() -> Self {
        Prop2Config {
            dim: 12,
            signal_dim: 8,
            out_dim: 4,
            sigma: 1.0,
            obs_sigma: 0.5,
            trials: 100_000,
            reps: 100,
            seed: 0,
        }
    }
}

impl Prop2Config {
    pub fn validate(&self) -> Result<()> {
        if self.signal_dim == 0 || self.signal_dim >= self.dim {
            return Err(Error::Config(format!(
                "signal dimension {} must lie in [1, {})",
                self.signal_dim, self.dim
            )));
        }
        if self.out_dim == 0 || self.trials < 2 || self.reps == 0 {
            return Err(Error::Config("out_dim, trials and reps must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(self.obs_sigma >= 0.0) {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        Ok(())
    }
}

/// `e = B_s s + σ B_n n`, `y = W B_s s + ε`, with `[B_s B_n]` orthonormal.
#[derive(Debug, Clone)]
pub struct SignalNoiseModel {
    pub config: Prop2Config,
    /// `(d, d)`; the first `signal_dim` columns span the signal subspace.
    pub basis: Tensor,
    /// `(out_dim, d)` linear forecaster.
    pub w: Tensor,
}

/// Columns of a random orthogonal matrix, by modified Gram-Schmidt.
fn random_orthonormal(d: usize, seed: u64) -> Tensor {
    let mut rng = rng::keyed(seed, Stream::Prop2, &[0]);
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            cols[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
        }
        let n = super::norm(&cols[j]);
        cols[j].iter_mut().for_each(|a| *a /= n);
    }
    Tensor::from_fn([d, d], |i| cols[i % d][i / d])
}

impl SignalNoiseModel {
    pub fn new(config: Prop2Config) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let basis = random_orthonormal(d, config.seed);
        let mut rng = rng::keyed(config.seed, Stream::Prop2, &[1]);
        let scale = 1.0 / (d as f64).sqrt();
        let w = Tensor::from_fn([config.out_dim, d], |_| scale * rng.sample::<f64, _>(StandardNormal));
        Ok(SignalNoiseModel { config, basis, w })
    }

    fn noise_columns(&self) -> std::ops::Range<usize> {
        self.config.signal_dim..self.config.dim
    }

    /// `σ² ‖W B_n‖_F²`: the expected drop in squared error from denoising.
    pub fn expected_margin(&self) -> f64 {
        let d = self.config.dim;
        let mut sum = 0.0;
        for j in self.noise_columns() {
            for r in 0..self.config.out_dim {
                let v: f64 = (0..d).map(|i| self.w.at(r, i) * self.basis.at(i, j)).sum();
                sum += v * v;
            }
        }
        self.config.sigma.powi(2) * sum
    }
}

/// `B_n B_nᵀ`, the orthogonal projector onto the noise subspace.
pub fn oracle_projector(model: &SignalNoiseModel) -> Tensor {
    let d = model.config.dim;
    let noise = model.noise_columns();
    Tensor::from_fn([d, d], |i| {
        let (a, b) = (i / d, i % d);
        noise.clone().map(|j| model.basis.at(a, j) * model.basis.at(b, j)).sum()
    })
}

/// `E ‖σ W B_n n‖²` by tensor-product 3-point Gauss-Hermite quadrature,
/// which is exact for this quadratic integrand.
pub fn gauss_hermite_noise_margin(model: &SignalNoiseModel) -> f64 {
    let nodes = [(-(3f64.sqrt()), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
    let k = model.config.dim - model.config.signal_dim;
    let d = model.config.dim;
    let mut total = 0.0;
    for idx in 0..3usize.pow(k as u32) {
        let mut weight = 1.0;
        let mut n = vec![0.0; k];
        let mut rest = idx;
        for slot in n.iter_mut() {
            let (x, w) = nodes[rest % 3];
            *slot = x;
            weight *= w;
            rest /= 3;
        }
        let eta: Vec<f64> = (0..d)
            .map(|i| {
                model.config.sigma
                    * n.iter()
                        .enumerate()
                        .map(|(j, v)| model.basis.at(i, model.config.signal_dim + j) * v)
                        .sum::<f64>()
            })
            .collect();
        let sq: f64 = (0..model.config.out_dim)
            .map(|r| (0..d).map(|i| model.w.at(r, i) * eta[i]).sum::<f64>().powi(2))
            .sum();
        total += weight * sq;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Rep {
    pub rep: usize,
    pub raw: BiasVariance,
    pub denoised: BiasVariance,
    /// `raw.mse - denoised.mse`.
    pub margin: f64,
    /// `mean ‖f(e) - f(ẽ)‖²`.
    pub variance_term: f64,
    /// `mean ‖η‖²`.
    pub noise_energy: f64,
    pub bound_holds: bool,
    /// `mean ‖E[y | e] - f(ẽ)‖²`.
    pub conditional_mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub config: Prop2Config,
    pub l_f: f64,
    pub expected_margin: f64,
    pub positive_margins: usize,
    pub bounds_held: usize,
    pub reps: Vec<Prop2Rep>,
}

impl Prop2Report {
    /// At least 99% positive margins and the bound in every repetition.
    pub fn passed(&self) -> bool {
        let n = self.reps.len();
        self.positive_margins * 100 >= 99 * n && self.bounds_held == n
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.shape()[0]).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn run_rep(model: &SignalNoiseModel, projector: &Tensor, l_f: f64, rep: usize) -> Result<Prop2Rep> {
    let c = &model.config;
    let (d, k) = (c.dim, c.signal_dim);
    let mut rng = rng::keyed(c.seed, Stream::Prop2, &[2, rep as u64]);
    let mut targets = Vec::with_capacity(c.trials);
    let mut raw_preds = Vec::with_capacity(c.trials);
    let mut den_preds = Vec::with_capacity(c.trials);
    let (mut variance_term, mut noise_energy, mut gap) = (0.0, 0.0, 0.0);
    let b = &model.basis;
    for _ in 0..c.trials {
        let s: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let n: Vec<f64> = (0..d - k).map(|_| c.sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let signal: Vec<f64> = (0..d).map(|i| (0..k).map(|j| b.at(i, j) * s[j]).sum()).collect();
        let eta: Vec<f64> = (0..d).map(|i| (0..d - k).map(|j| b.at(i, k + j) * n[j]).sum()).collect();
        let e: Vec<f64> = signal.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let removed = matvec(projector, &e);
        let denoised: Vec<f64> = e.iter().zip(&removed).map(|(a, b)| a - b).collect();

        let mut y = matvec(&model.w, &signal);
        y.iter_mut().for_each(|v| *v += c.obs_sigma * rng.sample::<f64, _>(StandardNormal));
        let f_raw = matvec(&model.w, &e);
        let f_den = matvec(&model.w, &denoised);
        // posterior mean of the signal is its coordinates in the signal basis
        let coords: Vec<f64> = (0..k).map(|j| (0..d).map(|i| b.at(i, j) * e[i]).sum()).collect();
        let post: Vec<f64> = (0..d).map(|i| (0..k).map(|j| b.at(i, j) * coords[j]).sum()).collect();
        let cond_mean = matvec(&model.w, &post);

        variance_term += f_raw.iter().zip(&f_den).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        noise_energy += eta.iter().map(|v| v * v).sum::<f64>();
        gap += cond_mean.iter().zip(&f_den).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        targets.push(y);
        raw_preds.push(f_raw);
        den_preds.push(f_den);
    }
    let t = c.trials as f64;
    let (variance_term, noise_energy) = (variance_term / t, noise_energy / t);
    let raw = bias_variance(&raw_preds, &targets)?;
    let denoised = bias_variance(&den_preds, &targets)?;
    Ok(Prop2Rep {
        rep,
        margin: raw.mse - denoised.mse,
        raw,
        denoised,
        variance_term,
        noise_energy,
        bound_holds: variance_term <= l_f * l_f * noise_energy,
        conditional_mean_gap: gap / t,
    })
}

/// Runs `reps` independent repetitions of `trials` draws each.
pub fn verify_prop2(config: &Prop2Config) -> Result<Prop2Report> {
    let model = SignalNoiseModel::new(config.clone())?;
    let projector = oracle_projector(&model);
    let l_f = spectral_norm(&model.w)?;
    let reps = (0..config.reps)
        .into_par_iter()
        .map(|r| run_rep(&model, &projector, l_f, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prop2Report {
        config: config.clone(),
        l_f,
        expected_margin: model.expected_margin(),
        positive_margins: reps.iter().filter(|r| r.margin > 0.0).count(),
        bounds_held: reps.iter().filter(|r| r.bound_holds).count(),
        reps,
    })
}
