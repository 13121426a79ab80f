use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{combine_bound, lipschitz_mlp, norm, spectral_norm, Layer};
use crate::autodiff::{Mode, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{matmul2, ForecasterKind, ParNet, Variant};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    /// Frobenius radius of the embedding domain; `None` means `sqrt(L)`,
    /// i.e. every row in the unit ball.
    pub radius: Option<f64>,
    pub points_per_rung: usize,
    pub pairs_per_rung: usize,
    pub power_iters: usize,
    pub fd_step: f64,
    /// Smallest rung of the radius ladder is `2^min_rung`.
    pub min_rung: i32,
    pub safety_factor: f64,
    /// Bound on the softmax Jacobian norm used by the closed-form
    /// attention bound.
    pub softmax_constant: f64,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            radius: None,
            points_per_rung: 6,
            pairs_per_rung: 64,
            power_iters: 20,
            fd_step: 1e-5,
            min_rung: -3,
            safety_factor: 1.5,
            softmax_constant: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub checkpoint_sha256: String,
    pub model_seed: u64,
    pub options: CertifyOptions,
    pub anchors: usize,
    pub radius_e: f64,
    pub radius_z: f64,
    pub radius_a: f64,
    pub projection_layers: Vec<f64>,
    pub l_projection: f64,
    /// Largest observed local slope of the attention block.
    pub attention_observed: f64,
    /// `safety_factor * attention_observed`.
    pub l_attention: f64,
    pub attention_closed_form: f64,
    pub softmax_jacobian_observed: f64,
    pub forecaster_method: String,
    pub l_forecaster: f64,
    pub l_total: f64,
    pub jacobian_points: usize,
    pub random_pairs: usize,
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn sample_ball(rng: &mut ChaCha8Rng, shape: &[usize], radius: f64) -> Tensor {
    let mut t = Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal));
    let n = t.numel() as f64;
    let r = radius * rng.random::<f64>().powf(1.0 / n) / t.norm();
    t.data_mut().iter_mut().for_each(|v| *v *= r);
    t
}

fn eval_map<G>(g: &G, z: &Tensor) -> Result<Tensor>
where
    G: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone())?;
    let out = g(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn axpy(z: &Tensor, s: f64, v: &Tensor) -> Tensor {
    Tensor::from_fn(z.shape().to_vec(), |i| z.data()[i] + s * v.data()[i])
}

/// Largest singular value of the Jacobian of `g` at `z`, by power iteration
/// with finite-difference Jacobian-vector products and exact
/// vector-Jacobian products.
pub fn local_jacobian_norm<G>(g: &G, z: &Tensor, iters: usize, h: f64, seed: u64) -> Result<f64>
where
    G: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut rng = rng::keyed(seed, Stream::Certify, &[2]);
    let mut v = Tensor::from_fn(z.shape().to_vec(), |_| rng.sample(StandardNormal));
    let mut best = 0.0f64;
    let mut tape = Tape::new();
    let leaf = tape.leaf(z.clone())?;
    let out = g(&mut tape, leaf)?;
    for _ in 0..iters.max(1) {
        let nv = v.norm();
        if nv == 0.0 {
            break;
        }
        v = v.map(|x| x / nv);
        let plus = eval_map(g, &axpy(z, h, &v))?;
        let minus = eval_map(g, &axpy(z, -h, &v))?;
        let jv = Tensor::from_fn(plus.shape().to_vec(), |i| (plus.data()[i] - minus.data()[i]) / (2.0 * h));
        best = best.max(jv.norm());
        let grads = tape.gradients_with_seed(out, &jv)?;
        v = grads
            .wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(z.shape().to_vec()));
    }
    Ok(best)
}

/// Observed slope of `g` over a dyadic ladder of balls `2^j`, `j` from
/// `min_rung` up to the first rung covering `radius`. Each rung's samples
/// depend only on the rung, so the estimate never decreases with `radius`.
fn ladder_estimate<G>(
    g: &G,
    shape: &[usize],
    radius: f64,
    opts: &CertifyOptions,
    tag: u64,
) -> Result<(f64, usize, usize)>
where
    G: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let top = if radius > 0.0 {
        (radius.log2().ceil() as i32).max(opts.min_rung)
    } else {
        opts.min_rung
    };
    let rungs: Vec<i32> = (opts.min_rung..=top).collect();
    let per_rung: Vec<f64> = rungs
        .par_iter()
        .map(|&j| -> Result<f64> {
            let r = 2f64.powi(j);
            let key = (j - opts.min_rung) as u64;
            let mut rng = rng::keyed(opts.seed, Stream::Certify, &[tag, key]);
            let mut best = 0.0f64;
            for p in 0..opts.points_per_rung {
                let z = sample_ball(&mut rng, shape, r);
                let seed = rng::derive_key(opts.seed, Stream::Certify, &[tag, key, p as u64]);
                best = best.max(local_jacobian_norm(g, &z, opts.power_iters, opts.fd_step, seed)?);
            }
            for _ in 0..opts.pairs_per_rung {
                let z1 = sample_ball(&mut rng, shape, r);
                let z2 = sample_ball(&mut rng, shape, r);
                let dz = dist(&z1, &z2);
                if dz > 0.0 {
                    let (a, b) = (eval_map(g, &z1)?, eval_map(g, &z2)?);
                    best = best.max(dist(&a, &b) / dz);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let best = per_rung.into_iter().fold(0.0f64, f64::max);
    Ok((
        best,
        rungs.len() * opts.points_per_rung,
        rungs.len() * opts.pairs_per_rung,
    ))
}

fn dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn batch1(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(shape)
}

/// Observed Lipschitz constant of `z -> A(x, z)` (prior-blended attention)
/// over `‖z‖ <= radius`, maximized over anchors. Returns
/// `(estimate, jacobian points, random pairs)`.
pub fn lipschitz_attention(
    model: &ParNet,
    anchors: &[Tensor],
    radius: f64,
    opts: &CertifyOptions,
) -> Result<(f64, usize, usize)> {
    let shape = [1, model.config.lookback, model.config.embed_dim];
    let mut out = (0.0f64, 0, 0);
    for (k, x) in anchors.iter().enumerate() {
        let x = batch1(x)?;
        let g = |tape: &mut Tape, z: Var| -> Result<Var> {
            let xv = tape.leaf(x.clone())?;
            model.attention_block(tape, xv, z)
        };
        let (est, pts, pairs) = ladder_estimate(&g, &shape, radius, opts, 100 + k as u64)?;
        out = (out.0.max(est), out.1 + pts, out.2 + pairs);
    }
    Ok(out)
}

fn forecaster_estimate(
    model: &ParNet,
    anchors: &[Tensor],
    radius: f64,
    opts: &CertifyOptions,
) -> Result<(f64, usize, usize)> {
    let shape = [1, model.config.lookback, model.config.d_model];
    let mut out = (0.0f64, 0, 0);
    for (k, x) in anchors.iter().enumerate() {
        let x = batch1(x)?;
        let g = |tape: &mut Tape, a: Var| -> Result<Var> {
            let xv = tape.leaf(x.clone())?;
            model.forecast(tape, xv, Some(a), Mode::Eval, 0)
        };
        let (est, pts, pairs) = ladder_estimate(&g, &shape, radius, opts, 10_000 + k as u64)?;
        out = (out.0.max(est), out.1 + pts, out.2 + pairs);
    }
    Ok(out)
}

fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.shape()[1];
    Tensor::from_fn([t.shape()[0], len], |i| t.data()[(i / len) * c + start + i % len])
}

fn rows(t: &Tensor, picks: impl Iterator<Item = usize>) -> Tensor {
    let c = t.shape()[1];
    let data: Vec<f64> = picks.flat_map(|r| t.data()[r * c..(r + 1) * c].to_vec()).collect();
    let n = data.len() / c;
    Tensor::new([n, c], data).expect("whole rows")
}

/// Closed-form bound for the prior-blended attention block on
/// `‖z‖ <= radius_z`, given a softmax Jacobian bound `c`.
pub(crate) fn attention_closed_form(model: &ParNet, anchors: &[Tensor], radius_z: f64, c: f64) -> Result<f64> {
    let cfg = &model.config;
    let [w_in, w_q, w_k, w_v, w_o, b_q] = model.attention_weights();
    let [b_in, _, b_v, _] = model.attention_biases();
    let l = cfg.lookback as f64;
    let dh = cfg.head_dim();
    let n_in = spectral_norm(w_in)?;
    let lifted = n_in * radius_z + l.sqrt() * b_in.norm();
    let mut sum_sq = 0.0;
    for h in 0..cfg.heads {
        let wv = spectral_norm(&columns(w_v, h * dh, dh))?;
        let wk = spectral_norm(&columns(w_k, h * dh, dh))?;
        let bv = b_v.data()[h * dh..(h + 1) * dh].iter().map(|v| v * v).sum::<f64>().sqrt();
        let wq_h = columns(w_q, h * dh, dh);
        let q_max = anchors
            .iter()
            .map(|x| {
                let q = matmul2(x, &wq_h);
                Tensor::from_fn(q.shape().to_vec(), |i| q.data()[i] + b_q.data()[h * dh + i % dh]).norm()
            })
            .fold(0.0f64, f64::max);
        let v_max = wv * lifted + l.sqrt() * bv;
        let lh = wv * l.sqrt() + c * q_max * wk * v_max / (dh as f64).sqrt();
        sum_sq += lh * lh;
    }
    let mixed = spectral_norm(w_o)? * sum_sq.sqrt() * n_in;
    let prior = spectral_norm(&model.value_path_matrix())?;
    let w = cfg.prior_weight;
    Ok(w * mixed + (1.0 - w) * prior)
}

/// Largest softmax Jacobian norm `‖diag(p) - p pᵀ‖` seen in the attention
/// rows at `points` random inputs per anchor.
fn softmax_jacobian_observed(model: &ParNet, anchors: &[Tensor], radius: f64, points: usize, seed: u64) -> Result<f64> {
    let shape = [1, model.config.lookback, model.config.embed_dim];
    let mut best = 0.0f64;
    for (k, x) in anchors.iter().enumerate() {
        let mut rng = rng::keyed(seed, Stream::Certify, &[3, k as u64]);
        for _ in 0..points {
            let z = sample_ball(&mut rng, &shape, radius);
            let mut tape = Tape::new();
            let xv = tape.leaf(batch1(x)?)?;
            let zv = tape.leaf(z)?;
            let att = model.cross_attend(&mut tape, xv, zv)?;
            for w in att.weights {
                let w = tape.value(w);
                let n = w.last_dim();
                for p in w.data().chunks(n) {
                    let j = Tensor::from_fn([n, n], |i| {
                        let (a, b) = (i / n, i % n);
                        (if a == b { p[a] } else { 0.0 }) - p[a] * p[b]
                    });
                    best = best.max(spectral_norm(&j)?);
                }
            }
        }
    }
    Ok(best)
}

/// Certificate for `e -> f(x, e)` with `x` among `anchors` (each `(L, C)`)
/// and `‖e‖_F <= radius`.
pub fn certify(model: &ParNet, anchors: &[Tensor], opts: &CertifyOptions) -> Result<Certificate> {
    let cfg = &model.config;
    if anchors.is_empty() {
        return Err(Error::Certification("no anchor lookbacks".into()));
    }
    for a in anchors {
        if a.shape() != [cfg.lookback, cfg.channels] {
            return Err(Error::shape("certify anchor", a.shape(), &[cfg.lookback, cfg.channels]));
        }
    }
    if !(opts.safety_factor >= 1.0) || !(opts.softmax_constant > 0.0) {
        return Err(Error::Config("safety factor must be >= 1 and softmax constant > 0".into()));
    }
    let l = cfg.lookback as f64;
    let radius_e = opts.radius.unwrap_or(l.sqrt());

    let (w1, gamma, w2) = model.projection_weights();
    let layers = [
        Layer::Linear(w1.clone()),
        Layer::LayerNorm {
            gamma: gamma.data().to_vec(),
            eps: LAYER_NORM_EPS,
        },
        Layer::Relu,
        Layer::Linear(w2.clone()),
    ];
    let projection_layers = layers.iter().map(Layer::constant).collect::<Result<Vec<_>>>()?;
    let l_projection = lipschitz_mlp(&layers)?;

    // Φ(0) is the same for every row; Φ is also bounded because the layer
    // norm output has norm at most max|γ| sqrt(2d) + ‖β‖.
    let phi_zero = {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([1, cfg.embed_dim]))?;
        let out = model.project_noise(&mut tape, z)?;
        tape.value(out).norm()
    };
    let phi_range = {
        let beta = model.param("phi.ln.beta").map_or(0.0, Tensor::norm);
        let b2 = model.param("phi.l2.bias").map_or(0.0, Tensor::norm);
        let g_max = gamma.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        spectral_norm(w2)? * (g_max * ((2 * cfg.embed_dim) as f64).sqrt() + beta) + b2
    };
    let radius_z = (radius_e * (1.0 + l_projection) + l.sqrt() * phi_zero).min(radius_e + l.sqrt() * phi_range);

    let (attention_observed, mut jacobian_points, mut random_pairs) =
        lipschitz_attention(model, anchors, radius_z, opts)?;
    let l_attention = opts.safety_factor * attention_observed;
    let attention_closed_form = attention_closed_form(model, anchors, radius_z, opts.softmax_constant)?;
    let softmax_jacobian_observed =
        softmax_jacobian_observed(model, anchors, radius_z, opts.points_per_rung, opts.seed)?;

    let attention_at_zero = anchors
        .iter()
        .map(|x| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(batch1(x)?)?;
            let z = tape.leaf(Tensor::zeros([1, cfg.lookback, cfg.embed_dim]))?;
            let a = model.attention_block(&mut tape, xv, z)?;
            Ok(tape.value(a).norm())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    let radius_a = attention_at_zero + l_attention * radius_z;

    let (forecaster_method, l_forecaster) = match cfg.forecaster {
        ForecasterKind::Mlp => {
            let (w1, w2) = model.mlp_weights().expect("mlp forecaster");
            let fused = cfg.fused_dim();
            let text_rows = (0..cfg.lookback).flat_map(|t| (t * fused + cfg.channels)..((t + 1) * fused));
            let l = lipschitz_mlp(&[Layer::Linear(rows(w1, text_rows)), Layer::Relu, Layer::Linear(w2.clone())])?;
            ("global".to_string(), l)
        }
        ForecasterKind::Gru => {
            let (obs, pts, pairs) = forecaster_estimate(model, anchors, radius_a, opts)?;
            jacobian_points += pts;
            random_pairs += pairs;
            ("observed".to_string(), opts.safety_factor * obs)
        }
    };

    Ok(Certificate {
        checkpoint_sha256: model.fingerprint()?,
        model_seed: model.seed,
        options: opts.clone(),
        anchors: anchors.len(),
        radius_e,
        radius_z,
        radius_a,
        projection_layers,
        l_projection,
        attention_observed,
        l_attention,
        attention_closed_form,
        softmax_jacobian_observed,
        forecaster_method,
        l_forecaster,
        l_total: combine_bound(l_forecaster, l_attention, l_projection),
        jacobian_points,
        random_pairs,
    })
}

/// Largest `‖f(x, e1) - f(x, e2)‖ / ‖e1 - e2‖` over `pairs` random pairs
/// with `‖e‖ <= radius`, spread evenly over the anchors. Half of the pairs
/// are independent draws, half are nearby points at dyadic distances.
pub fn empirical_lipschitz(model: &ParNet, anchors: &[Tensor], radius: f64, pairs: usize, seed: u64) -> Result<f64> {
    let cfg = &model.config;
    if anchors.is_empty() {
        return Err(Error::Certification("no anchor lookbacks".into()));
    }
    let shape = [cfg.lookback, cfg.embed_dim];
    let per_anchor = pairs.div_ceil(anchors.len());
    let results: Vec<f64> = anchors
        .par_iter()
        .enumerate()
        .map(|(k, x)| -> Result<f64> {
            let mut rng = rng::keyed(seed, Stream::Certify, &[4, k as u64]);
            let mut firsts = Vec::with_capacity(per_anchor);
            let mut seconds = Vec::with_capacity(per_anchor);
            for p in 0..per_anchor {
                let e1 = sample_ball(&mut rng, &shape, radius);
                let e2 = if p % 2 == 0 {
                    sample_ball(&mut rng, &shape, radius)
                } else {
                    let step = radius * 2f64.powi(-(rng.random_range(1..=12)));
                    let d = sample_ball(&mut rng, &shape, step);
                    axpy(&e1, 1.0, &d)
                };
                let scale = (radius / e1.norm().max(e2.norm())).min(1.0);
                firsts.push(e1.map(|v| v * scale));
                seconds.push(e2.map(|v| v * scale));
            }
            let mut best = 0.0f64;
            for (c1, c2) in firsts.chunks(256).zip(seconds.chunks(256)) {
                let b = c1.len();
                let xs = Tensor::stack(&vec![x; b])?;
                let e1 = Tensor::stack(&c1.iter().collect::<Vec<_>>())?;
                let e2 = Tensor::stack(&c2.iter().collect::<Vec<_>>())?;
                let y1 = model.forward_variant(&xs, &e1, Variant::Full, Mode::Eval, 0)?;
                let y2 = model.forward_variant(&xs, &e2, Variant::Full, Mode::Eval, 0)?;
                let out = y1.numel() / b;
                for i in 0..b {
                    let dy = norm(
                        &y1.data()[i * out..(i + 1) * out]
                            .iter()
                            .zip(&y2.data()[i * out..(i + 1) * out])
                            .map(|(a, b)| a - b)
                            .collect::<Vec<_>>(),
                    );
                    let de = dist(&c1[i], &c2[i]);
                    if de > 0.0 {
                        best = best.max(dy / de);
                    }
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().fold(0.0, f64::max))
}
