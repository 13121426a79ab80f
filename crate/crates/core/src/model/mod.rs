//! The perturbation-aware forecaster `F(x ‖ A(x, e - Φ(e)))`.
//!
//! * `Φ` (projection module): `d -> 2d -> d` MLP with layer norm and ReLU
//!   after the hidden layer. Its output layer starts at zero, so an untrained
//!   module is the identity denoiser.
//! * `A` (cross-attention): queries from each lookback observation, keys and
//!   values from the denoised embeddings lifted to `d_model`. The attention
//!   output is blended with the un-mixed value projection ("prior") by the
//!   fixed prior weight `w`.
//! * `F` (forecaster): a GRU over the fused per-step vectors `x_t ‖ a_t`, or
//!   an MLP over the flattened window.
//!
//! All forwards are batched: `x` is `(B, L, C)`, `e` is `(B, L, d)` and the
//! output is `(B, T, C)`.

mod checkpoint;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::autodiff::{Group, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, derive_key, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Gru,
    Mlp,
}

/// Which parts of the text path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Projection, attention and prior blending.
    Full,
    /// Raw embeddings go straight into attention.
    NoPpm,
    /// Attention replaced by the per-step value projection.
    NoAttn,
    /// No text at all; the fused text features are zero.
    Unimodal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPpm, Variant::NoAttn, Variant::Unimodal];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPpm => "no_ppm",
            Variant::NoAttn => "no_attn",
            Variant::Unimodal => "unimodal",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub hidden: usize,
    pub forecaster: ForecasterKind,
    pub prior_weight: f64,
    pub dropout: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize) -> Self {
        ModelConfig {
            channels,
            lookback,
            horizon,
            embed_dim: 12,
            d_model: 16,
            heads: 8,
            hidden: 64,
            forecaster: ForecasterKind::Gru,
            prior_weight: 0.5,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.prior_weight) {
            return Err(Error::Config(format!("prior weight {} outside [0, 1]", self.prior_weight)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn fused_dim(&self) -> usize {
        self.channels + self.d_model
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Projection {
    l1: Linear,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    l2: Linear,
}

#[derive(Debug, Clone)]
struct Attention {
    input: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

#[derive(Debug, Clone)]
struct GruCell {
    reset: (ParamId, ParamId, ParamId),
    update: (ParamId, ParamId, ParamId),
    candidate: (ParamId, ParamId, ParamId),
    candidate_hidden_bias: ParamId,
}

#[derive(Debug, Clone)]
enum Forecaster {
    Gru { cell: GruCell, head: Linear },
    Mlp { l1: Linear, l2: Linear },
}

/// Attention block outputs, all `(B, L, ·)`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub mixed: Var,
    pub prior: Var,
    /// One `(B, L, L)` weight tensor per head.
    pub weights: Vec<Var>,
}

/// Model parameters plus the handles needed to run them.
#[derive(Debug, Clone)]
pub struct ParNet {
    pub config: ModelConfig,
    /// Initialization seed.
    pub seed: u64,
    pub store: ParamStore,
    projection: Projection,
    attention: Attention,
    forecaster: Forecaster,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], group: Group) -> ParamId {
        let std = self.std;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.add(name, t, group)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: Group) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), value), group)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, group: Group) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.weight"), &[fan_in, fan_out], group),
            b: self.constant(&format!("{name}.bias"), &[fan_out], 0.0, group),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, group: Group) -> Linear {
        Linear {
            w: self.constant(&format!("{name}.weight"), &[fan_in, fan_out], 0.0, group),
            b: self.constant(&format!("{name}.bias"), &[fan_out], 0.0, group),
        }
    }
}

impl ParNet {
    /// Normal(0, init_std) weights, zero biases, unit layer-norm gain and a
    /// zero projection output layer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::keyed(seed, Stream::Init, &[]),
            std: config.init_std,
        };
        let d = config.embed_dim;
        let dm = config.d_model;
        let projection = Projection {
            l1: init.linear("phi.l1", d, 2 * d, Group::PerSup),
            ln_gamma: init.constant("phi.ln.gamma", &[2 * d], 1.0, Group::PerSup),
            ln_beta: init.constant("phi.ln.beta", &[2 * d], 0.0, Group::PerSup),
            l2: init.zero_linear("phi.l2", 2 * d, d, Group::PerSup),
        };
        let attention = Attention {
            input: init.linear("attn.input", d, dm, Group::CrossAttn),
            query: init.linear("attn.query", config.channels, dm, Group::CrossAttn),
            key: init.linear("attn.key", dm, dm, Group::CrossAttn),
            value: init.linear("attn.value", dm, dm, Group::CrossAttn),
            output: init.linear("attn.output", dm, dm, Group::CrossAttn),
        };
        let fused = config.fused_dim();
        let h = config.hidden;
        let out = config.horizon * config.channels;
        let forecaster = match config.forecaster {
            ForecasterKind::Gru => {
                let mut gate = |name: &str| {
                    (
                        init.normal(&format!("gru.{name}.input"), &[fused, h], Group::Model),
                        init.normal(&format!("gru.{name}.hidden"), &[h, h], Group::Model),
                        init.constant(&format!("gru.{name}.bias"), &[h], 0.0, Group::Model),
                    )
                };
                let cell = GruCell {
                    reset: gate("reset"),
                    update: gate("update"),
                    candidate: gate("candidate"),
                    candidate_hidden_bias: init.constant("gru.candidate.hidden_bias", &[h], 0.0, Group::Model),
                };
                Forecaster::Gru {
                    cell,
                    head: init.linear("head", h, out, Group::Model),
                }
            }
            ForecasterKind::Mlp => Forecaster::Mlp {
                l1: init.linear("mlp.l1", config.lookback * fused, h, Group::Model),
                l2: init.linear("mlp.l2", h, out, Group::Model),
            },
        };
        Ok(ParNet {
            config,
            seed,
            store,
            projection,
            attention,
            forecaster,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.find(name).map(|id| self.store.value(id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.store.find(name).map(|id| &mut self.store.get_mut(id).value)
    }

    fn linear(&self, tape: &mut Tape, input: Var, l: &Linear) -> Result<Var> {
        let w = tape.param(&self.store, l.w);
        let b = tape.param(&self.store, l.b);
        let y = tape.matmul(input, w)?;
        tape.add(y, b)
    }

    fn check_last(&self, tape: &Tape, v: Var, dim: usize, what: &'static str) -> Result<()> {
        let s = tape.value(v).shape();
        if s.last() != Some(&dim) {
            return Err(Error::shape(what, s, &[dim]));
        }
        Ok(())
    }

    /// `Φ(e)`, applied to every row of the last axis.
    pub fn project_noise(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        self.check_last(tape, e, self.config.embed_dim, "project_noise")?;
        let p = &self.projection;
        let h = self.linear(tape, e, &p.l1)?;
        let g = tape.param(&self.store, p.ln_gamma);
        let b = tape.param(&self.store, p.ln_beta);
        let h = tape.layer_norm(h, g, b)?;
        let h = tape.relu(h)?;
        self.linear(tape, h, &p.l2)
    }

    /// `e - Φ(e)`.
    pub fn denoise(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let noise = self.project_noise(tape, e)?;
        tape.sub(e, noise)
    }

    /// Multi-head attention with queries from `x (B, L, C)` and keys/values
    /// from the denoised embeddings `z (B, L, d)`.
    pub fn cross_attend(&self, tape: &mut Tape, x: Var, z: Var) -> Result<AttentionOutput> {
        self.check_last(tape, x, self.config.channels, "cross_attend")?;
        self.check_last(tape, z, self.config.embed_dim, "cross_attend")?;
        let a = &self.attention;
        let lifted = self.linear(tape, z, &a.input)?;
        let q = self.linear(tape, x, &a.query)?;
        let k = self.linear(tape, lifted, &a.key)?;
        let v = self.linear(tape, lifted, &a.value)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice(q, 2, h * dh, dh)?;
            let kh = tape.slice(k, 2, h * dh, dh)?;
            let vh = tape.slice(v, 2, h * dh, dh)?;
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.softmax(scores)?;
            heads.push(tape.bmm(w, vh, false)?);
            weights.push(w);
        }
        let concat = tape.concat_all(&heads, 2)?;
        let mixed = self.linear(tape, concat, &a.output)?;
        let prior = self.linear(tape, v, &a.output)?;
        Ok(AttentionOutput {
            mixed,
            prior,
            weights,
        })
    }

    /// `w * a + (1 - w) * prior`.
    pub fn apply_prior(tape: &mut Tape, a: Var, prior: Var, w: f64) -> Result<Var> {
        if w == 1.0 {
            return Ok(a);
        }
        if w == 0.0 {
            return Ok(prior);
        }
        let lhs = tape.scale(a, w)?;
        let rhs = tape.scale(prior, 1.0 - w)?;
        tape.add(lhs, rhs)
    }

    /// The whole text path for `variant`: `(B, L, d) -> (B, L, d_model)`.
    /// Returns `None` for the unimodal variant.
    pub fn text_features(&self, tape: &mut Tape, x: Var, e: Var, variant: Variant) -> Result<Option<Var>> {
        let z = match variant {
            Variant::Full | Variant::NoAttn => self.denoise(tape, e)?,
            Variant::NoPpm => e,
            Variant::Unimodal => return Ok(None),
        };
        let att = self.cross_attend(tape, x, z)?;
        Ok(Some(match variant {
            Variant::NoAttn => att.prior,
            _ => Self::apply_prior(tape, att.mixed, att.prior, self.config.prior_weight)?,
        }))
    }

    /// Attention block for a denoised input, as used by the certifier:
    /// `z -> w * A(x, z) + (1 - w) * prior(z)`.
    pub fn attention_block(&self, tape: &mut Tape, x: Var, z: Var) -> Result<Var> {
        let att = self.cross_attend(tape, x, z)?;
        Self::apply_prior(tape, att.mixed, att.prior, self.config.prior_weight)
    }

    /// `F(x ‖ a)` for text features `a (B, L, d_model)`; `None` means zeros.
    pub fn forecast(&self, tape: &mut Tape, x: Var, a: Option<Var>, mode: Mode, seed: u64) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (batch, steps) = (shape[0], shape[1]);
        if steps != self.config.lookback {
            return Err(Error::shape("forecast", &shape, &[batch, self.config.lookback]));
        }
        let a = match a {
            Some(a) => a,
            None => tape.leaf(Tensor::zeros([batch, steps, self.config.d_model]))?,
        };
        let a = tape.dropout(a, self.config.dropout, mode, derive_key(seed, Stream::Dropout, &[0]))?;
        let fused = tape.concat(x, a, 2)?;
        let out = match &self.forecaster {
            Forecaster::Gru { cell, head } => {
                let h = self.run_gru(tape, fused, cell, batch, steps)?;
                let h = tape.dropout(h, self.config.dropout, mode, derive_key(seed, Stream::Dropout, &[1]))?;
                self.linear(tape, h, head)?
            }
            Forecaster::Mlp { l1, l2 } => {
                let flat = tape.reshape(fused, [batch, steps * self.config.fused_dim()])?;
                let h = self.linear(tape, flat, l1)?;
                let h = tape.relu(h)?;
                let h = tape.dropout(h, self.config.dropout, mode, derive_key(seed, Stream::Dropout, &[1]))?;
                self.linear(tape, h, l2)?
            }
        };
        tape.reshape(out, [batch, self.config.horizon, self.config.channels])
    }

    fn run_gru(&self, tape: &mut Tape, fused: Var, cell: &GruCell, batch: usize, steps: usize) -> Result<Var> {
        let hidden = self.config.hidden;
        let project = |tape: &mut Tape, (w, _, b): (ParamId, ParamId, ParamId)| -> Result<Var> {
            let wv = tape.param(&self.store, w);
            let bv = tape.param(&self.store, b);
            let y = tape.matmul(fused, wv)?;
            tape.add(y, bv)
        };
        let in_r = project(tape, cell.reset)?;
        let in_z = project(tape, cell.update)?;
        let in_n = project(tape, cell.candidate)?;
        let u_r = tape.param(&self.store, cell.reset.1);
        let u_z = tape.param(&self.store, cell.update.1);
        let u_n = tape.param(&self.store, cell.candidate.1);
        let b_hn = tape.param(&self.store, cell.candidate_hidden_bias);
        let mut h = tape.leaf(Tensor::zeros([batch, hidden]))?;
        let step = |tape: &mut Tape, v: Var, t: usize| -> Result<Var> {
            let s = tape.slice(v, 1, t, 1)?;
            tape.reshape(s, [batch, hidden])
        };
        for t in 0..steps {
            let xr = step(tape, in_r, t)?;
            let xz = step(tape, in_z, t)?;
            let xn = step(tape, in_n, t)?;
            let hr = tape.matmul(h, u_r)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r)?;
            let hz = tape.matmul(h, u_z)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z)?;
            let hn = tape.matmul(h, u_n)?;
            let hn = tape.add(hn, b_hn)?;
            let gated = tape.mul(r, hn)?;
            let n = tape.add(xn, gated)?;
            let n = tape.tanh(n)?;
            // h' = (1 - z) * n + z * h
            let diff = tape.sub(h, n)?;
            let keep = tape.mul(z, diff)?;
            h = tape.add(n, keep)?;
        }
        Ok(h)
    }

    /// Records the forward pass of `variant` on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: Var,
        e: Var,
        variant: Variant,
        mode: Mode,
        seed: u64,
    ) -> Result<Var> {
        let xs = tape.value(x).shape();
        let es = tape.value(e).shape();
        let c = &self.config;
        if xs.len() != 3 || xs[1..] != [c.lookback, c.channels] {
            return Err(Error::shape("forward x", xs, &[c.lookback, c.channels]));
        }
        if es.len() != 3 || es[0] != xs[0] || es[1..] != [c.lookback, c.embed_dim] {
            return Err(Error::shape("forward e", es, &[xs[0], c.lookback, c.embed_dim]));
        }
        let a = self.text_features(tape, x, e, variant)?;
        self.forecast(tape, x, a, mode, seed)
    }

    /// Predictions `(B, T, C)` of `variant` for `x (B, L, C)`, `e (B, L, d)`.
    pub fn forward_variant(&self, x: &Tensor, e: &Tensor, variant: Variant, mode: Mode, seed: u64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let ev = tape.leaf(e.clone())?;
        let out = self.forward_on(&mut tape, xv, ev, variant, mode, seed)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, x: &Tensor, e: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_variant(x, e, Variant::Full, mode, 0)
    }

    pub fn forward_no_ppm(&self, x: &Tensor, e: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_variant(x, e, Variant::NoPpm, mode, 0)
    }

    pub fn forward_no_attn(&self, x: &Tensor, e: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_variant(x, e, Variant::NoAttn, mode, 0)
    }

    /// Weight matrices of `Φ` in application order, with layer-norm gains.
    pub fn projection_weights(&self) -> (&Tensor, &Tensor, &Tensor) {
        let p = &self.projection;
        (
            self.store.value(p.l1.w),
            self.store.value(p.ln_gamma),
            self.store.value(p.l2.w),
        )
    }

    /// `W_in W_V W_O`: the linear part of the prior path.
    pub fn value_path_matrix(&self) -> Tensor {
        let a = &self.attention;
        let m = [a.input.w, a.value.w, a.output.w]
            .iter()
            .map(|id| self.store.value(*id))
            .fold(None::<Tensor>, |acc, w| {
                Some(match acc {
                    None => w.clone(),
                    Some(m) => matmul2(&m, w),
                })
            });
        m.expect("three factors")
    }

    /// `(W_in, W_Q, W_K, W_V, W_O)` and the query bias.
    pub fn attention_weights(&self) -> [&Tensor; 6] {
        let a = &self.attention;
        [
            self.store.value(a.input.w),
            self.store.value(a.query.w),
            self.store.value(a.key.w),
            self.store.value(a.value.w),
            self.store.value(a.output.w),
            self.store.value(a.query.b),
        ]
    }

    /// `(b_in, b_K, b_V, b_O)`.
    pub fn attention_biases(&self) -> [&Tensor; 4] {
        let a = &self.attention;
        [
            self.store.value(a.input.b),
            self.store.value(a.key.b),
            self.store.value(a.value.b),
            self.store.value(a.output.b),
        ]
    }

    /// MLP forecaster weights `(W1, W2)`; `None` for the GRU.
    pub fn mlp_weights(&self) -> Option<(&Tensor, &Tensor)> {
        match &self.forecaster {
            Forecaster::Mlp { l1, l2 } => Some((self.store.value(l1.w), self.store.value(l2.w))),
            Forecaster::Gru { .. } => None,
        }
    }
}

/// Plain 2-D product outside any tape.
pub(crate) fn matmul2(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    debug_assert_eq!(k, b.shape()[0]);
    Tensor::new([r, n], crate::autodiff::gemm(a.data(), b.data(), r, k, n)).expect("shape")
}
