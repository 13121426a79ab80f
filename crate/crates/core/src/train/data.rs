use std::borrow::Cow;
use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::corpus::{normalize_window, NormStats, Window};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::perturb::{perturb_window, PerturbationRecord, PerturbationSpec};
use crate::rng::{derive_key, Stream};

/// One model-ready example on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(L, C)`.
    pub x: Tensor,
    /// `(L, d)`.
    pub e: Tensor,
    /// `(T, C)`.
    pub y: Tensor,
    pub stats: NormStats,
}

/// A batch stacked along a new leading axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub e: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn of(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let stack = |f: fn(&Sample) -> &Tensor| Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        Ok(Batch {
            x: stack(|s| &s.x)?,
            e: stack(|s| &s.e)?,
            y: stack(|s| &s.y)?,
        })
    }
}

/// Embeds a list of texts into an `(L, d)` matrix, memoizing repeats.
pub fn embed_texts(texts: &[String], embedder: &Embedder, cache: &mut HashMap<String, Vec<f64>>) -> Tensor {
    let d = embedder.dim();
    let mut data = Vec::with_capacity(texts.len() * d);
    for t in texts {
        let v = cache.entry(t.clone()).or_insert_with(|| embedder.embed(t));
        data.extend_from_slice(v);
    }
    Tensor::new([texts.len(), d], data).expect("embedder returns d values")
}

/// Normalizes, optionally perturbs and embeds `windows`. Window `k` is
/// perturbed under id `first_id + k`, so the same spec always corrupts the
/// same texts.
pub fn prepare_samples(
    windows: &[Window],
    embedder: &Embedder,
    spec: Option<&PerturbationSpec>,
    first_id: u64,
) -> Result<(Vec<Sample>, Vec<PerturbationRecord>)> {
    let mut cache = HashMap::new();
    let mut samples = Vec::with_capacity(windows.len());
    let mut records = Vec::new();
    for (k, w) in windows.iter().enumerate() {
        let w = normalize_window(w);
        let texts = match spec {
            Some(spec) if spec.rho > 0.0 => {
                let (texts, recs) = perturb_window(&w.lookback_texts, spec, first_id + k as u64)?;
                records.extend(recs);
                texts
            }
            _ => w.lookback_texts.clone(),
        };
        samples.push(Sample {
            e: embed_texts(&texts, embedder, &mut cache),
            x: w.lookback_values,
            y: w.target_values,
            stats: w.norm_stats,
        });
    }
    Ok((samples, records))
}

/// Supplies the training examples of each epoch.
pub trait EpochSource {
    fn samples(&self, epoch: usize) -> Result<Cow<'_, [Sample]>>;
}

impl EpochSource for [Sample] {
    fn samples(&self, _epoch: usize) -> Result<Cow<'_, [Sample]>> {
        Ok(Cow::Borrowed(self))
    }
}

impl EpochSource for Vec<Sample> {
    fn samples(&self, _epoch: usize) -> Result<Cow<'_, [Sample]>> {
        Ok(Cow::Borrowed(self))
    }
}

/// Perturbed training windows. By default every epoch sees the same
/// corruption; with `resample` each epoch draws fresh positions and edits.
pub struct PerturbedSource<'a> {
    windows: &'a [Window],
    embedder: &'a Embedder,
    spec: PerturbationSpec,
    first_id: u64,
    resample: bool,
    fixed: Vec<Sample>,
}

impl<'a> PerturbedSource<'a> {
    pub fn new(
        windows: &'a [Window],
        embedder: &'a Embedder,
        spec: PerturbationSpec,
        first_id: u64,
        resample: bool,
    ) -> Result<Self> {
        let (fixed, _) = prepare_samples(windows, embedder, Some(&spec), first_id)?;
        Ok(PerturbedSource {
            windows,
            embedder,
            spec,
            first_id,
            resample,
            fixed,
        })
    }

    pub fn fixed(&self) -> &[Sample] {
        &self.fixed
    }
}

impl EpochSource for PerturbedSource<'_> {
    fn samples(&self, epoch: usize) -> Result<Cow<'_, [Sample]>> {
        if !self.resample || epoch == 0 {
            return Ok(Cow::Borrowed(&self.fixed));
        }
        let spec = PerturbationSpec {
            seed: derive_key(self.spec.seed, Stream::SelectPositions, &[u64::MAX, epoch as u64]),
            ..self.spec.clone()
        };
        let (samples, _) = prepare_samples(self.windows, self.embedder, Some(&spec), self.first_id)?;
        Ok(Cow::Owned(samples))
    }
}
