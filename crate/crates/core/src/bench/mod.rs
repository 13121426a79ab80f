//! Experiment harness: configuration, synthetic data, rho sweeps,
//! ablations and report output.

mod report;
mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    emit_csv, emit_plot, read_csv, render_svg, CellFailure, CellResult, Label, ReportRow, ReportTable,
};
pub use synth::{synth_dataset, write_series, SynthSpec};

use crate::corpus::{
    align_texts, chronological_split, load_numerical, load_text_events, make_windows, ColumnSpec, Frequency,
    SplitRatios, TextualNumericalSeries, Window,
};
use crate::embed::{EmbedSource, Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::model::{ForecasterKind, ModelConfig, ParNet, Variant};
use crate::perturb::PerturbationSpec;
use crate::train::{evaluate, fit, prepare_samples, PerturbedSource, Sample, TrainConfig, TrainReport};

/// Window ids are offset per split so the three splits never share
/// perturbation draws.
const VAL_IDS: u64 = 1 << 32;
const TEST_IDS: u64 = 2 << 32;

/// Flat experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Numeric CSV; when absent the synthetic generator is used.
    pub numeric_path: Option<PathBuf>,
    pub text_path: Option<PathBuf>,
    /// Precomputed `text,v1,...,vd` rows; texts missing from it fall back to
    /// hashing.
    pub embeddings_path: Option<PathBuf>,
    pub frequency: Frequency,
    pub target: Option<String>,
    pub channels: Option<Vec<String>>,

    pub synth_len: usize,
    pub synth_strength: f64,
    pub synth_seed: u64,

    pub lookback: Option<usize>,
    pub label_len: Option<usize>,
    pub horizon: Option<usize>,
    pub stride: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub resample_perturbations: bool,

    pub embed_dim: usize,
    pub embed_seed: u64,
    pub order_channel: bool,

    pub forecaster: ForecasterKind,
    pub hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub prior_weight: f64,
    pub dropout: f64,
    pub init_std: f64,

    pub lr_model: f64,
    pub lr_per_sup: f64,
    pub lr_cross_attn: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: Option<usize>,
    /// Seeded per-epoch batch order. On by default here: windows with
    /// stride 1 overlap, so chronological batches are highly correlated.
    pub shuffle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 8, 6);
        let t = TrainConfig::default();
        ExperimentConfig {
            name: "synthetic".into(),
            numeric_path: None,
            text_path: None,
            embeddings_path: None,
            frequency: Frequency::Monthly,
            target: None,
            channels: None,
            synth_len: 600,
            synth_strength: 0.9,
            synth_seed: 0,
            lookback: None,
            label_len: None,
            horizon: None,
            stride: 1,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            rhos: vec![0.0, 0.3, 0.6, 0.9],
            seeds: vec![0, 1, 2, 3, 4],
            variants: Variant::ALL.to_vec(),
            resample_perturbations: false,
            embed_dim: m.embed_dim,
            embed_seed: 0,
            order_channel: true,
            forecaster: m.forecaster,
            hidden: m.hidden,
            d_model: m.d_model,
            heads: m.heads,
            prior_weight: m.prior_weight,
            dropout: m.dropout,
            init_std: m.init_std,
            lr_model: t.lr_model,
            lr_per_sup: t.lr_per_sup,
            lr_cross_attn: t.lr_cross_attn,
            clip_norm: t.clip_norm,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: None,
            shuffle: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        // data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.numeric_path, &mut cfg.text_path, &mut cfg.embeddings_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("rhos, seeds and variants must be non-empty".into()));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("rho {r} outside [0, 1]")));
        }
        if self.text_path.is_some() && self.numeric_path.is_none() {
            return Err(Error::Config("text_path given without numeric_path".into()));
        }
        self.model_config(1)?.validate()?;
        self.train_config(0, Variant::Full).validate()
    }

    /// `(lookback, label, horizon)`, falling back to frequency defaults.
    pub fn windows(&self) -> (usize, usize, usize) {
        let (l, s, t) = self.frequency.default_windows();
        (
            self.lookback.unwrap_or(l),
            self.label_len.unwrap_or(s),
            self.horizon.unwrap_or(t),
        )
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let (lookback, _, horizon) = self.windows();
        let c = ModelConfig {
            channels,
            lookback,
            horizon,
            embed_dim: self.embed_dim,
            d_model: self.d_model,
            heads: self.heads,
            hidden: self.hidden,
            forecaster: self.forecaster,
            prior_weight: self.prior_weight,
            dropout: self.dropout,
            init_std: self.init_std,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, seed: u64, variant: Variant) -> TrainConfig {
        TrainConfig {
            lr_model: self.lr_model,
            lr_per_sup: self.lr_per_sup,
            lr_cross_attn: self.lr_cross_attn,
            clip_norm: self.clip_norm,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size.unwrap_or(self.frequency.default_batch_size()),
            shuffle: self.shuffle,
            seed,
            variant,
            ..TrainConfig::default()
        }
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            dim: self.embed_dim,
            seed: self.embed_seed,
            order_channel: self.order_channel,
            source: match &self.embeddings_path {
                Some(p) => EmbedSource::PrecomputedFile(p.clone()),
                None => EmbedSource::DeterministicHash,
            },
            ..EmbedderConfig::default()
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            len: self.synth_len,
            strength: self.synth_strength,
            seed: self.synth_seed,
            ..SynthSpec::default()
        }
    }
}

/// Reads the configured dataset, or generates the synthetic one.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<TextualNumericalSeries> {
    match &cfg.numeric_path {
        None => synth_dataset(&cfg.synth_spec()),
        Some(path) => {
            let spec = ColumnSpec {
                frequency: cfg.frequency,
                target: cfg.target.clone(),
                channels: cfg.channels.clone(),
            };
            let numeric = load_numerical(path, &spec)?;
            let events = match &cfg.text_path {
                Some(p) => load_text_events(p, cfg.frequency)?,
                None => Vec::new(),
            };
            Ok(align_texts(&numeric, &events))
        }
    }
}

/// Train, validation and test windows of the chronological split.
pub fn split_windows(cfg: &ExperimentConfig, data: &TextualNumericalSeries) -> Result<[Vec<Window>; 3]> {
    let (lookback, label, horizon) = cfg.windows();
    let (train, val, test) = chronological_split(data, cfg.split_ratios(), lookback + horizon)?;
    let windows = |s: &TextualNumericalSeries| make_windows(s, lookback, label, horizon, cfg.stride);
    Ok([windows(&train)?, windows(&val)?, windows(&test)?])
}

/// The perturbed test split exactly as a sweep cell sees it.
pub fn test_samples(cfg: &ExperimentConfig, data: &TextualNumericalSeries, rho: f64, seed: u64) -> Result<Vec<Sample>> {
    let [_, _, test_w] = split_windows(cfg, data)?;
    let embedder = Embedder::new(cfg.embedder_config())?;
    let (samples, _) = prepare_samples(&test_w, &embedder, Some(&PerturbationSpec::new(rho, seed)), TEST_IDS)?;
    Ok(samples)
}

/// Splits, windows, perturbs and trains one cell, then scores the test split.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &TextualNumericalSeries,
    variant: Variant,
    rho: f64,
    seed: u64,
) -> Result<(CellResult, ParNet, TrainReport)> {
    let [train_w, val_w, test_w] = split_windows(cfg, data)?;
    let embedder = Embedder::new(cfg.embedder_config())?;
    let spec = PerturbationSpec::new(rho, seed);
    let source = PerturbedSource::new(&train_w, &embedder, spec.clone(), 0, cfg.resample_perturbations)?;
    let (val_s, _) = prepare_samples(&val_w, &embedder, Some(&spec), VAL_IDS)?;
    let (test_s, _) = prepare_samples(&test_w, &embedder, Some(&spec), TEST_IDS)?;

    let mut model = ParNet::new(cfg.model_config(data.channels())?, seed)?;
    let tcfg = cfg.train_config(seed, variant);
    let report = fit(&mut model, &source, &val_s, &tcfg)?;
    let metrics = evaluate(&model, &test_s, variant, tcfg.batch_size)?;
    log::info!(
        "{} {variant} rho={rho} seed={seed}: mse {:.5} mae {:.5} ({} epochs)",
        cfg.name,
        metrics.mse,
        metrics.mae,
        report.epochs.len()
    );
    Ok((
        CellResult {
            dataset: cfg.name.clone(),
            variant,
            rho,
            seed,
            mse: metrics.mse,
            mae: metrics.mae,
            epochs: report.epochs.len(),
            best_epoch: report.best_epoch,
        },
        model,
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by variant, then rho, then seed, as listed in the config.
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl SweepResult {
    pub fn table(&self) -> ReportTable {
        ReportTable::from_cells(&self.cells)
    }
}

/// Runs every (variant, rho, seed) cell of the config in parallel. Failed
/// cells are collected instead of aborting the sweep.
pub fn sweep(cfg: &ExperimentConfig, data: &TextualNumericalSeries) -> Result<SweepResult> {
    sweep_variants(cfg, data, &cfg.variants)
}

/// [`sweep`] over all four variants regardless of the config.
pub fn ablation_suite(cfg: &ExperimentConfig, data: &TextualNumericalSeries) -> Result<SweepResult> {
    sweep_variants(cfg, data, &Variant::ALL)
}

fn sweep_variants(cfg: &ExperimentConfig, data: &TextualNumericalSeries, variants: &[Variant]) -> Result<SweepResult> {
    cfg.validate()?;
    let jobs: Vec<(Variant, f64, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.rhos.iter().flat_map(move |&r| cfg.seeds.iter().map(move |&s| (v, r, s))))
        .collect();
    let outcomes: Vec<std::result::Result<CellResult, CellFailure>> = jobs
        .par_iter()
        .map(|&(variant, rho, seed)| {
            run_experiment(cfg, data, variant, rho, seed)
                .map(|(cell, _, _)| cell)
                .map_err(|e| {
                    log::error!("{variant} rho={rho} seed={seed} failed: {e}");
                    CellFailure {
                        variant,
                        rho,
                        seed,
                        error: e.to_string(),
                    }
                })
        })
        .collect();
    let mut result = SweepResult {
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(c) => result.cells.push(c),
            Err(f) => result.failures.push(f),
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
