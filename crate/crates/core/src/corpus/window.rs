use serde::{Deserialize, Serialize};

use super::TextualNumericalSeries;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower bound on a per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel population mean and (floored) standard deviation of a
/// lookback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of the rows of a `(L, C)` matrix.
    pub fn of(lookback: &Tensor) -> Self {
        let c = lookback.last_dim();
        let rows = lookback.numel() / c;
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(lookback.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(lookback.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / rows as f64).sqrt().max(STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    fn apply(&self, m: &Tensor) -> Tensor {
        let c = self.mean.len();
        Tensor::from_fn(m.shape().to_vec(), |i| {
            (m.data()[i] - self.mean[i % c]) / self.std[i % c]
        })
    }
}

/// One training/evaluation example cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Index of the first lookback step within the source series.
    pub start: usize,
    /// `(L, C)`.
    pub lookback_values: Tensor,
    pub lookback_texts: Vec<String>,
    /// `(label_len, C)`: the tail of the lookback.
    pub label_values: Tensor,
    /// `(T, C)`.
    pub target_values: Tensor,
    /// Always computed from the raw lookback.
    pub norm_stats: NormStats,
    pub normalized: bool,
}

impl Window {
    pub fn lookback(&self) -> usize {
        self.lookback_texts.len()
    }

    pub fn horizon(&self) -> usize {
        self.target_values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.lookback_values.last_dim()
    }
}

fn rows_to_tensor(series: &TextualNumericalSeries, from: usize, len: usize) -> Tensor {
    let c = series.channels();
    let data = series.steps[from..from + len]
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .collect();
    Tensor::new([len, c], data).expect("steps have C values")
}

/// Window `k` covers lookback `[k*stride, k*stride + L)` and targets the
/// following `T` steps.
pub fn make_windows(
    series: &TextualNumericalSeries,
    lookback: usize,
    label_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if lookback == 0 || label_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("lookback, label, horizon and stride must be positive".into()));
    }
    if label_len > lookback {
        return Err(Error::Config(format!(
            "label length {label_len} exceeds lookback {lookback}"
        )));
    }
    let n = series.len();
    if n < lookback + horizon {
        return Err(Error::EmptyDataset {
            n,
            needed: lookback + horizon,
        });
    }
    let count = (n - lookback - horizon) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let lookback_values = rows_to_tensor(series, start, lookback);
            Window {
                start,
                norm_stats: NormStats::of(&lookback_values),
                lookback_values,
                lookback_texts: series.steps[start..start + lookback]
                    .iter()
                    .map(|s| s.text.clone())
                    .collect(),
                label_values: rows_to_tensor(series, start + lookback - label_len, label_len),
                target_values: rows_to_tensor(series, start + lookback, horizon),
                normalized: false,
            }
        })
        .collect())
}

/// Standardizes lookback, label and target with the lookback statistics.
/// Already-normalized windows are returned unchanged.
pub fn normalize_window(w: &Window) -> Window {
    if w.normalized {
        return w.clone();
    }
    Window {
        start: w.start,
        lookback_values: w.norm_stats.apply(&w.lookback_values),
        lookback_texts: w.lookback_texts.clone(),
        label_values: w.norm_stats.apply(&w.label_values),
        target_values: w.norm_stats.apply(&w.target_values),
        norm_stats: w.norm_stats.clone(),
        normalized: true,
    }
}

/// Maps normalized `(T, C)` predictions back to the data scale.
pub fn denormalize(preds: &Tensor, stats: &NormStats) -> Tensor {
    let c = stats.mean.len();
    Tensor::from_fn(preds.shape().to_vec(), |i| {
        preds.data()[i] * stats.std[i % c] + stats.mean[i % c]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Contiguous train/val/test split. Each part must be able to host at least
/// one window of `window_len` steps.
pub fn chronological_split(
    series: &TextualNumericalSeries,
    ratios: SplitRatios,
    window_len: usize,
) -> Result<(TextualNumericalSeries, TextualNumericalSeries, TextualNumericalSeries)> {
    let SplitRatios { train, val, test } = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    let n = series.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (split, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < window_len {
            return Err(Error::EmptySplit {
                split,
                len,
                needed: window_len,
            });
        }
    }
    let steps = &series.steps;
    Ok((
        series.with_steps(steps[..n_train].to_vec()),
        series.with_steps(steps[n_train..n_train + n_val].to_vec()),
        series.with_steps(steps[n_train + n_val..].to_vec()),
    ))
}
