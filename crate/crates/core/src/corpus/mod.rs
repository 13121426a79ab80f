//! Numerical series and timestamped text ingestion, leakage-free alignment,
//! windowing and per-window instance normalization.

mod ingest;
mod window;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

pub use ingest::{load_numerical, load_text_events, merge_same_period, parse_date, ColumnSpec};
pub use window::{
    chronological_split, denormalize, make_windows, normalize_window, NormStats, SplitRatios,
    Window, STD_FLOOR,
};

use crate::autodiff::Tensor;

/// Sampling frequency of a dataset; also the date granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Monthly,
    Weekly,
    Daily,
}

impl Frequency {
    /// Start of the period containing `date`. Weeks start on Monday.
    pub fn truncate(self, date: NaiveDate) -> NaiveDate {
        match self {
            Frequency::Monthly => date.with_day(1).expect("day 1 exists"),
            Frequency::Weekly => {
                date - Duration::days(date.weekday().num_days_from_monday() as i64)
            }
            Frequency::Daily => date,
        }
    }

    /// Start of the period after the one starting at `date`.
    pub fn next(self, date: NaiveDate) -> NaiveDate {
        match self {
            Frequency::Monthly => date
                .checked_add_months(chrono::Months::new(1))
                .expect("date in range"),
            Frequency::Weekly => date + Duration::days(7),
            Frequency::Daily => date + Duration::days(1),
        }
    }

    /// (lookback, label, horizon) used for this granularity.
    pub fn default_windows(self) -> (usize, usize, usize) {
        match self {
            Frequency::Monthly => (8, 4, 6),
            Frequency::Weekly => (36, 18, 12),
            Frequency::Daily => (96, 48, 48),
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Frequency::Monthly => 32,
            Frequency::Weekly => 16,
            Frequency::Daily => 8,
        }
    }
}

impl std::str::FromStr for Frequency {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "monthly" => Ok(Frequency::Monthly),
            "weekly" => Ok(Frequency::Weekly),
            "daily" => Ok(Frequency::Daily),
            other => Err(crate::Error::Config(format!("unknown frequency {other:?}"))),
        }
    }
}

/// Period-indexed numeric observations, `n x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalSeries {
    pub timestamps: Vec<NaiveDate>,
    /// Shape `(n, C)`.
    pub values: Tensor,
    pub channel_names: Vec<String>,
    /// Index of the designated target channel.
    pub target: usize,
    pub frequency: Frequency,
}

impl NumericalSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.last_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEvent {
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub date: NaiveDate,
    pub values: Vec<f64>,
    pub text: String,
}

/// One text per numeric step; the empty string where nothing was reported.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualNumericalSeries {
    pub steps: Vec<Step>,
    pub frequency: Frequency,
    pub channel_names: Vec<String>,
    pub target: usize,
}

impl TextualNumericalSeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub(crate) fn with_steps(&self, steps: Vec<Step>) -> Self {
        TextualNumericalSeries {
            steps,
            frequency: self.frequency,
            channel_names: self.channel_names.clone(),
            target: self.target,
        }
    }
}

/// Attaches to each step the most recent event dated no later than the
/// step. Events dated after a step are never visible to it.
pub fn align_texts(series: &NumericalSeries, events: &[TextEvent]) -> TextualNumericalSeries {
    let mut sorted: Vec<&TextEvent> = events.iter().collect();
    // stable: among equal dates the later entry in input order wins
    sorted.sort_by_key(|e| e.date);
    let mut next = 0;
    let mut current: Option<&TextEvent> = None;
    let c = series.channels();
    let steps = series
        .timestamps
        .iter()
        .enumerate()
        .map(|(i, &date)| {
            while next < sorted.len() && sorted[next].date <= date {
                current = Some(sorted[next]);
                next += 1;
            }
            Step {
                date,
                values: series.values.data()[i * c..(i + 1) * c].to_vec(),
                text: current.map(|e| e.text.clone()).unwrap_or_default(),
            }
        })
        .collect();
    TextualNumericalSeries {
        steps,
        frequency: series.frequency,
        channel_names: series.channel_names.clone(),
        target: series.target,
    }
}
