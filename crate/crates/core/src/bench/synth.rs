use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Frequency, Step, TextualNumericalSeries};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const RISE: [&str; 5] = [
    "analysts expect prices to rise next period",
    "reports say demand will surge soon",
    "officials predict a jump in output ahead",
    "forecasters see values going up shortly",
    "traders anticipate a strong increase next period",
];

const FALL: [&str; 5] = [
    "analysts expect prices to fall next period",
    "reports say demand will plunge soon",
    "officials predict a drop in output ahead",
    "forecasters see values going down shortly",
    "traders anticipate a sharp decrease next period",
];

const QUIET: [&str; 5] = [
    "trading was calm this period",
    "no major news was reported",
    "the market remained stable overall",
    "activity continued as usual",
    "conditions were largely unchanged",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub len: usize,
    /// Probability that a level shift is announced one step early.
    pub strength: f64,
    /// Per-step probability of a level shift.
    pub shift_prob: f64,
    pub shift_size: f64,
    pub ar: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            len: 600,
            strength: 0.9,
            shift_prob: 0.1,
            shift_size: 2.0,
            ar: 0.6,
            noise: 0.3,
            seed: 0,
        }
    }
}

/// Single-channel monthly series: AR(1) noise around a level that jumps
/// by `±shift_size` at random steps. The step before a jump carries a
/// rise/fall sentence with probability `strength`; all other steps carry a
/// neutral sentence.
pub fn synth_dataset(spec: &SynthSpec) -> Result<TextualNumericalSeries> {
    if spec.len == 0 || !(0.0..=1.0).contains(&spec.strength) || !(0.0..=1.0).contains(&spec.shift_prob) {
        return Err(Error::Config("synthetic length must be positive and probabilities in [0, 1]".into()));
    }
    let mut rng = rng::keyed(spec.seed, Stream::Synth, &[]);
    let shifts: Vec<f64> = (0..spec.len)
        .map(|_| {
            if rng.random::<f64>() < spec.shift_prob {
                if rng.random::<bool>() {
                    spec.shift_size
                } else {
                    -spec.shift_size
                }
            } else {
                0.0
            }
        })
        .collect();
    let mut date = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let (mut level, mut u) = (0.0, 0.0);
    let mut steps = Vec::with_capacity(spec.len);
    for t in 0..spec.len {
        level += shifts[t];
        // keep the level from drifting off
        level *= 0.98;
        u = spec.ar * u + spec.noise * rng.sample::<f64, _>(StandardNormal);
        let upcoming = shifts.get(t + 1).copied().unwrap_or(0.0);
        let pick = rng.random_range(0..5);
        let announce = upcoming != 0.0 && rng.random::<f64>() < spec.strength;
        let text = match (announce, upcoming > 0.0) {
            (true, true) => RISE[pick],
            (true, false) => FALL[pick],
            (false, _) => QUIET[pick],
        };
        steps.push(Step {
            date,
            values: vec![level + u],
            text: text.to_string(),
        });
        date = Frequency::Monthly.next(date);
    }
    Ok(TextualNumericalSeries {
        steps,
        frequency: Frequency::Monthly,
        channel_names: vec!["value".into()],
        target: 0,
    })
}

/// Writes `values.csv` and `texts.jsonl` in the ingestion formats.
pub fn write_series(series: &TextualNumericalSeries, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let values = dir.join("values.csv");
    let mut w = csv::Writer::from_path(&values).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for s in &series.steps {
        let mut rec = vec![s.date.to_string()];
        rec.extend(s.values.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&values, e))?;

    let texts = dir.join("texts.jsonl");
    let io = |e| Error::io(&texts, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&texts).map_err(io)?);
    for s in &series.steps {
        let line = serde_json::json!({ "date": s.date.to_string(), "text": s.text });
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}
