use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

/// A concrete value or the average over all values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label<T> {
    Value(T),
    Avg,
}

impl<T: fmt::Display> fmt::Display for Label<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Value(v) => v.fmt(f),
            Label::Avg => f.write_str("Avg"),
        }
    }
}

impl<T: std::str::FromStr> std::str::FromStr for Label<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> std::result::Result<Self, T::Err> {
        if s == "Avg" {
            Ok(Label::Avg)
        } else {
            s.parse().map(Label::Value)
        }
    }
}

/// Outcome of one (variant, rho, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset: String,
    pub variant: Variant,
    pub rho: f64,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: Variant,
    pub rho: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub variant: Variant,
    pub rho: Label<f64>,
    pub seed: Label<u64>,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ReportTable {
    /// Per-seed rows, a seed-average row after each (variant, rho) group and
    /// an overall average per variant. Input order of cells is preserved
    /// within groups; groups follow first appearance.
    pub fn from_cells(cells: &[CellResult]) -> Self {
        let mut rows = Vec::new();
        let mut groups: Vec<(&str, Variant)> = Vec::new();
        for c in cells {
            if !groups.contains(&(c.dataset.as_str(), c.variant)) {
                groups.push((c.dataset.as_str(), c.variant));
            }
        }
        for (dataset, variant) in groups {
            let of_variant: Vec<&CellResult> =
                cells.iter().filter(|c| c.dataset == dataset && c.variant == variant).collect();
            let mut rhos: Vec<f64> = Vec::new();
            for c in &of_variant {
                if !rhos.contains(&c.rho) {
                    rhos.push(c.rho);
                }
            }
            let row = |rho, seed, mse, mae| ReportRow {
                dataset: dataset.to_string(),
                variant,
                rho,
                seed,
                mse,
                mae,
            };
            for &rho in &rhos {
                let group: Vec<&&CellResult> = of_variant.iter().filter(|c| c.rho == rho).collect();
                for c in &group {
                    rows.push(row(Label::Value(rho), Label::Value(c.seed), c.mse, c.mae));
                }
                let mses: Vec<f64> = group.iter().map(|c| c.mse).collect();
                let maes: Vec<f64> = group.iter().map(|c| c.mae).collect();
                rows.push(row(Label::Value(rho), Label::Avg, mean(&mses), mean(&maes)));
            }
            let mses: Vec<f64> = of_variant.iter().map(|c| c.mse).collect();
            let maes: Vec<f64> = of_variant.iter().map(|c| c.mae).collect();
            rows.push(row(Label::Avg, Label::Avg, mean(&mses), mean(&maes)));
        }
        ReportTable { rows }
    }

    /// Seed-averaged rows for one variant, in rho order of appearance.
    pub fn averages(&self, variant: Variant) -> Vec<(f64, f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.seed == Label::Avg)
            .filter_map(|r| match r.rho {
                Label::Value(rho) => Some((rho, r.mse, r.mae)),
                Label::Avg => None,
            })
            .collect()
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("dataset,variant,rho,seed,mse,mae\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.dataset, r.variant, r.rho, r.seed, r.mse, r.mae
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["dataset", "variant", "rho", "seed", "mse", "mae"] {
            return Err(Error::Format(format!("unexpected report header {headers:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let bad = |what: &str| Error::Format(format!("report row {}: bad {what}", i + 2));
            let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
            rows.push(ReportRow {
                dataset: rec[0].to_string(),
                variant: rec[1].parse().map_err(|_| bad("variant"))?,
                rho: rec[2].parse().map_err(|_| bad("rho"))?,
                seed: rec[3].parse().map_err(|_| bad("seed"))?,
                mse: num(4, "mse")?,
                mae: num(5, "mae")?,
            });
        }
        Ok(ReportTable { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| dataset | variant | rho | seed | MSE | MAE |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} | {:.4} |\n",
                r.dataset, r.variant, r.rho, r.seed, r.mse, r.mae
            ));
        }
        s
    }
}

pub fn emit_csv(table: &ReportTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table.to_csv_string()).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<ReportTable> {
    let path = path.as_ref();
    ReportTable::parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

/// Line chart of seed-averaged MSE against rho, one line per variant.
pub fn render_svg(table: &ReportTable) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let series: Vec<(Variant, Vec<(f64, f64, f64)>)> =
        table.variants().into_iter().map(|v| (v, table.averages(v))).collect();
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(rho, mse, _) in points {
        x0 = x0.min(rho);
        x1 = x1.max(rho);
        y0 = y0.min(mse);
        y1 = y1.max(mse);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let margin = ((y1 - y0) * 0.1).max(1e-9);
    let (y0, y1) = (y0 - margin, y1 + margin);
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    ));
    for k in 0..=4 {
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>\n",
            px(x),
            h - pad + 18.0,
            x
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            pad - 6.0,
            py(y) + 4.0,
            y
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">rho</text>\n\
         <text x=\"16\" y=\"{:.1}\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">MSE</text>\n",
        w / 2.0,
        h - 16.0,
        h / 2.0,
        h / 2.0
    ));
    for (k, (variant, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y, _)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y, _) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = pad + 16.0 * k as f64;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"12\" fill=\"{color}\">{variant}</text>\n",
            w - pad - 70.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_plot(table: &ReportTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_svg(table)).map_err(|e| Error::io(path, e))
}
