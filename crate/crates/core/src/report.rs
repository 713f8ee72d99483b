//! Study results as rows of `(cell, shard, checkpoint, seed) → accuracy`,
//! with JSON, CSV and markdown renderings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FslLossMode;
use crate::mixup::LambdaStrategy;
use crate::train::{Checkpoint, Method, Shard, StageStrategy};

/// One evaluated (cell, shard, checkpoint, seed). Field order is the CSV
/// column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRow {
    pub study: String,
    pub method: Method,
    pub strategy: StageStrategy,
    pub num_target: usize,
    pub shard: Shard,
    pub checkpoint: Checkpoint,
    pub mean_pct: f64,
    pub ci95_pct: f64,
    pub n_episodes: usize,
    pub seed: u64,
    pub fsl_loss: FslLossMode,
    pub lambda_strategy: LambdaStrategy,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "study",
    "method",
    "strategy",
    "num_target",
    "shard",
    "checkpoint",
    "mean_pct",
    "ci95_pct",
    "n_episodes",
    "seed",
    "fsl_loss",
    "lambda_strategy",
];

/// The training configuration a row was produced under, minus the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub strategy: StageStrategy,
    pub num_target: usize,
    pub fsl_loss: FslLossMode,
    pub lambda_strategy: LambdaStrategy,
}

impl StudyRow {
    pub fn cell(&self) -> CellKey {
        CellKey {
            method: self.method,
            strategy: self.strategy,
            num_target: self.num_target,
            fsl_loss: self.fsl_loss,
            lambda_strategy: self.lambda_strategy,
        }
    }
}

/// Seed average of one (cell, shard, checkpoint).
#[derive(Clone, Debug, PartialEq)]
pub struct CellMean {
    pub cell: CellKey,
    pub shard: Shard,
    pub checkpoint: Checkpoint,
    pub mean_pct: f64,
    /// Mean of the per-seed half-widths.
    pub ci95_pct: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableStyle {
    Csv,
    Json,
    Markdown,
}

impl TableStyle {
    pub const ALL: [TableStyle; 3] = [TableStyle::Csv, TableStyle::Json, TableStyle::Markdown];

    pub fn name(self) -> &'static str {
        match self {
            TableStyle::Csv => "csv",
            TableStyle::Json => "json",
            TableStyle::Markdown => "markdown",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            TableStyle::Csv => "csv",
            TableStyle::Json => "json",
            TableStyle::Markdown => "md",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableStyle::Csv),
            "json" => Ok(TableStyle::Json),
            "markdown" | "md" => Ok(TableStyle::Markdown),
            other => Err(Error::invalid(format!(
                "unknown table style `{other}` (expected csv, json or markdown)"
            ))),
        }
    }
}

impl StudyReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Seed-averaged metrics in order of first appearance.
    pub fn averaged(&self) -> Vec<CellMean> {
        let mut out: Vec<(CellMean, f64, f64)> = Vec::new();
        for r in &self.rows {
            let key = (r.cell(), r.shard, r.checkpoint);
            match out.iter_mut().find(|(m, _, _)| (m.cell, m.shard, m.checkpoint) == key) {
                Some((m, sum, ci)) => {
                    m.seeds += 1;
                    *sum += r.mean_pct;
                    *ci += r.ci95_pct;
                }
                None => out.push((
                    CellMean {
                        cell: key.0,
                        shard: key.1,
                        checkpoint: key.2,
                        mean_pct: 0.0,
                        ci95_pct: 0.0,
                        seeds: 1,
                    },
                    r.mean_pct,
                    r.ci95_pct,
                )),
            }
        }
        out.into_iter()
            .map(|(mut m, sum, ci)| {
                m.mean_pct = sum / m.seeds as f64;
                m.ci95_pct = ci / m.seeds as f64;
                m
            })
            .collect()
    }

    /// Seed-averaged accuracy of the first cell matching `pred`.
    pub fn mean_of(&self, pred: impl Fn(&CellKey) -> bool, shard: Shard, checkpoint: Checkpoint) -> Option<f64> {
        self.averaged()
            .into_iter()
            .find(|m| pred(&m.cell) && m.shard == shard && m.checkpoint == checkpoint)
            .map(|m| m.mean_pct)
    }

    pub fn to_json(&self) -> Result<String> {
        self.non_empty()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: StudyReport = serde_json::from_str(s)?;
        r.non_empty()?;
        Ok(r)
    }

    pub fn to_csv(&self) -> Result<String> {
        self.non_empty()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(s.as_bytes());
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != CSV_COLUMNS {
            return Err(Error::data(format!(
                "csv header {header:?} does not match {CSV_COLUMNS:?}"
            )));
        }
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<StudyRow>, _>>()
            .map_err(csv_err)?;
        let r = StudyReport { rows };
        r.non_empty()?;
        Ok(r)
    }

    /// One row per cell and two value columns: source novel on the best
    /// checkpoint and target novel on the last one, each `mean ± ci`
    /// averaged over seeds. Label columns show only the settings that vary.
    pub fn to_markdown(&self) -> Result<String> {
        self.non_empty()?;
        let means = self.averaged();
        let mut cells: Vec<CellKey> = Vec::new();
        for m in &means {
            if !cells.contains(&m.cell) {
                cells.push(m.cell);
            }
        }
        type Label = (&'static str, fn(&CellKey) -> String);
        let labels: [Label; 5] = [
            ("method", |c| c.method.name().to_string()),
            ("strategy", |c| c.strategy.name().to_string()),
            ("num_target", |c| c.num_target.to_string()),
            ("fsl_loss", |c| serde_name(&c.fsl_loss)),
            ("lambda", |c| serde_name(&c.lambda_strategy)),
        ];
        let mut shown: Vec<&Label> = labels
            .iter()
            .filter(|(_, f)| cells.iter().any(|c| f(c) != f(&cells[0])))
            .collect();
        if shown.is_empty() {
            shown.push(&labels[0]);
        }
        let cell_text = |c: &CellKey, shard: Shard, ck: Checkpoint| {
            means
                .iter()
                .find(|m| m.cell == *c && m.shard == shard && m.checkpoint == ck)
                .map_or_else(
                    || "n/a".to_string(),
                    |m| format!("{:.2} ± {:.2}", m.mean_pct, m.ci95_pct),
                )
        };
        let seeds = means.iter().map(|m| m.seeds).max().unwrap_or(1);
        let mut out = String::new();
        let heads: Vec<&str> = shown.iter().map(|(h, _)| *h).collect();
        out += &format!("| {} | source (best) | target (last) |\n", heads.join(" | "));
        out += &format!("|{}---:|---:|\n", "---|".repeat(heads.len()));
        for c in &cells {
            let names: Vec<String> = shown.iter().map(|(_, f)| f(c)).collect();
            out += &format!(
                "| {} | {} | {} |\n",
                names.join(" | "),
                cell_text(c, Shard::SourceNovel, Checkpoint::Best),
                cell_text(c, Shard::TargetNovel, Checkpoint::Last)
            );
        }
        out += &format!("\nAccuracy (%) with 95% half-width, averaged over {seeds} seed(s).\n");
        Ok(out)
    }

    pub fn render(&self, style: TableStyle) -> Result<String> {
        match style {
            TableStyle::Csv => self.to_csv(),
            TableStyle::Json => self.to_json(),
            TableStyle::Markdown => self.to_markdown(),
        }
    }

    fn non_empty(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::invalid("the report has no rows"))
        } else {
            Ok(())
        }
    }
}

fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, shard: Shard, ck: Checkpoint, mean: f64, ci: f64, seed: u64) -> StudyRow {
        StudyRow {
            study: "baselines".into(),
            method,
            strategy: StageStrategy::P2,
            num_target: 5,
            shard,
            checkpoint: ck,
            mean_pct: mean,
            ci95_pct: ci,
            n_episodes: 1000,
            seed,
            fsl_loss: FslLossMode::Dual,
            lambda_strategy: LambdaStrategy::Plain,
        }
    }

    #[test]
    fn single_cell_formats_like_the_tables() {
        let r = StudyReport {
            rows: vec![
                row(Method::MetaFdMixup, Shard::SourceNovel, Checkpoint::Best, 70.0, 0.7, 0),
                row(
                    Method::MetaFdMixup,
                    Shard::TargetNovel,
                    Checkpoint::Last,
                    79.46,
                    0.63,
                    0,
                ),
            ],
        };
        let md = r.to_markdown().unwrap();
        assert!(md.contains("| 79.46 ± 0.63 |"), "{md}");
    }

    #[test]
    fn four_cells_give_four_body_rows() {
        let mut rows = Vec::new();
        for m in Method::ALL {
            rows.push(row(m, Shard::SourceNovel, Checkpoint::Best, 50.0, 1.0, 0));
            rows.push(row(m, Shard::TargetNovel, Checkpoint::Last, 40.0, 1.0, 0));
        }
        let md = StudyReport { rows }.to_markdown().unwrap();
        let body: Vec<&str> = md.lines().skip(2).take_while(|l| l.starts_with('|')).collect();
        assert_eq!(body.len(), 4);
        for l in body {
            assert_eq!(l.matches('±').count(), 2, "{l}");
        }
    }

    #[test]
    fn seeds_are_averaged() {
        let r = StudyReport {
            rows: vec![
                row(Method::SBase, Shard::TargetNovel, Checkpoint::Last, 40.0, 1.0, 0),
                row(Method::SBase, Shard::TargetNovel, Checkpoint::Last, 50.0, 2.0, 1),
            ],
        };
        let a = r.averaged();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].mean_pct, a[0].ci95_pct, a[0].seeds), (45.0, 1.5, 2));
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn json_csv_json_is_lossless() {
        let awkward = [0.1 + 0.2, 1.0 / 3.0, 100.0, 5e-324, 62.249999999999993];
        let rows = awkward
            .iter()
            .enumerate()
            .map(|(i, &v)| StudyRow {
                lambda_strategy: [LambdaStrategy::V1, LambdaStrategy::V2, LambdaStrategy::Plain][i % 3],
                strategy: if i % 2 == 0 {
                    StageStrategy::P1plus2
                } else {
                    StageStrategy::P2
                },
                fsl_loss: FslLossMode::AuxOnly,
                ..row(
                    Method::ALL[i % 4],
                    Shard::ALL[i % 3],
                    Checkpoint::Best,
                    v,
                    v / 7.0,
                    u64::MAX - i as u64,
                )
            })
            .collect();
        let r = StudyReport { rows };
        let back = StudyReport::from_csv(&r.to_csv().unwrap()).unwrap();
        let again = StudyReport::from_json(&back.to_json().unwrap()).unwrap();
        assert_eq!(again, r);
        for (a, b) in again.rows.iter().zip(&r.rows) {
            assert_eq!(a.mean_pct.to_bits(), b.mean_pct.to_bits());
            assert_eq!(a.ci95_pct.to_bits(), b.ci95_pct.to_bits());
        }
    }

    #[test]
    fn csv_header_is_fixed() {
        let r = StudyReport {
            rows: vec![row(Method::SBase, Shard::SourceEval, Checkpoint::Last, 1.0, 0.0, 0)],
        };
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
        let swapped = csv.replacen("study,method", "method,study", 1);
        assert!(StudyReport::from_csv(&swapped).is_err());
    }

    #[test]
    fn empty_report_is_rejected_by_every_style() {
        for s in TableStyle::ALL {
            assert!(StudyReport::default().render(s).is_err(), "{}", s.name());
        }
    }
}
