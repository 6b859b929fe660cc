//! Architecture and accuracy tables in markdown and CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{ArchitectureColumn, PoolingKind};

pub const ARCHITECTURE_ROWS: [&str; 9] = [
    "pooling",
    "number linear layers",
    "hidden dim linear layers",
    "number conv layers",
    "number heads conv",
    "kernel size",
    "skip connection",
    "number attention layers",
    "number attention heads",
];

const INACTIVE: &str = "-";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| INACTIVE.to_string(), |x| x.to_string())
}

/// Cell strings of one column, in [`ARCHITECTURE_ROWS`] order.
pub fn architecture_cells(c: &ArchitectureColumn) -> [String; 9] {
    let pooling = match c.pooling {
        PoolingKind::Cls => "[CLS]".to_string(),
        other => other.as_str().to_string(),
    };
    let conv_on = c.conv_layers > 0;
    [
        pooling,
        c.linear_layers.to_string(),
        opt(c.hidden.filter(|_| c.linear_layers > 1)),
        c.conv_layers.to_string(),
        opt(c.conv_heads.filter(|_| conv_on)),
        opt(c.kernel.filter(|_| conv_on)),
        opt(c.skip.filter(|_| conv_on).map(|s| if s { "True" } else { "False" })),
        c.attention_layers.to_string(),
        opt(c.attention_heads.filter(|_| c.attention_layers > 0)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureTable {
    pub tasks: Vec<String>,
    pub columns: Vec<ArchitectureColumn>,
}

impl ArchitectureTable {
    pub fn to_markdown(&self) -> String {
        let cells: Vec<[String; 9]> = self.columns.iter().map(architecture_cells).collect();
        let mut out = String::new();
        markdown_row(&mut out, std::iter::once("method".to_string()).chain(self.tasks.iter().cloned()));
        markdown_rule(&mut out, self.tasks.len() + 1);
        for (r, name) in ARCHITECTURE_ROWS.iter().enumerate() {
            markdown_row(
                &mut out,
                std::iter::once(name.to_string()).chain(cells.iter().map(|c| c[r].clone())),
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(std::iter::once("row").chain(self.tasks.iter().map(String::as_str)))
            .map_err(csv_err)?;
        let cells: Vec<[String; 9]> = self.columns.iter().map(architecture_cells).collect();
        for (r, name) in ARCHITECTURE_ROWS.iter().enumerate() {
            w.write_record(std::iter::once(name.to_string()).chain(cells.iter().map(|c| c[r].clone())))
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Round-half-even to three decimals. Values are first snapped at 1e-9
/// so binary noise such as `0.8425 - 1e-17` resolves as the decimal tie.
pub fn round3(x: f64) -> f64 {
    let scaled = (x * 1e12).round() / 1e9;
    scaled.round_ties_even() / 1000.0
}

pub fn format3(x: f64) -> String {
    format!("{:.3}", round3(x))
}

fn milli(x: f64) -> i64 {
    (round3(x) * 1000.0).round() as i64
}

/// Base and tuned accuracies per task. The average column is the
/// arithmetic mean of the unrounded values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub tasks: Vec<String>,
    pub base: Vec<f64>,
    pub tuned: Vec<f64>,
}

impl AccuracyTable {
    pub fn new(tasks: Vec<String>, base: Vec<f64>, tuned: Vec<f64>) -> Result<Self> {
        if tasks.is_empty() || base.len() != tasks.len() || tuned.len() != tasks.len() {
            return Err(Error::Data(format!(
                "accuracy table needs one base and one tuned value per task ({} tasks, {} base, {} tuned)",
                tasks.len(),
                base.len(),
                tuned.len()
            )));
        }
        Ok(Self { tasks, base, tuned })
    }

    pub fn base_average(&self) -> f64 {
        self.base.iter().sum::<f64>() / self.base.len() as f64
    }

    pub fn tuned_average(&self) -> f64 {
        self.tuned.iter().sum::<f64>() / self.tuned.len() as f64
    }

    /// Whether the tuned cell is strictly greater once both are rounded.
    pub fn improved(&self, task: usize) -> bool {
        milli(self.tuned[task]) > milli(self.base[task])
    }

    pub fn improved_count(&self) -> usize {
        (0..self.tasks.len()).filter(|&i| self.improved(i)).count()
    }

    /// Tuned cells that improve on the base row are bold; the average
    /// column never is.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        markdown_row(
            &mut out,
            std::iter::once("method".to_string())
                .chain(self.tasks.iter().cloned())
                .chain(std::iter::once("average".to_string())),
        );
        markdown_rule(&mut out, self.tasks.len() + 2);
        markdown_row(
            &mut out,
            std::iter::once("base".to_string())
                .chain(self.base.iter().map(|&x| format3(x)))
                .chain(std::iter::once(format3(self.base_average()))),
        );
        markdown_row(
            &mut out,
            std::iter::once("tuned".to_string())
                .chain(self.tuned.iter().enumerate().map(|(i, &x)| {
                    if self.improved(i) {
                        format!("**{}**", format3(x))
                    } else {
                        format3(x)
                    }
                }))
                .chain(std::iter::once(format3(self.tuned_average()))),
        );
        out
    }

    /// One row per task plus a final `average` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["task", "base", "tuned", "improved"]).map_err(csv_err)?;
        for (i, task) in self.tasks.iter().enumerate() {
            w.write_record([
                task.clone(),
                format3(self.base[i]),
                format3(self.tuned[i]),
                self.improved(i).to_string(),
            ])
            .map_err(csv_err)?;
        }
        let (b, t) = (self.base_average(), self.tuned_average());
        w.write_record([
            "average".to_string(),
            format3(b),
            format3(t),
            (milli(t) > milli(b)).to_string(),
        ])
        .map_err(csv_err)?;
        finish_csv(w)
    }
}

fn markdown_row(out: &mut String, cells: impl Iterator<Item = String>) {
    out.push('|');
    for c in cells {
        let _ = write!(out, " {c} |");
    }
    out.push('\n');
}

fn markdown_rule(out: &mut String, n: usize) {
    out.push('|');
    for _ in 0..n {
        out.push_str("---|");
    }
    out.push('\n');
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::baseline_config;

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(format3(0.8425), "0.842");
        assert_eq!(format3(0.8435), "0.844");
        assert_eq!(format3(0.83417), "0.834");
        assert_eq!(format3(1.0), "1.000");
        assert_eq!(format3(0.0), "0.000");
    }

    #[test]
    fn equal_cells_are_not_bold() {
        let t = AccuracyTable::new(vec!["a".into(), "b".into()], vec![0.5, 0.6], vec![0.5, 0.61]).unwrap();
        let md = t.to_markdown();
        assert!(md.contains("| 0.500 |"));
        assert!(md.contains("**0.610**"));
        assert_eq!(md.matches("**").count(), 2);
    }

    #[test]
    fn single_task_average() {
        let t = AccuracyTable::new(vec!["only".into()], vec![0.7], vec![0.75]).unwrap();
        assert!(t.to_markdown().contains("| 0.700 | 0.700 |"));
        let csv = t.to_csv().unwrap();
        assert_eq!(csv, "task,base,tuned,improved\nonly,0.700,0.750,true\naverage,0.700,0.750,true\n");
    }

    #[test]
    fn mismatched_rows_rejected() {
        assert!(AccuracyTable::new(vec!["a".into()], vec![], vec![0.1]).is_err());
        assert!(AccuracyTable::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn baseline_column_cells() {
        let cells = architecture_cells(&ArchitectureColumn::from_config(&baseline_config()));
        assert_eq!(cells, ["[CLS]", "1", "-", "0", "-", "-", "-", "0", "-"].map(String::from));
    }
}
