use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::artifacts::ResultRecord;
use super::config::Method;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    LogLik,
    Rmse,
    Coverage,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::LogLik, Metric::Rmse, Metric::Coverage];

    pub fn name(self) -> &'static str {
        match self {
            Metric::LogLik => "avg_log_lik",
            Metric::Rmse => "rmse",
            Metric::Coverage => "coverage95",
        }
    }

    fn pick(self, r: &ResultRecord) -> (f64, f64) {
        match self {
            Metric::LogLik => r.aggregate.avg_log_lik,
            Metric::Rmse => r.aggregate.rmse,
            Metric::Coverage => r.aggregate.coverage95,
        }
    }

    /// Smaller is better.
    fn badness(self, mean: f64) -> f64 {
        match self {
            Metric::LogLik => -mean,
            Metric::Rmse => mean,
            Metric::Coverage => (mean - 0.95).abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub best: bool,
}

impl Cell {
    pub fn text(&self) -> String {
        format!(
            "{:.3}±{:.3}{}",
            self.mean,
            self.std,
            if self.best { "*" } else { "" }
        )
    }
}

/// Per metric, a dataset × method grid of `mean±std` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub datasets: Vec<String>,
    /// Indexed `[metric][dataset][column]`.
    pub cells: Vec<Vec<Vec<Cell>>>,
}

pub fn compare(records: &[ResultRecord]) -> Result<Comparison> {
    if records.len() < 2 {
        return Err(Error::invalid("comparison needs at least two result files"));
    }
    // Repeated (method, dataset) pairs become separate columns.
    let keyed: Vec<(String, &ResultRecord)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let dup = records[..i]
                .iter()
                .filter(|p| p.method == r.method && p.dataset == r.dataset)
                .count();
            let col = if dup == 0 {
                r.method.clone()
            } else {
                format!("{} ({})", r.method, dup + 1)
            };
            (col, r)
        })
        .collect();

    let mut columns: Vec<String> = Vec::new();
    for (c, _) in &keyed {
        if !columns.contains(c) {
            columns.push(c.clone());
        }
    }
    let base = |c: &str| c.split(" (").next().unwrap_or(c).to_string();
    columns.sort_by_key(|c| Method::rank(&base(c)));

    let datasets_of = |col: &str| -> BTreeSet<String> {
        keyed
            .iter()
            .filter(|(c, _)| c == col)
            .map(|(_, r)| r.dataset.clone())
            .collect()
    };
    let datasets = datasets_of(&columns[0]);
    for c in &columns[1..] {
        let other = datasets_of(c);
        if other != datasets {
            return Err(Error::invalid(format!(
                "dataset mismatch: {} has {:?} but {} has {:?}",
                columns[0], datasets, c, other
            )));
        }
    }
    let datasets: Vec<String> = datasets.into_iter().collect();

    let cells = Metric::ALL
        .iter()
        .map(|&metric| {
            datasets
                .iter()
                .map(|d| {
                    let mut row: Vec<Cell> = columns
                        .iter()
                        .map(|c| {
                            let r = keyed
                                .iter()
                                .find(|(k, r)| k == c && &r.dataset == d)
                                .map(|(_, r)| *r)
                                .expect("every column covers every dataset");
                            let (mean, std) = metric.pick(r);
                            Cell {
                                mean,
                                std,
                                best: false,
                            }
                        })
                        .collect();
                    let best = row
                        .iter()
                        .map(|c| metric.badness(c.mean))
                        .fold(f64::INFINITY, f64::min);
                    for c in &mut row {
                        c.best = metric.badness(c.mean) == best;
                    }
                    row
                })
                .collect()
        })
        .collect();
    Ok(Comparison {
        columns,
        datasets,
        cells,
    })
}

impl Comparison {
    pub fn cell(&self, metric: Metric, dataset: usize, column: usize) -> &Cell {
        let m = Metric::ALL
            .iter()
            .position(|&x| x == metric)
            .expect("known metric");
        &self.cells[m][dataset][column]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut out = vec![["metric", "dataset"]
            .iter()
            .map(|s| s.to_string())
            .chain(self.columns.iter().cloned())
            .collect::<Vec<_>>()];
        for (m, metric) in Metric::ALL.iter().enumerate() {
            for (d, name) in self.datasets.iter().enumerate() {
                let mut row = vec![metric.name().to_string(), name.clone()];
                row.extend(self.cells[m][d].iter().map(Cell::text));
                out.push(row);
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Space-aligned table; `*` marks the best cell of each row.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}
