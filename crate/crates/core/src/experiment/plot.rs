use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::run::TrialPredictor;
use crate::error::{Error, Result};
use crate::inference::PredictiveMixture;
use crate::json::cell;
use crate::numerics::DenseMatrix;

/// Evenly spaced 1-D grid parsed from `a:b:step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Grid {
    pub fn len(&self) -> usize {
        ((self.end - self.start) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("grid `{s}` is not of the form start:end:step"));
        let [a, b, step] = parts.as_slice() else {
            return Err(bad());
        };
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let g = Grid {
            start: parse(a)?,
            end: parse(b)?,
            step: parse(step)?,
        };
        if !(g.start.is_finite() && g.end.is_finite() && g.step > 0.0 && g.end >= g.start) {
            return Err(Error::Config(format!(
                "grid `{s}` needs finite start <= end and step > 0"
            )));
        }
        Ok(g)
    }
}

/// One row of `bands.csv`: mean ± 2 epistemic std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRow {
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct PlotData {
    pub bands: Vec<BandRow>,
    /// Per grid point, the mean of each posterior draw.
    pub curves: Vec<Vec<f64>>,
}

impl PlotData {
    pub fn from_mixtures(xs: &[f64], mixtures: &[PredictiveMixture]) -> Self {
        let bands = xs
            .iter()
            .zip(mixtures)
            .map(|(&x, m)| {
                let sd = m.epistemic_variance().sqrt();
                BandRow {
                    x,
                    mean: m.mean,
                    lower: m.mean - 2.0 * sd,
                    upper: m.mean + 2.0 * sd,
                }
            })
            .collect();
        let curves = mixtures
            .iter()
            .map(|m| m.components.iter().map(|c| c.0).collect())
            .collect();
        Self { bands, curves }
    }

    /// Mean band half-width divided by two, i.e. the mean epistemic std.
    pub fn mean_std(&self) -> f64 {
        self.bands
            .iter()
            .map(|b| (b.upper - b.lower) / 4.0)
            .sum::<f64>()
            / self.bands.len() as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("bands.csv"))?);
        writeln!(w, "x,mean,lower,upper")?;
        for b in &self.bands {
            writeln!(
                w,
                "{},{},{},{}",
                cell(b.x),
                cell(b.mean),
                cell(b.lower),
                cell(b.upper)
            )?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("curves.csv"))?);
        let j = self.curves.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("x".to_string())
            .chain((0..j).map(|k| format!("f_{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (b, row) in self.bands.iter().zip(&self.curves) {
            let cells: Vec<String> = std::iter::once(b.x)
                .chain(row.iter().copied())
                .map(cell)
                .collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predictive bands of one finished trial over a 1-D input grid, in original units.
pub fn plot_data(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    trial: usize,
    grid: &Grid,
) -> Result<PlotData> {
    let predictor = TrialPredictor::open(cfg, out_dir, trial)?;
    if predictor.train().input_dim() != 1 {
        return Err(Error::invalid("plot data needs a one-dimensional input"));
    }
    let xs = grid.points();
    let mixtures = predictor.predict_raw(&DenseMatrix::from_vec(xs.len(), 1, xs.clone())?)?;
    Ok(PlotData::from_mixtures(&xs, &mixtures))
}
