//! Learning curves, smoothing, summary statistics and their CSV form.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trailing window for the plotted curve (current point and 4 before it).
pub const SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub label: String,
    /// Rollouts charged for pre-learning (babbling); shifts the plotted curve.
    pub babble_shift: usize,
    /// (rollout index, mean test cost)
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub initial_cost: f64,
    pub c_min: f64,
    pub c_final: f64,
}

/// Rollout equivalent of `n_babble` minibatches: `n_babble / steps`, rounded.
pub fn babble_equivalent_shift(n_babble: usize, steps: usize) -> usize {
    (n_babble + steps / 2) / steps
}

/// Trailing moving average; early points average what is available.
pub fn smooth(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(SMOOTHING_WINDOW);
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

impl LearningCurve {
    pub fn raw(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn smoothed(&self) -> Vec<f64> {
        smooth(&self.raw())
    }

    /// Whether an evaluation at `rollout` counts toward C_min under `budget`.
    pub fn in_min_window(&self, rollout: usize, budget: usize) -> bool {
        rollout + self.babble_shift <= budget
    }

    /// C_min over the smoothed curve inside the budget (charging babbling),
    /// C_final as the last smoothed point.
    pub fn summarize(&self, budget: usize) -> Result<TrialSummary> {
        let smoothed = self.smoothed();
        let (Some(&initial_cost), Some(&c_final)) = (self.points.first().map(|p| &p.1), smoothed.last()) else {
            return Err(Error::Config(format!("curve '{}' has no points", self.label)));
        };
        let c_min = self
            .points
            .iter()
            .zip(&smoothed)
            .filter(|(p, _)| self.in_min_window(p.0, budget))
            .map(|(_, &c)| c)
            .fold(f64::INFINITY, f64::min);
        if !c_min.is_finite() {
            return Err(Error::Config(format!(
                "curve '{}' has no evaluation within the budget of {budget} rollouts",
                self.label
            )));
        }
        Ok(TrialSummary { initial_cost, c_min, c_final })
    }

    pub fn write_csv(&self, path: &Path, budget: usize) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# label={}", self.label)?;
        writeln!(out, "# babble_shift={}", self.babble_shift)?;
        writeln!(out, "# budget={budget}")?;
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["rollout", "plot_rollout", "raw_cost", "smoothed_cost", "in_min_window"])
                .map_err(csv_err)?;
            for (&(k, raw), sm) in self.points.iter().zip(self.smoothed()) {
                w.write_record([
                    k.to_string(),
                    (k + self.babble_shift).to_string(),
                    format!("{raw:?}"),
                    format!("{sm:?}"),
                    self.in_min_window(k, budget).to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a curve written by [`LearningCurve::write_csv`]; returns it with the budget.
    pub fn read_csv(path: &Path) -> Result<(LearningCurve, usize)> {
        let text = std::fs::read(path)?;
        let (mut label, mut shift, mut budget) = (None, None, None);
        for line in text.lines() {
            let line = line?;
            let Some(meta) = line.strip_prefix("# ") else { continue };
            match meta.split_once('=') {
                Some(("label", v)) => label = Some(v.to_string()),
                Some(("babble_shift", v)) => shift = v.parse().ok(),
                Some(("budget", v)) => budget = v.parse().ok(),
                _ => {}
            }
        }
        let bad = |what: &str| Error::Config(format!("{}: missing or invalid {what}", path.display()));
        let label = label.ok_or_else(|| bad("label"))?;
        let babble_shift = shift.ok_or_else(|| bad("babble_shift"))?;
        let budget = budget.ok_or_else(|| bad("budget"))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_slice());
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let k: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("rollout"))?;
            let c: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("raw_cost"))?;
            points.push((k, c));
        }
        Ok((LearningCurve { label, babble_shift, points }, budget))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Mean over trials; NaN when empty.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
