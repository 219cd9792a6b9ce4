use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One training run inside a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// `None` when the run failed twice.
    pub accuracy: Option<f64>,
    /// The first attempt failed and this is the restart.
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub runs: Vec<RunRecord>,
}

impl Cell {
    fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.accuracy).collect()
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.accuracy.is_none())
    }

    /// Mean over the successful runs.
    pub fn mean(&self) -> Option<f64> {
        let a = self.accuracies();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }

    /// Sample standard deviation over the successful runs (0 for one run).
    pub fn std(&self) -> Option<f64> {
        let a = self.accuracies();
        let m = self.mean()?;
        if a.len() < 2 {
            return Some(0.0);
        }
        Some((a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major, `rows.len() × columns.len()`.
    pub cells: Vec<Cell>,
}

impl ComparisonTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    /// `algorithm,setting,seed,accuracy`; failed runs have an empty accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,setting,seed,accuracy\n");
        for c in &self.cells {
            for r in &c.runs {
                let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
                writeln!(out, "{},{},{},{}", c.row, c.column, r.seed, acc).unwrap();
            }
        }
        out
    }

    /// Aligned text with `mean(std)` percentages, e.g. `93.39(0.11)`.
    pub fn render(&self) -> String {
        let text = |c: &Cell| match (c.mean(), c.std()) {
            (Some(m), Some(s)) if !c.failed() => format!("{:.2}({:.2})", 100.0 * m, 100.0 * s),
            (Some(m), Some(s)) => format!("{:.2}({:.2})*", 100.0 * m, 100.0 * s),
            _ => "failed".to_string(),
        };
        let mut grid = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for (r, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.clone()];
            for k in 0..self.columns.len() {
                line.push(text(&self.cells[r * self.columns.len() + k]));
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..=self.columns.len())
            .map(|k| grid.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(k, (s, &w))| if k == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        if self.cells.iter().any(Cell::failed) {
            out.push_str("* at least one run failed twice and is excluded\n");
        }
        out
    }
}
