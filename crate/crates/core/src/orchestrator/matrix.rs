use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::report::{emit_csv, render_summary, summarize_final, write_atomic, SummaryRow};

use super::config::{Cell, MatrixConfig};
use super::round::run_experiment;

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    /// One row per cell, in cell order.
    pub rows: Vec<SummaryRow>,
}

impl MatrixOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }
}

/// Run every cell of `cfg` into `out`.
///
/// Writes `<cell>.csv` and the resolved `<cell>.toml` per cell and a
/// `summary.csv`. A failing cell is recorded in the summary; the others still run.
pub fn run_matrix(cfg: &MatrixConfig, out: &Path) -> Result<MatrixOutcome> {
    cfg.validate()?;
    run_matrix_cells(&cfg.cells(), out)
}

pub fn run_matrix_cells(cells: &[Cell], out: &Path) -> Result<MatrixOutcome> {
    if cells.is_empty() {
        return Err(Error::Config("matrix has no cells".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let total = cells.len();
    let rows = cells
        .par_iter()
        .map(|cell| {
            let cfg = &cell.config;
            write_atomic(&out.join(format!("{}.toml", cell.name)), &cfg.to_toml())?;
            let outcome = match run_experiment(cfg) {
                Ok(run) => {
                    emit_csv(&run.records, &out.join(format!("{}.csv", cell.name)))?;
                    log::info!("cell {}/{total} {} done", cell.index + 1, cell.name);
                    summarize_final(&run.records).ok_or_else(|| "no rounds run".to_string())
                }
                Err(e) => {
                    log::warn!("cell {}/{total} {} failed: {e}", cell.index + 1, cell.name);
                    Err(e.to_string())
                }
            };
            Ok(SummaryRow {
                algorithm: cfg.variant().to_string(),
                dataset: cfg.dataset.token(),
                eligible_ratio: cfg.eligible_ratio,
                loss_ratio: cfg.loss_ratio,
                seed: cfg.seed,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&out.join("summary.csv"), &render_summary(&rows))?;
    Ok(MatrixOutcome { rows })
}
