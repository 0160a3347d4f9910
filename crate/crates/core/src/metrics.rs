//! Metrics records, the CSV writer (flushed per record so a killed run
//! leaves a valid prefix), and the run summary JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cells::CellFamily;
use crate::config::{Algorithm, TaskKind};
use crate::error::Result;
use crate::tasks::EvalMetrics;

pub const CSV_HEADER: &str = "batch,train_loss,eval_loss,eval_accuracy,eval_accuracy_all,grad_norm_pre_clip,energy_internal,energy_output";

/// One row of the metrics CSV, written at every evaluation interval.
/// Energy columns are NaN for the backprop baselines.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRecord {
    pub batch: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub eval_accuracy_all: f64,
    pub grad_norm_pre_clip: f64,
    pub energy_internal: f64,
    pub energy_output: f64,
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.batch,
            self.train_loss,
            self.eval_loss,
            self.eval_accuracy,
            self.eval_accuracy_all,
            self.grad_norm_pre_clip,
            self.energy_internal,
            self.energy_output
        )
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Final run summary persisted as JSON next to the metrics CSV.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub cell: CellFamily,
    pub task: TaskKind,
    pub batches_run: u64,
    pub best_eval_loss: f64,
    pub best_eval_accuracy: f64,
    pub final_eval: EvalMetrics,
    pub wall_ms: u64,
    pub seed_data: u64,
    pub seed_init: u64,
    /// Canonical key/value rendering of the resolved configuration.
    pub config_echo: String,
    pub diverged: Option<String>,
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    serde_json::to_string_pretty(summary)
        .map_err(|e| crate::error::TpcError::Usage(format!("summary serialisation: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_round_trip_full_float_precision() {
        let r = MetricsRecord {
            batch: 16,
            train_loss: 0.1 + 0.2,
            eval_loss: 1.0 / 3.0,
            eval_accuracy: 0.999_999_999_999,
            eval_accuracy_all: 1.0,
            grad_norm_pre_clip: 2.5e-7,
            energy_internal: f64::NAN,
            energy_output: 0.0,
        };
        let row = r.to_csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[1].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert!(fields[6].parse::<f64>().unwrap().is_nan());
    }
}
