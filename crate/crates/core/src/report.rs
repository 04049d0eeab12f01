//! Run records and their CSV / JSON renderings.
//!
//! Two CSV shapes are written: one row per finished run ([`RunSummary`]) and
//! one row per epoch of a run ([`TrajectoryRow`]). Floats are written in
//! shortest round-trip form, so identical runs give identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One finished run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub arch: String,
    pub dataset: String,
    /// Warm-up / scoring criterion, or a label such as `dense` or `finetune`.
    pub criterion: String,
    pub sparsity: f64,
    pub epochs: usize,
    pub seed: u64,
    pub top1: f64,
    pub top5: Option<f64>,
    pub overlap_vs_magnitude: Option<f64>,
    pub overlap_vs_init: Option<f64>,
    /// Left empty unless timing was requested; timings break byte-identical reruns.
    pub wall_clock_s: Option<f64>,
}

/// One epoch of a search or training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub run_id: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub sparsity: f64,
    pub overlap_vs_init: Option<f64>,
}

/// Overlap between a criterion's mask and a searched reference mask.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub run_id: String,
    pub seed: u64,
    pub sparsity: f64,
    pub criterion: String,
    /// Run id of the searched mask.
    pub reference: String,
    pub overlap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
    pub trajectories: Vec<TrajectoryRow>,
    #[serde(default)]
    pub overlaps: Vec<OverlapRow>,
}

impl ExperimentReport {
    pub fn extend(&mut self, other: ExperimentReport) {
        self.runs.extend(other.runs);
        self.trajectories.extend(other.trajectories);
        self.overlaps.extend(other.overlaps);
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Write rows with a header line; an empty slice still produces the header.
pub fn write_csv<T: Serialize>(rows: &[T], header: &[&str], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RUN_COLUMNS: [&str; 12] = [
    "run_id",
    "arch",
    "dataset",
    "criterion",
    "sparsity",
    "epochs",
    "seed",
    "top1",
    "top5",
    "overlap_vs_magnitude",
    "overlap_vs_init",
    "wall_clock_s",
];

pub const TRAJECTORY_COLUMNS: [&str; 8] = ["run_id", "epoch", "lr", "train_loss", "train_acc", "test_acc", "sparsity", "overlap_vs_init"];

pub const OVERLAP_COLUMNS: [&str; 6] = ["run_id", "seed", "sparsity", "criterion", "reference", "overlap"];

pub fn write_runs_csv(rows: &[RunSummary], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, &RUN_COLUMNS, path)
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, &TRAJECTORY_COLUMNS, path)
}

pub fn write_overlap_csv(rows: &[OverlapRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, &OVERLAP_COLUMNS, path)
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RUN_COLUMNS {
        return Err(Error::Data(format!("{}: unexpected columns {:?}", path.display(), header)));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Replace NaN with `None` so that CSV cells stay empty instead of holding `NaN`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64) -> RunSummary {
        RunSummary {
            run_id: format!("r{seed}"),
            arch: "lenet".into(),
            dataset: "mnist".into(),
            criterion: "magnitude".into(),
            sparsity: 0.9,
            epochs: 30,
            seed,
            top1: 0.1 + 0.2,
            top5: Some(0.99),
            overlap_vs_magnitude: Some(1.0),
            overlap_vs_init: None,
            wall_clock_s: None,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        write_runs_csv(&[row(0), row(1)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "run_id,arch,dataset,criterion,sparsity,epochs,seed,top1,top5,overlap_vs_magnitude,overlap_vs_init,wall_clock_s\n"
        ));
        assert!(text.contains("r0,lenet,mnist,magnitude,0.9,30,0,0.30000000000000004,0.99,1.0,,\n"), "{text}");
        assert_eq!(read_runs_csv(&p).unwrap(), vec![row(0), row(1)]);
    }

    #[test]
    fn empty_table_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), TRAJECTORY_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn identical_reports_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let rep = ExperimentReport { runs: vec![row(3)], trajectories: vec![TrajectoryRow { run_id: "r3".into(), epoch: 1, ..Default::default() }], ..Default::default() };
        rep.write_json(dir.path().join("a.json")).unwrap();
        rep.write_json(dir.path().join("b.json")).unwrap();
        assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
    }
}
