//! Append-only per-epoch metrics CSV.

use std::fs::File;
use std::path::Path;

use crate::runner::RunError;
use crate::train::{EpochStats, Evaluation, Trainer};

/// One row; epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub ann_test_accuracy: f64,
    pub saturated_events: usize,
    pub capped_adaptations: usize,
    pub max_loss_gap: Option<f64>,
    pub latency: f64,
    pub deltas: Vec<f64>,
}

impl EpochRow {
    pub fn start(trainer: &Trainer, eval: Evaluation, ann_accuracy: f64) -> Self {
        Self {
            epoch: trainer.epoch,
            step: trainer.step,
            lr: trainer.lr.at(trainer.step),
            train_loss: None,
            train_accuracy: None,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            ann_test_accuracy: ann_accuracy,
            saturated_events: eval.saturated_events,
            capped_adaptations: 0,
            max_loss_gap: None,
            latency: trainer.net.latency(),
            deltas: vec![0.0; trainer.net.hidden.len()],
        }
    }

    pub fn after_epoch(trainer: &Trainer, stats: &EpochStats, eval: Evaluation, ann_accuracy: f64) -> Self {
        Self {
            epoch: stats.epoch,
            step: stats.step,
            lr: stats.lr,
            train_loss: Some(stats.train_loss),
            train_accuracy: Some(stats.train_accuracy),
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            ann_test_accuracy: ann_accuracy,
            saturated_events: stats.saturated_events,
            capped_adaptations: stats.capped_adaptations,
            max_loss_gap: stats.max_loss_gap,
            latency: trainer.net.latency(),
            deltas: stats.deltas.clone(),
        }
    }
}

pub struct MetricsWriter {
    writer: csv::Writer<File>,
    depth: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, depth: usize) -> Result<Self, RunError> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = [
            "epoch",
            "step",
            "lr",
            "train_loss",
            "train_accuracy",
            "test_accuracy",
            "test_loss",
            "ann_test_accuracy",
            "saturated_events",
            "capped_adaptations",
            "max_loss_gap",
            "latency",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=depth).map(|n| format!("dt_max_{n}")));
        writer.write_record(&header)?;
        writer.flush().map_err(csv::Error::from)?;
        Ok(Self { writer, depth })
    }

    pub fn append(&mut self, row: &EpochRow) -> Result<(), RunError> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut record = vec![
            row.epoch.to_string(),
            row.step.to_string(),
            row.lr.to_string(),
            opt(row.train_loss),
            opt(row.train_accuracy),
            row.test_accuracy.to_string(),
            row.test_loss.to_string(),
            row.ann_test_accuracy.to_string(),
            row.saturated_events.to_string(),
            row.capped_adaptations.to_string(),
            opt(row.max_loss_gap),
            row.latency.to_string(),
        ];
        assert_eq!(row.deltas.len(), self.depth, "one Δt_max per layer");
        record.extend(row.deltas.iter().map(|d| d.to_string()));
        self.writer.write_record(&record)?;
        self.writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
