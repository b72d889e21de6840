//! Experiment plumbing: synthetic data, checkpoints, recipes and CSV output.

pub mod checkpoint;
pub mod curves;
pub mod experiments;
pub mod synthetic;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use checkpoint::{load_checkpoint, load_encoder, load_lm, save_checkpoint, save_encoder, save_lm, Checkpoint};
pub use curves::{emit_curves, CurvePoint};
pub use experiments::{
    prepare, run_generation_fidelity, run_layer_sweep, run_reduction_curve, run_top_bottom, ExperimentConfig,
    FidelityRow, GenerationConfig, RecallRow, Session, TopBottomRow,
};
pub use synthetic::{make_synthetic, SyntheticDataset, SyntheticSpec};

/// CSV with the given header; each row is rendered by `row`.
pub fn rows_csv<T>(header: &str, rows: &[T], row: impl Fn(&T) -> String) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("report rows"));
    }
    let mut out = format!("{header}\n");
    for r in rows {
        writeln!(out, "{}", row(r)).expect("write to String");
    }
    Ok(out)
}

pub fn top_bottom_csv(rows: &[TopBottomRow]) -> Result<String> {
    rows_csv("seed,full,top,bottom", rows, |r| format!("{},{},{},{}", r.seed, r.full, r.top, r.bottom))
}

pub fn recall_csv(rows: &[RecallRow]) -> Result<String> {
    rows_csv("seed,filter_recall,random_recall", rows, |r| format!("{},{},{}", r.seed, r.filter_recall, r.random_recall))
}

pub fn fidelity_csv(rows: &[FidelityRow]) -> Result<String> {
    rows_csv("seed,with_label,without_label", rows, |r| format!("{},{},{}", r.seed, r.with_label, r.without_label))
}

/// Written next to every recipe's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub recipe: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, recipe: &str, outputs: Vec<String>) -> Self {
        Self {
            name: cfg.name.clone(),
            recipe: recipe.into(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds.clone(),
            outputs,
            config: cfg.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }
}
