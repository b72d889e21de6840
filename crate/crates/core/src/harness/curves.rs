use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One plotted accuracy; `x` is a layer index or a keep fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
}

impl CurvePoint {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(invalid(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        if self.n_eval == 0 {
            return Err(invalid("n_eval must be > 0"));
        }
        Ok(())
    }
}

pub fn sort_points(points: &mut [CurvePoint]) {
    points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.seed.cmp(&b.seed)));
}

/// CSV text with header `x,accuracy,n_eval,seed`, rows ordered by `(x, seed)`.
pub fn curves_csv(points: &[CurvePoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptyInput("curve points"));
    }
    let mut sorted = points.to_vec();
    for p in &sorted {
        p.validate()?;
    }
    sort_points(&mut sorted);
    let mut out = String::from("x,accuracy,n_eval,seed\n");
    for p in sorted {
        writeln!(out, "{},{},{},{}", p.x, p.accuracy, p.n_eval, p.seed).expect("write to String");
    }
    Ok(out)
}

pub fn emit_curves(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, curves_csv(points)?)?;
    Ok(())
}

/// Mean accuracy of the points at `x`.
pub fn mean_at(points: &[CurvePoint], x: f64) -> Option<f64> {
    let sel: Vec<f64> = points.iter().filter(|p| p.x == x).map(|p| p.accuracy).collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}
