//! Accuracy and system loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::mean_cross_entropy_on;
use crate::nn::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub balanced_acc: Vec<f64>,
    pub matched_acc: Vec<f64>,
    pub mean_balanced_acc: f64,
    pub mean_matched_acc: f64,
    /// Sample-weighted mean of the clients' training cross-entropy.
    pub system_loss: f64,
}

/// Fraction of correctly classified samples; 0 for an empty set.
pub fn accuracy(model: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data.samples() {
        if model.predict(&s.x)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Client `i` is scored with `models[i]` on the shared balanced set, on
/// `matched[i]`, and on `train[i]` for the system loss.
pub fn evaluate<D: AsRef<LabeledDataset> + Sync>(
    models: &[ModelParams],
    balanced: &LabeledDataset,
    matched: &[LabeledDataset],
    train: &[D],
) -> Result<Evaluation> {
    if models.len() != matched.len() || models.len() != train.len() {
        return Err(Error::Argument(format!(
            "evaluate: {} models, {} matched sets, {} training sets",
            models.len(),
            matched.len(),
            train.len()
        )));
    }
    let per_client: Vec<(f64, f64, f64, usize)> = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let tr = train[i].as_ref();
            Ok((
                accuracy(m, balanced)?,
                accuracy(m, &matched[i])?,
                mean_cross_entropy_on(m, tr.samples())?,
                tr.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let balanced_acc: Vec<f64> = per_client.iter().map(|c| c.0).collect();
    let matched_acc: Vec<f64> = per_client.iter().map(|c| c.1).collect();
    let total: usize = per_client.iter().map(|c| c.3).sum();
    let system_loss = if total == 0 {
        0.0
    } else {
        per_client.iter().map(|c| c.3 as f64 / total as f64 * c.2).sum()
    };
    Ok(Evaluation {
        mean_balanced_acc: mean(&balanced_acc),
        mean_matched_acc: mean(&matched_acc),
        balanced_acc,
        matched_acc,
        system_loss,
    })
}
