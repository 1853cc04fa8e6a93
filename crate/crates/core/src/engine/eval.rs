//! Full-batch evaluation.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec, ParamVector};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let logits = nn::forward(spec, params, batch)?;
    let hits = (0..batch.len())
        .filter(|&s| argmax(logits.row(s)) == batch.labels[s])
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Top-1 accuracy and mean cross-entropy over the whole test set.
pub fn evaluate_global(
    params: &ParamVector,
    spec: &ModelSpec,
    test: &LabeledDataset,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let batch = test.full_batch()?;
    let logits = nn::forward(spec, params, &batch)?;
    let mut hits = 0;
    let mut loss = 0.0;
    for s in 0..batch.len() {
        let row = logits.row(s);
        if argmax(row) == batch.labels[s] {
            hits += 1;
        }
        loss += nn::ce_loss_grad(row, batch.labels[s])?.0;
    }
    let n = batch.len() as f64;
    Ok((hits as f64 / n, loss / n))
}
