use serde::{Deserialize, Serialize};

use crate::bbn::{mix_predictions, BbnModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 128;

/// Accuracy of a model at each test-time mixing ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// `per_class[i][c]`: accuracy on class `c` at `grid[i]`; `None` for absent classes.
    pub per_class: Vec<Vec<Option<f64>>>,
}

impl EvalReport {
    /// Index of the best grid point; ties resolve to the lower μ.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.accuracy.iter().enumerate() {
            if a > self.accuracy[best] {
                best = i;
            }
        }
        best
    }

    pub fn best(&self) -> (f64, f64) {
        let i = self.best_index();
        (self.grid[i], self.accuracy[i])
    }

    pub fn accuracy_at(&self, mu: f64) -> Option<f64> {
        self.grid
            .iter()
            .position(|&m| (m - mu).abs() < 1e-12)
            .map(|i| self.accuracy[i])
    }
}

/// Per-row logits of both heads, computed in chunks.
pub fn head_logits(model: &BbnModel, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = images.shape()[0];
    let c = model.config().classes;
    let (mut ins, mut cls) = (Vec::with_capacity(n * c), Vec::with_capacity(n * c));
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let (a, b) = model.head_logits(&images.slice_rows(start, len))?;
        ins.extend_from_slice(a.data());
        cls.extend_from_slice(b.data());
    }
    Ok((Tensor::new(vec![n, c], ins)?, Tensor::new(vec![n, c], cls)?))
}

/// Accuracy from precomputed head logits.
pub fn evaluate_logits(
    ins: &Tensor,
    cls: &Tensor,
    labels: &[usize],
    classes: usize,
    grid: &[f64],
) -> Result<EvalReport> {
    if labels.is_empty() || ins.shape()[0] != labels.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} logit rows for {} labels", ins.shape()[0], labels.len()),
        ));
    }
    let mut totals = vec![0usize; classes];
    for &y in labels {
        totals[y] += 1;
    }
    let mut accuracy = Vec::with_capacity(grid.len());
    let mut per_class = Vec::with_capacity(grid.len());
    for &mu in grid {
        let preds = mix_predictions(ins, cls, mu);
        let mut hits = vec![0usize; classes];
        for (p, &y) in preds.iter().zip(labels) {
            if p.class == y {
                hits[y] += 1;
            }
        }
        accuracy.push(hits.iter().sum::<usize>() as f64 / labels.len() as f64);
        per_class.push(
            hits.iter()
                .zip(&totals)
                .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
                .collect(),
        );
    }
    Ok(EvalReport {
        grid: grid.to_vec(),
        accuracy,
        per_class,
    })
}

/// Overall and per-class accuracy at every μ in `grid`; `images` must already
/// be normalized.
pub fn evaluate(
    model: &BbnModel,
    images: &Tensor,
    labels: &[usize],
    grid: &[f64],
) -> Result<EvalReport> {
    for &mu in grid {
        crate::bbn::check_mu("evaluate", mu)?;
    }
    let (ins, cls) = head_logits(model, images)?;
    evaluate_logits(&ins, &cls, labels, model.config().classes, grid)
}
