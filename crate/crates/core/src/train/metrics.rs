use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Validation metrics for one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Metrics {
    Single {
        loss: f64,
        top1: f64,
        top5: f64,
    },
    Multi {
        loss: f64,
        /// Fraction of (sample, agent, class) entries whose thresholded
        /// logit (`> 0`) equals the target.
        label_accuracy: f64,
        /// Per-class accuracy of the thresholded predictions, averaged
        /// over classes.
        mean_class_accuracy: f64,
        /// Fraction of agents whose arg-max class is their label.
        agent_top1: f64,
    },
}

impl Metrics {
    pub fn loss(&self) -> f64 {
        match *self {
            Metrics::Single { loss, .. } | Metrics::Multi { loss, .. } => loss,
        }
    }

    /// The headline accuracy: top-1 for single-agent runs, mean per-class
    /// accuracy for multi-agent runs.
    pub fn headline(&self) -> f64 {
        match *self {
            Metrics::Single { top1, .. } => top1,
            Metrics::Multi { mean_class_accuracy, .. } => mean_class_accuracy,
        }
    }
}

/// Rank of class `c` in `row`: the number of classes ordered before it when
/// sorting by descending logit with ties going to the lower index.
pub fn rank(row: &[f64], c: usize) -> usize {
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > row[c] || (v == row[c] && j < c))
        .count()
}

/// Fraction of rows whose label ranks within the first `k`.
pub fn top_k(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let &[n, c] = logits.shape() else {
        return Err(Error::InvalidShape(format!("logits must be N x C, got {:?}", logits.shape())));
    };
    if n != labels.len() || n == 0 {
        return Err(Error::InvalidShape(format!("{n} rows for {} labels", labels.len())));
    }
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| rank(row, l) < k)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Thresholded multi-label accuracies for `N × A × C` logits and one class
/// index per agent.
pub fn multi_label(logits: &Tensor, labels: &[Vec<usize>]) -> Result<(f64, f64, f64)> {
    let &[n, a, c] = logits.shape() else {
        return Err(Error::InvalidShape(format!("logits must be N x A x C, got {:?}", logits.shape())));
    };
    if labels.len() != n || labels.iter().any(|l| l.len() != a) || n == 0 {
        return Err(Error::InvalidShape(format!("labels do not match logits {:?}", logits.shape())));
    }
    let mut correct = 0usize;
    let mut per_class = vec![0usize; c];
    let mut agent_hits = 0usize;
    for (i, agents) in labels.iter().enumerate() {
        for (j, &label) in agents.iter().enumerate() {
            let row = &logits.data()[(i * a + j) * c..(i * a + j + 1) * c];
            for (k, &x) in row.iter().enumerate() {
                if (x > 0.0) == (k == label) {
                    correct += 1;
                    per_class[k] += 1;
                }
            }
            if rank(row, label) == 0 {
                agent_hits += 1;
            }
        }
    }
    let entries = (n * a) as f64;
    let mean_class = per_class.iter().map(|&h| h as f64 / entries).sum::<f64>() / c as f64;
    Ok((correct as f64 / (entries * c as f64), mean_class, agent_hits as f64 / entries))
}
