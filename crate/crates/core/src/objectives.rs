//! Supervision objectives.
//!
//! Single-agent videos use softmax cross-entropy; multi-agent videos use a
//! per-agent, per-class binary cross-entropy on logits. Both reduce by the
//! mean over every labeled entry and are computed in log-sum-exp stable
//! form, so they stay finite for logits far beyond the range where the
//! naive formulas overflow.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N × classes` logits with one class index per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleLabelBatch {
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

impl SingleLabelBatch {
    pub fn new(logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        let &[n, c] = logits.shape() else {
            return Err(Error::InvalidShape(format!("logits must be N x C, got {:?}", logits.shape())));
        };
        if n != labels.len() {
            return Err(Error::InvalidShape(format!("{n} logit rows for {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        Ok(SingleLabelBatch { logits, labels })
    }
}

/// `N × A × classes` logits with `{0, 1}` targets of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelBatch {
    pub logits: Tensor,
    pub targets: Tensor,
}

impl MultiLabelBatch {
    pub fn new(logits: Tensor, targets: Tensor) -> Result<Self> {
        if logits.ndim() != 3 || logits.shape()[1] == 0 {
            return Err(Error::InvalidShape(format!(
                "logits must be N x A x C with A >= 1, got {:?}",
                logits.shape()
            )));
        }
        if logits.shape() != targets.shape() {
            return Err(Error::InvalidShape(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                logits.shape()
            )));
        }
        if let Some(&value) = targets.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary {
                value,
                context: "multi-label targets".into(),
            });
        }
        Ok(MultiLabelBatch { logits, targets })
    }
}

/// One-hot `N × A × classes` targets from per-agent class indices.
pub fn one_hot(labels: &[Vec<usize>], classes: usize) -> Result<Tensor> {
    let agents = labels.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(&[labels.len(), agents, classes]);
    for (n, row) in labels.iter().enumerate() {
        if row.len() != agents {
            return Err(Error::InvalidShape(format!(
                "sample {n} has {} agents, expected {agents}",
                row.len()
            )));
        }
        for (a, &c) in row.iter().enumerate() {
            if c >= classes {
                return Err(Error::LabelOutOfRange { label: c, classes });
            }
            t.set(&[n, a, c], 1.0);
        }
    }
    Ok(t)
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Tensor,
}

fn evaluate(logits: &Tensor, record: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>) -> Result<LossValue> {
    let mut g = Graph::new();
    let x = g.param(logits.clone());
    let loss = record(&mut g, x)?;
    g.forward()?;
    let grads = g.backward(loss)?;
    Ok(LossValue {
        loss: g.value(loss)?.item(),
        grad: grads.get(x).expect("logits are a parameter").clone(),
    })
}

/// Mean over samples of `−log softmax(logits)[label]`.
pub fn cross_entropy(batch: &SingleLabelBatch) -> Result<LossValue> {
    evaluate(&batch.logits, |g, x| g.cross_entropy(x, &batch.labels))
}

/// Mean over all entries of `max(x, 0) − x·y + log(1 + e^{−|x|})`.
pub fn bce_with_logits(batch: &MultiLabelBatch) -> Result<LossValue> {
    let n = batch.logits.len();
    let flat = batch.logits.reshape(&[n])?;
    let targets = batch.targets.reshape(&[n])?;
    let mut v = evaluate(&flat, |g, x| g.bce_with_logits(x, &targets))?;
    v.grad = v.grad.reshape(batch.logits.shape())?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::RngStream;

    /// `−[y log σ(x) + (1−y) log(1−σ(x))]` written out directly, with
    /// `1 − σ(x)` evaluated as `σ(−x)` so the oracle itself does not lose
    /// digits to cancellation.
    fn naive_bce(x: f64, y: f64) -> f64 {
        let s = 1.0 / (1.0 + (-x).exp());
        let one_minus_s = 1.0 / (1.0 + x.exp());
        -(y * s.ln() + (1.0 - y) * one_minus_s.ln())
    }

    fn single(logits: Vec<f64>, classes: usize, labels: Vec<usize>) -> f64 {
        let n = logits.len() / classes;
        let batch = SingleLabelBatch::new(Tensor::new(vec![n, classes], logits).unwrap(), labels).unwrap();
        cross_entropy(&batch).unwrap().loss
    }

    fn multi(x: f64, y: f64) -> LossValue {
        let batch = MultiLabelBatch::new(Tensor::full(&[1, 1, 1], x), Tensor::full(&[1, 1, 1], y)).unwrap();
        bce_with_logits(&batch).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        assert!((single(vec![0.7; 4], 4, vec![2]) - 4f64.ln()).abs() <= 1e-10);
    }

    #[test]
    fn saturated_correct_class_has_no_loss() {
        assert!(single(vec![0.0, 1e3, 0.0], 3, vec![1]) <= 1e-6);
    }

    #[test]
    fn three_logit_example() {
        let expect = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((single(vec![1.0, 2.0, 3.0], 3, vec![2]) - expect).abs() < 1e-15);
        assert!((expect - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn bce_examples() {
        assert!((multi(0.0, 1.0).loss - 2f64.ln()).abs() < 1e-15);
        let hi = multi(1e4, 1.0);
        assert!(hi.loss.is_finite() && hi.loss < 1e-300 && hi.grad.is_finite());
        let lo = multi(-1e4, 1.0);
        assert_eq!(lo.loss, 1e4);
        assert!(lo.grad.is_finite());
        assert_eq!(lo.grad.item(), -1.0);
    }

    #[test]
    fn invalid_batches_are_rejected() {
        assert!(matches!(
            SingleLabelBatch::new(Tensor::zeros(&[2, 3]), vec![0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(matches!(
            MultiLabelBatch::new(Tensor::zeros(&[1, 1, 2]), Tensor::full(&[1, 1, 2], 0.5)),
            Err(Error::NonBinary { .. })
        ));
        assert!(MultiLabelBatch::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn one_hot_layout() {
        let t = one_hot(&[vec![1, 0], vec![2, 2]], 3).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.sum(), 4.0);
        assert_eq!(t.get(&[1, 1, 2]), 1.0);
        assert!(one_hot(&[vec![3]], 3).is_err());
    }

    #[test]
    fn both_losses_pass_gradient_check() {
        let mut rng = RngStream::new(1);
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[5, 4], 2.0, &mut rng));
        let loss = g.cross_entropy(x, &[0, 3, 1, 1, 2]).unwrap();
        let r = grad_check(&mut g, loss, 1e-6, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");

        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[3, 2, 4], 2.0, &mut rng));
        let targets = one_hot(&[vec![0, 1], vec![3, 3], vec![2, 0]], 4).unwrap();
        let loss = g.bce_with_logits(x, &targets).unwrap();
        let r = grad_check(&mut g, loss, 1e-6, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    proptest! {
        #[test]
        fn cross_entropy_is_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 12),
            shift in -1e3f64..1e3,
            labels in prop::collection::vec(0usize..4, 3),
        ) {
            let base = single(logits.clone(), 4, labels.clone());
            let shifted = single(logits.iter().map(|v| v + shift).collect(), 4, labels);
            prop_assert!((base - shifted).abs() <= 1e-10);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn bce_matches_naive_form(x in -30.0f64..30.0, y in prop::bool::ANY) {
            let y = y as u8 as f64;
            let v = multi(x, y).loss;
            prop_assert!((v - naive_bce(x, y)).abs() <= 1e-10);
            prop_assert!(v >= 0.0);
        }
    }
}
