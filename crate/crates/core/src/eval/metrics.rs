use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self, EvalError> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(EvalError::Empty);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Ok(Metrics { accuracy: ratio(tp + tn, total), precision, recall, f1, tp, fp, tn, fn_ })
    }

    /// Arithmetic mean of each rate; counts are summed.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: avg(|m| m.accuracy),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
            tp: all.iter().map(|m| m.tp).sum(),
            fp: all.iter().map(|m| m.fp).sum(),
            tn: all.iter().map(|m| m.tn).sum(),
            fn_: all.iter().map(|m| m.fn_).sum(),
        }
    }
}

/// Metrics of the vulnerable class over `(predicted, actual)` pairs.
pub fn compute_metrics(pairs: impl IntoIterator<Item = (bool, bool)>) -> Result<Metrics, EvalError> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (pred, truth) in pairs {
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Metrics::from_counts(tp, fp, tn, fn_)
}
