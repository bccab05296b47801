use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::datastore::EmbeddingDataset;
use crate::nnkernel::{head_forward, HeadParams, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of all samples classified correctly.
    pub accuracy: f64,
    /// Per-class accuracy over the dataset's class list; 0 for classes with
    /// no samples (see `counts`).
    pub per_class: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EvalResult {
    /// Accuracy over the samples of the given classes only.
    pub fn accuracy_over(&self, classes: impl IntoIterator<Item = usize>) -> f64 {
        let (mut hit, mut n) = (0.0, 0usize);
        for c in classes {
            hit += self.per_class[c] * self.counts[c] as f64;
            n += self.counts[c];
        }
        if n == 0 {
            0.0
        } else {
            hit / n as f64
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Scores precomputed logits against labels.
pub fn score_logits(
    logits: &Tensor2,
    labels: &[u32],
    n_classes: usize,
) -> Result<EvalResult, OrchestratorError> {
    if labels.is_empty() {
        return Err(OrchestratorError::Evaluation("empty test set".into()));
    }
    let mut correct = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &label) in labels.iter().enumerate() {
        let l = label as usize;
        if l >= logits.cols() || l >= n_classes {
            return Err(OrchestratorError::Evaluation(format!(
                "label {label} at row {i} is not a registered class"
            )));
        }
        counts[l] += 1;
        if argmax(logits.row(i)) == l {
            correct[l] += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(EvalResult {
        accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class,
        counts,
    })
}

pub fn evaluate(params: &HeadParams, test: &EmbeddingDataset) -> Result<EvalResult, OrchestratorError> {
    if test.is_empty() {
        return Err(OrchestratorError::Evaluation("empty test set".into()));
    }
    let batch = test.full_batch();
    let out = head_forward(params, &batch.features)?;
    score_logits(&out.logits, &batch.labels, test.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_class_zero_classifier() {
        let logits = Tensor2::from_rows(&[[1.0, 0.0, 0.0], [2.0, 1.0, 1.0], [0.5, 0.5, 0.5]]).unwrap();
        let r = score_logits(&logits, &[0, 1, 2], 3).unwrap();
        assert_eq!(r.per_class, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn balanced_accuracy_is_mean_of_per_class() {
        let logits = Tensor2::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = score_logits(&logits, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.accuracy, r.per_class.iter().sum::<f64>() / 2.0);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = crate::seed::rng(3, &[]);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| (rng.random_range(0..4) as f64) * 0.5).collect())
            .collect();
        let labels: Vec<u32> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let r = score_logits(&Tensor2::from_rows(&rows).unwrap(), &labels, 5).unwrap();
        let mut hits = 0;
        for (row, &l) in rows.iter().zip(&labels) {
            let mut best = 0;
            for j in 0..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == l as usize);
        }
        assert_eq!(r.accuracy, hits as f64 / 100.0);
    }

    #[test]
    fn empty_and_unregistered_labels_fail() {
        let logits = Tensor2::zeros(0, 3);
        assert!(score_logits(&logits, &[], 3).is_err());
        let logits = Tensor2::zeros(1, 3);
        assert!(score_logits(&logits, &[3], 5).is_err());
    }
}
