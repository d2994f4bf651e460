//! Classification metrics: accuracy, macro F1, one-vs-rest AUROC, per-class
//! AUPRC and the confusion matrix.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean of the defined per-class AUROCs; `None` when no class is defined.
    pub auroc: Option<f64>,
    /// `None` marks a class without both positives and negatives in the set.
    pub auroc_per_class: Vec<Option<f64>>,
    pub auprc_per_class: Vec<Option<f64>>,
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<usize>>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(labels: &[usize], predictions: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        m[t][p] += 1;
    }
    m
}

pub fn accuracy_from_confusion(m: &[Vec<usize>]) -> f64 {
    let total: usize = m.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let trace: usize = (0..m.len()).map(|i| m[i][i]).sum();
    trace as f64 / total as f64
}

/// Unweighted mean of per-class F1; a class with no true and no predicted
/// members contributes 0, as does any zero-division.
pub fn macro_f1(m: &[Vec<usize>]) -> f64 {
    let c = m.len();
    if c == 0 {
        return 0.0;
    }
    let f1s = (0..c).map(|k| {
        let tp = m[k][k] as f64;
        let predicted: usize = (0..c).map(|r| m[r][k]).sum();
        let actual: usize = m[k].iter().sum();
        let denom = predicted as f64 + actual as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    });
    f1s.sum::<f64>() / c as f64
}

/// Area under the ROC curve via the rank statistic (ties count one half).
/// `None` when either class is absent.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Average precision (step-wise area under the precision–recall curve), with
/// tied scores treated as one threshold. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if positive[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Builds the full report from true labels and per-sample class probabilities.
pub fn report(labels: &[usize], probs: &[Vec<f64>], num_classes: usize) -> MetricsReport {
    let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(labels, &predictions, num_classes);
    let mut auroc_per_class = Vec::with_capacity(num_classes);
    let mut auprc_per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        auroc_per_class.push(binary_auroc(&scores, &positive));
        auprc_per_class.push(average_precision(&scores, &positive));
    }
    let defined: Vec<f64> = auroc_per_class.iter().flatten().copied().collect();
    let auroc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MetricsReport {
        num_samples: labels.len(),
        accuracy: accuracy_from_confusion(&cm),
        macro_f1: macro_f1(&cm),
        auroc,
        auroc_per_class,
        auprc_per_class,
        confusion_matrix: cm,
    }
}
