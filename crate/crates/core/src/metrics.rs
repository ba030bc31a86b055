//! Evaluation metrics: RMSE, mean Gaussian log likelihood, and AUC.
//!
//! All of these operate on already de-standardized values; unit conversions
//! live with the dataset handling.

use alloc::vec::Vec;

use crate::math;

/// Root mean squared error.
pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len());
    assert!(!y_true.is_empty());
    let ss: f64 = y_true.iter().zip(y_pred).map(|(&a, &b)| (a - b) * (a - b)).sum();
    math::sqrt(ss / y_true.len() as f64)
}

/// Mean log N(y | mean, var) over points.
pub fn mean_gaussian_loglik(y_true: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    assert_eq!(y_true.len(), mean.len());
    assert_eq!(y_true.len(), var.len());
    let mut acc = 0.0;
    for i in 0..y_true.len() {
        let d = y_true[i] - mean[i];
        acc += -0.5 * (math::LN_2PI + math::ln(var[i])) - d * d / (2.0 * var[i]);
    }
    acc / y_true.len() as f64
}

/// Area under the ROC curve by the rank statistic with midranks for ties.
/// Labels are ±1 (or 0/1); scores are any monotone classifier output.
pub fn auc(labels: &[f64], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tied score groups
    let mut ranks = alloc::vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
    let n_neg = n - n_pos;
    assert!(n_pos > 0 && n_neg > 0, "AUC needs both classes");
    let rank_sum_pos: f64 =
        labels.iter().zip(&ranks).filter(|(&l, _)| l > 0.0).map(|(_, &r)| r).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Spearman rank correlation (midranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn midranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut ranks = alloc::vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[order[k]] = mid;
            }
            i = j + 1;
        }
        ranks
    }
    assert_eq!(x.len(), y.len());
    let rx = midranks(x);
    let ry = midranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    num / math::sqrt(dx * dy)
}
