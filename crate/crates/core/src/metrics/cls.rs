//! Clip-level classification scores.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub gini: f64,
    pub clips: usize,
}

/// Rows are true classes, columns predicted classes.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[truth.len()]));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Data(format!("label out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Cohen's kappa with chance agreement from the product of the marginals.
pub fn kappa(m: &[Vec<u64>]) -> f64 {
    let n: u64 = m.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let k = m.len();
    let po = (0..k).map(|i| m[i][i] as f64).sum::<f64>() / n;
    let pe = (0..k)
        .map(|i| {
            let row: u64 = m[i].iter().sum();
            let col: u64 = m.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Mann-Whitney AUC of `scores` for `positive` labels; ties count one half.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    // rank-sum form: sort once, average ranks over ties
    let mut all: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Macro one-vs-rest AUC over classes that have both positives and negatives.
pub fn macro_auc(probs: &[Vec<f64>], truth: &[usize], classes: usize) -> f64 {
    let aucs: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let y: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&s, &y)
        })
        .collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

pub fn gini(auc: f64) -> f64 {
    2.0 * auc - 1.0
}

pub fn cls_metrics(pred: &[usize], truth: &[usize], probs: &[Vec<f64>], classes: usize) -> Result<ClsMetrics> {
    if truth.is_empty() {
        return Err(Error::Data("no clips to score".into()));
    }
    if probs.len() != truth.len() || probs.iter().any(|p| p.len() != classes) {
        return Err(Error::shape("cls_metrics", &[probs.len(), classes], &[truth.len(), classes]));
    }
    let m = confusion(pred, truth, classes)?;
    let n = truth.len() as f64;
    let acc = (0..classes).map(|i| m[i][i]).sum::<u64>() as f64 / n;
    let mut recalls = Vec::new();
    let mut f1 = 0.0;
    for c in 0..classes {
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = m.iter().map(|r| r[c]).sum();
        let tp = m[c][c] as f64;
        if support == 0 {
            log::warn!("class {c} absent from the reference labels; its F1 counts as 0");
            continue;
        }
        recalls.push(tp / support as f64);
        if predicted > 0 && tp > 0.0 {
            let (p, r) = (tp / predicted as f64, tp / support as f64);
            f1 += 2.0 * p * r / (p + r);
        }
    }
    Ok(ClsMetrics {
        acc,
        bacc: recalls.iter().sum::<f64>() / recalls.len() as f64,
        macro_f1: f1 / classes as f64,
        kappa: kappa(&m),
        gini: gini(macro_auc(probs, truth, classes)),
        clips: truth.len(),
    })
}
