//! Classification metrics.

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// ROC-AUC as the Mann-Whitney rank statistic, ties counted as one half.
/// `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks (1-based) over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Binary AUC on the class-1 score for two classes, otherwise the macro
/// average of one-vs-rest AUCs. Classes absent from `labels` are skipped and
/// returned in the second field.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> (Option<f64>, Vec<usize>) {
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let auc = roc_auc(&scores, &pos);
        let skipped = if auc.is_none() {
            (0..2).filter(|c| !labels.contains(c)).collect()
        } else {
            Vec::new()
        };
        return (auc, skipped);
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match roc_auc(&scores, &pos) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => skipped.push(c),
        }
    }
    ((used > 0).then(|| total / used as f64), skipped)
}

/// Macro F1 over classes that occur in `labels` or `preds`.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|(&p, &l)| p != c && l == c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.2], &[true, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.4, 0.6], &[true, false]), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.5], &[true]), None);
    }

    #[test]
    fn f1_perfect_and_worst() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        assert_eq!(macro_f1(&[1, 0], &[0, 1], 2), 0.0);
    }
}
