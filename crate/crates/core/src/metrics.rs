//! ROC analysis.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs at least one positive and one negative")]
    SingleClass,
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(*s));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUC: the fraction of positive/negative pairs ranked
/// correctly, with ties worth one half. Computed from midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (pos, neg) = check(scores, labels)?;
    let mut rank_sum = 0.0;
    let mut next = 1.0;
    for g in tie_groups(scores) {
        let n = g.len() as f64;
        let mid = next + (n - 1.0) / 2.0;
        rank_sum += mid * g.iter().filter(|&&i| labels[i]).count() as f64;
        next += n;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score threshold, visited from the highest score down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (pos, neg) = check(scores, labels)?;
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in tie_groups(scores).into_iter().rev() {
        let t = g.iter().filter(|&&i| labels[i]).count();
        tp += t;
        fp += g.len() - t;
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass));
        assert!(auc(&[0.1], &[true, false]).is_err());
        assert!(auc(&[f64::NAN, 0.1], &[true, false]).is_err());
    }

    #[test]
    fn perfect_curve_hits_corner() {
        let roc = roc_curve(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]).unwrap();
        assert!(roc.contains(&(0.0, 1.0)));
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn reversal_complements() {
        let s = [0.3, 0.1, 0.7, 0.4, 0.9, 0.2];
        let l = [true, false, true, false, false, true];
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-15);
    }
}
