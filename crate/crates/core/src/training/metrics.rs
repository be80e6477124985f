use crate::numerics::{Array, Scalar};

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax is one of the row's labels.
pub fn accuracy<T: Scalar>(scores: &Array<T>, labels: &[Vec<usize>]) -> f64 {
    let n = labels.len();
    assert_eq!(scores.leading(), n, "one score row per sample");
    if n == 0 {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| l.contains(&argmax(scores.row(*i))))
        .count();
    hits as f64 / n as f64
}

/// Precision averaged over the positives of a score-sorted list. Sorting
/// is by descending score, then ascending index. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Mean over classes that have at least one positive.
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes with no positives, left out of the mean.
    pub excluded: usize,
}

pub fn mean_average_precision<T: Scalar>(scores: &Array<T>, labels: &[Vec<usize>]) -> MapReport {
    let (n, c) = (scores.leading(), scores.last_dim());
    assert_eq!(labels.len(), n, "one label set per sample");
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|i| scores.row(i)[k].as_f64()).collect();
            let pos: Vec<bool> = labels.iter().map(|l| l.contains(&k)).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    let excluded = c - kept.len();
    if excluded > 0 {
        log::info!("{excluded} classes without positives excluded from mAP");
    }
    MapReport {
        map: if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 },
        per_class,
        excluded,
    }
}
