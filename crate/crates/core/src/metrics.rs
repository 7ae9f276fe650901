//! Classification accuracy and mean average precision.

use crate::error::{PicError, Result};
use crate::network::Labels;
use crate::tensor::Tensor;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(PicError::Validation("accuracy of an empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(PicError::Validation(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean of precision at the rank of every positive, ranking by descending
/// score with ties kept in sample order. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
}

impl MapResult {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Unweighted mean AP over classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MapResult> {
    if scores.shape() != labels.shape() || scores.ndim() != 2 {
        return Err(PicError::Validation(format!(
            "scores {:?} and labels {:?} must be equal [B, classes]",
            scores.shape(),
            labels.shape()
        )));
    }
    let (b, k) = (scores.dim(0), scores.dim(1));
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let s: Vec<f64> = (0..b).map(|r| scores.get(&[r, c])).collect();
        let p: Vec<bool> = (0..b).map(|r| labels.get(&[r, c]) > 0.5).collect();
        per_class.push(average_precision(&s, &p));
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(PicError::Validation("no class has a positive sample".into()));
    }
    Ok(MapResult {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// `"accuracy"` or `"map"`.
    pub metric: &'static str,
    pub value: f64,
    /// Per-class accuracy or AP; `None` where a class has no samples or no
    /// positives.
    pub per_class: Vec<Option<f64>>,
    pub samples: usize,
}

/// Accuracy for single-label and mAP for multi-label batches.
///
/// Per-class accuracies average to the headline when weighted by class
/// counts; per-class APs average to it unweighted.
pub fn evaluate(logits: &Tensor, labels: &Labels) -> Result<MetricReport> {
    match labels {
        Labels::Single(y) => {
            let value = accuracy(logits, y)?;
            let k = logits.last_dim();
            let mut hits = vec![0usize; k];
            let mut counts = vec![0usize; k];
            for (r, &c) in y.iter().enumerate() {
                if c >= k {
                    return Err(PicError::Validation(format!("label {c} out of range for {k} classes")));
                }
                counts[c] += 1;
                hits[c] += usize::from(argmax(logits.row(r)) == c);
            }
            let per_class = hits
                .iter()
                .zip(&counts)
                .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
                .collect();
            Ok(MetricReport {
                metric: "accuracy",
                value,
                per_class,
                samples: y.len(),
            })
        }
        Labels::Multi(t) => {
            let r = mean_average_precision(logits, t)?;
            Ok(MetricReport {
                metric: "map",
                value: r.map,
                per_class: r.per_class,
                samples: t.rows(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_cases() {
        let logits = Tensor::new(&[2, 3], vec![0.1, 0.9, 0.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&Tensor::zeros(&[2, 3]), &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&Tensor::zeros(&[1, 3]), &[0]).unwrap(), 1.0);
        assert!(accuracy(&logits, &[]).is_err());
    }

    #[test]
    fn accuracy_matches_counting_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::randn(&[50, 4], 1.0, &mut rng);
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        let mut hits = 0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            if (0..4).all(|c| c == y || row[c] < row[y]) {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&logits, &labels).unwrap(), hits as f64 / 50.0);
        let rep = evaluate(&logits, &Labels::Single(labels.clone())).unwrap();
        let mut counts = [0usize; 4];
        labels.iter().for_each(|&y| counts[y] += 1);
        let weighted: f64 = rep
            .per_class
            .iter()
            .zip(counts)
            .map(|(v, n)| v.unwrap_or(0.0) * n as f64)
            .sum::<f64>()
            / 50.0;
        assert!((weighted - rep.value).abs() < 1e-12);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[false, true, false, false]), Some(0.5));
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
        // Equal scores keep sample order: positive at index 1 is rank 2.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn perfect_scores_give_one() {
        let l = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(mean_average_precision(&l, &l).unwrap().map, 1.0);
    }

    #[test]
    fn classes_without_positives_are_excluded() {
        let s = Tensor::new(&[2, 2], vec![0.3, 0.2, 0.1, 0.4]).unwrap();
        let l = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = mean_average_precision(&s, &l).unwrap();
        assert_eq!(r.excluded(), vec![1]);
        assert_eq!(r.map, 0.5);
        assert!(mean_average_precision(&s, &Tensor::zeros(&[2, 2])).is_err());
    }
}
