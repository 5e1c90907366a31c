//! Spearman rank correlation and classification accuracy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs at least 2 pairs, got {}",
            preds.len()
        )));
    }
    if preds.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    pearson(&average_ranks(preds), &average_ranks(targets))
}

pub fn accuracy(pred_classes: &[usize], target_classes: &[usize]) -> Result<f64> {
    if pred_classes.len() != target_classes.len() {
        return Err(Error::LengthMismatch(pred_classes.len(), target_classes.len()));
    }
    if pred_classes.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero samples".into()));
    }
    let hits = pred_classes.iter().zip(target_classes).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred_classes.len() as f64)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Spearman,
    Accuracy,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Spearman => "spearman",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: MetricKind,
    pub value: f64,
    pub count: usize,
    pub split: String,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.metric {
            MetricKind::Spearman => write!(f, "{} spearman {:.6} (n={})", self.split, self.value, self.count),
            MetricKind::Accuracy => write!(
                f,
                "{} accuracy {:.6} ({:.2}%, n={})",
                self.split,
                self.value,
                100.0 * self.value,
                self.count
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
    fn oracle_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let eq = v.iter().filter(|&&b| b == a).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    fn oracle(x: &[f64], y: &[f64]) -> Option<f64> {
        let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
        let n = x.len() as f64;
        let cov = rx.iter().zip(&ry).map(|(a, b)| a * b).sum::<f64>() / n - (n + 1.0).powi(2) / 4.0;
        let vx = rx.iter().map(|a| a * a).sum::<f64>() / n - (n + 1.0).powi(2) / 4.0;
        let vy = ry.iter().map(|a| a * a).sum::<f64>() / n - (n + 1.0).powi(2) / 4.0;
        (vx > 1e-12 && vy > 1e-12).then(|| cov / (vx * vy).sqrt())
    }

    #[test]
    fn monotone_and_reversed() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn tied_example_matches_oracle() {
        let (x, y) = ([1.0, 1.0, 2.0], [0.3, 0.7, 0.9]);
        assert_eq!(average_ranks(&x), vec![1.5, 1.5, 3.0]);
        let want = oracle(&x, &y).unwrap();
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 0.866_025_403_784_438_6, epsilon = 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        let err = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("undefined correlation"));
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn exhaustive_small_n() {
        for n in 2..=4usize {
            let all: Vec<Vec<f64>> = (0..n.pow(n as u32))
                .map(|mut code| {
                    (0..n)
                        .map(|_| {
                            let d = code % n;
                            code /= n;
                            d as f64
                        })
                        .collect()
                })
                .collect();
            for x in &all {
                for y in &all {
                    match oracle(x, y) {
                        Some(want) => assert_abs_diff_eq!(spearman(x, y).unwrap(), want, epsilon = 1e-12),
                        None => assert!(spearman(x, y).is_err()),
                    }
                }
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_maps_and_symmetric(
            x in proptest::collection::vec(-5i32..5, 3..20),
            seed in proptest::collection::vec(-3.0f64..3.0, 20),
        ) {
            let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
            let y: Vec<f64> = seed[..x.len()].to_vec();
            prop_assume!(oracle(&x, &y).is_some());
            let base = spearman(&x, &y).unwrap();
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let ay: Vec<f64> = y.iter().map(|v| 2.5 * v - 7.0).collect();
            prop_assert!((spearman(&ex, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&x, &ay).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&y, &x).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
