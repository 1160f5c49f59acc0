//! Positive-weighted sigmoid cross entropy and the multi-label evaluation
//! metrics: label-based mean accuracy (mA) and example-based accuracy,
//! precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::tensor_autodiff::sigmoid;

/// Binary label matrix, one row per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: Vec<Vec<u8>>,
    num_attributes: usize,
}

impl LabelMatrix {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(LgError::InvalidArgument("label matrix needs at least one row".into()));
        };
        let a = first.len();
        if rows.iter().any(|r| r.len() != a) {
            return Err(LgError::shape("LabelMatrix", "ragged label rows"));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(LgError::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(LabelMatrix {
            rows,
            num_attributes: a,
        })
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    /// Fraction of positive samples per attribute.
    pub fn positive_ratio(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.num_attributes)
            .map(|i| self.rows.iter().filter(|r| r[i] == 1).count() as f64 / n)
            .collect()
    }
}

/// `exp((1 - p_c) / sigma^2)` for each attribute.
pub fn positive_weights(positive_ratio: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if let Some(p) = positive_ratio.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LgError::InvalidArgument(format!(
            "positive ratio {p} outside [0, 1]"
        )));
    }
    if !(sigma > 0.0) {
        return Err(LgError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(positive_ratio.iter().map(|p| ((1.0 - p) / s2).exp()).collect())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss and gradient with the positive weights already computed.
pub(crate) fn weighted_sigmoid_ce_weighted(
    logits: &[f64],
    labels: &[f64],
    pos_weights: &[f64],
) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(pos_weights) {
        // -log s(z) = softplus(-z), -log(1 - s(z)) = softplus(z)
        loss += w * y * softplus(-z) + (1.0 - y) * softplus(z);
        let s = sigmoid(z);
        grad.push((w * y * (s - 1.0) + (1.0 - y) * s) / n);
    }
    (loss / n, grad)
}

/// Weighted sigmoid cross entropy averaged over attributes, with its
/// gradient with respect to the logits.
pub fn weighted_sigmoid_ce(
    logits: &[f64],
    labels: &[f64],
    positive_ratio: &[f64],
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.len() != positive_ratio.len() {
        return Err(LgError::shape(
            "weighted_sigmoid_ce",
            format!(
                "{} logits, {} labels, {} ratios",
                logits.len(),
                labels.len(),
                positive_ratio.len()
            ),
        ));
    }
    if logits.is_empty() {
        return Err(LgError::shape("weighted_sigmoid_ce", "no attributes"));
    }
    let w = positive_weights(positive_ratio, sigma)?;
    Ok(weighted_sigmoid_ce_weighted(logits, labels, &w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mA")]
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per-attribute `(TPR + TNR) / 2`.
    pub per_attribute_ma: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Self> {
        let per_attribute_ma = per_attribute_accuracy(scores, labels, threshold)?;
        let ma = per_attribute_ma.iter().sum::<f64>() / per_attribute_ma.len() as f64;
        let ex = example_based_metrics(scores, labels, threshold)?;
        Ok(MetricsReport {
            ma,
            accuracy: ex.accuracy,
            precision: ex.precision,
            recall: ex.recall,
            f1: ex.f1,
            per_attribute_ma,
        })
    }

    /// `mA Acc Prec Rec F1` as percentages, tab separated.
    pub fn tsv_row(&self) -> String {
        format!(
            "{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.ma * 100.0,
            self.accuracy * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
            self.f1 * 100.0
        )
    }

    pub const TSV_HEADER: &'static str = "mA\tAcc\tPrec\tRec\tF1";
}

fn check_matrices(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<usize> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(LgError::shape(
            "metrics",
            format!("{} score rows vs {} label rows", scores.len(), labels.len()),
        ));
    }
    let a = labels[0].len();
    if a == 0 || scores.iter().any(|r| r.len() != a) || labels.iter().any(|r| r.len() != a) {
        return Err(LgError::shape("metrics", "ragged or empty rows"));
    }
    Ok(a)
}

fn predicted(score: f64, threshold: f64) -> bool {
    sigmoid(score) > threshold
}

/// `(TPR_i + TNR_i) / 2` per attribute. A side with no samples in the split
/// contributes a rate of 0 and logs a warning.
pub fn per_attribute_accuracy(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    threshold: f64,
) -> Result<Vec<f64>> {
    let a = check_matrices(scores, labels)?;
    let mut out = Vec::with_capacity(a);
    for i in 0..a {
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (s, y) in scores.iter().zip(labels) {
            let p = predicted(s[i], threshold);
            if y[i] == 1 {
                pos += 1;
                tp += p as usize;
            } else {
                neg += 1;
                tn += (!p) as usize;
            }
        }
        let tpr = if pos == 0 {
            log::warn!("attribute {i} has no positive samples; TPR taken as 0");
            0.0
        } else {
            tp as f64 / pos as f64
        };
        let tnr = if neg == 0 {
            log::warn!("attribute {i} has no negative samples; TNR taken as 0");
            0.0
        } else {
            tn as f64 / neg as f64
        };
        out.push(0.5 * (tpr + tnr));
    }
    Ok(out)
}

/// Label-based mean accuracy over attributes.
pub fn mean_accuracy(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    let per = per_attribute_accuracy(scores, labels, threshold)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Example-based metrics. Per-sample conventions for empty sets: accuracy 1
/// when both sets are empty, precision 0 when nothing is predicted, recall 1
/// when nothing is true. F1 is the harmonic mean of the averaged precision and
/// recall.
pub fn example_based_metrics(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    threshold: f64,
) -> Result<ExampleMetrics> {
    check_matrices(scores, labels)?;
    let n = scores.len() as f64;
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (s, y) in scores.iter().zip(labels) {
        let (mut inter, mut union, mut npred, mut ntrue) = (0usize, 0usize, 0usize, 0usize);
        for (&si, &yi) in s.iter().zip(y) {
            let p = predicted(si, threshold);
            let t = yi == 1;
            inter += (p && t) as usize;
            union += (p || t) as usize;
            npred += p as usize;
            ntrue += t as usize;
        }
        acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prec += if npred == 0 { 0.0 } else { inter as f64 / npred as f64 };
        rec += if ntrue == 0 { 1.0 } else { inter as f64 / ntrue as f64 };
    }
    let (accuracy, precision, recall) = (acc / n, prec / n, rec / n);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ExampleMetrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn unweighted_positive_at_zero_logit() {
        let (l, _) = weighted_sigmoid_ce(&[0.0], &[1.0], &[1.0], 1.0).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn negatives_are_unweighted() {
        for p in [0.0, 0.1, 0.5, 1.0] {
            let (l, _) = weighted_sigmoid_ce(&[0.0], &[0.0], &[p], 1.0).unwrap();
            assert!((l - LN2).abs() < 1e-12);
        }
    }

    #[test]
    fn half_ratio_weight() {
        // w = e^0.5 = 1.6487212707; term = w * ln 2
        let (l, _) = weighted_sigmoid_ce(&[0.0], &[1.0], &[0.5], 1.0).unwrap();
        assert!((l - 1.142_806_500_315).abs() < 1e-9, "{l}");
        let w = positive_weights(&[0.5], 1.0).unwrap()[0];
        assert!((w - 1.648_721_270_700_128).abs() < 1e-12);
    }

    #[test]
    fn ratio_out_of_range_is_rejected() {
        assert!(weighted_sigmoid_ce(&[0.0], &[1.0], &[1.5], 1.0).is_err());
        assert!(weighted_sigmoid_ce(&[0.0], &[1.0], &[-0.1], 1.0).is_err());
    }

    #[test]
    fn stable_at_extreme_logits() {
        let (l, g) = weighted_sigmoid_ce(&[50.0, -50.0], &[0.0, 1.0], &[0.2, 0.2], 1.0).unwrap();
        assert!(l.is_finite() && l > 40.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    // direct formula with 1 - s(z) written as 1 / (1 + e^z)
    fn naive(z: f64, y: f64, w: f64) -> f64 {
        let s = 1.0 / (1.0 + (-z).exp());
        let not_s = 1.0 / (1.0 + z.exp());
        -(w * y * s.ln() + (1.0 - y) * not_s.ln())
    }

    #[test]
    fn stabilized_matches_naive_and_finite_differences() {
        let ratios = [0.3];
        let w = positive_weights(&ratios, 1.0).unwrap()[0];
        let mut z = -20.0;
        while z <= 20.0 {
            for y in [0.0, 1.0] {
                let (l, g) = weighted_sigmoid_ce(&[z], &[y], &ratios, 1.0).unwrap();
                assert!((l - naive(z, y, w)).abs() < 1e-9, "z={z} y={y}");
                let eps = 1e-6;
                let lp = weighted_sigmoid_ce(&[z + eps], &[y], &ratios, 1.0).unwrap().0;
                let lm = weighted_sigmoid_ce(&[z - eps], &[y], &ratios, 1.0).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (fd - g[0]).abs() / fd.abs().max(g[0].abs()).max(1e-8);
                // central differences lose relative precision once |g| drops below ~1e-6
                if g[0].abs() > 1e-6 {
                    assert!(rel < 1e-6, "z={z} y={y} rel={rel}");
                }
            }
            z += 0.25;
        }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let labels = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 0]];
        let good: Vec<Vec<f64>> = labels
            .iter()
            .map(|r| r.iter().map(|&v| if v == 1 { 3.0 } else { -3.0 }).collect())
            .collect();
        let bad: Vec<Vec<f64>> = good.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert_eq!(mean_accuracy(&good, &labels, 0.5).unwrap(), 1.0);
        assert_eq!(mean_accuracy(&bad, &labels, 0.5).unwrap(), 0.0);
        // the all-negative row predicts nothing, so its precision counts as 0
        let ex = example_based_metrics(&good, &labels, 0.5).unwrap();
        assert_eq!((ex.accuracy, ex.precision, ex.recall), (1.0, 0.75, 1.0));
    }

    #[test]
    fn hand_counted_mean_accuracy() {
        let labels = vec![vec![1], vec![1], vec![0], vec![0]];
        let scores = vec![vec![2.0], vec![-2.0], vec![-2.0], vec![-2.0]];
        assert_eq!(mean_accuracy(&scores, &labels, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn missing_side_counts_as_zero_rate() {
        let labels = vec![vec![1], vec![1]];
        let scores = vec![vec![2.0], vec![2.0]];
        assert_eq!(mean_accuracy(&scores, &labels, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn partial_prediction_set() {
        // Y = {0, 2}, P = {0}
        let labels = vec![vec![1, 0, 1]];
        let scores = vec![vec![1.0, -1.0, -1.0]];
        let ex = example_based_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(ex.accuracy, 0.5);
        assert_eq!(ex.precision, 1.0);
        assert_eq!(ex.recall, 0.5);
        assert!((ex.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_convention() {
        let labels = vec![vec![0, 0]];
        let scores = vec![vec![-1.0, -1.0]];
        let ex = example_based_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!((ex.accuracy, ex.precision, ex.recall), (1.0, 0.0, 1.0));
        assert_eq!(ex.f1, 0.0);
    }

    #[test]
    fn report_f1_matches_means() {
        let labels = vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 0]];
        let scores = vec![vec![1.0, 1.0, -1.0], vec![-1.0, 1.0, 1.0], vec![1.0, -1.0, -1.0]];
        let r = MetricsReport::compute(&scores, &labels, 0.5).unwrap();
        let expect = 2.0 * r.precision * r.recall / (r.precision + r.recall);
        assert!((r.f1 - expect).abs() < 1e-15);
        for v in [r.ma, r.accuracy, r.precision, r.recall, r.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn positive_ratio_counts_rows() {
        let m = LabelMatrix::new(vec![vec![1, 0], vec![1, 1], vec![0, 0], vec![1, 0]]).unwrap();
        assert_eq!(m.positive_ratio(), vec![0.75, 0.25]);
        assert!(LabelMatrix::new(vec![vec![2]]).is_err());
    }
}
