//! Thresholded segmentation metrics and ROC analysis.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};

/// Default binarisation threshold; a prediction counts as foreground only if
/// it is strictly greater.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(target: &[f64], pred: &[f64], threshold: f64) -> Result<Self> {
        if target.len() != pred.len() {
            return Err(shape_err!(
                "metrics: {} targets vs {} predictions",
                target.len(),
                pred.len()
            ));
        }
        let mut c = ConfusionCounts::default();
        for (&t, &p) in target.iter().zip(pred) {
            let truth = if t == 1.0 {
                true
            } else if t == 0.0 {
                false
            } else {
                return Err(Error::Data(format!(
                    "ground truth must be binary, found {t}"
                )));
            };
            match (truth, p > threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero; their value is reported as 0.
    pub undefined: Vec<&'static str>,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |name: &'static str, num: f64, den: f64| {
            if den == 0.0 {
                undefined.push(name);
                0.0
            } else {
                num / den
            }
        };
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fn_);
        let accuracy = ratio("accuracy", tp + tn, tp + fp + fn_ + tn);
        let dice = ratio("dice", 2.0 * tp, 2.0 * tp + fp + fn_);
        let jaccard = ratio("jaccard", tp, tp + fp + fn_);
        let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
        Metrics {
            precision,
            recall,
            accuracy,
            dice,
            jaccard,
            f1,
            undefined,
        }
    }

    /// Element-wise mean of several metric sets; a name is undefined in the
    /// mean if it was undefined in any input.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mut undefined: Vec<&'static str> = items
            .iter()
            .flat_map(|m| m.undefined.iter().copied())
            .collect();
        undefined.sort_unstable();
        undefined.dedup();
        Metrics {
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            accuracy: avg(|m| m.accuracy),
            dice: avg(|m| m.dice),
            jaccard: avg(|m| m.jaccard),
            f1: avg(|m| m.f1),
            undefined,
        }
    }
}

pub fn metrics(target: &[f64], pred: &[f64], threshold: f64) -> Result<Metrics> {
    Ok(Metrics::from_counts(&ConfusionCounts::from_masks(
        target, pred, threshold,
    )?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (x, y) in &self.points {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

/// AUC as the fraction of positive/negative pairs ranked correctly, ties
/// counting one half (Mann-Whitney with mid-ranks).
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(shape_err!(
            "roc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.iter().filter(|&&l| l == 0.0).count();
    if pos + neg != labels.len() {
        return Err(Error::Data("roc labels must be binary".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "roc needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ascending pass for mid-ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum_pos += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);

    // Descending sweep for the curve.
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = order.len();
    while i > 0 {
        let s = scores[order[i - 1]];
        while i > 0 && scores[order[i - 1]] == s {
            if labels[order[i - 1]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(RocCurve { auc, points })
}
