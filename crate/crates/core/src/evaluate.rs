//! Eval-mode scoring of a model over a dataset.
//!
//! Global metrics come from confusion counts summed over every pixel of every
//! image; per-image metrics are averaged separately. The ROC polyline is
//! written next to the JSON report as `<report>.roc.csv`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{Dataset, SynthSpec};
use crate::error::{shape_err, Error, Result};
use crate::fnt1;
use crate::metrics::{roc_auc, ConfusionCounts, Metrics, RocCurve};
use crate::model::{Model, ModelConfig};
use crate::par;
use crate::tensor::Tensor;

/// Bumped whenever a field of [`EvalReport`] changes meaning.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub index: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub schema: u32,
    pub threshold: f64,
    pub images: usize,
    pub pixels: u64,
    /// Metrics of the dataset-wide confusion counts.
    pub global: Metrics,
    pub counts: ConfusionCounts,
    /// Unweighted mean of the per-image metrics.
    pub per_image_mean: Metrics,
    /// `None` when the ground truth holds a single class.
    pub auc: Option<f64>,
    pub per_image: Vec<ImageScore>,
    /// Config echo; absent when scoring bare predictions.
    pub model: Option<ModelConfig>,
    pub data: Option<SynthSpec>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

/// Scores `model` on every image of `data`. Images are predicted
/// independently and merged in index order.
pub fn evaluate(model: &Model, data: &Dataset, threshold: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if !threshold.is_finite() || !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0, 1), got {threshold}"
        )));
    }
    data.check()?;
    model.check_input(data.images.shape())?;

    let preds: Vec<Result<Tensor>> = par::map_range(data.len(), |i| {
        model.predict(&data.images.batch_slice(i, 1)?, 1)
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let pred = Tensor::stack_batch(&preds)?;
    pred.ensure_finite("prediction")?;
    evaluate_predictions(&pred, &data.masks, threshold).map(|mut r| {
        r.model = Some(model.config.clone());
        r.data = Some(data.meta.spec.clone());
        r
    })
}

/// Scores precomputed `(N, 1, H, W)` probabilities against binary masks.
pub fn evaluate_predictions(pred: &Tensor, masks: &Tensor, threshold: f64) -> Result<EvalReport> {
    if pred.shape() != masks.shape() {
        return Err(shape_err!(
            "predictions {:?} vs masks {:?}",
            pred.shape(),
            masks.shape()
        ));
    }
    let n = pred.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let per = pred.len() / n;
    let mut counts = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let span = i * per..(i + 1) * per;
        let c = ConfusionCounts::from_masks(
            &masks.data()[span.clone()],
            &pred.data()[span],
            threshold,
        )?;
        counts.merge(&c);
        per_image.push(ImageScore {
            index: i,
            counts: c,
            metrics: Metrics::from_counts(&c),
        });
    }
    let means: Vec<Metrics> = per_image.iter().map(|s| s.metrics.clone()).collect();
    let roc = match roc_auc(pred.data(), masks.data()) {
        Ok(r) => Some(r),
        Err(Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        schema: REPORT_SCHEMA,
        threshold,
        images: n,
        pixels: counts.total(),
        global: Metrics::from_counts(&counts),
        counts,
        per_image_mean: Metrics::mean(&means),
        auc: roc.as_ref().map(|r| r.auc),
        per_image,
        model: None,
        data: None,
        roc,
    })
}

/// Path of the ROC CSV that accompanies `report_path`.
pub fn roc_path(report_path: &Path) -> PathBuf {
    let mut name = report_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".roc.csv");
    report_path.with_file_name(name)
}

/// Writes the JSON report and, when defined, the ROC CSV.
pub fn write_report(report: &EvalReport, report_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    if let Some(roc) = &report.roc {
        fnt1::write_atomic(&roc_path(report_path), roc.to_csv().as_bytes())?;
    }
    fnt1::write_atomic(report_path, json.as_bytes())
}
