//! Euclidean error metrics and evaluation reports.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{eval_sample, AugmentConfig, ImageSizes, Sample};
use crate::dataio::Part;
use crate::error::{GazeError, Result};
use crate::model::{batch_from_samples, GazeModel};

pub const HISTOGRAM_BIN_CM: f64 = 0.5;
pub const HEATMAP_CELL_CM: f64 = 1.0;

pub fn euclidean_error(pred: [f64; 2], truth: [f64; 2]) -> f64 {
    let dx = pred[0] - truth[0];
    let dy = pred[1] - truth[1];
    (dx * dx + dy * dy).sqrt()
}

/// Row-wise Euclidean distance between two (N, 2) arrays.
pub fn euclidean_errors(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if pred.dim() != truth.dim() || pred.ncols() != 2 {
        return Err(GazeError::Shape {
            field: "pred".into(),
            reason: format!("{:?} vs truth {:?}, both must be (N, 2)", pred.dim(), truth.dim()),
        });
    }
    let d = &pred - &truth;
    Ok((&d * &d).sum_axis(ndarray::Axis(1)).mapv(f64::sqrt))
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn pairwise_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(v) / v.len() as f64
}

/// Hex SHA-256 of the JSON form of a config.
pub fn fingerprint<S: Serialize>(config: &S) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_cm: f64,
    /// `counts[i]` covers `[i*w, (i+1)*w)`.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bin_width_cm: f64) -> Self {
        let max = values.iter().copied().fold(0.0f64, f64::max);
        let bins = ((max / bin_width_cm).floor() as usize) + 1;
        let mut counts = vec![0; bins];
        for v in values {
            counts[((v / bin_width_cm).floor() as usize).min(bins - 1)] += 1;
        }
        Self { bin_width_cm, counts }
    }
}

/// Mean error over a regular grid of ground-truth positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub cell_cm: f64,
    pub x0: f64,
    pub y0: f64,
    /// `mean_error_cm[row][col]`, row index along y. Empty cells are `None`.
    pub mean_error_cm: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl Heatmap {
    pub fn new(truths: &[[f64; 2]], errors: &[f64], cell_cm: f64) -> Self {
        if truths.is_empty() {
            return Self {
                cell_cm,
                x0: 0.0,
                y0: 0.0,
                mean_error_cm: vec![],
                counts: vec![],
            };
        }
        let fold = |k: usize, f: fn(f64, f64) -> f64, init: f64| truths.iter().map(|t| t[k]).fold(init, f);
        let x0 = (fold(0, f64::min, f64::INFINITY) / cell_cm).floor() * cell_cm;
        let y0 = (fold(1, f64::min, f64::INFINITY) / cell_cm).floor() * cell_cm;
        let nx = ((fold(0, f64::max, f64::NEG_INFINITY) - x0) / cell_cm).floor() as usize + 1;
        let ny = ((fold(1, f64::max, f64::NEG_INFINITY) - y0) / cell_cm).floor() as usize + 1;
        let mut sums = vec![vec![Vec::new(); nx]; ny];
        for (t, e) in truths.iter().zip(errors) {
            let c = (((t[0] - x0) / cell_cm).floor() as usize).min(nx - 1);
            let r = (((t[1] - y0) / cell_cm).floor() as usize).min(ny - 1);
            sums[r][c].push(*e);
        }
        Self {
            cell_cm,
            x0,
            y0,
            mean_error_cm: sums
                .iter()
                .map(|row| row.iter().map(|v| (!v.is_empty()).then(|| pairwise_mean(v))).collect())
                .collect(),
            counts: sums.iter().map(|row| row.iter().map(Vec::len).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Part,
    pub config_fingerprint: String,
    pub n: usize,
    pub mean_error_cm: f64,
    pub frame_ids: Vec<String>,
    pub predictions_cm: Vec<[f64; 2]>,
    pub truths_cm: Vec<[f64; 2]>,
    pub per_sample_error_cm: Vec<f64>,
    pub histogram: Histogram,
    pub heatmap: Heatmap,
}

impl EvalReport {
    pub fn from_predictions(
        split: Part,
        config_fingerprint: String,
        frame_ids: Vec<String>,
        predictions_cm: Vec<[f64; 2]>,
        truths_cm: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if predictions_cm.is_empty() {
            return Err(GazeError::EmptySplit(format!("{split} split has no frames")));
        }
        let errors: Vec<f64> = predictions_cm
            .iter()
            .zip(&truths_cm)
            .map(|(p, t)| euclidean_error(*p, *t))
            .collect();
        Ok(Self {
            split,
            config_fingerprint,
            n: errors.len(),
            mean_error_cm: pairwise_mean(&errors),
            histogram: Histogram::new(&errors, HISTOGRAM_BIN_CM),
            heatmap: Heatmap::new(&truths_cm, &errors, HEATMAP_CELL_CM),
            frame_ids,
            predictions_cm,
            truths_cm,
            per_sample_error_cm: errors,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Predictions for prepared (crop-size) samples, in chunks of `batch_size`.
pub fn predict_samples(
    model: &GazeModel<f32>,
    samples: &[Sample],
    aug: &AugmentConfig,
    sizes: ImageSizes,
    batch_size: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let resized: Vec<Sample> = chunk.iter().map(|s| eval_sample(s, sizes)).collect::<Result<_>>()?;
        let batch = batch_from_samples(&resized, aug);
        let pred = model.predict(&batch)?;
        out.extend(pred.rows().into_iter().map(|r| [r[0] as f64, r[1] as f64]));
    }
    Ok(out)
}

pub fn mean_error(
    model: &GazeModel<f32>,
    samples: &[Sample],
    aug: &AugmentConfig,
    sizes: ImageSizes,
    batch_size: usize,
) -> Result<f64> {
    let preds = predict_samples(model, samples, aug, sizes, batch_size)?;
    let errors: Vec<f64> = preds.iter().zip(samples).map(|(p, s)| euclidean_error(*p, s.gaze_cm)).collect();
    Ok(pairwise_mean(&errors))
}

pub fn evaluate(
    model: &GazeModel<f32>,
    samples: &[Sample],
    split: Part,
    aug: &AugmentConfig,
    sizes: ImageSizes,
    config_fingerprint: String,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(GazeError::EmptySplit(format!("{split} split has no frames")));
    }
    let preds = predict_samples(model, samples, aug, sizes, 64)?;
    EvalReport::from_predictions(
        split,
        config_fingerprint,
        samples.iter().map(|s| s.meta.frame_id.clone()).collect(),
        preds,
        samples.iter().map(|s| s.gaze_cm).collect(),
    )
}

/// One row of an ablation table: mean error per split policy and part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: u32,
    pub description: String,
    pub seed: u64,
    pub strict_val_cm: Option<f64>,
    pub strict_test_cm: Option<f64>,
    pub relaxed_val_cm: Option<f64>,
    pub relaxed_test_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        let mut out = String::from(
            "experiment,description,seed,gazecapture_val,gazecapture_test,gazecapture_star_val,gazecapture_star_test\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},\"{}\",{},{},{},{},{}\n",
                r.experiment,
                r.description.replace('"', "'"),
                r.seed,
                f(r.strict_val_cm),
                f(r.strict_test_cm),
                f(r.relaxed_val_cm),
                f(r.relaxed_test_cm)
            ));
        }
        out
    }

    /// Per-experiment mean and sample standard deviation of `column` over seeds.
    pub fn summary(&self, column: impl Fn(&AblationRow) -> Option<f64>) -> BTreeMap<u32, (f64, f64, usize)> {
        let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if let Some(v) = column(r) {
                groups.entry(r.experiment).or_default().push(v);
            }
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let m = pairwise_mean(&v);
                let sd = if v.len() > 1 {
                    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                (k, (m, sd, v.len()))
            })
            .collect()
    }
}
