//! Single-frame inference: frame plus landmarks to a gaze point.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{eval_sample, AugmentConfig, ImageSizes, Sample, SampleMeta};
use crate::checkpoint;
use crate::error::{GazeError, Result};
use crate::geometry::LandmarkSet;
use crate::model::{batch_from_samples, GazeModel, ModelConfig};
use crate::prep::{regions_from_landmarks, sample_from_regions, PrepConfig, RegionSource};

/// Preprocessing a trained model expects at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub prep: PrepConfig,
    pub augment: AugmentConfig,
    pub sizes: ImageSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub fingerprint: String,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub parameter_count: usize,
    pub epochs_trained: usize,
}

pub struct Predictor {
    pub model: GazeModel<f32>,
    pub inference: InferenceConfig,
    fingerprint: String,
    epochs_trained: usize,
}

impl Predictor {
    pub fn new(model: GazeModel<f32>, inference: InferenceConfig, fingerprint: String) -> Self {
        Self {
            model,
            inference,
            fingerprint,
            epochs_trained: 0,
        }
    }

    /// Loads a checkpoint; its fingerprint is the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GazeError::io(path, e))?;
        let fingerprint = hex::encode(Sha256::digest(&bytes));
        let loaded = checkpoint::load::<f32>(path)?;
        let inference = loaded.inference.ok_or_else(|| {
            GazeError::Checkpoint(format!("{} carries no inference settings", path.display()))
        })?;
        Ok(Self {
            model: loaded.model,
            inference,
            fingerprint,
            epochs_trained: loaded.progress.epoch,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            fingerprint: self.fingerprint.clone(),
            model: self.model.config.clone(),
            inference: self.inference.clone(),
            parameter_count: self.model.parameter_count(),
            epochs_trained: self.epochs_trained,
        }
    }

    /// Crop-size sample for a frame. Detection-trained models get landmark
    /// rectangles without rotation correction.
    pub fn sample_for_frame(&self, image: &RgbImage, landmarks: &LandmarkSet) -> Result<Sample> {
        if landmarks.frame_size != image.dimensions() {
            return Err(GazeError::InvalidLandmarks(format!(
                "landmarks are for a {:?} frame, image is {:?}",
                landmarks.frame_size,
                image.dimensions()
            )));
        }
        let rc = match self.inference.prep.regions {
            RegionSource::Detections => false,
            RegionSource::Landmarks { rotation_correct } => rotation_correct,
        };
        let regions = regions_from_landmarks(image, landmarks, rc, &self.inference.prep)?;
        sample_from_regions(&regions, image.dimensions(), [0.0, 0.0], SampleMeta::default(), &self.inference.prep)
    }

    pub fn predict_sample(&self, sample: &Sample) -> Result<[f64; 2]> {
        let resized = eval_sample(sample, self.inference.sizes)?;
        let batch = batch_from_samples(std::slice::from_ref(&resized), &self.inference.augment);
        let out = self.model.predict(&batch)?;
        let p = [out[[0, 0]] as f64, out[[0, 1]] as f64];
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(GazeError::NonFinitePrediction);
        }
        Ok(p)
    }

    pub fn predict_frame(&self, image: &RgbImage, landmarks: &LandmarkSet) -> Result<[f64; 2]> {
        self.predict_sample(&self.sample_for_frame(image, landmarks)?)
    }
}
