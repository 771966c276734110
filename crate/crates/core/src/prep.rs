//! Turns a frame plus its regions into a [`Sample`] of square crops.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::augment::{Sample, SampleMeta};
use crate::dataio::{DatasetIndex, FrameRecord};
use crate::error::{GazeError, Result};
use crate::geometry::{
    self, eye_rects_with_expand, face_rect_from_landmarks, fit_min_area_rect, make_face_grid,
    rotate_point, LandmarkSet, OrientedRect, PixelRect, DEFAULT_EYE_EXPAND, DEFAULT_FACE_EXPAND,
    DEFAULT_GRID,
};

/// Where face and eye regions come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSource {
    /// Rectangles stored in the dataset metadata.
    #[default]
    Detections,
    /// Rectangles derived from 68-point landmarks, optionally after rotation correction.
    Landmarks { rotation_correct: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub regions: RegionSource,
    pub crop_size: u32,
    pub grid_size: usize,
    pub eye_expand: f64,
    pub face_expand: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            regions: RegionSource::Detections,
            crop_size: 256,
            grid_size: DEFAULT_GRID,
            eye_expand: DEFAULT_EYE_EXPAND,
            face_expand: DEFAULT_FACE_EXPAND,
        }
    }
}

/// Regions resolved against a (possibly rotation-corrected) frame.
#[derive(Debug, Clone)]
pub struct Regions {
    pub image: RgbImage,
    pub face: PixelRect,
    pub left_eye: PixelRect,
    pub right_eye: PixelRect,
    /// Grid rectangle in the original frame.
    pub grid_rect: OrientedRect,
    pub head_angle: f64,
}

pub fn regions_from_landmarks(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    rotation_correct: bool,
    cfg: &PrepConfig,
) -> Result<Regions> {
    if rotation_correct {
        let fit = fit_min_area_rect(landmarks)?;
        let angle = fit.angle;
        let (corrected, lm) = geometry::rotation_correct(image, landmarks, angle)?;
        let face = face_rect_from_landmarks(&lm, cfg.face_expand);
        let (left_eye, right_eye) = eye_rects_with_expand(&lm, cfg.eye_expand);
        let grid_rect = OrientedRect {
            center: rotate_point(face.center(), angle, fit.center),
            size: (face.w, face.h),
            angle,
        };
        Ok(Regions {
            image: corrected,
            face,
            left_eye,
            right_eye,
            grid_rect,
            head_angle: angle,
        })
    } else {
        let face = face_rect_from_landmarks(landmarks, cfg.face_expand);
        let (left_eye, right_eye) = eye_rects_with_expand(landmarks, cfg.eye_expand);
        Ok(Regions {
            image: image.clone(),
            face,
            left_eye,
            right_eye,
            grid_rect: OrientedRect::axis_aligned(&face),
            head_angle: 0.0,
        })
    }
}

pub fn sample_from_regions(regions: &Regions, frame_size: (u32, u32), gaze_cm: [f64; 2], meta: SampleMeta, cfg: &PrepConfig) -> Result<Sample> {
    let crop = |r: &PixelRect| geometry::crop_roi(&regions.image, r, cfg.crop_size);
    Ok(Sample {
        left_eye: crop(&regions.left_eye)?,
        right_eye: crop(&regions.right_eye)?,
        face: crop(&regions.face)?,
        grid: make_face_grid(frame_size, &regions.grid_rect, cfg.grid_size),
        gaze_cm,
        meta,
    })
}

/// Builds a sample for one catalog record, reading the frame (and landmarks if needed).
pub fn prepare_record(index: &DatasetIndex, record: &FrameRecord, cfg: &PrepConfig) -> Result<Sample> {
    let image = index.read_frame(record)?;
    let frame_size = record.frame_size.unwrap_or(image.dimensions());
    let meta = SampleMeta {
        subject_id: record.subject_id.clone(),
        frame_id: record.id(),
        mirrored: false,
    };
    let regions = match cfg.regions {
        RegionSource::Detections => Regions {
            face: record.face_rect,
            left_eye: record.left_eye_rect,
            right_eye: record.right_eye_rect,
            grid_rect: OrientedRect::axis_aligned(&record.face_rect),
            head_angle: 0.0,
            image,
        },
        RegionSource::Landmarks { rotation_correct } => {
            let rel = record.landmarks_path.as_ref().ok_or_else(|| {
                GazeError::InvalidLandmarks(format!("frame {} has no landmark file", record.id()))
            })?;
            let lm = LandmarkSet::load(&index.absolute(rel), frame_size)?;
            regions_from_landmarks(&image, &lm, rotation_correct, cfg)?
        }
    };
    sample_from_regions(&regions, frame_size, record.gaze_cm, meta, cfg)
}
