//! Dataset ingestion in the per-subject directory layout, and the two
//! subject-level split policies.
//!
//! Layout: `<root>/<subject>/meta.json` with
//!
//! ```json
//! {
//!   "sessionComplete": true,
//!   "split": "train",
//!   "frames": [
//!     { "file": "frames/00000.png", "faceValid": true, "eyesValid": true,
//!       "faceRect": [x, y, w, h], "leftEyeRect": [x, y, w, h],
//!       "rightEyeRect": [x, y, w, h], "gazeCm": [x, y], "device": "phone",
//!       "frameSize": [640, 480], "landmarks": "landmarks/00000.json" }
//!   ]
//! }
//! ```
//!
//! `leftEyeRect` is the eye with the smaller image x. Paths are relative to
//! the subject directory. `frameSize` and `landmarks` are optional.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::geometry::PixelRect;
use crate::rng;

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Test];
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeviceClass {
    #[default]
    Phone,
    Tablet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameMeta {
    pub file: String,
    pub face_valid: bool,
    pub eyes_valid: bool,
    pub face_rect: [f64; 4],
    pub left_eye_rect: [f64; 4],
    pub right_eye_rect: [f64; 4],
    pub gaze_cm: [f64; 2],
    #[serde(default)]
    pub device: DeviceClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_size: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubjectMeta {
    pub session_complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Part>,
    pub frames: Vec<FrameMeta>,
}

impl SubjectMeta {
    pub fn write(&self, subject_dir: &Path) -> Result<()> {
        let path = subject_dir.join(META_FILE);
        let text = serde_json::to_string_pretty(self).expect("metadata serializes");
        std::fs::write(&path, text).map_err(|e| GazeError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub subject_id: String,
    /// Relative to the dataset root.
    pub frame_path: PathBuf,
    pub face_valid: bool,
    pub eyes_valid: bool,
    pub face_rect: PixelRect,
    pub left_eye_rect: PixelRect,
    pub right_eye_rect: PixelRect,
    pub gaze_cm: [f64; 2],
    pub device_class: DeviceClass,
    pub session_complete: bool,
    pub frame_size: Option<(u32, u32)>,
    pub landmarks_path: Option<PathBuf>,
}

impl FrameRecord {
    /// Stable identifier used in diagnostics and reports.
    pub fn id(&self) -> String {
        self.frame_path.to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub session_complete: bool,
    pub provided_split: Option<Part>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<FrameRecord>,
    pub subjects: BTreeMap<String, Vec<usize>>,
    pub subject_info: BTreeMap<String, SubjectInfo>,
    pub source_root: PathBuf,
}

fn clip_rect(rect: PixelRect, frame: Option<(u32, u32)>) -> Option<PixelRect> {
    if !(rect.w > 0.0 && rect.h > 0.0) || rect.to_array().iter().any(|v| !v.is_finite()) {
        return None;
    }
    match frame {
        Some(f) => rect.clipped(f),
        None => Some(rect),
    }
}

/// Builds the frame catalog. Only frames with both validity flags set are kept.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let entries = std::fs::read_dir(root).map_err(|e| GazeError::io(root, e))?;
    let mut subject_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| GazeError::io(root, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() && !name.starts_with('.') {
            subject_dirs.push((name, path));
        }
    }
    subject_dirs.sort();

    let mut index = DatasetIndex {
        records: Vec::new(),
        subjects: BTreeMap::new(),
        subject_info: BTreeMap::new(),
        source_root: root.to_path_buf(),
    };
    let mut seen = HashSet::new();
    for (subject, dir) in subject_dirs {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| GazeError::Metadata {
            subject: subject.clone(),
            reason: format!("{}: {e}", meta_path.display()),
        })?;
        let meta: SubjectMeta = serde_json::from_str(&text).map_err(|e| GazeError::Metadata {
            subject: subject.clone(),
            reason: format!("corrupt {}: {e}", META_FILE),
        })?;
        index.subject_info.insert(
            subject.clone(),
            SubjectInfo {
                session_complete: meta.session_complete,
                provided_split: meta.split,
            },
        );
        let mut ids = Vec::new();
        for frame in meta.frames {
            if !(frame.face_valid && frame.eyes_valid) {
                continue;
            }
            let bad = |what: &str| GazeError::Metadata {
                subject: subject.clone(),
                reason: format!("frame {}: {what}", frame.file),
            };
            if !(frame.gaze_cm[0].is_finite() && frame.gaze_cm[1].is_finite()) {
                return Err(bad("non-finite gaze label"));
            }
            let frame_size = frame.frame_size.map(|[w, h]| (w, h));
            let rect = |r: [f64; 4], what: &str| {
                clip_rect(PixelRect::from_array(r), frame_size)
                    .ok_or_else(|| bad(&format!("{what} has no area inside the frame")))
            };
            let record = FrameRecord {
                subject_id: subject.clone(),
                frame_path: Path::new(&subject).join(&frame.file),
                face_valid: true,
                eyes_valid: true,
                face_rect: rect(frame.face_rect, "faceRect")?,
                left_eye_rect: rect(frame.left_eye_rect, "leftEyeRect")?,
                right_eye_rect: rect(frame.right_eye_rect, "rightEyeRect")?,
                gaze_cm: frame.gaze_cm,
                device_class: frame.device,
                session_complete: meta.session_complete,
                frame_size,
                landmarks_path: frame.landmarks.as_ref().map(|l| Path::new(&subject).join(l)),
            };
            if !seen.insert(record.frame_path.clone()) {
                return Err(bad("duplicate frame path"));
            }
            ids.push(index.records.len());
            index.records.push(record);
        }
        index.subjects.insert(subject, ids);
    }
    Ok(index)
}

impl DatasetIndex {
    pub fn subject_ids(&self) -> impl Iterator<Item = &String> {
        self.subjects.keys()
    }

    /// Split labels shipped in the per-subject metadata.
    pub fn provided_labels(&self) -> BTreeMap<String, Part> {
        self.subject_info
            .iter()
            .filter_map(|(s, info)| info.provided_split.map(|p| (s.clone(), p)))
            .collect()
    }

    pub fn absolute(&self, rel: &Path) -> PathBuf {
        self.source_root.join(rel)
    }

    /// Decodes the frame image of `record`.
    pub fn read_frame(&self, record: &FrameRecord) -> Result<image::RgbImage> {
        let path = self.absolute(&record.frame_path);
        let img = image::open(&path).map_err(|e| GazeError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(img.to_rgb8())
    }

    /// Record indices of `part`, in on-disk order.
    pub fn part_records(&self, split: &SplitAssignment, part: Part) -> Vec<usize> {
        let subjects = split.subjects(part);
        self.subjects
            .iter()
            .filter(|(s, _)| subjects.contains(*s))
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    /// Provided labels; evaluation parts restricted to complete sessions.
    Strict,
    /// Seeded subject shuffle partitioned 70/20/10.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub policy: SplitPolicy,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: Option<u64>,
}

impl SplitAssignment {
    pub fn subjects(&self, part: Part) -> &BTreeSet<String> {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    pub fn part_of(&self, subject: &str) -> Option<Part> {
        Part::ALL
            .into_iter()
            .find(|&p| self.subjects(p).contains(subject))
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Keeps the shipped labels but moves incomplete-session subjects out of
/// validation and test into training.
pub fn split_strict(
    index: &DatasetIndex,
    provided_labels: &BTreeMap<String, Part>,
) -> Result<SplitAssignment> {
    let missing: Vec<String> = index
        .subject_ids()
        .filter(|s| !provided_labels.contains_key(*s))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(GazeError::MissingSplitLabels(missing));
    }
    let mut split = SplitAssignment {
        policy: SplitPolicy::Strict,
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
        seed: None,
    };
    for subject in index.subject_ids() {
        let complete = index.subject_info[subject].session_complete;
        let part = match provided_labels[subject] {
            Part::Train => Part::Train,
            p if complete => p,
            _ => Part::Train,
        };
        match part {
            Part::Train => split.train.insert(subject.clone()),
            Part::Val => split.val.insert(subject.clone()),
            Part::Test => split.test.insert(subject.clone()),
        };
    }
    Ok(split)
}

pub const RELAXED_RATIOS: [f64; 3] = [0.70, 0.20, 0.10];

/// Seeded subject-level partition by `ratios` (train, val, test); rounding
/// remainders go to train.
pub fn split_relaxed(index: &DatasetIndex, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(GazeError::BadRatios(sum));
    }
    let mut subjects: Vec<String> = index.subject_ids().cloned().collect();
    subjects.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT]));
    let n = subjects.len() as f64;
    let n_val = (n * ratios[1] + 1e-9).floor() as usize;
    let n_test = (n * ratios[2] + 1e-9).floor() as usize;
    let mut split = SplitAssignment {
        policy: SplitPolicy::Relaxed,
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
        seed: Some(seed),
    };
    for (i, s) in subjects.into_iter().enumerate() {
        if i < n_val {
            split.val.insert(s);
        } else if i < n_val + n_test {
            split.test.insert(s);
        } else {
            split.train.insert(s);
        }
    }
    Ok(split)
}

/// Partitions `0..n` into batches, optionally in a seeded shuffled order.
/// The last batch may be partial.
pub fn batch_order(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE]));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One epoch over `part` as batches of records.
pub fn iterate<'a>(
    index: &'a DatasetIndex,
    split: &SplitAssignment,
    part: Part,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&'a FrameRecord>> + 'a> {
    if batch_size == 0 {
        return Err(GazeError::Config("batch_size must be at least 1".into()));
    }
    let ids = index.part_records(split, part);
    let batches = batch_order(ids.len(), batch_size, shuffle, seed);
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &index.records[ids[i]]).collect()))
}
