//! Run configuration and the fourteen experiment presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ColorSpace, ImageSizes};
use crate::dataio::SplitPolicy;
use crate::error::{GazeError, Result};
use crate::model::{Backbone, FusionWidths, ModelConfig, Norm};
use crate::prep::{PrepConfig, RegionSource};
use crate::synthgen::SynthConfig;
use crate::train::{OptimizerChoice, ScheduleKind, TrainConfig};

pub const PRESET_COUNT: u32 = 14;

/// Resolution and width scale of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 256/240/224 crops, full-width trunks, 30 epochs.
    #[default]
    Full,
    /// 64/60/56 crops, narrow trunks and at most 15 epochs.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub split: SplitPolicy,
    pub split_seed: u64,
    /// Use at most this many frames per part (first in catalog order).
    pub max_frames_per_part: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            split: SplitPolicy::Strict,
            split_seed: 0,
            max_frames_per_part: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<u32>,
    pub profile: Profile,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub sizes: ImageSizes,
    pub prep: PrepConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

pub fn describe_preset(n: u32) -> Result<&'static str> {
    Ok(match n {
        1 => "AlexNet, RGB, [LRN, MIS], SGD",
        2 => "AlexNet, RGB, [BN, DR, MIS], SGD",
        3 => "AlexNet, RGB, [BN, DR], SGD",
        4 => "AlexNet, RGB, BN, DR, SGD, [RandCrop]",
        5 => "AlexNet, RGB, BN, DR, SGD, [RandCrop, Jitter]",
        6 => "AlexNet, RGB, BN, DR, [Adam], RandCrop, Jitter",
        7 => "AlexNet, RGB, BN, DR, [CLR], RandCrop, Jitter",
        8 => "AlexNet, [RGB, ISN], BN, DR, CLR, RandCrop, Jitter",
        9 => "AlexNet, [YCbCr], BN, DR, CLR, RandCrop, Jitter",
        10 => "[ResNet18-Frozen], YCbCr, BN, DR, CLR, RandCrop, Jitter",
        11 => "[ResNet18], YCbCr, BN, DR, CLR, RandCrop, Jitter",
        12 => "ResNet18, YCbCr, BN, DR, CLR, RandCrop, Jitter, [Landmarks]",
        13 => "ResNet18, YCbCr, BN, DR, CLR, RandCrop, Jitter, [Landmarks, RC]",
        14 => "ResNet18, YCbCr, BN, DR, CLR, [RandCrop, Jitter, Mirror], Landmarks, RC",
        _ => return Err(GazeError::UnknownPreset(n.to_string())),
    })
}

/// Experiment `n` of the enhancement ladder; each preset applies its delta
/// on top of the previous one.
pub fn preset(n: u32, profile: Profile) -> Result<RunConfig> {
    describe_preset(n)?;
    let mut c = RunConfig {
        preset: Some(n),
        profile,
        ..RunConfig::default()
    };
    c.model.backbone = Backbone::AlexnetStyle;
    c.model.norm = Norm::Lrn;
    c.model.mean_image_subtraction = true;
    c.train.optimizer = OptimizerChoice::SgdMomentum;
    c.train.schedule = ScheduleKind::StepDecay;
    c.train.batch_size = 128;
    for step in 2..=n {
        match step {
            2 => c.model.norm = Norm::BatchNorm,
            3 => c.model.mean_image_subtraction = false,
            4 => c.augment.random_crop = true,
            5 => c.augment.jitter = true,
            6 => c.train.optimizer = OptimizerChoice::Adam,
            7 => {
                c.train.optimizer = OptimizerChoice::SgdMomentum;
                c.train.schedule = ScheduleKind::Cyclic;
            }
            8 => c.augment.imagenet_norm = true,
            9 => {
                c.augment.imagenet_norm = false;
                c.augment.color_space = ColorSpace::Ycbcr;
            }
            10 => {
                c.model.backbone = Backbone::Resnet18Style;
                c.model.pretrained_backbone = true;
                c.model.freeze_backbone = true;
                c.train.batch_size = 100;
            }
            11 => c.model.freeze_backbone = false,
            12 => {
                c.prep.regions = RegionSource::Landmarks {
                    rotation_correct: false,
                }
            }
            13 => {
                c.prep.regions = RegionSource::Landmarks {
                    rotation_correct: true,
                }
            }
            14 => c.augment.mirror = true,
            _ => unreachable!(),
        }
    }
    c.apply_profile();
    c.validate()?;
    Ok(c)
}

impl RunConfig {
    /// Rescales sizes, widths and epoch counts for `self.profile`.
    pub fn apply_profile(&mut self) {
        match self.profile {
            Profile::Full => {
                self.sizes = ImageSizes::FULL;
            }
            Profile::Toy => {
                self.sizes = ImageSizes::TOY;
                self.model.width_mult = match self.model.backbone {
                    Backbone::Resnet18Style => 0.125,
                    _ => 0.25,
                };
                self.model.fusion = FusionWidths {
                    eye_fc: 64,
                    face_fc1: 64,
                    face_fc2: 32,
                    grid_fc1: 64,
                    grid_fc2: 32,
                    head_fc1: 64,
                    out: 2,
                };
                self.train.epochs = 15;
                self.train.batch_size = 32;
                self.train.step_decay.boundary_epoch = 8;
                self.train.cyclic.period_epochs = 7.5;
            }
        }
        self.prep.crop_size = self.sizes.crop;
        self.model.input_size = self.sizes.input;
        self.model.grid_size = self.prep.grid_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.sizes.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.prep.crop_size != self.sizes.crop {
            return Err(GazeError::Config(format!(
                "prep.crop_size ({}) must equal sizes.crop ({})",
                self.prep.crop_size, self.sizes.crop
            )));
        }
        if self.model.input_size != self.sizes.input {
            return Err(GazeError::Config(format!(
                "model.input_size ({}) must equal sizes.input ({})",
                self.model.input_size, self.sizes.input
            )));
        }
        if self.model.grid_size != self.prep.grid_size {
            return Err(GazeError::Config(format!(
                "model.grid_size ({}) must equal prep.grid_size ({})",
                self.model.grid_size, self.prep.grid_size
            )));
        }
        if self.profile == Profile::Toy && self.train.epochs > 15 {
            return Err(GazeError::Config("train.epochs must be at most 15 in the toy profile".into()));
        }
        Ok(())
    }

    /// Parses TOML. A `preset` key seeds the config from that preset before
    /// the remaining keys are applied.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| GazeError::Config(e.to_string()))?;
        let base = match value.get("preset") {
            Some(p) => {
                let n = p
                    .as_integer()
                    .ok_or_else(|| GazeError::Config("preset: expected an integer".into()))?;
                let profile = match value.get("profile").and_then(|v| v.as_str()) {
                    Some("toy") => Profile::Toy,
                    Some("full") | None => Profile::Full,
                    Some(other) => return Err(GazeError::Config(format!("profile: unknown value `{other}`"))),
                };
                preset(u32::try_from(n).map_err(|_| GazeError::UnknownPreset(n.to_string()))?, profile)?
            }
            None => RunConfig::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| GazeError::Config(e.to_string()))?;
        merge(&mut merged, value);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| GazeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            GazeError::Config(m) => GazeError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
