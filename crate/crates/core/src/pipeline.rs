//! End-to-end runs: catalog, split, crop preparation, training, evaluation
//! and the ablation harness.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::config::{describe_preset, preset, Profile, RunConfig};
use crate::dataio::{load_dataset, split_relaxed, split_strict, DatasetIndex, Part, SplitAssignment, SplitPolicy, RELAXED_RATIOS};
use crate::error::{GazeError, Result};
use crate::eval::{evaluate, fingerprint, AblationRow, AblationTable, EvalReport};
use crate::model::{build_model, GazeModel};
use crate::predict::InferenceConfig;
use crate::prep::{prepare_record, PrepConfig};
use crate::train::{train, TrainData, TrainHistory, TrainOptions};

pub fn make_split(index: &DatasetIndex, policy: SplitPolicy, seed: u64) -> Result<SplitAssignment> {
    match policy {
        SplitPolicy::Strict => split_strict(index, &index.provided_labels()),
        SplitPolicy::Relaxed => split_relaxed(index, RELAXED_RATIOS, seed),
    }
}

/// Prepared crop-size samples of each part.
pub struct PreparedData {
    pub split: SplitAssignment,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn part(&self, part: Part) -> &[Sample] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

pub fn prepare_data(
    index: &DatasetIndex,
    split: SplitAssignment,
    prep: &PrepConfig,
    max_frames_per_part: Option<usize>,
) -> Result<PreparedData> {
    let load = |part| -> Result<Vec<Sample>> {
        let mut ids = index.part_records(&split, part);
        if let Some(m) = max_frames_per_part {
            ids.truncate(m);
        }
        ids.iter().map(|&i| prepare_record(index, &index.records[i], prep)).collect()
    };
    Ok(PreparedData {
        train: load(Part::Train)?,
        val: load(Part::Val)?,
        test: load(Part::Test)?,
        split,
    })
}

/// Loads, splits and prepares the dataset named in `cfg.data.root`.
pub fn load_prepared(cfg: &RunConfig) -> Result<PreparedData> {
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| GazeError::Config("data.root is not set".into()))?;
    let index = load_dataset(root)?;
    let split = make_split(&index, cfg.data.split, cfg.data.split_seed)?;
    prepare_data(&index, split, &cfg.prep, cfg.data.max_frames_per_part)
}

/// Sets every seed of a run (weights, shuffling, augmentation, dropout).
pub fn with_seed(mut cfg: RunConfig, seed: u64) -> RunConfig {
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
    cfg.augment.seed = seed;
    cfg
}

pub struct RunOutcome {
    pub model: GazeModel<f32>,
    pub history: TrainHistory,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

/// Trains a fresh model from `cfg` and evaluates it on val and test.
/// With an output directory the best-validation checkpoint is the one
/// evaluated.
pub fn run_training(cfg: &RunConfig, data: &PreparedData, opts: &TrainOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model: GazeModel<f32> = build_model(&cfg.model)?;
    let td = TrainData {
        train: &data.train,
        val: &data.val,
    };
    let mut opts = opts.clone();
    opts.inference.get_or_insert_with(|| inference_config(cfg));
    let history = train(&mut model, &td, &cfg.train, &cfg.augment, cfg.sizes, &opts)?;
    if let Some(dir) = &opts.out_dir {
        let best = dir.join("best.safetensors");
        if best.exists() {
            model = crate::checkpoint::load::<f32>(&best)?.model;
        }
    }
    let fp = fingerprint(cfg);
    let report = |part: Part| -> Result<Option<EvalReport>> {
        let s = data.part(part);
        if s.is_empty() {
            return Ok(None);
        }
        evaluate(&model, s, part, &cfg.augment, cfg.sizes, fp.clone()).map(Some)
    };
    let val = report(Part::Val)?;
    let test = report(Part::Test)?;
    Ok(RunOutcome {
        model,
        history,
        val,
        test,
    })
}

pub fn inference_config(cfg: &RunConfig) -> InferenceConfig {
    InferenceConfig {
        prep: cfg.prep.clone(),
        augment: cfg.augment.clone(),
        sizes: cfg.sizes,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub presets: Vec<u32>,
    pub seeds: Vec<u64>,
    pub profile: Profile,
    pub data_root: PathBuf,
    pub policies: Vec<SplitPolicy>,
    /// Per-run directories are created below this.
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub max_frames_per_part: Option<usize>,
}

/// Trains every (preset, seed, policy) combination on one dataset.
/// `on_run` sees each finished row (for progress output).
pub fn run_ablation(spec: &AblationSpec, mut on_run: impl FnMut(&AblationRow)) -> Result<AblationTable> {
    for &p in &spec.presets {
        describe_preset(p)?;
    }
    let index = load_dataset(&spec.data_root)?;
    let mut cache: HashMap<(String, SplitPolicy, u64), PreparedData> = HashMap::new();
    let mut table = AblationTable::default();
    for &p in &spec.presets {
        for &seed in &spec.seeds {
            let mut cfg = with_seed(preset(p, spec.profile)?, seed);
            if let Some(e) = spec.epochs {
                cfg.train.epochs = e;
                cfg.train.step_decay.boundary_epoch = cfg.train.step_decay.boundary_epoch.min(e.saturating_sub(1).max(1));
            }
            let mut row = AblationRow {
                experiment: p,
                description: describe_preset(p)?.to_string(),
                seed,
                strict_val_cm: None,
                strict_test_cm: None,
                relaxed_val_cm: None,
                relaxed_test_cm: None,
            };
            for &policy in &spec.policies {
                let key = (
                    serde_json::to_string(&cfg.prep).expect("prep serializes"),
                    policy,
                    if policy == SplitPolicy::Relaxed { seed } else { 0 },
                );
                if !cache.contains_key(&key) {
                    let split = make_split(&index, policy, seed)?;
                    let data = prepare_data(&index, split, &cfg.prep, spec.max_frames_per_part)?;
                    cache.insert(key.clone(), data);
                }
                let data = &cache[&key];
                let opts = TrainOptions {
                    out_dir: spec.out_dir.as_ref().map(|d| run_dir(d, p, seed, policy)),
                    quiet: true,
                    ..TrainOptions::default()
                };
                let out = run_training(&cfg, data, &opts)?;
                let v = out.val.map(|r| r.mean_error_cm);
                let t = out.test.map(|r| r.mean_error_cm);
                match policy {
                    SplitPolicy::Strict => (row.strict_val_cm, row.strict_test_cm) = (v, t),
                    SplitPolicy::Relaxed => (row.relaxed_val_cm, row.relaxed_test_cm) = (v, t),
                }
            }
            on_run(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

pub fn run_dir(root: &Path, preset: u32, seed: u64, policy: SplitPolicy) -> PathBuf {
    let policy = match policy {
        SplitPolicy::Strict => "strict",
        SplitPolicy::Relaxed => "relaxed",
    };
    root.join(format!("preset{preset:02}_seed{seed}_{policy}"))
}
