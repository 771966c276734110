//! Versioned model checkpoints in the safetensors container.
//!
//! Tensors are stored as `param.<name>`, `buffer.<name>`, `opt.m.<name>`,
//! `opt.v.<name>` and `mis.<branch>`; string metadata carries the format
//! tag, version, model config, optimizer kind and training progress.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::model::{build_model, GazeModel, MeanImages, ModelConfig};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::Real;
use crate::predict::InferenceConfig;

pub const FORMAT: &str = "gaze-checkpoint";
pub const VERSION: u32 = 1;

/// Training progress stored next to the weights. Every random stream used
/// in training is derived from `seed` and the epoch/step counters, so this
/// is the complete rng state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainProgress {
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub global_step: u64,
    pub best_val_error_cm: Option<f64>,
}

pub struct Loaded<T> {
    pub model: GazeModel<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub progress: TrainProgress,
    pub inference: Option<InferenceConfig>,
}

fn bytes_of<T: Real>(a: &ArrayD<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * T::BYTES);
    for v in a.as_standard_layout().iter() {
        v.to_le(&mut out);
    }
    out
}

fn ckpt_err(e: impl std::fmt::Display) -> GazeError {
    GazeError::Checkpoint(e.to_string())
}

pub fn save<T: Real>(
    path: &Path,
    model: &GazeModel<T>,
    optimizer: Option<&Optimizer<T>>,
    progress: &TrainProgress,
) -> Result<()> {
    save_with_inference(path, model, optimizer, progress, None)
}

/// [`save`] plus the preprocessing settings needed to serve the model.
pub fn save_with_inference<T: Real>(
    path: &Path,
    model: &GazeModel<T>,
    optimizer: Option<&Optimizer<T>>,
    progress: &TrainProgress,
    inference: Option<&InferenceConfig>,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let p = &model.params;
    for (n, v) in p.names.iter().zip(&p.values) {
        entries.push((format!("param.{n}"), v.shape().to_vec(), bytes_of(v)));
    }
    for (n, v) in p.buffer_names.iter().zip(&p.buffers) {
        entries.push((format!("buffer.{n}"), v.shape().to_vec(), bytes_of(v)));
    }
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("model_config".to_string(), serde_json::to_string(&model.config).map_err(ckpt_err)?);
    meta.insert("progress".to_string(), serde_json::to_string(progress).map_err(ckpt_err)?);
    if let Some(inf) = inference {
        meta.insert("inference".to_string(), serde_json::to_string(inf).map_err(ckpt_err)?);
    }
    if let Some(opt) = optimizer {
        meta.insert("optimizer".to_string(), serde_json::to_string(&opt.kind).map_err(ckpt_err)?);
        meta.insert("optimizer_steps".to_string(), opt.steps.to_string());
        for (slot, states) in [("m", &opt.first), ("v", &opt.second)] {
            for (n, v) in p.names.iter().zip(states.iter()) {
                entries.push((format!("opt.{slot}.{n}"), v.shape().to_vec(), bytes_of(v)));
            }
        }
    }
    if let Some(mi) = &model.mean_images {
        for (n, v) in [("left_eye", &mi.left_eye), ("right_eye", &mi.right_eye), ("face", &mi.face)] {
            let v = v.mapv(|x| x as f64).mapv(crate::nn::cast::<T>).into_dyn();
            entries.push((format!("mis.{n}"), v.shape().to_vec(), bytes_of(&v)));
        }
    }
    let views: Vec<(String, TensorView<'_>)> = entries
        .iter()
        .map(|(n, shape, data)| Ok((n.clone(), TensorView::new(T::DTYPE, shape.clone(), data).map_err(ckpt_err)?)))
        .collect::<Result<_>>()?;
    let bytes = sorted_header(safetensors::serialize(views, Some(meta)).map_err(ckpt_err)?)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| GazeError::io(path, e))
}

/// Rewrites the header with sorted keys so equal checkpoints are equal
/// bytes (the metadata map iterates in random order).
fn sorted_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let mut header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..8 + n]).map_err(ckpt_err)?;
    if let Some(serde_json::Value::Object(meta)) = header.get("__metadata__") {
        let sorted: BTreeMap<_, _> = meta.clone().into_iter().collect();
        header.insert("__metadata__".into(), serde_json::to_value(sorted).map_err(ckpt_err)?);
    }
    let mut text = serde_json::to_string(&header).map_err(ckpt_err)?;
    while text.len() % 8 != 0 {
        text.push(' ');
    }
    let mut out = Vec::with_capacity(bytes.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

fn read_tensor<T: Real>(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<ArrayD<T>> {
    let view = st
        .tensor(name)
        .map_err(|_| GazeError::Checkpoint(format!("missing tensor `{name}`")))?;
    if view.dtype() != T::DTYPE {
        return Err(GazeError::Checkpoint(format!("tensor `{name}` has dtype {:?}", view.dtype())));
    }
    if view.shape() != shape {
        return Err(GazeError::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            view.shape()
        )));
    }
    let values = view.data().chunks_exact(T::BYTES).map(T::from_le).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape checked"))
}

pub fn load<T: Real>(path: &Path) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| GazeError::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| GazeError::Checkpoint("missing metadata".into()))?;
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| GazeError::Checkpoint(format!("missing metadata field `{k}`")))
    };
    if get("format")? != FORMAT {
        return Err(GazeError::Checkpoint(format!("not a gaze checkpoint: {}", path.display())));
    }
    let version: u32 = get("version")?.parse().map_err(ckpt_err)?;
    if version != VERSION {
        return Err(GazeError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let mut config: ModelConfig = serde_json::from_str(get("model_config")?).map_err(ckpt_err)?;
    let progress: TrainProgress = serde_json::from_str(get("progress")?).map_err(ckpt_err)?;
    // Weights come from the file, never from the pretrained source.
    let frozen = config.freeze_backbone;
    let pretrained = config.pretrained_backbone;
    config.freeze_backbone = false;
    config.pretrained_backbone = false;
    let mut model: GazeModel<T> = build_model(&config)?;
    model.config.pretrained_backbone = pretrained;
    if frozen {
        model.freeze_backbone(true)?;
    }
    for i in 0..model.params.len() {
        let shape = model.params.values[i].shape().to_vec();
        model.params.values[i] = read_tensor(&st, &format!("param.{}", model.params.names[i]), &shape)?;
    }
    for i in 0..model.params.buffers.len() {
        let shape = model.params.buffers[i].shape().to_vec();
        model.params.buffers[i] =
            read_tensor(&st, &format!("buffer.{}", model.params.buffer_names[i]), &shape)?;
    }
    if st.names().iter().any(|n| n.starts_with("mis.")) {
        let s = config.input_size as usize;
        let read = |n: &str| -> Result<Array3<f32>> {
            let a: ArrayD<T> = read_tensor(&st, &format!("mis.{n}"), &[3, s, s])?;
            Ok(a.mapv(|v| v.to_f32().unwrap_or(f32::NAN))
                .into_dimensionality()
                .expect("3-d"))
        };
        model.mean_images = Some(MeanImages {
            left_eye: read("left_eye")?,
            right_eye: read("right_eye")?,
            face: read("face")?,
        });
    }
    let optimizer = match meta.get("optimizer") {
        Some(kind) => {
            let kind: OptimizerKind = serde_json::from_str(kind).map_err(ckpt_err)?;
            let mut opt = Optimizer::new(kind, &model.params);
            opt.steps = get("optimizer_steps")?.parse().map_err(ckpt_err)?;
            for i in 0..model.params.len() {
                let shape = model.params.values[i].shape().to_vec();
                let n = &model.params.names[i];
                opt.first[i] = read_tensor(&st, &format!("opt.m.{n}"), &shape)?;
                if !opt.second.is_empty() {
                    opt.second[i] = read_tensor(&st, &format!("opt.v.{n}"), &shape)?;
                }
            }
            Some(opt)
        }
        None => None,
    };
    let inference = match meta.get("inference") {
        Some(text) => Some(serde_json::from_str(text).map_err(ckpt_err)?),
        None => None,
    };
    Ok(Loaded {
        model,
        optimizer,
        progress,
        inference,
    })
}

/// Reads only the metadata fields of a checkpoint.
pub fn read_info(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| GazeError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    Ok(header.metadata().clone().unwrap_or_default())
}
