//! The four-branch gaze regressor: two eye trunks, a face trunk and a
//! face-grid MLP, fused by fully-connected layers into an `(x, y)` output in cm.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayD, Axis, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::augment::{image_to_input, AugmentConfig, Sample};
use crate::error::{GazeError, Result};
use crate::nn::{
    cast, BasicBlock, ConvGeometry, Ctx, Grads, Layer, LayerFactory, ParamId, ParamStore, Real,
    SeqCache, Sequential,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    AlexnetStyle,
    Resnet18Style,
    /// Two small convolutions; used for gradient checks.
    TwoLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Lrn,
    BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWidths {
    pub eye_fc: usize,
    pub face_fc1: usize,
    pub face_fc2: usize,
    pub grid_fc1: usize,
    pub grid_fc2: usize,
    pub head_fc1: usize,
    pub out: usize,
}

impl Default for FusionWidths {
    fn default() -> Self {
        Self {
            eye_fc: 128,
            face_fc1: 128,
            face_fc2: 64,
            grid_fc1: 256,
            grid_fc2: 128,
            head_fc1: 128,
            out: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub norm: Norm,
    /// Dropout before every convolution and fully-connected layer; only
    /// inserted when `norm` is batch norm.
    pub dropout_p: f64,
    pub mean_image_subtraction: bool,
    pub share_eye_weights: bool,
    pub pretrained_backbone: bool,
    pub pretrained_path: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub fusion: FusionWidths,
    /// Side of the square network inputs.
    pub input_size: u32,
    /// Channel multiplier applied to every trunk convolution.
    pub width_mult: f64,
    pub grid_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::AlexnetStyle,
            norm: Norm::BatchNorm,
            dropout_p: 0.1,
            mean_image_subtraction: false,
            share_eye_weights: true,
            pretrained_backbone: false,
            pretrained_path: None,
            freeze_backbone: false,
            fusion: FusionWidths::default(),
            input_size: 224,
            width_mult: 1.0,
            grid_size: 25,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GazeError::Config(m));
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("model.dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.fusion.out != 2 {
            return err(format!("model.fusion.out must be 2, got {}", self.fusion.out));
        }
        if self.freeze_backbone && !self.pretrained_backbone {
            return err("model.freeze_backbone requires model.pretrained_backbone".into());
        }
        if self.pretrained_backbone && self.backbone != Backbone::Resnet18Style {
            return err("model.pretrained_backbone is only available for resnet18_style".into());
        }
        if self.backbone == Backbone::Resnet18Style && self.norm != Norm::BatchNorm {
            return err("model.norm must be batch_norm for resnet18_style".into());
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return err(format!("model.width_mult must be positive, got {}", self.width_mult));
        }
        if self.grid_size == 0 {
            return err("model.grid_size must be at least 1".into());
        }
        let min = match self.backbone {
            Backbone::AlexnetStyle => 35,
            Backbone::Resnet18Style => 8,
            Backbone::TwoLayer => 2,
        };
        if self.input_size < min {
            return err(format!(
                "model.input_size {} is too small for {:?} (minimum {min})",
                self.input_size, self.backbone
            ));
        }
        let f = &self.fusion;
        if [f.eye_fc, f.face_fc1, f.face_fc2, f.grid_fc1, f.grid_fc2, f.head_fc1]
            .iter()
            .any(|&w| w == 0)
        {
            return err("model.fusion widths must be positive".into());
        }
        Ok(())
    }

    fn dropout(&self) -> Option<f64> {
        (self.norm == Norm::BatchNorm && self.dropout_p > 0.0).then_some(self.dropout_p)
    }

    fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.width_mult).round() as usize).max(1)
    }
}

/// Per-branch training-set mean images, subtracted when mean image
/// subtraction is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanImages {
    pub left_eye: Array3<f32>,
    pub right_eye: Array3<f32>,
    pub face: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct GazeBatch<T> {
    pub left_eye: Array4<T>,
    pub right_eye: Array4<T>,
    pub face: Array4<T>,
    pub grid: Array2<T>,
    pub gaze_cm: Option<Array2<T>>,
}

impl<T: Real> GazeBatch<T> {
    pub fn len(&self) -> usize {
        self.left_eye.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, input_size: u32, grid_size: usize) -> Result<()> {
        let b = self.len();
        let s = input_size as usize;
        for (field, t) in [
            ("left_eye", &self.left_eye),
            ("right_eye", &self.right_eye),
            ("face", &self.face),
        ] {
            if t.dim() != (b, 3, s, s) {
                return Err(GazeError::Shape {
                    field: field.into(),
                    reason: format!("expected ({b}, 3, {s}, {s}), got {:?}", t.dim()),
                });
            }
        }
        let g = grid_size * grid_size;
        if self.grid.dim() != (b, g) {
            return Err(GazeError::Shape {
                field: "grid".into(),
                reason: format!("expected ({b}, {g}), got {:?}", self.grid.dim()),
            });
        }
        if self.grid.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(GazeError::Shape {
                field: "grid".into(),
                reason: "entries must be 0 or 1".into(),
            });
        }
        if let Some(gz) = &self.gaze_cm {
            if gz.dim() != (b, 2) {
                return Err(GazeError::Shape {
                    field: "gaze_cm".into(),
                    reason: format!("expected ({b}, 2), got {:?}", gz.dim()),
                });
            }
        }
        Ok(())
    }
}

/// Stacks samples (already at input resolution) into a batch, applying the
/// configured color transform and normalization.
pub fn batch_from_samples(samples: &[Sample], aug: &AugmentConfig) -> GazeBatch<f32> {
    let stack = |pick: &dyn Fn(&Sample) -> &image::RgbImage| {
        let views: Vec<Array3<f32>> = samples.iter().map(|s| image_to_input(pick(s), aug)).collect();
        let v: Vec<_> = views.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        if v.is_empty() {
            Array4::zeros((0, 3, 0, 0))
        } else {
            concatenate(Axis(0), &v).expect("uniform sample sizes")
        }
    };
    let g = samples.first().map_or(0, |s| s.grid.cells.len());
    let grid = Array2::from_shape_fn((samples.len(), g), |(i, j)| samples[i].grid.cells[j] as f32);
    let gaze = Array2::from_shape_fn((samples.len(), 2), |(i, j)| samples[i].gaze_cm[j] as f32);
    GazeBatch {
        left_eye: stack(&|s| &s.left_eye),
        right_eye: stack(&|s| &s.right_eye),
        face: stack(&|s| &s.face),
        grid,
        gaze_cm: Some(gaze),
    }
}

pub fn mean_image_subtract(image: &Array3<f32>, mean_image: &Array3<f32>) -> Result<Array3<f32>> {
    if image.dim() != mean_image.dim() {
        return Err(GazeError::Shape {
            field: "mean_image".into(),
            reason: format!("image {:?} vs mean {:?}", image.dim(), mean_image.dim()),
        });
    }
    Ok(image - mean_image)
}

/// Mean network input per branch over `samples`.
pub fn compute_mean_images(samples: &[Sample], aug: &AugmentConfig) -> Result<MeanImages> {
    if samples.is_empty() {
        return Err(GazeError::EmptySplit("cannot compute mean images of an empty set".into()));
    }
    let mean = |pick: &dyn Fn(&Sample) -> &image::RgbImage| {
        let mut acc: Option<Array3<f64>> = None;
        for s in samples {
            let t = image_to_input(pick(s), aug).mapv(f64::from);
            acc = Some(match acc {
                Some(a) => a + t,
                None => t,
            });
        }
        acc.expect("non-empty").mapv(|v| (v / samples.len() as f64) as f32)
    };
    Ok(MeanImages {
        left_eye: mean(&|s| &s.left_eye),
        right_eye: mean(&|s| &s.right_eye),
        face: mean(&|s| &s.face),
    })
}

#[derive(Debug, Clone)]
pub struct GazeModel<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub left_eye: Sequential,
    pub right_eye: Sequential,
    pub face: Sequential,
    pub eye_fc: Sequential,
    pub face_fc: Sequential,
    pub grid_fc: Sequential,
    pub head: Sequential,
    pub mean_images: Option<MeanImages>,
    /// Flattened feature sizes of one eye trunk and of the face trunk.
    pub feature_dims: (usize, usize),
    pub trunk_params: Vec<ParamId>,
}

pub struct ForwardCache<T> {
    left: SeqCache<T>,
    right: SeqCache<T>,
    face: SeqCache<T>,
    eye_fc: SeqCache<T>,
    face_fc: SeqCache<T>,
    grid_fc: SeqCache<T>,
    head: SeqCache<T>,
}

fn push_drop(seq: &mut Sequential, cfg: &ModelConfig, name: &str) {
    if let Some(p) = cfg.dropout() {
        seq.push(name, Layer::Dropout { p });
    }
}

fn geom(kernel: usize, stride: usize, pad: usize) -> ConvGeometry {
    ConvGeometry { kernel, stride, pad }
}

fn alexnet_trunk<T: Real>(f: &mut LayerFactory<'_, T>, p: &str, cfg: &ModelConfig) -> Sequential {
    let bn = cfg.norm == Norm::BatchNorm;
    let widths = [96, 256, 384, 256, 64].map(|c| cfg.ch(c));
    let geoms = [geom(11, 4, 0), geom(5, 1, 2), geom(3, 1, 1), geom(3, 1, 1), geom(1, 1, 0)];
    let mut seq = Sequential::new();
    let mut cin = 3;
    for i in 0..5 {
        let n = i + 1;
        push_drop(&mut seq, cfg, &format!("drop{n}"));
        seq.push(format!("conv{n}"), f.conv(&format!("{p}.conv{n}"), cin, widths[i], geoms[i], !bn));
        if bn {
            seq.push(format!("bn{n}"), f.batch_norm(&format!("{p}.bn{n}"), widths[i]));
        }
        seq.push(format!("relu{n}"), Layer::Relu);
        if i < 2 {
            seq.push(format!("pool{n}"), Layer::MaxPool { kernel: 3, stride: 2, pad: 0 });
            if !bn {
                seq.push(
                    format!("lrn{n}"),
                    Layer::Lrn { size: 5, alpha: 1e-4, beta: 0.75, k: 1.0 },
                );
            }
        }
        cin = widths[i];
    }
    seq.push("flatten", Layer::Flatten);
    seq
}

fn resnet_trunk<T: Real>(f: &mut LayerFactory<'_, T>, p: &str, cfg: &ModelConfig) -> Sequential {
    let mut seq = Sequential::new();
    let stem = cfg.ch(64);
    push_drop(&mut seq, cfg, "drop0");
    seq.push("conv1", f.conv(&format!("{p}.conv1"), 3, stem, geom(7, 2, 3), false))
        .push("bn1", f.batch_norm(&format!("{p}.bn1"), stem))
        .push("relu", Layer::Relu)
        .push("maxpool", Layer::MaxPool { kernel: 3, stride: 2, pad: 1 });
    let mut cin = stem;
    for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
        let cout = cfg.ch(width);
        for b in 0..2 {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let q = format!("{p}.layer{}.{b}", stage + 1);
            let mut main = Sequential::new();
            push_drop(&mut main, cfg, "drop1");
            main.push("conv1", f.conv(&format!("{q}.conv1"), cin, cout, geom(3, stride, 1), false))
                .push("bn1", f.batch_norm(&format!("{q}.bn1"), cout))
                .push("relu", Layer::Relu);
            push_drop(&mut main, cfg, "drop2");
            main.push("conv2", f.conv(&format!("{q}.conv2"), cout, cout, geom(3, 1, 1), false))
                .push("bn2", f.batch_norm(&format!("{q}.bn2"), cout));
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let mut sc = Sequential::new();
                push_drop(&mut sc, cfg, "drop");
                sc.push("0", f.conv(&format!("{q}.downsample.0"), cin, cout, geom(1, stride, 0), false))
                    .push("1", f.batch_norm(&format!("{q}.downsample.1"), cout));
                sc
            });
            seq.push(
                format!("layer{}.{b}", stage + 1),
                Layer::Block(Box::new(BasicBlock { main, shortcut })),
            );
            cin = cout;
        }
    }
    seq.push("avgpool", Layer::GlobalAvgPool);
    seq
}

fn two_layer_trunk<T: Real>(f: &mut LayerFactory<'_, T>, p: &str, cfg: &ModelConfig) -> Sequential {
    let c = cfg.ch(8).max(2);
    let mut seq = Sequential::new();
    push_drop(&mut seq, cfg, "drop1");
    seq.push("conv1", f.conv(&format!("{p}.conv1"), 3, c, geom(3, 1, 1), cfg.norm != Norm::BatchNorm));
    match cfg.norm {
        Norm::BatchNorm => seq.push("bn1", f.batch_norm(&format!("{p}.bn1"), c)),
        Norm::Lrn => seq.push("lrn1", Layer::Lrn { size: 5, alpha: 1e-4, beta: 0.75, k: 1.0 }),
    };
    seq.push("relu1", Layer::Relu);
    push_drop(&mut seq, cfg, "drop2");
    seq.push("conv2", f.conv(&format!("{p}.conv2"), c, c, geom(3, 2, 1), true))
        .push("relu2", Layer::Relu)
        .push("flatten", Layer::Flatten);
    seq
}

fn trunk<T: Real>(f: &mut LayerFactory<'_, T>, p: &str, cfg: &ModelConfig) -> Sequential {
    match cfg.backbone {
        Backbone::AlexnetStyle => alexnet_trunk(f, p, cfg),
        Backbone::Resnet18Style => resnet_trunk(f, p, cfg),
        Backbone::TwoLayer => two_layer_trunk(f, p, cfg),
    }
}

fn mlp<T: Real>(f: &mut LayerFactory<'_, T>, p: &str, cfg: &ModelConfig, dims: &[usize], final_relu: bool) -> Sequential {
    let mut seq = Sequential::new();
    for i in 0..dims.len() - 1 {
        push_drop(&mut seq, cfg, &format!("drop{i}"));
        seq.push(format!("fc{i}"), f.linear(&format!("{p}.fc{i}"), dims[i], dims[i + 1]));
        if final_relu || i + 2 < dims.len() {
            seq.push(format!("relu{i}"), Layer::Relu);
        }
    }
    seq
}

fn feature_dim<T: Real>(seq: &Sequential, store: &ParamStore<T>, size: u32) -> usize {
    let mut ctx = Ctx::eval(store);
    let x = ArrayD::zeros(IxDyn(&[1, 3, size as usize, size as usize]));
    seq.forward(&mut ctx, x, "").0.len()
}

pub fn build_model<T: Real>(config: &ModelConfig) -> Result<GazeModel<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut init = rng::stream(config.init_seed, &[rng::tag::INIT]);
    let mut f = LayerFactory {
        store: &mut params,
        rng: &mut init,
    };
    let (left_eye, right_eye) = if config.share_eye_weights {
        let t = trunk(&mut f, "eye", config);
        (t.clone(), t)
    } else {
        (trunk(&mut f, "left_eye", config), trunk(&mut f, "right_eye", config))
    };
    let face = trunk(&mut f, "face", config);
    let n_trunk = f.store.len();
    let fe = feature_dim(&left_eye, f.store, config.input_size);
    let ff = feature_dim(&face, f.store, config.input_size);
    let w = config.fusion;
    let g = config.grid_size * config.grid_size;
    let eye_fc = mlp(&mut f, "eye_fc", config, &[2 * fe, w.eye_fc], true);
    let face_fc = mlp(&mut f, "face_fc", config, &[ff, w.face_fc1, w.face_fc2], true);
    let grid_fc = mlp(&mut f, "grid_fc", config, &[g, w.grid_fc1, w.grid_fc2], true);
    let head = mlp(
        &mut f,
        "head",
        config,
        &[w.eye_fc + w.face_fc2 + w.grid_fc2, w.head_fc1, w.out],
        false,
    );
    let mut model = GazeModel {
        config: config.clone(),
        params,
        left_eye,
        right_eye,
        face,
        eye_fc,
        face_fc,
        grid_fc,
        head,
        mean_images: None,
        feature_dims: (fe, ff),
        trunk_params: (0..n_trunk).map(ParamId).collect(),
    };
    if config.pretrained_backbone {
        let loaded = match &config.pretrained_path {
            Some(path) => model.load_pretrained(path),
            None => Err(GazeError::Checkpoint("no pretrained weight file configured".into())),
        };
        if let Err(e) = loaded {
            log::warn!("pretrained backbone unavailable ({e}); using random initialization");
        }
    }
    if config.freeze_backbone {
        model.freeze_backbone(true)?;
    }
    Ok(model)
}

impl<T: Real> GazeModel<T> {
    pub fn freeze_backbone(&mut self, frozen: bool) -> Result<()> {
        if self.config.backbone != Backbone::Resnet18Style {
            return Err(GazeError::Config(
                "freeze_backbone is only supported for resnet18_style".into(),
            ));
        }
        for id in &self.trunk_params {
            self.params.trainable[id.0] = !frozen;
        }
        self.config.freeze_backbone = frozen;
        Ok(())
    }

    /// Copies trunk weights from a safetensors file keyed by standard
    /// 18-layer residual network names (`conv1.weight`, `layer1.0.bn1.running_mean`, ...).
    /// Either every trunk tensor is found with a matching shape, or nothing changes.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| GazeError::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| GazeError::Checkpoint(format!("{}: {e}", path.display())))?;
        let prefixes = ["eye.", "left_eye.", "right_eye.", "face."];
        let strip = |name: &str| {
            prefixes
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .map(str::to_string)
        };
        let mut staged: Vec<(bool, usize, ArrayD<T>)> = Vec::new();
        let targets = self
            .trunk_params
            .iter()
            .map(|id| (true, id.0, self.params.names[id.0].clone(), self.params.values[id.0].shape().to_vec()))
            .chain(self.params.buffer_names.iter().enumerate().map(|(i, n)| {
                (false, i, n.clone(), self.params.buffers[i].shape().to_vec())
            }));
        for (is_param, i, name, shape) in targets {
            let Some(key) = strip(&name) else { continue };
            let view = st
                .tensor(&key)
                .map_err(|_| GazeError::Checkpoint(format!("missing tensor `{key}`")))?;
            if view.shape() != shape.as_slice() {
                return Err(GazeError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {shape:?}",
                    view.shape()
                )));
            }
            let values: Vec<T> = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| cast(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
                safetensors::Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| cast(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                other => {
                    return Err(GazeError::Checkpoint(format!("tensor `{key}` has dtype {other:?}")))
                }
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape checked");
            staged.push((is_param, i, arr));
        }
        for (is_param, i, arr) in staged {
            if is_param {
                self.params.values[i] = arr;
            } else {
                self.params.buffers[i] = arr;
            }
        }
        Ok(())
    }

    /// Number of scalar parameters (shared eye weights counted once).
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter count per branch group.
    pub fn branch_parameter_counts(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.params.names.iter().zip(&self.params.values) {
            let g = name.split('.').next().unwrap_or("").to_string();
            match groups.iter_mut().find(|(k, _)| *k == g) {
                Some((_, n)) => *n += v.len(),
                None => groups.push((g, v.len())),
            }
        }
        groups
    }

    fn subtract_mean(&self, x: &Array4<T>, mean: Option<&Array3<f32>>) -> Result<Array4<T>> {
        if !self.config.mean_image_subtraction {
            return Ok(x.clone());
        }
        let mean = mean.ok_or_else(|| {
            GazeError::Config("mean image subtraction enabled but no mean images are set".into())
        })?;
        let m = mean.mapv(|v| cast::<T>(v as f64));
        if m.dim() != (x.dim().1, x.dim().2, x.dim().3) {
            return Err(GazeError::Shape {
                field: "mean_image".into(),
                reason: format!("mean {:?} vs batch {:?}", m.dim(), x.dim()),
            });
        }
        Ok(x - &m.insert_axis(Axis(0)))
    }

    fn run_trunk(&self, ctx: &mut Ctx<'_, T>, seq: &Sequential, x: Array4<T>, name: &str) -> (Array2<T>, SeqCache<T>) {
        let prev = ctx.batch_stats;
        if self.config.freeze_backbone {
            ctx.batch_stats = false;
        }
        let (y, c) = seq.forward(ctx, x.into_dyn(), name);
        ctx.batch_stats = prev;
        (y.into_dimensionality::<Ix2>().expect("trunk output is 2-d"), c)
    }

    /// Forward pass; `ctx` decides train/eval behavior.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, batch: &GazeBatch<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        batch.validate(self.config.input_size, self.config.grid_size)?;
        let mi = self.mean_images.as_ref();
        let l = self.subtract_mean(&batch.left_eye, mi.map(|m| &m.left_eye))?;
        let r = self.subtract_mean(&batch.right_eye, mi.map(|m| &m.right_eye))?;
        let fa = self.subtract_mean(&batch.face, mi.map(|m| &m.face))?;
        let (fl, left) = self.run_trunk(ctx, &self.left_eye, l, "left_eye");
        let (fr, right) = self.run_trunk(ctx, &self.right_eye, r, "right_eye");
        let (ff, face) = self.run_trunk(ctx, &self.face, fa, "face");
        let eyes = concatenate(Axis(1), &[fl.view(), fr.view()]).expect("same batch");
        let (e, eye_fc) = self.eye_fc.forward(ctx, eyes.into_dyn(), "eye_fc");
        let (fo, face_fc) = self.face_fc.forward(ctx, ff.into_dyn(), "face_fc");
        let (go, grid_fc) = self.grid_fc.forward(ctx, batch.grid.clone().into_dyn(), "grid_fc");
        let joined = concatenate(Axis(1), &[e.view(), fo.view(), go.view()]).expect("same batch");
        let (out, head) = self.head.forward(ctx, joined, "head");
        let out = out.into_dimensionality::<Ix2>().expect("2-d head");
        Ok((
            out,
            ForwardCache {
                left,
                right,
                face,
                eye_fc,
                face_fc,
                grid_fc,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients of `sum(out * dout)` into `grads`.
    pub fn backward(&self, ctx: &mut Ctx<'_, T>, cache: ForwardCache<T>, dout: Array2<T>, grads: &mut Grads<T>) {
        let w = self.config.fusion;
        let dj = self
            .head
            .backward(ctx, cache.head, dout.into_dyn(), grads, true)
            .expect("dx requested")
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let de = dj.slice(s![.., ..w.eye_fc]).to_owned().into_dyn();
        let dfo = dj.slice(s![.., w.eye_fc..w.eye_fc + w.face_fc2]).to_owned().into_dyn();
        let dgo = dj.slice(s![.., w.eye_fc + w.face_fc2..]).to_owned().into_dyn();
        let skip_trunks = self.config.freeze_backbone && ctx.probe.is_none();
        let deyes = self.eye_fc.backward(ctx, cache.eye_fc, de, grads, !skip_trunks);
        let dff = self.face_fc.backward(ctx, cache.face_fc, dfo, grads, !skip_trunks);
        self.grid_fc.backward(ctx, cache.grid_fc, dgo, grads, false);
        if skip_trunks {
            return;
        }
        let deyes = deyes.expect("dx requested").into_dimensionality::<Ix2>().expect("2-d");
        let fe = self.feature_dims.0;
        let dl = deyes.slice(s![.., ..fe]).to_owned().into_dyn();
        let dr = deyes.slice(s![.., fe..]).to_owned().into_dyn();
        self.left_eye.backward(ctx, cache.left, dl, grads, false);
        self.right_eye.backward(ctx, cache.right, dr, grads, false);
        self.face.backward(ctx, cache.face, dff.expect("dx requested"), grads, false);
    }

    /// Deterministic eval-mode prediction.
    pub fn predict(&self, batch: &GazeBatch<T>) -> Result<Array2<T>> {
        let mut ctx = Ctx::eval(&self.params);
        Ok(self.forward(&mut ctx, batch)?.0)
    }

    /// Probe-able node names of the three image trunks.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (seq, name) in [(&self.left_eye, "left_eye"), (&self.right_eye, "right_eye"), (&self.face, "face")] {
            out.extend(
                seq.node_names(name)
                    .into_iter()
                    .filter(|n| !n.ends_with(".flatten") && !n.ends_with(".avgpool")),
            );
        }
        out
    }

    /// Last convolutional activation of the left-eye branch.
    pub fn default_cam_layer(&self) -> String {
        match self.config.backbone {
            Backbone::AlexnetStyle => "left_eye.relu5".into(),
            Backbone::Resnet18Style => "left_eye.layer4.1".into(),
            Backbone::TwoLayer => "left_eye.relu2".into(),
        }
    }
}
