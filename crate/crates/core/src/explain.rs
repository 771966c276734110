//! Grad-CAM++ saliency for one output coordinate.

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3, Ix4};
use serde::{Deserialize, Serialize};

use crate::augment::{eval_sample, AugmentConfig, ImageSizes, Sample};
use crate::error::{GazeError, Result};
use crate::model::{batch_from_samples, GazeModel};
use crate::nn::Ctx;

/// Scalar whose gradient drives the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    #[default]
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    /// Probe node such as `left_eye.relu5`; the model default when unset.
    pub layer: Option<String>,
    pub target: CamTarget,
}

#[derive(Debug, Clone)]
pub struct CamResult {
    pub layer: String,
    /// Map at layer resolution before upsampling and normalization.
    pub layer_map: Array2<f64>,
    /// Min-max normalized map at network input resolution.
    pub map: Array2<f64>,
    pub prediction_cm: [f64; 2],
    /// The network input image the map refers to (eval-resized crop).
    pub input_image: RgbImage,
}

/// Grad-CAM++ combination of activations `a` and gradients `g`, both
/// `(channels, h, w)`. Returns `relu(sum_k w_k A_k)` with
/// `w_k = sum_ij alpha_ij relu(g_ij)` and
/// `alpha_ij = g^2 / (2 g^2 + sum_ab A_ab g_ij^3)` (zero where the
/// denominator vanishes).
pub fn gradcam_pp(a: ArrayView3<'_, f64>, g: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    if a.dim() != g.dim() {
        return Err(GazeError::Shape {
            field: "gradient".into(),
            reason: format!("{:?} vs activation {:?}", g.dim(), a.dim()),
        });
    }
    let (k, h, w) = a.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for c in 0..k {
        let ak = a.index_axis(ndarray::Axis(0), c);
        let gk = g.index_axis(ndarray::Axis(0), c);
        let sum_a: f64 = ak.sum();
        let mut weight = 0.0;
        for (gv, _) in gk.iter().zip(ak.iter()) {
            let g2 = gv * gv;
            let denom = 2.0 * g2 + sum_a * g2 * gv;
            let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
            weight += alpha * gv.max(0.0);
        }
        map.zip_mut_with(&ak, |m, av| *m += weight * av);
    }
    map.mapv_inplace(|v| v.max(0.0));
    Ok(map)
}

/// Half-pixel bilinear resize of a float map (edge clamped).
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut out = Array2::zeros((out_h, out_w));
    if h == 0 || w == 0 {
        return out;
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
            let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Scales to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Saliency map of `sample` (a crop-size sample) for the configured layer
/// and target.
pub fn explain(
    model: &GazeModel<f32>,
    sample: &Sample,
    aug: &AugmentConfig,
    sizes: ImageSizes,
    cfg: &CamConfig,
) -> Result<CamResult> {
    let layer = cfg.layer.clone().unwrap_or_else(|| model.default_cam_layer());
    let valid = model.layer_names();
    if !valid.contains(&layer) {
        return Err(GazeError::UnknownLayer { name: layer, valid });
    }
    let resized = eval_sample(sample, sizes)?;
    let batch = batch_from_samples(std::slice::from_ref(&resized), aug);
    let mut ctx = Ctx::eval(&model.params).with_probe(layer.clone());
    let (pred, cache) = model.forward(&mut ctx, &batch)?;
    let mut dout = Array2::<f32>::zeros((1, 2));
    dout[[0, cfg.target as usize]] = 1.0;
    let mut grads = model.params.zero_grads();
    model.backward(&mut ctx, cache, dout, &mut grads);
    let probe = ctx.probe.take().expect("probe set");
    let (a, g) = match (probe.activation, probe.grad) {
        (Some(a), Some(g)) => (a, g),
        _ => {
            return Err(GazeError::UnknownLayer {
                name: layer,
                valid,
            })
        }
    };
    let to4 = |x: ndarray::ArrayD<f32>| -> Result<ndarray::Array4<f64>> {
        x.mapv(f64::from).into_dimensionality::<Ix4>().map_err(|_| GazeError::Shape {
            field: "layer".into(),
            reason: format!("`{layer}` is not a spatial feature map"),
        })
    };
    let a = to4(a)?;
    let g = to4(g)?;
    let layer_map = gradcam_pp(a.index_axis(ndarray::Axis(0), 0), g.index_axis(ndarray::Axis(0), 0))?;
    let side = sizes.input as usize;
    let map = min_max_normalize(&upsample_bilinear(&layer_map, side, side));
    let input_image = match branch_of(&layer) {
        Branch::LeftEye => resized.left_eye,
        Branch::RightEye => resized.right_eye,
        Branch::Face => resized.face,
    };
    Ok(CamResult {
        layer,
        layer_map,
        map,
        prediction_cm: [pred[[0, 0]] as f64, pred[[0, 1]] as f64],
        input_image,
    })
}

enum Branch {
    LeftEye,
    RightEye,
    Face,
}

fn branch_of(layer: &str) -> Branch {
    if layer.starts_with("right_eye") {
        Branch::RightEye
    } else if layer.starts_with("face") {
        Branch::Face
    } else {
        Branch::LeftEye
    }
}

/// Blue-to-red ramp blended over `image` with weight `alpha`.
pub fn overlay(image: &RgbImage, map: &Array2<f64>, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let m = if map.dim() == (h as usize, w as usize) {
        map.clone()
    } else {
        upsample_bilinear(map, h as usize, w as usize)
    };
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = m[[y as usize, x as usize]].clamp(0.0, 1.0);
        let heat = jet(v);
        *p = Rgb([0, 1, 2].map(|k| ((1.0 - alpha) * p[k] as f64 + alpha * heat[k]).round() as u8));
    }
    out
}

fn jet(v: f64) -> [f64; 3] {
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

/// Fraction of map mass inside a disc, and the disc's area fraction, both
/// measured on pixel centers.
pub fn disc_mass_fraction(map: &Array2<f64>, center: [f64; 2], radius: f64) -> (f64, f64) {
    let (h, w) = map.dim();
    let mut inside = 0.0;
    let mut total = 0.0;
    let mut cells = 0usize;
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - center[0];
            let dy = y as f64 + 0.5 - center[1];
            let v = map[[y, x]];
            total += v;
            if dx * dx + dy * dy <= radius * radius {
                inside += v;
                cells += 1;
            }
        }
    }
    let mass = if total > 0.0 { inside / total } else { 0.0 };
    (mass, cells as f64 / (h * w) as f64)
}
