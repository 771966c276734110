//! Training-time augmentation and color-space handling.

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::geometry::FaceGrid;
use crate::imaging::{crop_canvas, flip_horizontal, resize_bilinear};

/// Crop side, intermediate training resize, and network input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSizes {
    pub crop: u32,
    pub train_resize: u32,
    pub input: u32,
}

impl ImageSizes {
    pub const FULL: ImageSizes = ImageSizes {
        crop: 256,
        train_resize: 240,
        input: 224,
    };
    /// Same 16:15:14 proportions at a quarter of the resolution.
    pub const TOY: ImageSizes = ImageSizes {
        crop: 64,
        train_resize: 60,
        input: 56,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.input <= self.train_resize && self.input <= self.crop && self.input > 0) {
            return Err(GazeError::Config(format!(
                "image sizes must satisfy 0 < input <= train_resize, crop (got {self:?})"
            )));
        }
        Ok(())
    }
}

impl Default for ImageSizes {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Rgb,
    Ycbcr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JitterOrder {
    #[default]
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub random_crop: bool,
    pub jitter: bool,
    pub jitter_order: JitterOrder,
    pub mirror: bool,
    pub mirror_probability: f64,
    pub color_space: ColorSpace,
    pub imagenet_norm: bool,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            random_crop: false,
            jitter: false,
            jitter_order: JitterOrder::Random,
            mirror: false,
            mirror_probability: 0.5,
            color_space: ColorSpace::Rgb,
            imagenet_norm: false,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(GazeError::Config(format!(
                "augment.mirror_probability must lie in [0, 1], got {}",
                self.mirror_probability
            )));
        }
        if self.norm_std.iter().any(|s| *s <= 0.0) {
            return Err(GazeError::Config("augment.norm_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SampleMeta {
    pub subject_id: String,
    pub frame_id: String,
    pub mirrored: bool,
}

/// One model input unit. `left_eye` is the eye with the smaller image x.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub left_eye: RgbImage,
    pub right_eye: RgbImage,
    pub face: RgbImage,
    pub grid: FaceGrid,
    pub gaze_cm: [f64; 2],
    pub meta: SampleMeta,
}

impl Sample {
    pub fn images_mut(&mut self) -> [&mut RgbImage; 3] {
        [&mut self.left_eye, &mut self.right_eye, &mut self.face]
    }
}

fn require_size(image: &RgbImage, expected: u32) -> Result<()> {
    if image.width() != expected || image.height() != expected {
        return Err(GazeError::ImageSize {
            expected,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(())
}

/// Resize to `train_resize`, then cut an `input`-sized window at the given offset.
pub fn resize_crop_at(image: &RgbImage, sizes: ImageSizes, offset: (u32, u32)) -> Result<RgbImage> {
    require_size(image, sizes.crop)?;
    let max = sizes.train_resize - sizes.input;
    if offset.0 > max || offset.1 > max {
        return Err(GazeError::Config(format!("crop offset {offset:?} exceeds {max}")));
    }
    let resized = resize_bilinear(image, sizes.train_resize, sizes.train_resize);
    Ok(crop_canvas(
        &resized,
        offset.0 as i64,
        offset.1 as i64,
        sizes.input,
        sizes.input,
    ))
}

/// Offset drawn uniformly from `{0..=train_resize - input}` on each axis.
pub fn draw_crop_offset<R: Rng + ?Sized>(sizes: ImageSizes, rng: &mut R) -> (u32, u32) {
    let max = sizes.train_resize - sizes.input;
    (rng.random_range(0..=max), rng.random_range(0..=max))
}

pub fn train_resize_crop<R: Rng + ?Sized>(image: &RgbImage, sizes: ImageSizes, rng: &mut R) -> Result<RgbImage> {
    let offset = draw_crop_offset(sizes, rng);
    resize_crop_at(image, sizes, offset)
}

pub fn eval_resize(image: &RgbImage, sizes: ImageSizes) -> Result<RgbImage> {
    require_size(image, sizes.crop)?;
    Ok(resize_bilinear(image, sizes.input, sizes.input))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of the hue circle.
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl JitterFactors {
    pub const FIXED_ORDER: [JitterOp; 4] = [
        JitterOp::Brightness,
        JitterOp::Contrast,
        JitterOp::Saturation,
        JitterOp::Hue,
    ];

    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: Self::FIXED_ORDER,
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, order: JitterOrder) -> Self {
        let mut ops = Self::FIXED_ORDER;
        let brightness = rng.random_range(0.9..=1.1);
        let contrast = rng.random_range(0.9..=1.1);
        let saturation = rng.random_range(0.9..=1.1);
        let hue = rng.random_range(-0.1..=0.1);
        if order == JitterOrder::Random {
            ops.shuffle(rng);
        }
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            order: ops,
        }
    }
}

#[inline]
fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        (p[2] - p[0]) / d + 2.0
    } else {
        (p[0] - p[1]) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies jitter with explicit factors; intermediate values are clipped to [0, 255].
pub fn color_jitter_with(image: &RgbImage, f: &JitterFactors) -> RgbImage {
    let mut px: Vec<[f64; 3]> = image
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let clip = |v: f64| v.clamp(0.0, 255.0);
    for op in f.order {
        match op {
            JitterOp::Brightness => {
                for p in px.iter_mut() {
                    *p = p.map(|v| clip(v * f.brightness));
                }
            }
            JitterOp::Contrast => {
                let mean = px.iter().map(|p| luma(*p)).sum::<f64>() / px.len().max(1) as f64;
                for p in px.iter_mut() {
                    *p = p.map(|v| clip(f.contrast * v + (1.0 - f.contrast) * mean));
                }
            }
            JitterOp::Saturation => {
                for p in px.iter_mut() {
                    let g = luma(*p);
                    *p = p.map(|v| clip(f.saturation * v + (1.0 - f.saturation) * g));
                }
            }
            JitterOp::Hue => {
                if f.hue != 0.0 {
                    for p in px.iter_mut() {
                        let mut hsv = rgb_to_hsv(p.map(|v| v / 255.0));
                        if hsv[1] > 0.0 {
                            hsv[0] = (hsv[0] + f.hue).rem_euclid(1.0);
                            *p = hsv_to_rgb(hsv).map(|v| clip(v * 255.0));
                        }
                    }
                }
            }
        }
    }
    let mut out = RgbImage::new(image.width(), image.height());
    for (o, p) in out.pixels_mut().zip(px) {
        *o = Rgb(p.map(|v| v.round() as u8));
    }
    out
}

pub fn color_jitter<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R) -> RgbImage {
    color_jitter_with(image, &JitterFactors::draw(rng, JitterOrder::Random))
}

/// Horizontal mirror: flips every image, swaps the eye branches, reverses
/// grid columns and negates the x label.
pub fn mirror(sample: &Sample) -> Sample {
    Sample {
        left_eye: flip_horizontal(&sample.right_eye),
        right_eye: flip_horizontal(&sample.left_eye),
        face: flip_horizontal(&sample.face),
        grid: sample.grid.mirrored(),
        gaze_cm: [-sample.gaze_cm[0], sample.gaze_cm[1]],
        meta: SampleMeta {
            mirrored: !sample.meta.mirrored,
            ..sample.meta.clone()
        },
    }
}

/// Training-time pipeline on a sample of `crop`-sized images: mirror, random
/// crop (or plain resize), then color jitter with one set of factors per sample.
pub fn augment_sample<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    sizes: ImageSizes,
    rng: &mut R,
) -> Result<Sample> {
    let mut s = if cfg.mirror && rng.random_bool(cfg.mirror_probability) {
        mirror(sample)
    } else {
        sample.clone()
    };
    for img in s.images_mut() {
        *img = if cfg.random_crop {
            train_resize_crop(img, sizes, rng)?
        } else {
            eval_resize(img, sizes)?
        };
    }
    if cfg.jitter {
        let f = JitterFactors::draw(rng, cfg.jitter_order);
        for img in s.images_mut() {
            *img = color_jitter_with(img, &f);
        }
    }
    Ok(s)
}

/// Evaluation-time pipeline: deterministic resize only.
pub fn eval_sample(sample: &Sample, sizes: ImageSizes) -> Result<Sample> {
    let mut s = sample.clone();
    for img in s.images_mut() {
        *img = eval_resize(img, sizes)?;
    }
    Ok(s)
}

fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Full-range BT.601 RGB -> YCbCr.
pub fn ycbcr_pixel(p: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = p.map(f64::from);
    [
        round_u8(0.299 * r + 0.587 * g + 0.114 * b),
        round_u8(128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b),
        round_u8(128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b),
    ]
}

pub fn rgb_pixel(p: [u8; 3]) -> [u8; 3] {
    let [y, cb, cr] = p.map(f64::from);
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [
        round_u8(y + 1.402 * cr),
        round_u8(y - 0.344_136 * cb - 0.714_136 * cr),
        round_u8(y + 1.772 * cb),
    ]
}

pub fn to_ycbcr(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p.0 = ycbcr_pixel(p.0);
    }
    out
}

pub fn from_ycbcr(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p.0 = rgb_pixel(p.0);
    }
    out
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// (C, H, W) tensor scaled to [0, 1].
pub fn to_tensor(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        image.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn imagenet_normalize(t: &Array3<f32>, mean: [f64; 3], std: [f64; 3]) -> Array3<f32> {
    let mut out = t.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

pub fn imagenet_denormalize(t: &Array3<f32>, mean: [f64; 3], std: [f64; 3]) -> Array3<f32> {
    let mut out = t.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        plane.mapv_inplace(|v| v * s + m);
    }
    out
}

/// Color transform and normalization applied to every network input image.
pub fn image_to_input(image: &RgbImage, cfg: &AugmentConfig) -> Array3<f32> {
    let t = match cfg.color_space {
        ColorSpace::Rgb => to_tensor(image),
        ColorSpace::Ycbcr => to_tensor(&to_ycbcr(image)),
    };
    if cfg.imagenet_norm {
        imagenet_normalize(&t, cfg.norm_mean, cfg.norm_std)
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_face_grid, OrientedRect, PixelRect};
    use crate::rng;

    fn gray(side: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(side, side, Rgb([v, v, v]))
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let mut r = rng::stream(0, &[]);
        for _ in 0..5 {
            let out = train_resize_crop(&gray(256, 77), ImageSizes::FULL, &mut r).unwrap();
            assert_eq!(out.dimensions(), (224, 224));
            assert!(out.pixels().all(|p| p.0 == [77, 77, 77]));
        }
        assert!(matches!(
            train_resize_crop(&gray(200, 1), ImageSizes::FULL, &mut r),
            Err(GazeError::ImageSize { .. })
        ));
    }

    #[test]
    fn eval_resize_rejects_non_crop_input() {
        let once = eval_resize(&gray(256, 9), ImageSizes::FULL).unwrap();
        assert!(once.pixels().all(|p| p.0 == [9, 9, 9]));
        assert!(eval_resize(&once, ImageSizes::FULL).is_err());
    }

    #[test]
    fn jitter_examples() {
        let img = gray(8, 100);
        assert_eq!(color_jitter_with(&img, &JitterFactors::identity()), img);
        let f = JitterFactors {
            brightness: 1.1,
            ..JitterFactors::identity()
        };
        assert!(color_jitter_with(&img, &f).pixels().all(|p| p.0 == [110, 110, 110]));
        let f = JitterFactors {
            saturation: 0.9,
            hue: 0.07,
            ..JitterFactors::identity()
        };
        assert_eq!(color_jitter_with(&img, &f), img);
    }

    #[test]
    fn hue_rotates_primaries() {
        let red = RgbImage::from_pixel(1, 1, Rgb([255, 0, 0]));
        let f = JitterFactors {
            hue: 1.0 / 3.0,
            ..JitterFactors::identity()
        };
        assert_eq!(color_jitter_with(&red, &f).get_pixel(0, 0).0, [0, 255, 0]);
    }

    #[test]
    fn ycbcr_fixed_points() {
        assert_eq!(ycbcr_pixel([255, 255, 255]), [255, 128, 128]);
        assert_eq!(ycbcr_pixel([0, 0, 0]), [0, 128, 128]);
        assert_eq!(ycbcr_pixel([255, 0, 0]), [76, 85, 255]);
    }

    #[test]
    fn mirror_example() {
        let frame = (640, 480);
        let grid = make_face_grid(frame, &OrientedRect::axis_aligned(&PixelRect::new(50.0, 60.0, 30.0, 20.0)), 25);
        let s = Sample {
            left_eye: gray(4, 1),
            right_eye: gray(4, 2),
            face: gray(4, 3),
            grid,
            gaze_cm: [5.0, -3.2],
            meta: SampleMeta::default(),
        };
        let m = mirror(&s);
        assert_eq!(m.gaze_cm, [-5.0, -3.2]);
        assert_eq!(m.left_eye, gray(4, 2));
        assert!(m.meta.mirrored);
        assert_eq!(mirror(&m), s);
    }

    #[test]
    fn normalize_round_trip() {
        let t = Array3::from_shape_fn((3, 2, 2), |(c, _, _)| IMAGENET_MEAN[c] as f32);
        let z = imagenet_normalize(&t, IMAGENET_MEAN, IMAGENET_STD);
        assert!(z.iter().all(|v| v.abs() < 1e-6));
        let back = imagenet_denormalize(&z, IMAGENET_MEAN, IMAGENET_STD);
        assert!((back - t).iter().all(|v| v.abs() < 1e-6));
    }
}
