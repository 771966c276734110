//! Schematic synthetic faces with a linear gaze-to-pupil encoding, written
//! in the same per-subject layout as real data.
//!
//! Head-local coordinates put the origin between the eyes at brow height
//! minus 30 px, x to the right and y down. Pupil centers sit at
//! `eye_center + pupil_gain * gaze_cm + n` with `n ~ N(0, sigma^2 I)` drawn
//! once per frame (both eyes move together), then the whole head is rotated
//! by the head angle about the face center and translated into the frame.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{DeviceClass, FrameMeta, Part, SubjectMeta};
use crate::error::{GazeError, Result};
use crate::geometry::{
    eye_rects_from_landmarks, face_rect_from_landmarks, LandmarkSet, Point, PixelRect,
    DEFAULT_FACE_EXPAND, NUM_LANDMARKS,
};
use crate::rng;

pub const TRUTH_FILE: &str = "synth_truth.json";

/// Eye centers in head-local coordinates (image-left eye first).
pub const EYE_CENTERS: [Point; 2] = [[-40.0, 0.0], [40.0, 0.0]];
pub const EYE_HALF_WIDTH: f64 = 20.0;
pub const EYE_HALF_HEIGHT: f64 = 10.0;
pub const IRIS_RADIUS: f64 = 7.0;
pub const PUPIL_RADIUS: f64 = 3.5;
/// Rotation pivot in head-local coordinates.
pub const FACE_CENTER: Point = [0.0, 40.0];

const MAX_HEAD_ANGLE: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub frame_size: (u32, u32),
    /// Gaze labels are uniform on `[-gaze_range, gaze_range]^2` cm.
    pub gaze_range: f64,
    /// Standard deviation of the head roll in degrees (truncated at 40).
    pub head_rotation_sigma: f64,
    /// Standard deviation in pixels of the pupil-position noise.
    pub pixel_noise_sigma: f64,
    /// Pupil displacement in pixels per cm of gaze.
    pub pupil_gain: f64,
    /// Fraction of subjects whose session is flagged incomplete.
    pub incomplete_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            frames_per_subject: 100,
            frame_size: (640, 480),
            gaze_range: 20.0,
            head_rotation_sigma: 10.0,
            pixel_noise_sigma: 0.6,
            pupil_gain: 0.6,
            incomplete_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(GazeError::Config(format!("synth.{m}")));
        if self.n_subjects == 0 || self.frames_per_subject == 0 {
            return err("n_subjects and synth.frames_per_subject must be positive");
        }
        if self.frame_size.0 < 360 || self.frame_size.1 < 360 {
            return err("frame_size must be at least 360x360");
        }
        if !(self.gaze_range > 0.0) || !(self.pupil_gain > 0.0) {
            return err("gaze_range and synth.pupil_gain must be positive");
        }
        if self.head_rotation_sigma < 0.0 || self.pixel_noise_sigma < 0.0 {
            return err("head_rotation_sigma and synth.pixel_noise_sigma must be non-negative");
        }
        if self.gaze_range * self.pupil_gain > 2.0 * EYE_HALF_WIDTH {
            return err("gaze_range * pupil_gain moves the pupil out of the eye region");
        }
        if !(0.0..=1.0).contains(&self.incomplete_fraction) {
            return err("incomplete_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Everything the generator knows about one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFrameTruth {
    pub subject_id: String,
    /// Relative to the dataset root, matching `FrameRecord::frame_path`.
    pub frame_path: PathBuf,
    pub gaze_cm: [f64; 2],
    pub head_angle_deg: f64,
    /// Frame position of the head-local origin.
    pub head_origin: Point,
    /// Pupil offset from the eye center in head-local pixels (gain * gaze + noise).
    pub pupil_offset_px: [f64; 2],
    /// Pupil centers in frame pixels, image-left eye first.
    pub pupil_centers: [Point; 2],
    pub landmarks: Vec<Point>,
    pub face_rect: [f64; 4],
    pub left_eye_rect: [f64; 4],
    pub right_eye_rect: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub frames: Vec<SynthFrameTruth>,
}

impl SynthManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(TRUTH_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| GazeError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| GazeError::Config(format!("{}: {e}", path.display())))
    }
}

/// The 68 head-local landmark positions of the schematic face.
pub fn canonical_landmarks() -> Vec<Point> {
    let mut p: Vec<Point> = Vec::with_capacity(NUM_LANDMARKS);
    // Jaw: straight sides, rounded chin.
    for y in [-30.0, -5.0, 20.0, 45.0, 70.0] {
        p.push([-100.0, y]);
    }
    for t in 1..=7 {
        let a = std::f64::consts::PI * (1.0 - t as f64 / 8.0);
        p.push([95.0 * a.cos(), 90.0 + 40.0 * a.sin()]);
    }
    for y in [70.0, 45.0, 20.0, -5.0, -30.0] {
        p.push([100.0, y]);
    }
    // Brows are flat bars.
    for cx in [-40.0, 40.0] {
        for k in 0..5 {
            p.push([cx - 20.0 + 10.0 * k as f64, -30.0]);
        }
    }
    // Nose bridge and base.
    for k in 0..4 {
        p.push([0.0, 8.0 + 10.0 * k as f64]);
    }
    for k in 0..5 {
        p.push([-12.0 + 6.0 * k as f64, 50.0]);
    }
    // Eyes: left corner, two upper lid points, right corner, two lower lid points.
    for c in EYE_CENTERS {
        let (w, h) = (EYE_HALF_WIDTH, EYE_HALF_HEIGHT * 0.9);
        p.extend([
            [c[0] - w, c[1]],
            [c[0] - 7.0, c[1] - h],
            [c[0] + 7.0, c[1] - h],
            [c[0] + w, c[1]],
            [c[0] + 7.0, c[1] + h],
            [c[0] - 7.0, c[1] + h],
        ]);
    }
    // Lips: outer ring of 12, inner ring of 8.
    let mouth = [0.0, 85.0];
    for k in 0..12 {
        let a = std::f64::consts::PI * (1.0 + k as f64 / 6.0);
        p.push([mouth[0] + 25.0 * a.cos(), mouth[1] + 9.0 * a.sin()]);
    }
    for k in 0..8 {
        let a = std::f64::consts::PI * (1.0 + k as f64 / 4.0);
        p.push([mouth[0] + 16.0 * a.cos(), mouth[1] + 4.0 * a.sin()]);
    }
    debug_assert_eq!(p.len(), NUM_LANDMARKS);
    p
}

/// Head-local point to frame coordinates.
fn to_frame(p: Point, angle_deg: f64, origin: Point) -> Point {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (x, y) = (p[0] - FACE_CENTER[0], p[1] - FACE_CENTER[1]);
    [
        origin[0] + FACE_CENTER[0] + c * x - s * y,
        origin[1] + FACE_CENTER[1] + s * x + c * y,
    ]
}

fn to_local(p: Point, angle_deg: f64, origin: Point) -> Point {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (x, y) = (p[0] - origin[0] - FACE_CENTER[0], p[1] - origin[1] - FACE_CENTER[1]);
    [FACE_CENTER[0] + c * x + s * y, FACE_CENTER[1] - s * x + c * y]
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    background: [f64; 3],
    skin: [f64; 3],
    brow: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
}

fn palette(rng: &mut ChaCha8Rng) -> Palette {
    let mut jitter = |base: [f64; 3], amount: f64| base.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 255.0));
    let skin = jitter([200.0, 160.0, 130.0], 45.0);
    Palette {
        background: jitter([110.0, 120.0, 130.0], 60.0),
        skin,
        brow: jitter([60.0, 45.0, 35.0], 25.0),
        iris: jitter([90.0, 110.0, 90.0], 50.0),
        lips: jitter([170.0, 70.0, 80.0], 25.0),
    }
}

fn in_ellipse(p: Point, c: Point, rx: f64, ry: f64) -> bool {
    let dx = (p[0] - c[0]) / rx;
    let dy = (p[1] - c[1]) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Color of a head-local point, or `None` outside the head.
fn shade(p: Point, pupils: &[Point; 2], pal: &Palette) -> Option<[f64; 3]> {
    // Head: rounded box matching the jaw landmarks, with a domed top.
    let inside_head = (p[0].abs() <= 100.0 && (-50.0..=90.0).contains(&p[1]))
        || in_ellipse(p, [0.0, 90.0], 95.0, 40.0)
        || in_ellipse(p, [0.0, -50.0], 100.0, 30.0);
    let mut color = None;
    if inside_head {
        color = Some(pal.skin);
    }
    for c in EYE_CENTERS {
        if (p[0] - c[0]).abs() <= 20.0 && (-34.0..=-26.0).contains(&p[1]) {
            color = Some(pal.brow);
        }
        if in_ellipse(p, c, EYE_HALF_WIDTH, EYE_HALF_HEIGHT) {
            color = Some([245.0, 245.0, 240.0]);
        }
    }
    for q in pupils {
        if in_ellipse(p, *q, IRIS_RADIUS, IRIS_RADIUS) {
            color = Some(pal.iris);
        }
        if in_ellipse(p, *q, PUPIL_RADIUS, PUPIL_RADIUS) {
            color = Some([15.0, 15.0, 20.0]);
        }
    }
    if in_ellipse(p, [0.0, 40.0], 7.0, 12.0) && inside_head {
        color = Some(pal.skin.map(|v| v * 0.8));
    }
    if in_ellipse(p, [0.0, 85.0], 25.0, 9.0) {
        color = Some(pal.lips);
    }
    color
}

/// Renders one frame with 2x2 supersampling.
fn render(size: (u32, u32), angle: f64, origin: Point, pupils_local: &[Point; 2], pal: &Palette) -> RgbImage {
    let bg = pal.background.map(|v| v.round() as u8);
    let mut img = RgbImage::from_pixel(size.0, size.1, Rgb(bg));
    // Head extent is within 160 px of the rotation pivot.
    let c = to_frame(FACE_CENTER, angle, origin);
    let x0 = (c[0] - 165.0).floor().max(0.0) as u32;
    let y0 = (c[1] - 165.0).floor().max(0.0) as u32;
    let x1 = ((c[0] + 165.0).ceil() as u32).min(size.0);
    let y1 = ((c[1] + 165.0).ceil() as u32).min(size.1);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = [0.0; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let q = to_local([x as f64 + sx, y as f64 + sy], angle, origin);
                let col = shade(q, pupils_local, pal).unwrap_or(pal.background);
                for k in 0..3 {
                    acc[k] += col[k] / 4.0;
                }
            }
            img.put_pixel(x, y, Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

/// Head angle and pupil offset for one frame, given its gaze.
fn draw_pose(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (f64, [f64; 2]) {
    let mut angle = f64::INFINITY;
    if cfg.head_rotation_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.head_rotation_sigma).expect("finite sigma");
        while angle.abs() > MAX_HEAD_ANGLE {
            angle = n.sample(rng);
        }
    } else {
        angle = 0.0;
    }
    let noise = if cfg.pixel_noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.pixel_noise_sigma).expect("finite sigma");
        [n.sample(rng), n.sample(rng)]
    } else {
        [0.0, 0.0]
    };
    (angle, noise)
}

/// Pupil offset in head-local pixels.
pub fn pupil_offset(gaze_cm: [f64; 2], gain: f64, noise: [f64; 2]) -> [f64; 2] {
    [gain * gaze_cm[0] + noise[0], gain * gaze_cm[1] + noise[1]]
}

/// Subject split labels in proportion 70/20/10 (at least one of each when
/// there are three or more subjects).
pub fn subject_parts(n: usize) -> Vec<Part> {
    let mut n_test = ((n as f64) * 0.1).round() as usize;
    let mut n_val = ((n as f64) * 0.2).round() as usize;
    if n >= 3 {
        n_test = n_test.max(1);
        n_val = n_val.max(1);
    }
    let n_train = n.saturating_sub(n_val + n_test);
    let mut parts = vec![Part::Train; n_train];
    parts.extend(vec![Part::Val; n_val.min(n - n_train)]);
    parts.extend(vec![Part::Test; n - parts.len()]);
    parts
}

/// Writes the dataset and its truth manifest under `out_root`.
pub fn generate(cfg: &SynthConfig, out_root: &Path) -> Result<SynthManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_root).map_err(|e| GazeError::io(out_root, e))?;
    let canonical = canonical_landmarks();
    let parts = subject_parts(cfg.n_subjects);
    let n_incomplete = (cfg.incomplete_fraction * cfg.n_subjects as f64).round() as usize;
    let mut truths = Vec::with_capacity(cfg.n_subjects * cfg.frames_per_subject);
    for s in 0..cfg.n_subjects {
        let subject_id = format!("{s:05}");
        let dir = out_root.join(&subject_id);
        for sub in ["frames", "landmarks"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| GazeError::io(&d, e))?;
        }
        let mut srng = rng::stream(cfg.seed, &[rng::tag::SYNTH, s as u64]);
        let pal = palette(&mut srng);
        let mut frames = Vec::with_capacity(cfg.frames_per_subject);
        for f in 0..cfg.frames_per_subject {
            let mut frng = rng::stream(cfg.seed, &[rng::tag::SYNTH, s as u64, f as u64]);
            let r = cfg.gaze_range;
            let gaze = [frng.random_range(-r..=r), frng.random_range(-r..=r)];
            let (angle, noise) = draw_pose(cfg, &mut frng);
            let (w, h) = (cfg.frame_size.0 as f64, cfg.frame_size.1 as f64);
            let origin = [
                frng.random_range(160.0..w - 160.0),
                frng.random_range(160.0 - FACE_CENTER[1]..h - 160.0 - FACE_CENTER[1]),
            ];
            let offset = pupil_offset(gaze, cfg.pupil_gain, noise);
            let pupils_local = EYE_CENTERS.map(|c| [c[0] + offset[0], c[1] + offset[1]]);
            let image = render(cfg.frame_size, angle, origin, &pupils_local, &pal);
            let points: Vec<Point> = canonical.iter().map(|p| to_frame(*p, angle, origin)).collect();
            let lm = LandmarkSet::new(points.clone(), cfg.frame_size)?;
            let face = face_rect_from_landmarks(&lm, DEFAULT_FACE_EXPAND);
            let (le, re): (PixelRect, PixelRect) = eye_rects_from_landmarks(&lm);
            let file = format!("frames/{f:05}.png");
            let lm_file = format!("landmarks/{f:05}.json");
            let path = dir.join(&file);
            image.save(&path).map_err(|e| GazeError::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let lm_path = dir.join(&lm_file);
            std::fs::write(&lm_path, lm.to_json()).map_err(|e| GazeError::io(&lm_path, e))?;
            frames.push(FrameMeta {
                file: file.clone(),
                face_valid: true,
                eyes_valid: true,
                face_rect: face.to_array(),
                left_eye_rect: le.to_array(),
                right_eye_rect: re.to_array(),
                gaze_cm: gaze,
                device: DeviceClass::Phone,
                frame_size: Some([cfg.frame_size.0, cfg.frame_size.1]),
                landmarks: Some(lm_file),
            });
            truths.push(SynthFrameTruth {
                subject_id: subject_id.clone(),
                frame_path: Path::new(&subject_id).join(&file),
                gaze_cm: gaze,
                head_angle_deg: angle,
                head_origin: origin,
                pupil_offset_px: offset,
                pupil_centers: pupils_local.map(|p| to_frame(p, angle, origin)),
                landmarks: points,
                face_rect: face.to_array(),
                left_eye_rect: le.to_array(),
                right_eye_rect: re.to_array(),
            });
        }
        SubjectMeta {
            session_complete: s >= n_incomplete,
            split: Some(parts[s]),
            frames,
        }
        .write(&dir)?;
    }
    let manifest = SynthManifest {
        config: cfg.clone(),
        frames: truths,
    };
    let path = out_root.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| GazeError::io(&path, e))?;
    Ok(manifest)
}

/// Affine least-squares fit `gaze = A * offset + b`, per output axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    /// Rows are output axes; columns multiply `[offset_x, offset_y, 1]`.
    pub coef: [[f64; 3]; 2],
}

impl LinearDecoder {
    pub fn fit(offsets: &[[f64; 2]], gaze: &[[f64; 2]]) -> Self {
        // Normal equations on the 3x3 design Gram matrix.
        let mut g = [[0.0; 3]; 3];
        let mut r = [[0.0; 3]; 2];
        for (o, t) in offsets.iter().zip(gaze) {
            let x = [o[0], o[1], 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] += x[i] * x[j];
                }
                for k in 0..2 {
                    r[k][i] += x[i] * t[k];
                }
            }
        }
        let inv = invert3(g);
        let mut coef = [[0.0; 3]; 2];
        for k in 0..2 {
            for i in 0..3 {
                coef[k][i] = (0..3).map(|j| inv[i][j] * r[k][j]).sum();
            }
        }
        Self { coef }
    }

    pub fn predict(&self, o: [f64; 2]) -> [f64; 2] {
        let x = [o[0], o[1], 1.0];
        [0, 1].map(|k| (0..3).map(|i| self.coef[k][i] * x[i]).sum())
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

fn mean_distance(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    let e: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| crate::eval::euclidean_error(*p, *t))
        .collect();
    crate::eval::pairwise_mean(&e)
}

/// Error of the least-squares decoder fitted on the `fit` frames of a
/// generated dataset and evaluated on the `test` frames.
pub fn oracle_error(manifest: &SynthManifest, fit: &[usize], test: &[usize]) -> f64 {
    let pick = |ids: &[usize], f: fn(&SynthFrameTruth) -> [f64; 2]| ids.iter().map(|&i| f(&manifest.frames[i])).collect::<Vec<_>>();
    let dec = LinearDecoder::fit(&pick(fit, |t| t.pupil_offset_px), &pick(fit, |t| t.gaze_cm));
    let pred: Vec<[f64; 2]> = pick(test, |t| t.pupil_offset_px).into_iter().map(|o| dec.predict(o)).collect();
    mean_distance(&pred, &pick(test, |t| t.gaze_cm))
}

/// Monte-Carlo estimate of the least-squares decoder's mean error under the
/// generator's sampling law, fitted and scored on independent draws.
pub fn oracle_floor_monte_carlo(cfg: &SynthConfig, draws: usize, seed: u64) -> f64 {
    let mut rng = rng::stream(seed, &[rng::tag::SYNTH, u64::MAX]);
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma.max(0.0)).expect("finite sigma");
    let r = cfg.gaze_range;
    let mut draw = |n: usize| {
        let mut o = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for _ in 0..n {
            let gaze = [rng.random_range(-r..=r), rng.random_range(-r..=r)];
            let nz = [noise.sample(&mut rng), noise.sample(&mut rng)];
            o.push(pupil_offset(gaze, cfg.pupil_gain, nz));
            g.push(gaze);
        }
        (o, g)
    };
    let (fo, fg) = draw(draws);
    let (to, tg) = draw(draws);
    let dec = LinearDecoder::fit(&fo, &fg);
    let pred: Vec<[f64; 2]> = to.iter().map(|o| dec.predict(*o)).collect();
    mean_distance(&pred, &tg)
}

/// Mean distance from a uniform point on `[-r, r]^2` to the center.
pub fn mean_predictor_baseline(gaze_range: f64) -> f64 {
    let s2 = std::f64::consts::SQRT_2;
    2.0 * gaze_range * (s2 + (1.0 + s2).ln()) / 6.0
}
