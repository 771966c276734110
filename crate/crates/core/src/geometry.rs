//! Landmark-based face normalization: minimum-area rectangles, head-roll
//! estimation, rotation correction, region cropping and face-grid encoding.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::imaging;

pub const NUM_LANDMARKS: usize = 68;
pub const DEFAULT_GRID: usize = 25;
pub const DEFAULT_EYE_EXPAND: f64 = 1.5;
pub const DEFAULT_FACE_EXPAND: f64 = 1.2;

/// Index ranges of the two eye contours in the 68-point convention.
pub const EYE_A: std::ops::Range<usize> = 36..42;
pub const EYE_B: std::ops::Range<usize> = 42..48;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub frame_size: (u32, u32),
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, frame_size: (u32, u32)) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(GazeError::InvalidLandmarks(format!(
                "expected {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(GazeError::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(Self { points, frame_size })
    }

    /// Reads the per-frame landmark file: a JSON array of 68 `[x, y]` pairs.
    pub fn load(path: &Path, frame_size: (u32, u32)) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
        Self::from_json(&text, frame_size)
    }

    pub fn from_json(text: &str, frame_size: (u32, u32)) -> Result<Self> {
        let points: Vec<Point> = serde_json::from_str(text)
            .map_err(|e| GazeError::InvalidLandmarks(format!("malformed landmark json: {e}")))?;
        Self::new(points, frame_size)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("points serialize")
    }

    /// Applies `pivot + R(angle) (p - pivot)` to every point.
    pub fn rotated(&self, angle_deg: f64, pivot: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&p| rotate_point(p, angle_deg, pivot))
                .collect(),
            frame_size: self.frame_size,
        }
    }

    pub fn eye(&self, range: std::ops::Range<usize>) -> &[Point] {
        &self.points[range]
    }
}

pub fn rotate_point(p: Point, angle_deg: f64, pivot: Point) -> Point {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let dx = p[0] - pivot[0];
    let dy = p[1] - pivot[1];
    [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy]
}

/// Axis-aligned rectangle in pixel units; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelRect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> Point {
        [self.x + self.w / 2.0, self.y + self.h / 2.0]
    }

    pub fn square_about(center: Point, side: f64) -> Self {
        Self::new(center[0] - side / 2.0, center[1] - side / 2.0, side, side)
    }

    pub fn bounding(points: &[Point]) -> Self {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Intersection with `[0, w] x [0, h]`, or `None` when empty.
    pub fn clipped(&self, frame: (u32, u32)) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(frame.0 as f64);
        let y1 = (self.y + self.h).min(frame.1 as f64);
        (x1 > x0 && y1 > y0).then(|| Self::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Oriented rectangle; `w` runs along the direction `angle`, `h` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Point,
    pub size: (f64, f64),
    /// Degrees in `(-45, 45]`.
    pub angle: f64,
}

impl OrientedRect {
    pub fn axis_aligned(rect: &PixelRect) -> Self {
        Self {
            center: rect.center(),
            size: (rect.w, rect.h),
            angle: 0.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.size.0 * self.size.1
    }

    /// Corners in order around the rectangle.
    pub fn corners(&self) -> [Point; 4] {
        let (hw, hh) = (self.size.0 / 2.0, self.size.1 / 2.0);
        [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]].map(|[dx, dy]| {
            rotate_point(
                [self.center[0] + dx, self.center[1] + dy],
                self.angle,
                self.center,
            )
        })
    }

    /// Whether `p` lies in the rectangle, using half-open extents
    /// `[-w/2, w/2) x [-h/2, h/2)` in the rectangle frame.
    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let (hw, hh) = (self.size.0 / 2.0, self.size.1 / 2.0);
        (-hw..hw).contains(&lx) && (-hh..hh).contains(&ly)
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by monotone chain, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Minimum-area enclosing rectangle via rotating calipers over the convex hull.
pub fn min_area_rect(points: &[Point]) -> Result<OrientedRect> {
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(GazeError::Degenerate("non-finite point".into()));
    }
    let hull = convex_hull(points);
    let n = hull.len();
    if n < 3 {
        return Err(GazeError::Degenerate(format!(
            "{} distinct hull vertices (points collinear or coincident)",
            n
        )));
    }
    let edge_dir = |i: usize| -> Point {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        [dx / len, dy / len]
    };

    // Caliper indices: farthest along the edge, across it, and against it.
    let u0 = edge_dir(0);
    let v0 = [-u0[1], u0[0]];
    let argmax = |f: &dyn Fn(Point) -> f64| {
        (0..n)
            .max_by(|&a, &b| f(hull[a]).total_cmp(&f(hull[b])))
            .unwrap()
    };
    let mut j = argmax(&|p| dot(p, u0));
    let mut k = argmax(&|p| dot(p, v0));
    let mut l = argmax(&|p| -dot(p, u0));

    let mut best: Option<(f64, Point, f64, f64, f64, f64)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let v = [-u[1], u[0]];
        while dot(hull[(j + 1) % n], u) > dot(hull[j], u) {
            j = (j + 1) % n;
        }
        while dot(hull[(k + 1) % n], v) > dot(hull[k], v) {
            k = (k + 1) % n;
        }
        while dot(hull[(l + 1) % n], u) < dot(hull[l], u) {
            l = (l + 1) % n;
        }
        let max_u = dot(hull[j], u);
        let min_u = dot(hull[l], u);
        let base_v = dot(hull[i], v);
        let height = dot(hull[k], v) - base_v;
        let width = max_u - min_u;
        let area = width * height;
        if best.map_or(true, |b| area < b.0) {
            best = Some((area, u, min_u, max_u, base_v, height));
        }
    }
    let (_, u, min_u, max_u, base_v, height) = best.expect("non-empty hull");
    let v = [-u[1], u[0]];
    let cu = (min_u + max_u) / 2.0;
    let cv = base_v + height / 2.0;
    let center = [cu * u[0] + cv * v[0], cu * u[1] + cv * v[1]];
    let mut w = max_u - min_u;
    let mut h = height;
    let mut angle = u[1].atan2(u[0]).to_degrees();
    while angle > 45.0 {
        angle -= 90.0;
        std::mem::swap(&mut w, &mut h);
    }
    while angle <= -45.0 {
        angle += 90.0;
        std::mem::swap(&mut w, &mut h);
    }
    if !(w > 0.0 && h > 0.0) {
        return Err(GazeError::Degenerate("zero-area rectangle".into()));
    }
    Ok(OrientedRect {
        center,
        size: (w, h),
        angle,
    })
}

pub fn fit_min_area_rect(landmarks: &LandmarkSet) -> Result<OrientedRect> {
    min_area_rect(&landmarks.points)
}

/// Head roll in degrees, taken from the landmark rectangle orientation.
pub fn estimate_head_rotation(landmarks: &LandmarkSet) -> Result<f64> {
    Ok(fit_min_area_rect(landmarks)?.angle)
}

/// Rotates frame and landmarks together by `angle_deg` about `pivot`.
pub fn rotate_frame(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    angle_deg: f64,
    pivot: Point,
) -> (RgbImage, LandmarkSet) {
    (
        imaging::rotate_image(image, angle_deg, pivot),
        landmarks.rotated(angle_deg, pivot),
    )
}

/// Undoes a head roll of `angle_deg` by rotating about the face-rectangle center.
pub fn rotation_correct(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    angle_deg: f64,
) -> Result<(RgbImage, LandmarkSet)> {
    if angle_deg.abs() > 45.0 {
        return Err(GazeError::InvalidRegion(format!(
            "rotation angle {angle_deg} exceeds 45 degrees"
        )));
    }
    let pivot = fit_min_area_rect(landmarks)?.center;
    Ok(rotate_frame(image, landmarks, -angle_deg, pivot))
}

/// Crops `rect` (rounded to whole pixels, black outside the frame) and
/// resizes it bilinearly to an `out_size` square.
pub fn crop_roi(image: &RgbImage, rect: &PixelRect, out_size: u32) -> Result<RgbImage> {
    let x0 = rect.x.round();
    let y0 = rect.y.round();
    let w = (rect.x + rect.w).round() - x0;
    let h = (rect.y + rect.h).round() - y0;
    if !(w >= 1.0 && h >= 1.0) || !rect.w.is_finite() || !rect.h.is_finite() {
        return Err(GazeError::InvalidRegion(format!(
            "rectangle {:?} has no area",
            rect.to_array()
        )));
    }
    let canvas = imaging::crop_canvas(image, x0 as i64, y0 as i64, w as u32, h as u32);
    Ok(imaging::resize_bilinear(&canvas, out_size, out_size))
}

/// Square eye regions around the two six-point eye contours, ordered by
/// image x (the first has the smaller center x).
pub fn eye_rects_from_landmarks(landmarks: &LandmarkSet) -> (PixelRect, PixelRect) {
    eye_rects_with_expand(landmarks, DEFAULT_EYE_EXPAND)
}

pub fn eye_rects_with_expand(landmarks: &LandmarkSet, expand: f64) -> (PixelRect, PixelRect) {
    let make = |range| {
        let bb = PixelRect::bounding(landmarks.eye(range));
        PixelRect::square_about(bb.center(), expand * bb.w.max(bb.h))
    };
    let a = make(EYE_A);
    let b = make(EYE_B);
    if a.center()[0] <= b.center()[0] {
        (a, b)
    } else {
        (b, a)
    }
}

/// Square face region around all landmarks, side `expand * max(w, h)`.
pub fn face_rect_from_landmarks(landmarks: &LandmarkSet, expand: f64) -> PixelRect {
    let bb = PixelRect::bounding(&landmarks.points);
    PixelRect::square_about(bb.center(), expand * bb.w.max(bb.h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceGrid {
    pub size: usize,
    /// Row-major `size * size` cells, each 0 or 1.
    pub cells: Vec<u8>,
    pub frame_size: (u32, u32),
    pub source_rect: OrientedRect,
}

impl FaceGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.size + col]
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// Grid with columns reversed (horizontal mirror of the frame).
    /// `source_rect` keeps describing the unmirrored frame, so mirroring
    /// twice is exact.
    pub fn mirrored(&self) -> Self {
        let n = self.size;
        let mut cells = vec![0u8; n * n];
        for r in 0..n {
            for c in 0..n {
                cells[r * n + c] = self.cells[r * n + (n - 1 - c)];
            }
        }
        Self {
            cells,
            ..self.clone()
        }
    }
}

/// Rasterizes `face_rect` into a `grid x grid` mask: a cell is set when its
/// center lies inside the (possibly rotated) rectangle.
pub fn make_face_grid(frame_size: (u32, u32), face_rect: &OrientedRect, grid: usize) -> FaceGrid {
    let grid = grid.max(1);
    let cw = frame_size.0 as f64 / grid as f64;
    let ch = frame_size.1 as f64 / grid as f64;
    let mut cells = vec![0u8; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let p = [(c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch];
            cells[r * grid + c] = face_rect.contains(p) as u8;
        }
    }
    FaceGrid {
        size: grid,
        cells,
        frame_size,
        source_rect: *face_rect,
    }
}
