//! Acceptance suite: one PASS/FAIL line per criterion. Gating failures make
//! the process exit nonzero; soft checks are reported only.
//!
//! The learning and ablation criteria train toy-profile models on a
//! 2000-frame synthetic set and take tens of minutes on one core.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use gaze_core::augment::{augment_sample, mirror, rgb_pixel, ycbcr_pixel, AugmentConfig, ImageSizes, Sample, SampleMeta};
use gaze_core::config::{preset, Profile};
use gaze_core::dataio::{load_dataset, split_relaxed, split_strict, DatasetIndex, Part, SubjectInfo, RELAXED_RATIOS};
use gaze_core::eval::{euclidean_error, euclidean_errors};
use gaze_core::explain::{disc_mass_fraction, explain, gradcam_pp, CamConfig};
use gaze_core::geometry::{
    fit_min_area_rect, make_face_grid, min_area_rect, rotate_point, rotation_correct, LandmarkSet, OrientedRect, Point,
};
use gaze_core::model::{build_model, Backbone, FusionWidths, GazeBatch, GazeModel, ModelConfig, Norm};
use gaze_core::nn::Ctx;
use gaze_core::pipeline::{make_split, prepare_data, run_training, with_seed, PreparedData};
use gaze_core::predict::Predictor;
use gaze_core::synthgen::{
    canonical_landmarks, generate, mean_predictor_baseline, oracle_floor_monte_carlo, SynthConfig, SynthManifest,
    IRIS_RADIUS,
};
use gaze_core::train::{cyclic_lr, step_decay_lr, train, Cyclic, StepDecay, TrainData, TrainOptions};
use gaze_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Suite {
    gating_failures: Vec<&'static str>,
}

impl Suite {
    fn report(&mut self, name: &'static str, gating: bool, o: Outcome) {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let soft = if gating { "" } else { " (soft)" };
        println!("{tag} {name}{soft}: {}", o.detail);
        if gating && !o.pass {
            self.gating_failures.push(name);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, side: u32) -> image::RgbImage {
    image::RgbImage::from_fn(side, side, |_, _| image::Rgb([r.random(), r.random(), r.random()]))
}

fn random_sample(r: &mut ChaCha8Rng, side: u32) -> Sample {
    let frame = (r.random_range(100..900), r.random_range(100..900));
    let rect = OrientedRect {
        center: [r.random_range(0.0..frame.0 as f64), r.random_range(0.0..frame.1 as f64)],
        size: (r.random_range(20.0..400.0), r.random_range(20.0..400.0)),
        angle: r.random_range(-44.0..45.0),
    };
    Sample {
        left_eye: random_image(r, side),
        right_eye: random_image(r, side),
        face: random_image(r, side),
        grid: make_face_grid(frame, &rect, 25),
        gaze_cm: [r.random_range(-20.0..20.0), r.random_range(-20.0..20.0)],
        meta: SampleMeta::default(),
    }
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let n = 10_000;
    let pts: Vec<[f64; 4]> = (0..n).map(|_| [0; 4].map(|_| r.random_range(-30.0..30.0))).collect();
    let pred = Array2::from_shape_fn((n, 2), |(i, k)| pts[i][k]);
    let truth = Array2::from_shape_fn((n, 2), |(i, k)| pts[i][2 + k]);
    let vec = euclidean_errors(pred.view(), truth.view()).unwrap();
    let mut worst = 0.0f64;
    for (i, p) in pts.iter().enumerate() {
        let lp = ((p[0] - p[2]).powi(2) + (p[1] - p[3]).powi(2)).sqrt();
        worst = worst.max((vec[i] - lp).abs()).max((euclidean_error([p[0], p[1]], [p[2], p[3]]) - lp).abs());
    }
    let five = euclidean_error([3.0, 4.0], [0.0, 0.0]);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && five == 5.0 && secs < 1.0,
        format!("max |vectorized - loop| = {worst:e} over {n} pairs, (3,4) -> {five}, {secs:.3} s"),
    )
}

fn geometry_round_trip() -> Outcome {
    let base = LandmarkSet::new(
        canonical_landmarks().into_iter().map(|p| [p[0] + 320.0, p[1] + 240.0]).collect(),
        (640, 480),
    )
    .unwrap();
    let c0 = fit_min_area_rect(&base).unwrap().center;
    let image = image::RgbImage::new(640, 480);
    let (mut worst_px, mut worst_deg) = (0.0f64, 0.0f64);
    for step in -8..=8 {
        let theta = 5.0 * step as f64;
        let rotated = base.rotated(theta, [301.0, 257.0]);
        let fit = fit_min_area_rect(&rotated).unwrap();
        worst_deg = worst_deg.max((fit.angle - theta).abs());
        let (_, corrected) = rotation_correct(&image, &rotated, fit.angle).unwrap();
        for (p, q) in corrected.points.iter().zip(&base.points) {
            let expect = [q[0] - c0[0] + fit.center[0], q[1] - c0[1] + fit.center[1]];
            worst_px = worst_px.max((p[0] - expect[0]).hypot(p[1] - expect[1]));
        }
    }
    outcome(
        worst_px <= 1e-6 && worst_deg <= 0.5,
        format!("theta -40..40 step 5: landmark error {worst_px:e} px, angle error {worst_deg:.2e} deg"),
    )
}

fn exhaustive_min_area(pts: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, &a) in pts.iter().enumerate() {
        for (j, &b) in pts.iter().enumerate() {
            if i == j || a == b {
                continue;
            }
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let tol = 1e-12 * (1.0 + ex.abs() + ey.abs());
            if pts.iter().any(|p| ex * (p[1] - a[1]) - ey * (p[0] - a[0]) < -tol) {
                continue;
            }
            let len = ex.hypot(ey);
            let (u, v) = ([ex / len, ey / len], [-ey / len, ex / len]);
            let proj = |d: [f64; 2]| pts.iter().map(|p| p[0] * d[0] + p[1] * d[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let ((u0, u1), (v0, v1)) = (proj(u), proj(v));
            best = best.min((u1 - u0) * (v1 - v0));
        }
    }
    best
}

fn min_area_rect_oracle() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(3..40);
        let c = [r.random_range(-500.0..500.0), r.random_range(-500.0..500.0)];
        let (a, b) = (r.random_range(1.0..300.0), r.random_range(1.0..300.0));
        let rot = r.random_range(0.0..180.0);
        let mut pts: Vec<Point> = (0..n)
            .map(|_| {
                let t: f64 = r.random_range(0.0..std::f64::consts::TAU);
                let s = if r.random_bool(0.7) { 1.0 } else { r.random_range(0.0..1.0) };
                rotate_point([c[0] + s * a * t.cos(), c[1] + s * b * t.sin()], rot, c)
            })
            .collect();
        if min_area_rect(&pts).is_err() {
            pts.push([c[0] + a, c[1] + b]);
            pts.push([c[0] - a, c[1] + b]);
        }
        let got = min_area_rect(&pts).unwrap().area();
        let oracle = exhaustive_min_area(&pts);
        worst = worst.max((got - oracle).abs() / oracle);
    }
    outcome(worst <= 1e-9, format!("200 hulls, max relative area gap {worst:e}"))
}

fn face_grid_oracle() -> Outcome {
    let mut r = rng(5);
    let mut mismatched = 0;
    for k in 0..100 {
        let frame = (r.random_range(64..1200u32), r.random_range(64..1200u32));
        let rect = OrientedRect {
            center: [r.random_range(-50.0..frame.0 as f64 + 50.0), r.random_range(-50.0..frame.1 as f64 + 50.0)],
            size: (r.random_range(5.0..800.0), r.random_range(5.0..800.0)),
            angle: r.random_range(-44.9..45.0),
        };
        let n = [5, 13, 25][k % 3];
        let corners = rect.corners();
        let brute: Vec<u8> = (0..n * n)
            .map(|i| {
                let p = [
                    ((i % n) as f64 + 0.5) * frame.0 as f64 / n as f64,
                    ((i / n) as f64 + 0.5) * frame.1 as f64 / n as f64,
                ];
                (0..4).all(|e| {
                    let (a, b) = (corners[e], corners[(e + 1) % 4]);
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0.0
                }) as u8
            })
            .collect();
        if make_face_grid(frame, &rect, n).cells != brute {
            mismatched += 1;
        }
    }
    outcome(mismatched == 0, format!("{mismatched} of 100 random rectangles differ from brute force"))
}

fn augmentation() -> Outcome {
    let mut r = rng(3);
    let sizes = ImageSizes {
        crop: 16,
        train_resize: 15,
        input: 14,
    };
    let mut involution = true;
    let mut negates_x = true;
    for _ in 0..1000 {
        let s = random_sample(&mut r, 9);
        let m = mirror(&s);
        involution &= mirror(&m) == s;
        negates_x &= m.gaze_cm[0].to_bits() == (-s.gaze_cm[0]).to_bits() && m.gaze_cm[1].to_bits() == s.gaze_cm[1].to_bits();
    }
    let crop_jitter = AugmentConfig {
        random_crop: true,
        jitter: true,
        ..AugmentConfig::default()
    };
    let mut labels_kept = true;
    for _ in 0..1000 {
        let s = random_sample(&mut r, sizes.crop);
        let a = augment_sample(&s, &crop_jitter, sizes, &mut r).unwrap();
        labels_kept &= a.gaze_cm.map(f64::to_bits) == s.gaze_cm.map(f64::to_bits) && a.grid == s.grid;
    }
    let mut worst = 0;
    for c in 0..(1u32 << 24) {
        let p = [(c >> 16) as u8, (c >> 8) as u8, c as u8];
        let back = rgb_pixel(ycbcr_pixel(p));
        for k in 0..3 {
            worst = worst.max((back[k] as i32 - p[k] as i32).abs());
        }
    }
    outcome(
        involution && negates_x && labels_kept && worst <= 1,
        format!(
            "mirror involution {involution}, mirror negates only x {negates_x}, crop/jitter keep labels {labels_kept}, YCbCr worst round-trip error {worst} over all 2^24 colors"
        ),
    )
}

fn schedule() -> Outcome {
    let c = Cyclic::default();
    let mut ok = true;
    for i in 0..=20_000 {
        let t = i as f64 * 40.0 / 20_000.0;
        let v = cyclic_lr(t, &c);
        ok &= v >= c.min_lr - 1e-15 && v <= c.max_lr + 1e-15;
        ok &= (v - cyclic_lr(t + c.period_epochs, &c)).abs() < 1e-12;
    }
    let pinned = [(0.0, 5e-4), (4.0, 3e-3), (2.0, 1.75e-3)];
    let pinned_ok = pinned.iter().all(|&(t, v)| (cyclic_lr(t, &c) - v).abs() < 1e-15);
    let s = StepDecay::default();
    let step_ok = step_decay_lr(0, 30, &s).unwrap() == 1e-3 && step_decay_lr(29, 30, &s).unwrap() == 1e-4;
    outcome(
        ok && pinned_ok && step_ok,
        format!("dense-grid periodicity and bounds {ok}, pinned cyclic values {pinned_ok}, step decay 0 -> 1e-3 and 29 -> 1e-4 {step_ok}"),
    )
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        backbone: Backbone::TwoLayer,
        norm: Norm::BatchNorm,
        input_size: 6,
        width_mult: 0.5,
        grid_size: 3,
        fusion: FusionWidths {
            eye_fc: 5,
            face_fc1: 6,
            face_fc2: 4,
            grid_fc1: 5,
            grid_fc2: 3,
            head_fc1: 6,
            out: 2,
        },
        init_seed: 17,
        ..ModelConfig::default()
    };
    let mut model: GazeModel<f64> = build_model(&cfg).unwrap();
    let mut r = rng(99);
    let (b, s) = (3, 6);
    let mut img = || Array4::from_shape_simple_fn((b, 3, s, s), || StandardNormal.sample(&mut r));
    let (le, re, fa) = (img(), img(), img());
    let batch = GazeBatch {
        left_eye: le,
        right_eye: re,
        face: fa,
        grid: Array2::from_shape_fn((b, 9), |(i, j)| ((i + j) % 2) as f64),
        gaze_cm: None,
    };
    let w = Array2::from_shape_simple_fn((b, 2), || StandardNormal.sample(&mut r));
    let objective = |m: &GazeModel<f64>| {
        let mut dr = rng(0);
        let mut ctx = Ctx::train(&m.params, &mut dr);
        ctx.dropout = false;
        (&m.forward(&mut ctx, &batch).unwrap().0 * &w).sum()
    };
    let mut grads = model.params.zero_grads();
    {
        let mut dr = rng(0);
        let mut ctx = Ctx::train(&model.params, &mut dr);
        ctx.dropout = false;
        let (_, cache) = model.forward(&mut ctx, &batch).unwrap();
        model.backward(&mut ctx, cache, w.clone(), &mut grads);
    }
    let h = 1e-6;
    let n_t = model.params.values.len();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let t = k % n_t;
        let j = r.random_range(0..model.params.values[t].len());
        let orig = model.params.values[t].as_slice_memory_order().unwrap()[j];
        let mut eval_at = |v: f64| {
            model.params.values[t].as_slice_memory_order_mut().unwrap()[j] = v;
            objective(&model)
        };
        let numeric = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
        eval_at(orig);
        let analytic = grads.values[t].as_slice_memory_order().unwrap()[j];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 120.0, format!("100 parameters, max relative error {worst:e}, {secs:.2} s"))
}

fn frozen_backbone(samples: &[Sample]) -> Outcome {
    let step = |n: u32| -> bool {
        let cfg = preset(n, Profile::Toy).unwrap();
        let mut model: GazeModel<f32> = build_model(&cfg.model).unwrap();
        let trunk = |m: &GazeModel<f32>| -> Vec<Vec<u32>> {
            m.trunk_params.iter().map(|id| m.params.values[id.0].iter().map(|v| v.to_bits()).collect()).collect()
        };
        let before = trunk(&model);
        let mut tc = cfg.train.clone();
        tc.epochs = 1;
        tc.batch_size = samples.len();
        let data = TrainData { train: samples, val: &[] };
        let opts = TrainOptions {
            quiet: true,
            ..TrainOptions::default()
        };
        train(&mut model, &data, &tc, &cfg.augment, cfg.sizes, &opts).unwrap();
        before == trunk(&model)
    };
    let frozen_same = step(10);
    let unfrozen_same = step(11);
    outcome(
        frozen_same && !unfrozen_same,
        format!("frozen trunk bit-identical {frozen_same}, unfrozen trunk identical {unfrozen_same}"),
    )
}

fn gradcam_toy() -> Outcome {
    let a = Array3::from_shape_vec((2, 2, 2), vec![1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let g = Array3::from_shape_vec((2, 2, 2), vec![1.0, 1.0, 1.0, 1.0, -1.0, 2.0, 0.0, 0.0]).unwrap();
    // Channel weights by hand: 4 * (1/6) = 2/3 and 2 * (4/24) = 1/3.
    let expect = [2.0 / 3.0, 5.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    let m = gradcam_pp(a.view(), g.view()).unwrap();
    let err = m.iter().zip(expect).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    outcome(err <= 1e-6, format!("hand-computed 2x2 map, max error {err:e}"))
}

fn index_of(subjects: &[(bool, Option<Part>)]) -> DatasetIndex {
    let mut ids = BTreeMap::new();
    let mut info = BTreeMap::new();
    for (i, (complete, part)) in subjects.iter().enumerate() {
        ids.insert(format!("{i:05}"), Vec::new());
        info.insert(
            format!("{i:05}"),
            SubjectInfo {
                session_complete: *complete,
                provided_split: *part,
            },
        );
    }
    DatasetIndex {
        records: Vec::new(),
        subjects: ids,
        subject_info: info,
        source_root: ".".into(),
    }
}

fn splits() -> Outcome {
    let mut r = rng(8);
    let parts = [Part::Train, Part::Val, Part::Test];
    let subjects: Vec<(bool, Option<Part>)> = (0..40).map(|_| (r.random_bool(0.7), Some(parts[r.random_range(0..3)]))).collect();
    let idx = index_of(&subjects);
    let s = split_strict(&idx, &idx.provided_labels()).unwrap();
    let strict_ok = s.val.iter().chain(&s.test).all(|id| idx.subject_info[id].session_complete)
        && s.train.len() + s.val.len() + s.test.len() == 40;
    let ten = index_of(&vec![(true, None); 10]);
    let relaxed = split_relaxed(&ten, RELAXED_RATIOS, 0).unwrap().counts();
    let many = index_of(&vec![(true, None); 37]);
    let disjoint = (0..100).all(|seed| {
        let s = split_relaxed(&many, RELAXED_RATIOS, seed).unwrap();
        let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        all.len() == 37 && s.train.len() + s.val.len() + s.test.len() == 37
    });
    outcome(
        strict_ok && relaxed == (7, 2, 1) && disjoint,
        format!("strict keeps incomplete subjects out of val/test {strict_ok}, relaxed on 10 subjects {relaxed:?}, disjoint over 100 seeds {disjoint}"),
    )
}

async fn post(app: &axum::Router, body: Body, content_type: &str) -> (StatusCode, Value) {
    let req = Request::post("/predict").header("content-type", content_type).body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn service_equivalence(checkpoint: &Path, data_root: &Path, manifest: &SynthManifest, test: &[Sample]) -> Outcome {
    let predictor = Arc::new(Predictor::load(checkpoint).unwrap());
    let state = AppState::with_model(&ServiceConfig::default(), predictor.clone());
    let app = router(state);
    let truth: BTreeMap<String, &gaze_core::synthgen::SynthFrameTruth> =
        manifest.frames.iter().map(|f| (f.frame_path.to_string_lossy().into_owned(), f)).collect();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let b64 = |b: &[u8]| base64::engine::general_purpose::STANDARD.encode(b);
    let mut equal = 0;
    let frames: Vec<&str> = test.iter().take(50).map(|s| s.meta.frame_id.as_str()).collect();
    for id in &frames {
        let bytes = std::fs::read(data_root.join(id)).unwrap();
        let lm = &truth[*id].landmarks;
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        let direct = predictor.predict_frame(&img, &LandmarkSet::new(lm.clone(), img.dimensions()).unwrap()).unwrap();
        let body = json!({"image": b64(&bytes), "landmarks": lm});
        let (status, v) = rt.block_on(post(&app, Body::from(body.to_string()), "application/json"));
        let served = [v["gaze_cm"][0].as_f64().unwrap_or(f64::NAN), v["gaze_cm"][1].as_f64().unwrap_or(f64::NAN)];
        if status == StatusCode::OK && served.map(f64::to_bits) == direct.map(f64::to_bits) {
            equal += 1;
        }
    }
    let png = std::fs::read(data_root.join(frames[0])).unwrap();
    let malformed = [
        (json!({"landmarks": [[0.0, 0.0]]}).to_string(), "missing_image"),
        (json!({"image": "@@not base64@@"}).to_string(), "undecodable_image"),
        (json!({"image": b64(b"garbage bytes")}).to_string(), "undecodable_image"),
        ("{not json".to_string(), "malformed_request"),
        (json!({"image": b64(&png), "landmarks": [[1.0, 2.0]]}).to_string(), "malformed_landmarks"),
        (json!({"image": b64(&png), "extra": 1}).to_string(), "malformed_request"),
    ];
    let mut coded = 0;
    for (body, code) in &malformed {
        let (status, v) = rt.block_on(post(&app, Body::from(body.clone()), "application/json"));
        if status.is_client_error() && v["error"]["code"] == *code {
            coded += 1;
        }
    }
    outcome(
        equal == frames.len() && frames.len() == 50 && coded == malformed.len(),
        format!("{equal}/{} responses bit-equal to direct calls, {coded}/{} malformed requests answered with the coded 4xx", frames.len(), malformed.len()),
    )
}

fn saliency(model: &GazeModel<f32>, cfg: &gaze_core::config::RunConfig, manifest: &SynthManifest, test: &[Sample]) -> Outcome {
    let truth: BTreeMap<String, &gaze_core::synthgen::SynthFrameTruth> =
        manifest.frames.iter().map(|f| (f.frame_path.to_string_lossy().into_owned(), f)).collect();
    let side = cfg.sizes.input as f64;
    let mut hits = 0;
    let n = test.len().min(50);
    for s in &test[..n] {
        let t = truth[&s.meta.frame_id];
        let r = explain(model, s, &cfg.augment, cfg.sizes, &CamConfig::default()).unwrap();
        // Image-left pupil inside the left-eye crop, scaled to network input.
        let [x, y, w, _] = t.left_eye_rect;
        let k = side / w;
        let c = [(t.pupil_centers[0][0] - x) * k, (t.pupil_centers[0][1] - y) * k];
        let (mass, area) = disc_mass_fraction(&r.map, c, IRIS_RADIUS * k);
        if mass >= 2.0 * area {
            hits += 1;
        }
    }
    let frac = hits as f64 / n as f64;
    outcome(frac >= 0.8, format!("iris-disc mass >= 2x its area fraction on {hits}/{n} test images ({:.0}%)", 100.0 * frac))
}

struct Toy {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    synth: SynthConfig,
    manifest: SynthManifest,
    data: PreparedData,
}

fn toy_data() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("synth");
    let synth = SynthConfig {
        n_subjects: 20,
        frames_per_subject: 100,
        pixel_noise_sigma: 0.6,
        ..SynthConfig::default()
    };
    let manifest = generate(&synth, &root).unwrap();
    let index = load_dataset(&root).unwrap();
    let cfg = preset(11, Profile::Toy).unwrap();
    let split = make_split(&index, cfg.data.split, cfg.data.split_seed).unwrap();
    let data = prepare_data(&index, split, &cfg.prep, None).unwrap();
    Toy {
        _dir: dir,
        root,
        synth,
        manifest,
        data,
    }
}

/// Test error of a toy-profile run; the best-validation checkpoint is kept in `out`.
fn toy_run(n: u32, seed: u64, data: &PreparedData, out: &Path) -> (f64, GazeModel<f32>) {
    let cfg = with_seed(preset(n, Profile::Toy).unwrap(), seed);
    assert_eq!(cfg.prep, preset(11, Profile::Toy).unwrap().prep, "presets share one preparation");
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        quiet: true,
        ..TrainOptions::default()
    };
    let t0 = Instant::now();
    let o = run_training(&cfg, data, &opts).unwrap();
    let err = o.test.unwrap().mean_error_cm;
    eprintln!("  preset {n} seed {seed}: test {err:.4} cm ({:.0} s)", t0.elapsed().as_secs_f64());
    (err, o.model)
}

fn main() {
    let mut suite = Suite::default();
    suite.report("metric oracle", true, metric_oracle());
    suite.report("geometry round trip", true, geometry_round_trip());
    suite.report("min-area rectangle", true, min_area_rect_oracle());
    suite.report("face grid", true, face_grid_oracle());
    suite.report("augmentation", true, augmentation());
    suite.report("learning-rate schedules", true, schedule());
    suite.report("gradient check", true, gradient_check());
    suite.report("Grad-CAM++ toy map", true, gradcam_toy());
    suite.report("splits", true, splits());

    eprintln!("generating and preparing 2000 synthetic frames");
    let toy = toy_data();
    suite.report("frozen backbone", true, frozen_backbone(&toy.data.train[..8]));

    let runs = tempfile::tempdir().unwrap();
    let floor = oracle_floor_monte_carlo(&toy.synth, 200_000, 0);
    let baseline = mean_predictor_baseline(toy.synth.gaze_range);
    let mut p11: BTreeMap<u64, f64> = BTreeMap::new();
    let mut first_model = None;
    for seed in 0..3u64 {
        let (err, model) = toy_run(11, seed, &toy.data, &runs.path().join(format!("p11_s{seed}")));
        p11.insert(seed, err);
        first_model.get_or_insert(model);
    }
    let good = p11.values().filter(|&&e| e <= 3.0 * floor && e <= 0.25 * baseline).count();
    suite.report(
        "learning",
        true,
        outcome(
            good >= 2,
            format!(
                "test errors {:?} cm; oracle floor {floor:.4} (3x = {:.4}), mean-predictor baseline {baseline:.4} (25% = {:.4}); {good}/3 seeds within both",
                p11.values().map(|e| (e * 1e4).round() / 1e4).collect::<Vec<_>>(),
                3.0 * floor,
                0.25 * baseline
            ),
        ),
    );

    let cfg11 = preset(11, Profile::Toy).unwrap();
    suite.report(
        "service equivalence",
        true,
        service_equivalence(&runs.path().join("p11_s0/best.safetensors"), &toy.root, &toy.manifest, &toy.data.test),
    );

    // Stops as soon as the 4-of-5 outcome is decided.
    let (mut wins, mut losses) = (0, 0);
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let e11 = match p11.get(&seed) {
            Some(e) => *e,
            None => toy_run(11, seed, &toy.data, &runs.path().join(format!("p11_s{seed}"))).0,
        };
        let e3 = toy_run(3, seed, &toy.data, &runs.path().join(format!("p3_s{seed}"))).0;
        pairs.push(format!("seed {seed}: 11 -> {e11:.3}, 3 -> {e3:.3}"));
        if e11 <= e3 {
            wins += 1;
        } else {
            losses += 1;
        }
        if wins >= 4 || losses >= 2 {
            break;
        }
    }
    suite.report(
        "ablation direction",
        true,
        outcome(wins >= 4, format!("preset 11 <= preset 3 on {wins} of {} seeds run ({})", wins + losses, pairs.join("; "))),
    );

    let model = first_model.expect("seed 0 trained");
    suite.report("saliency on the pupil", false, saliency(&model, &cfg11, &toy.manifest, &toy.data.test));

    if suite.gating_failures.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: {} gating failure(s): {}", suite.gating_failures.len(), suite.gating_failures.join(", "));
        std::process::exit(1);
    }
}
