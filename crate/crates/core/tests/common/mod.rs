#![allow(dead_code)]

use gaze_core::augment::{Sample, SampleMeta};
use gaze_core::geometry::{make_face_grid, OrientedRect};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image<R: Rng>(rng: &mut R, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Sample with random `side`-pixel images, a random face grid and label.
pub fn random_sample<R: Rng>(rng: &mut R, side: u32, grid: usize) -> Sample {
    let frame = (rng.random_range(100..900), rng.random_range(100..900));
    let rect = OrientedRect {
        center: [rng.random_range(0.0..frame.0 as f64), rng.random_range(0.0..frame.1 as f64)],
        size: (rng.random_range(20.0..400.0), rng.random_range(20.0..400.0)),
        angle: rng.random_range(-44.0..45.0),
    };
    Sample {
        left_eye: random_image(rng, side, side),
        right_eye: random_image(rng, side, side),
        face: random_image(rng, side, side),
        grid: make_face_grid(frame, &rect, grid),
        gaze_cm: [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
        meta: SampleMeta {
            subject_id: format!("s{}", rng.random_range(0..50)),
            frame_id: format!("f{}", rng.random::<u32>()),
            mirrored: false,
        },
    }
}
