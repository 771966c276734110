//! Pixel-level primitives shared by the geometry and augmentation stages.
//!
//! Coordinates follow the usual raster convention: pixel `(i, j)` has its
//! center at continuous position `(i, j)`. Resizing maps pixel centers with
//! the half-pixel rule so that a same-size resize is the identity.

use image::{Rgb, RgbImage};

/// How samples that fall outside the source image are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Out-of-bounds neighbors contribute black.
    Black,
    /// Coordinates are clamped to the nearest edge pixel.
    Clamp,
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous position `(x, y)`, returned as `f64` per channel.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64, border: Border) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x, y) = match border {
        Border::Clamp => (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
        Border::Black => (x, y),
    };
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut out = [0.0f64; 3];
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            let (px, py) = match border {
                Border::Clamp => (px.clamp(0, w - 1), py.clamp(0, h - 1)),
                Border::Black => {
                    if px < 0 || py < 0 || px >= w || py >= h {
                        continue;
                    }
                    (px, py)
                }
            };
            let p = img.get_pixel(px as u32, py as u32);
            let wgt = wx * wy;
            for c in 0..3 {
                out[c] += wgt * p[c] as f64;
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel center alignment and edge clamping.
pub fn resize_bilinear(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    if img.width() == out_w && img.height() == out_h {
        return img.clone();
    }
    let sx = img.width() as f64 / out_w as f64;
    let sy = img.height() as f64 / out_h as f64;
    RgbImage::from_fn(out_w, out_h, |u, v| {
        let x = (u as f64 + 0.5) * sx - 0.5;
        let y = (v as f64 + 0.5) * sy - 0.5;
        let s = sample_bilinear(img, x, y, Border::Clamp);
        Rgb([to_u8(s[0]), to_u8(s[1]), to_u8(s[2])])
    })
}

/// Copies an integer window out of `img`; pixels outside the source are black.
pub fn crop_canvas(img: &RgbImage, x0: i64, y0: i64, w: u32, h: u32) -> RgbImage {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(w, h, |u, v| {
        let (x, y) = (x0 + u as i64, y0 + v as i64);
        if x < 0 || y < 0 || x >= iw || y >= ih {
            Rgb([0, 0, 0])
        } else {
            *img.get_pixel(x as u32, y as u32)
        }
    })
}

/// Rotates image content by `angle_deg` about `pivot`: a source point `q`
/// lands at `pivot + R(angle) (q - pivot)`. Uncovered regions are black.
pub fn rotate_image(img: &RgbImage, angle_deg: f64, pivot: [f64; 2]) -> RgbImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (s, c) = (-angle_deg).to_radians().sin_cos();
    RgbImage::from_fn(img.width(), img.height(), |u, v| {
        let dx = u as f64 - pivot[0];
        let dy = v as f64 - pivot[1];
        let x = pivot[0] + c * dx - s * dy;
        let y = pivot[1] + s * dx + c * dy;
        let p = sample_bilinear(img, x, y, Border::Black);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([(x * 30) as u8, (y * 40) as u8, 9]));
        assert_eq!(resize_bilinear(&img, 7, 5), img);
    }

    #[test]
    fn canvas_pads_black() {
        let img = RgbImage::from_pixel(4, 4, Rgb([200, 200, 200]));
        let c = crop_canvas(&img, -2, -2, 4, 4);
        assert_eq!(*c.get_pixel(0, 0), Rgb([0, 0, 0]));
        assert_eq!(*c.get_pixel(3, 3), Rgb([200, 200, 200]));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = RgbImage::from_fn(9, 9, |x, y| Rgb([(x * 20) as u8, (y * 20) as u8, 1]));
        assert_eq!(rotate_image(&img, 0.0, [4.0, 4.0]), img);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let mut img = RgbImage::new(9, 9);
        img.put_pixel(6, 4, Rgb([255, 0, 0]));
        // +90 degrees in raster coordinates maps +x onto +y.
        let r = rotate_image(&img, 90.0, [4.0, 4.0]);
        assert_eq!(r.get_pixel(4, 6)[0], 255);
    }
}
