//! Deterministic synthetic images for tests, benchmarks and demo corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom_verify::Homography;
use crate::keypoints::GrayImage;

/// Piecewise-constant scene of random rectangles, ellipses and triangles over
/// a smooth gradient, with light per-pixel texture. Rich in corners and blobs.
pub fn textured_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gx = rng.random_range(-0.6..0.6f32);
    let gy = rng.random_range(-0.6..0.6f32);
    let base = rng.random_range(60.0..190.0f32);
    let mut img: Vec<f32> = (0..width * height)
        .map(|i| base + gx * (i % width) as f32 + gy * (i / width) as f32)
        .collect();

    let area = (width * height) as f32;
    let shapes = (area / 350.0).clamp(8.0, 80.0) as usize;
    let max_extent = (width.min(height) as f32 / 5.0).max(4.0);
    for _ in 0..shapes {
        let v = rng.random_range(0.0..255.0f32);
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let rx = rng.random_range(3.0..max_extent);
        let ry = rng.random_range(3.0..max_extent);
        let kind = rng.random_range(0..3u8);
        let (ax, ay) = (rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32));
        for y in 0..height {
            for x in 0..width {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let inside = match kind {
                    0 => dx.abs() <= rx && dy.abs() <= ry,
                    1 => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
                    _ => {
                        // Triangle: half-plane cut of a box.
                        dx.abs() <= rx && dy.abs() <= ry && ax * dx / rx + ay * dy / ry <= 0.2
                    }
                };
                if inside {
                    img[y * width + x] = v;
                }
            }
        }
    }
    let data = img
        .into_iter()
        .map(|v| (v + rng.random_range(-3.0..3.0f32)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(width, height, data).expect("sized buffer")
}

/// Independent uniform noise.
pub fn noise_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height).map(|_| rng.random::<u8>()).collect();
    GrayImage::new(width, height, data).expect("sized buffer")
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let p = |x: usize, y: usize| img.get(x, y) as f64;
    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
    let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
    Some(top * (1.0 - ty) + bot * ty)
}

/// Resample `img` so that output pixel `p` takes the value at `H^-1 p`.
/// Pixels mapping outside the source get `fill`.
pub fn warp(img: &GrayImage, h: &Homography, width: usize, height: usize, fill: u8) -> GrayImage {
    let inv = h.inverse().expect("invertible homography");
    GrayImage::from_fn(width, height, |x, y| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        bilinear(img, sx, sy).map_or(fill, |v| v.round().clamp(0.0, 255.0) as u8)
    })
}

/// Homography rotating by `degrees` about the image centre.
pub fn rotation_about_center(width: usize, height: usize, degrees: f64) -> Homography {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    Homography::from_rows([
        [c, -s, cx - c * cx + s * cy],
        [s, c, cy - s * cx - c * cy],
        [0.0, 0.0, 1.0],
    ])
    .expect("rotation is a valid homography")
}

pub fn rotate(img: &GrayImage, degrees: f64, fill: u8) -> GrayImage {
    let h = rotation_about_center(img.width(), img.height(), degrees);
    warp(img, &h, img.width(), img.height(), fill)
}

/// Exact 90-degree clockwise rotation (x, y) -> (h - 1 - y, x).
pub fn rotate90(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    GrayImage::from_fn(h, w, |x, y| img.get(y, h - 1 - x))
}

/// 2x bilinear upsampling with pixel-centre alignment.
pub fn upsample2(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    GrayImage::from_fn(2 * w, 2 * h, |x, y| {
        let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
        let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
        bilinear(img, sx, sy).expect("clamped").round() as u8
    })
}

/// Add a constant, saturating at 255.
pub fn brighten(img: &GrayImage, delta: u8) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| img.get(x, y).saturating_add(delta))
}
