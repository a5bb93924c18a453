use std::f32::consts::TAU;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::filter::{gaussian_blur, Plane};
use super::pattern::BRIEF_PATTERN;
use super::{BinaryDescriptor, BinaryFeature, GrayImage, Keypoint, MIN_DETECT_SIZE};
use crate::par;

/// Patch radius used for orientation (31x31 patch).
const PATCH_RADIUS: i32 = 15;
/// Keypoints closer than this to a level's border are not described.
const EDGE: usize = PATCH_RADIUS as usize + 1;
const ANGLE_BINS: usize = 30;
const HARRIS_BLOCK: i32 = 7;
const DESCRIPTOR_SMOOTHING_SIGMA: f32 = 2.0;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];
const ARC: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryParams {
    pub max_features: usize,
    /// Intensity delta for the segment test.
    pub fast_threshold: u8,
    pub levels: usize,
    pub scale_factor: f32,
    pub harris_k: f32,
}

impl Default for BinaryParams {
    fn default() -> Self {
        BinaryParams {
            max_features: 500,
            fast_threshold: 20,
            levels: 4,
            scale_factor: 1.2,
            harris_k: 0.04,
        }
    }
}

struct Candidate {
    level: usize,
    x: usize,
    y: usize,
    response: f32,
}

struct Level {
    raw: Plane,
    smooth: Plane,
    sx: f32,
    sy: f32,
}

pub fn detect_describe_binary(image: &GrayImage, params: &BinaryParams) -> Vec<BinaryFeature> {
    if image.width() < MIN_DETECT_SIZE || image.height() < MIN_DETECT_SIZE {
        return Vec::new();
    }
    let base = Plane::from_gray(image, 1.0);
    let mut levels = Vec::new();
    for l in 0..params.levels.max(1) {
        let scale = params.scale_factor.powi(l as i32);
        let w = (image.width() as f32 / scale).round() as usize;
        let h = (image.height() as f32 / scale).round() as usize;
        if w.min(h) < 2 * EDGE + 1 {
            break;
        }
        let raw = if l == 0 { base.clone() } else { base.resize(w, h) };
        let smooth = gaussian_blur(&raw, DESCRIPTOR_SMOOTHING_SIGMA);
        levels.push(Level {
            sx: image.width() as f32 / w as f32,
            sy: image.height() as f32 / h as f32,
            raw,
            smooth,
        });
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        for (x, y) in fast_corners(&level.raw, params.fast_threshold as f32) {
            candidates.push(Candidate {
                level: li,
                x,
                y,
                response: harris_response(&level.raw, x, y, params.harris_k),
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.level.cmp(&b.level))
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    candidates.truncate(params.max_features);

    par::map_slice(&candidates, |c| {
        let level = &levels[c.level];
        let angle = intensity_centroid_angle(&level.raw, c.x, c.y);
        let descriptor = describe(&level.smooth, c.x, c.y, angle);
        let x = ((c.x as f32 + 0.5) * level.sx - 0.5).clamp(0.0, (image.width() - 1) as f32);
        let y = ((c.y as f32 + 0.5) * level.sy - 0.5).clamp(0.0, (image.height() - 1) as f32);
        BinaryFeature {
            keypoint: Keypoint {
                x,
                y,
                size: (2 * PATCH_RADIUS + 1) as f32 * 0.5 * (level.sx + level.sy),
                angle,
                response: c.response,
                octave: c.level as i32,
            },
            descriptor,
        }
    })
}

/// Largest `d` such that nine contiguous circle pixels are all brighter (or all
/// darker) than the centre by at least `d`. The pixel is a corner when this
/// exceeds the threshold.
fn segment_score(p: &Plane, x: usize, y: usize) -> f32 {
    let c = p.at(x, y);
    let mut diff = [0f32; 16];
    for (d, (dx, dy)) in diff.iter_mut().zip(CIRCLE) {
        *d = p.at((x as i32 + dx) as usize, (y as i32 + dy) as usize) - c;
    }
    let mut bright = f32::NEG_INFINITY;
    let mut dark = f32::NEG_INFINITY;
    for start in 0..16 {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for j in 0..ARC {
            let d = diff[(start + j) % 16];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        bright = bright.max(lo);
        dark = dark.max(-hi);
    }
    bright.max(dark)
}

/// Segment-test corners with 3x3 non-maximum suppression, raster order.
fn fast_corners(p: &Plane, threshold: f32) -> Vec<(usize, usize)> {
    let (w, h) = (p.w, p.h);
    let rows = par::map_range(h, |y| {
        if y < EDGE - 1 || y > h - EDGE {
            return vec![0f32; w];
        }
        (0..w)
            .map(|x| {
                if x < EDGE - 1 || x > w - EDGE {
                    return 0.0;
                }
                let s = segment_score(p, x, y);
                if s > threshold {
                    s
                } else {
                    0.0
                }
            })
            .collect::<Vec<_>>()
    });
    let score = rows.concat();
    let mut out = Vec::new();
    for y in EDGE..h - EDGE {
        for x in EDGE..w - EDGE {
            let s = score[y * w + x];
            if s <= 0.0 {
                continue;
            }
            let mut keep = true;
            'nb: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let q = score[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    // Equal scores: the earlier pixel in raster order wins.
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if q > s || (q == s && earlier) {
                        keep = false;
                        break 'nb;
                    }
                }
            }
            if keep {
                out.push((x, y));
            }
        }
    }
    out
}

fn harris_response(p: &Plane, x: usize, y: usize, k: f32) -> f32 {
    let r = HARRIS_BLOCK / 2;
    let (mut a, mut b, mut c) = (0f64, 0f64, 0f64);
    let at = |xx: i32, yy: i32| p.at(xx as usize, yy as usize) as f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (xx, yy) = (x as i32 + dx, y as i32 + dy);
            let gx = (at(xx + 1, yy - 1) + 2.0 * at(xx + 1, yy) + at(xx + 1, yy + 1))
                - (at(xx - 1, yy - 1) + 2.0 * at(xx - 1, yy) + at(xx - 1, yy + 1));
            let gy = (at(xx - 1, yy + 1) + 2.0 * at(xx, yy + 1) + at(xx + 1, yy + 1))
                - (at(xx - 1, yy - 1) + 2.0 * at(xx, yy - 1) + at(xx + 1, yy - 1));
            a += gx * gx;
            b += gy * gy;
            c += gx * gy;
        }
    }
    let scale = 1.0 / (4.0 * HARRIS_BLOCK as f64 * 255.0);
    let s4 = scale.powi(4);
    ((a * b - c * c - k as f64 * (a + b) * (a + b)) * s4) as f32
}

fn intensity_centroid_angle(p: &Plane, x: usize, y: usize) -> f32 {
    let (mut m10, mut m01) = (0f64, 0f64);
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > PATCH_RADIUS * PATCH_RADIUS {
                continue;
            }
            let v = p.at((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    let a = m01.atan2(m10) as f32;
    let a = if a < 0.0 { a + TAU } else { a };
    if a >= TAU {
        0.0
    } else {
        a
    }
}

fn rotated_patterns() -> &'static [[[i8; 4]; 256]] {
    static TABLES: OnceLock<Vec<[[i8; 4]; 256]>> = OnceLock::new();
    TABLES.get_or_init(|| {
        (0..ANGLE_BINS)
            .map(|bin| {
                let theta = bin as f64 * std::f64::consts::TAU / ANGLE_BINS as f64;
                let (s, c) = theta.sin_cos();
                let rot = |x: i8, y: i8| {
                    let (x, y) = (x as f64, y as f64);
                    (
                        (x * c - y * s).round() as i8,
                        (x * s + y * c).round() as i8,
                    )
                };
                let mut table = [[0i8; 4]; 256];
                for (dst, src) in table.iter_mut().zip(BRIEF_PATTERN.iter()) {
                    let (x1, y1) = rot(src[0], src[1]);
                    let (x2, y2) = rot(src[2], src[3]);
                    *dst = [x1, y1, x2, y2];
                }
                table
            })
            .collect()
    })
}

fn angle_bin(angle: f32) -> usize {
    let step = TAU / ANGLE_BINS as f32;
    ((angle / step).round() as usize) % ANGLE_BINS
}

fn describe(smooth: &Plane, x: usize, y: usize, angle: f32) -> BinaryDescriptor {
    let table = &rotated_patterns()[angle_bin(angle)];
    let at = |dx: i8, dy: i8| smooth.at((x as i32 + dx as i32) as usize, (y as i32 + dy as i32) as usize);
    let mut bits = [0u8; 32];
    for (i, t) in table.iter().enumerate() {
        if at(t[0], t[1]) < at(t[2], t[3]) {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    BinaryDescriptor(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> GrayImage {
        GrayImage::from_fn(96, 96, |x, y| {
            if (32..64).contains(&x) && (32..64).contains(&y) {
                255
            } else {
                0
            }
        })
    }

    #[test]
    fn flat_and_tiny_images_have_no_features() {
        let p = BinaryParams::default();
        assert!(detect_describe_binary(&GrayImage::filled(64, 64, 128), &p).is_empty());
        assert!(detect_describe_binary(&GrayImage::filled(31, 200, 0), &p).is_empty());
    }

    #[test]
    fn square_corners_are_found() {
        let feats = detect_describe_binary(&square_image(), &BinaryParams::default());
        let corners = [(32.0, 32.0), (63.0, 32.0), (32.0, 63.0), (63.0, 63.0)];
        for (cx, cy) in corners {
            let near = feats.iter().any(|f| {
                (f.keypoint.x - cx).abs() <= 3.0 && (f.keypoint.y - cy).abs() <= 3.0
            });
            assert!(near, "no keypoint near ({cx}, {cy})");
        }
    }

    #[test]
    fn segment_score_thresholds() {
        // A lone bright pixel on black: every circle pixel is darker by 200.
        let mut data = vec![0f32; 49];
        data[3 * 7 + 3] = 200.0;
        let p = Plane { w: 7, h: 7, data };
        assert_eq!(segment_score(&p, 3, 3), 200.0);
    }

    #[test]
    fn angle_bins_wrap() {
        assert_eq!(angle_bin(0.0), 0);
        assert_eq!(angle_bin(TAU - 0.01), 0);
        assert_eq!(angle_bin(TAU / 30.0 * 7.4), 7);
    }

    #[test]
    fn centroid_points_towards_bright_side() {
        let img = GrayImage::from_fn(64, 64, |x, _| if x > 32 { 200 } else { 10 });
        let p = Plane::from_gray(&img, 1.0);
        let a = intensity_centroid_angle(&p, 32, 32);
        assert!(!(0.05..=TAU - 0.05).contains(&a), "angle {a}");
        let img = GrayImage::from_fn(64, 64, |_, y| if y > 32 { 200 } else { 10 });
        let a = intensity_centroid_angle(&Plane::from_gray(&img, 1.0), 32, 32);
        assert!((a - TAU / 4.0).abs() < 0.05, "angle {a}");
    }
}
