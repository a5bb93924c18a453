use std::f32::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::filter::{gaussian_blur, Plane};
use super::{FloatDescriptor, FloatFeature, GrayImage, Keypoint, MIN_DETECT_SIZE};
use crate::par;

const INPUT_SIGMA: f32 = 0.5;
const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_RADIUS_FACTOR: f32 = 3.0;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE: f32 = 3.0;
const DESC_CLIP: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FloatParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// On intensities scaled to [0, 1]; divided by `scales_per_octave`.
    pub contrast_threshold: f32,
    /// Maximum ratio of principal curvatures.
    pub edge_threshold: f32,
    pub sigma: f32,
    /// Upsample the input 2x before building the pyramid.
    pub double_image: bool,
}

impl Default for FloatParams {
    fn default() -> Self {
        FloatParams {
            octaves: 4,
            scales_per_octave: 3,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            sigma: 1.6,
            double_image: false,
        }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

/// Refined extremum in octave coordinates.
struct Extremum {
    octave: usize,
    layer: usize,
    x: f32,
    y: f32,
    /// Scale relative to the octave's base sampling.
    sigma: f32,
    contrast: f32,
}

pub fn detect_describe_float(image: &GrayImage, params: &FloatParams) -> Vec<FloatFeature> {
    if image.width() < MIN_DETECT_SIZE || image.height() < MIN_DETECT_SIZE {
        return Vec::new();
    }
    let s = params.scales_per_octave.max(1);
    let mut base = Plane::from_gray(image, 1.0 / 255.0);
    let mut input_sigma = INPUT_SIGMA;
    let mut coord_scale = 1.0f32;
    if params.double_image {
        base = base.resize(base.w * 2, base.h * 2);
        input_sigma *= 2.0;
        coord_scale = 0.5;
    }
    // Decimation keeps even samples, so octave o maps by 2^o; the doubled base
    // is centre-aligned with the input.
    let to_image = |v: f32, o: usize| {
        let b = v * (1u32 << o) as f32;
        if params.double_image {
            (b + 0.5) * 0.5 - 0.5
        } else {
            b
        }
    };
    let first = gaussian_blur(
        &base,
        (params.sigma * params.sigma - input_sigma * input_sigma).max(0.01).sqrt(),
    );
    let octaves = build_pyramid(first, params, s);

    let extrema: Vec<Extremum> = octaves
        .iter()
        .enumerate()
        .flat_map(|(o, oct)| find_extrema(oct, o, params, s))
        .collect();

    let features = par::map_slice(&extrema, |e| {
        let gauss = &octaves[e.octave].gauss[e.layer];
        let scale = (1u32 << e.octave) as f32 * coord_scale;
        orientations(gauss, e)
            .into_iter()
            .filter_map(|angle| {
                let descriptor = describe(gauss, e, angle)?;
                let x = to_image(e.x, e.octave).clamp(0.0, (image.width() - 1) as f32);
                let y = to_image(e.y, e.octave).clamp(0.0, (image.height() - 1) as f32);
                Some(FloatFeature {
                    keypoint: Keypoint {
                        x,
                        y,
                        size: 2.0 * e.sigma * scale,
                        angle,
                        response: e.contrast,
                        octave: e.octave as i32,
                    },
                    descriptor,
                })
            })
            .collect::<Vec<_>>()
    });
    features.into_iter().flatten().collect()
}

fn build_pyramid(first: Plane, params: &FloatParams, s: usize) -> Vec<Octave> {
    let k = 2f32.powf(1.0 / s as f32);
    // Incremental blur from layer i-1 to layer i.
    let steps: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = params.sigma * k.powi(i as i32 - 1);
            let cur = prev * k;
            (cur * cur - prev * prev).sqrt()
        })
        .collect();
    let mut octaves: Vec<Octave> = Vec::new();
    let mut base = first;
    for o in 0..params.octaves.max(1) {
        if o > 0 {
            let prev = &octaves[o - 1].gauss[s];
            if prev.w / 2 < 2 * BORDER + 3 || prev.h / 2 < 2 * BORDER + 3 {
                break;
            }
            base = prev.decimate();
        }
        let mut gauss = vec![base.clone()];
        for step in &steps {
            let next = gaussian_blur(gauss.last().expect("non-empty"), *step);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|g| g[1].sub(&g[0])).collect();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

fn find_extrema(oct: &Octave, o: usize, params: &FloatParams, s: usize) -> Vec<Extremum> {
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    if w <= 2 * BORDER || h <= 2 * BORDER {
        return Vec::new();
    }
    let prelim = 0.5 * params.contrast_threshold / s as f32;
    let mut out = Vec::new();
    for layer in 1..=s {
        let rows = par::map_range(h - 2 * BORDER, |r| {
            let y = r + BORDER;
            let mut found = Vec::new();
            for x in BORDER..w - BORDER {
                let v = oct.dog[layer].at(x, y);
                if v.abs() <= prelim || !is_extremum(oct, layer, x, y, v) {
                    continue;
                }
                if let Some(e) = refine(oct, o, layer, x, y, params, s) {
                    found.push(e);
                }
            }
            found
        });
        out.extend(rows.into_iter().flatten());
    }
    out
}

fn is_extremum(oct: &Octave, layer: usize, x: usize, y: usize, v: f32) -> bool {
    let maxima = v > 0.0;
    for l in layer - 1..=layer + 1 {
        let d = &oct.dog[l];
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if l == layer && xx == x && yy == y {
                    continue;
                }
                let n = d.at(xx, yy);
                if (maxima && n > v) || (!maxima && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

/// Quadratic fit in (x, y, scale); moves to the neighbouring sample when the
/// offset exceeds half a pixel. Applies contrast and edge rejection.
fn refine(
    oct: &Octave,
    o: usize,
    mut layer: usize,
    mut x: usize,
    mut y: usize,
    params: &FloatParams,
    s: usize,
) -> Option<Extremum> {
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let mut offset = Vector3::zeros();
    let mut grad = Vector3::zeros();
    let mut converged = false;
    let mut visited = vec![(x, y, layer)];
    for _ in 0..MAX_REFINE_STEPS {
        let d = |l: usize, dx: i32, dy: i32| {
            oct.dog[l].at((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64
        };
        let v = d(layer, 0, 0);
        grad = Vector3::new(
            (d(layer, 1, 0) - d(layer, -1, 0)) * 0.5,
            (d(layer, 0, 1) - d(layer, 0, -1)) * 0.5,
            (d(layer + 1, 0, 0) - d(layer - 1, 0, 0)) * 0.5,
        );
        let dxx = d(layer, 1, 0) + d(layer, -1, 0) - 2.0 * v;
        let dyy = d(layer, 0, 1) + d(layer, 0, -1) - 2.0 * v;
        let dss = d(layer + 1, 0, 0) + d(layer - 1, 0, 0) - 2.0 * v;
        let dxy = (d(layer, 1, 1) - d(layer, -1, 1) - d(layer, 1, -1) + d(layer, -1, -1)) * 0.25;
        let dxs = (d(layer + 1, 1, 0) - d(layer + 1, -1, 0) - d(layer - 1, 1, 0)
            + d(layer - 1, -1, 0))
            * 0.25;
        let dys = (d(layer + 1, 0, 1) - d(layer + 1, 0, -1) - d(layer - 1, 0, 1)
            + d(layer - 1, 0, -1))
            * 0.25;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        offset = -(hess.lu().solve(&grad)?);
        if offset.iter().all(|c| c.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|c| !c.is_finite() || c.abs() > (w.max(h)) as f64) {
            return None;
        }
        let nx = x as i64 + offset[0].round() as i64;
        let ny = y as i64 + offset[1].round() as i64;
        let nl = layer as i64 + offset[2].round() as i64;
        if nl < 1
            || nl > s as i64
            || nx < BORDER as i64
            || nx >= (w - BORDER) as i64
            || ny < BORDER as i64
            || ny >= (h - BORDER) as i64
        {
            return None;
        }
        let next = (nx as usize, ny as usize, nl as usize);
        if visited.contains(&next) {
            // Oscillating across a sample midpoint: the fit here is as good.
            if offset.iter().all(|c| c.abs() <= 1.0) {
                converged = true;
            }
            break;
        }
        visited.push(next);
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }

    let d = |dx: i32, dy: i32| oct.dog[layer].at((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
    let contrast = d(0, 0) + 0.5 * grad.dot(&offset);
    if contrast.abs() * (s as f64) < params.contrast_threshold as f64 {
        return None;
    }
    let dxx = d(1, 0) + d(-1, 0) - 2.0 * d(0, 0);
    let dyy = d(0, 1) + d(0, -1) - 2.0 * d(0, 0);
    let dxy = (d(1, 1) - d(-1, 1) - d(1, -1) + d(-1, -1)) * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = params.edge_threshold as f64;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    Some(Extremum {
        octave: o,
        layer,
        x: x as f32 + offset[0] as f32,
        y: y as f32 + offset[1] as f32,
        sigma: params.sigma * 2f32.powf((layer as f32 + offset[2] as f32) / s as f32),
        contrast: contrast.abs() as f32,
    })
}

fn gradient(p: &Plane, x: usize, y: usize) -> (f32, f32) {
    (
        p.at(x + 1, y) - p.at(x - 1, y),
        p.at(x, y + 1) - p.at(x, y - 1),
    )
}

fn orientations(gauss: &Plane, e: &Extremum) -> Vec<f32> {
    let sigma_w = ORI_SIGMA_FACTOR * e.sigma;
    let radius = (ORI_RADIUS_FACTOR * sigma_w).round() as i32;
    let (cx, cy) = (e.x.round() as i32, e.y.round() as i32);
    let mut hist = [0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= gauss.w as i32 - 1 || y >= gauss.h as i32 - 1 {
                continue;
            }
            let (gx, gy) = gradient(gauss, x as usize, y as usize);
            let weight = (-((dx * dx + dy * dy) as f32) / (2.0 * sigma_w * sigma_w)).exp();
            let ori = gy.atan2(gx).rem_euclid(TAU);
            let bin = ((ori / TAU * ORI_BINS as f32).round() as usize) % ORI_BINS;
            hist[bin] += weight * (gx * gx + gy * gy).sqrt();
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f32> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) / 16.0
                + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * 4.0 / 16.0
                + hist[i] * 6.0 / 16.0
        })
        .collect();
    let peak = smooth.iter().cloned().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (l, c, r) = (smooth[(i + n - 1) % n], smooth[i], smooth[(i + 1) % n]);
        if c > l && c > r && c >= ORI_PEAK_RATIO * peak {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let a = ((i as f32 + shift) / n as f32 * TAU).rem_euclid(TAU);
            out.push(if a >= TAU { 0.0 } else { a });
        }
    }
    out
}

fn describe(gauss: &Plane, e: &Extremum, angle: f32) -> Option<FloatDescriptor> {
    let d = DESC_WIDTH;
    let nb = DESC_BINS;
    let hist_width = DESC_SCALE * e.sigma;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5).round() as i32;
    let (cos_t, sin_t) = (angle.cos(), angle.sin());
    let (cx, cy) = (e.x.round() as i32, e.y.round() as i32);
    let weight_sigma = 0.5 * d as f32;
    // (d + 2) x (d + 2) x (nb + 2) with a one-cell margin for interpolation.
    let mut hist = vec![0f32; (d + 2) * (d + 2) * (nb + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (d + 2) + c) * (nb + 2) + o;

    for dy in -radius..=radius {
        for dx in -radius..=radius {
            // Offset in the keypoint frame, in histogram cells.
            let u = (dx as f32 * cos_t + dy as f32 * sin_t) / hist_width;
            let v = (-dx as f32 * sin_t + dy as f32 * cos_t) / hist_width;
            let rbin = v + d as f32 / 2.0 - 0.5;
            let cbin = u + d as f32 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f32 || cbin <= -1.0 || cbin >= d as f32 {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= gauss.w as i32 - 1 || y >= gauss.h as i32 - 1 {
                continue;
            }
            let (gx, gy) = gradient(gauss, x as usize, y as usize);
            let mag = (gx * gx + gy * gy).sqrt()
                * (-(u * u + v * v) / (2.0 * weight_sigma * weight_sigma)).exp();
            let obin = (gy.atan2(gx) - angle).rem_euclid(TAU) / TAU * nb as f32;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            for (ri, wr) in [(0, 1.0 - fr), (1, fr)] {
                let r = (r0 as i32 + ri + 1) as usize;
                for (ci, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let c = (c0 as i32 + ci + 1) as usize;
                    for (oi, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let o = ((o0 as usize) + oi) % nb;
                        hist[idx(r, c, o)] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut desc = Vec::with_capacity(FloatDescriptor::LEN);
    for r in 1..=d {
        for c in 1..=d {
            for o in 0..nb {
                desc.push(hist[idx(r, c, o)]);
            }
        }
    }
    normalize(&mut desc)?;
    desc.iter_mut().for_each(|v| *v = v.min(DESC_CLIP));
    normalize(&mut desc)?;
    Some(FloatDescriptor(desc))
}

fn normalize(v: &mut [f32]) -> Option<()> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(size: usize, sigma: f32) -> GrayImage {
        let c = (size as f32 - 1.0) / 2.0;
        GrayImage::from_fn(size, size, |x, y| {
            let r2 = (x as f32 - c).powi(2) + (y as f32 - c).powi(2);
            (20.0 + 200.0 * (-r2 / (2.0 * sigma * sigma)).exp()).round() as u8
        })
    }

    #[test]
    fn constant_image_has_no_features() {
        let p = FloatParams::default();
        assert!(detect_describe_float(&GrayImage::filled(64, 64, 77), &p).is_empty());
    }

    #[test]
    fn gaussian_blobs_are_detected_at_their_centres() {
        for sigma in [3.0f32, 5.0] {
            let img = blob(64, sigma);
            let feats = detect_describe_float(&img, &FloatParams::default());
            let c = 31.5;
            let hit = feats.iter().find(|f| {
                let k = &f.keypoint;
                ((k.x - c).powi(2) + (k.y - c).powi(2)).sqrt() <= 2.0
            });
            let k = &hit.unwrap_or_else(|| panic!("no keypoint for sigma {sigma}")).keypoint;
            // Size is a diameter (2 sigma).
            let ratio = k.size / (2.0 * sigma);
            assert!((0.5..=2.0).contains(&ratio), "sigma {sigma}: size {}", k.size);
        }
    }

    #[test]
    fn descriptors_are_clipped_unit_vectors() {
        let img = crate::synth::textured_scene(96, 96, 3);
        let feats = detect_describe_float(&img, &FloatParams::default());
        assert!(!feats.is_empty());
        for f in &feats {
            let d = &f.descriptor.0;
            assert_eq!(d.len(), 128);
            let n: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            assert!(d.iter().all(|&v| v >= 0.0));
            let k = &f.keypoint;
            assert!(k.x >= 0.0 && k.x < 96.0 && k.y >= 0.0 && k.y < 96.0 && k.size > 0.0);
            assert!((0.0..TAU).contains(&k.angle));
        }
    }
}
