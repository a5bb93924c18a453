//! Frozen point-pair table for the 256 binary intensity tests.
//!
//! Produced by `generate` (test module) with seed [`PATTERN_SEED`]: candidate
//! pairs are drawn from an isotropic Gaussian (sigma 31/5) clipped to radius
//! 13, scored on smoothed synthetic patches, then chosen greedily by bit
//! balance while keeping pairwise bit correlation low. Points stay inside
//! radius 13 so every rotation of the table fits the 31x31 patch.

pub const PATTERN_SEED: u64 = 0x0b21_ef5e_ed00_0256;

/// `[x1, y1, x2, y2]`; bit is set when `I(x1, y1) < I(x2, y2)`.
pub const BRIEF_PATTERN: [[i8; 4]; 256] = include!("pattern_table.in");

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RADIUS: i32 = 13;
    const CANDIDATES: usize = 1024;
    const PATCHES: usize = 400;
    const HALF: i32 = 15;

    fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn point(rng: &mut ChaCha8Rng) -> (i32, i32) {
        loop {
            let x = gaussian(rng, 31.0 / 5.0).round() as i32;
            let y = gaussian(rng, 31.0 / 5.0).round() as i32;
            if x * x + y * y <= RADIUS * RADIUS {
                return (x, y);
            }
        }
    }

    /// Box-blurred random shapes on a 31x31 grid.
    fn patch(rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = (2 * HALF + 1) as usize;
        let mut img = vec![rng.random_range(0.0..255.0f32); n * n];
        for _ in 0..rng.random_range(2..7) {
            let v = rng.random_range(0.0..255.0f32);
            let cx = rng.random_range(-20..20i32);
            let cy = rng.random_range(-20..20i32);
            let rx = rng.random_range(3..20i32);
            let ry = rng.random_range(3..20i32);
            let disk = rng.random_bool(0.5);
            for y in -HALF..=HALF {
                for x in -HALF..=HALF {
                    let (dx, dy) = (x - cx, y - cy);
                    let inside = if disk {
                        (dx * dx) as f32 / (rx * rx) as f32 + (dy * dy) as f32 / (ry * ry) as f32 <= 1.0
                    } else {
                        dx.abs() <= rx && dy.abs() <= ry
                    };
                    if inside {
                        img[((y + HALF) as usize) * n + (x + HALF) as usize] = v;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v += rng.random_range(-4.0..4.0f32);
        }
        let mut out = img.clone();
        for y in 0..n as i32 {
            for x in 0..n as i32 {
                let mut s = 0.0;
                let mut c = 0.0;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let (xx, yy) = (x + dx, y + dy);
                        if (0..n as i32).contains(&xx) && (0..n as i32).contains(&yy) {
                            s += img[yy as usize * n + xx as usize];
                            c += 1.0;
                        }
                    }
                }
                out[y as usize * n + x as usize] = s / c;
            }
        }
        out
    }

    pub(super) fn generate(seed: u64) -> Vec<[i8; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cands = Vec::with_capacity(CANDIDATES);
        while cands.len() < CANDIDATES {
            let (a, b) = (point(&mut rng), point(&mut rng));
            if a != b {
                cands.push([a.0 as i8, a.1 as i8, b.0 as i8, b.1 as i8]);
            }
        }
        let patches: Vec<Vec<f32>> = (0..PATCHES).map(|_| patch(&mut rng)).collect();
        let n = (2 * HALF + 1) as usize;
        let at = |p: &[f32], x: i8, y: i8| p[(y as i32 + HALF) as usize * n + (x as i32 + HALF) as usize];
        let bits: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| {
                patches
                    .iter()
                    .map(|p| f64::from(u8::from(at(p, c[0], c[1]) < at(p, c[2], c[3]))))
                    .collect()
            })
            .collect();
        let stats: Vec<(f64, f64)> = bits
            .iter()
            .map(|b| {
                let m = b.iter().sum::<f64>() / PATCHES as f64;
                (m, (m * (1.0 - m)).sqrt())
            })
            .collect();
        let mut order: Vec<usize> = (0..CANDIDATES).filter(|&i| stats[i].1 > 0.0).collect();
        order.sort_by(|&a, &b| {
            (stats[a].0 - 0.5)
                .abs()
                .total_cmp(&(stats[b].0 - 0.5).abs())
                .then(a.cmp(&b))
        });
        let corr = |a: usize, b: usize| {
            let e = bits[a].iter().zip(&bits[b]).map(|(x, y)| x * y).sum::<f64>() / PATCHES as f64;
            (e - stats[a].0 * stats[b].0) / (stats[a].1 * stats[b].1)
        };
        let mut chosen: Vec<usize> = Vec::with_capacity(256);
        let mut threshold = 0.2;
        while chosen.len() < 256 {
            for &c in &order {
                if chosen.len() == 256 {
                    break;
                }
                if chosen.contains(&c) {
                    continue;
                }
                if chosen.iter().all(|&s| corr(c, s).abs() < threshold) {
                    chosen.push(c);
                }
            }
            threshold += 0.05;
        }
        chosen.into_iter().map(|i| cands[i]).collect()
    }

    #[test]
    fn committed_table_matches_generator() {
        assert_eq!(generate(PATTERN_SEED), BRIEF_PATTERN.to_vec());
    }

    #[test]
    fn pairs_fit_inside_rotation_radius() {
        for p in BRIEF_PATTERN {
            assert!((p[0] as i32).pow(2) + (p[1] as i32).pow(2) <= RADIUS * RADIUS);
            assert!((p[2] as i32).pow(2) + (p[3] as i32).pow(2) <= RADIUS * RADIUS);
            assert!(p[..2] != p[2..]);
        }
    }

    #[test]
    #[ignore = "prints the table for pattern_table.in"]
    fn print_table() {
        let rows: Vec<String> = generate(PATTERN_SEED)
            .iter()
            .map(|p| format!("    [{}, {}, {}, {}],", p[0], p[1], p[2], p[3]))
            .collect();
        println!("[\n{}\n]", rows.join("\n"));
    }
}
