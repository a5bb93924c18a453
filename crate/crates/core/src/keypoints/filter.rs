use crate::par;

use super::GrayImage;

/// Single-channel float raster.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_gray(img: &GrayImage, scale: f32) -> Plane {
        Plane {
            w: img.width(),
            h: img.height(),
            data: img.data().iter().map(|&v| v as f32 * scale).collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Bilinear resample to the given size, mapping pixel centres.
    pub fn resize(&self, w: usize, h: usize) -> Plane {
        let sx = self.w as f32 / w as f32;
        let sy = self.h as f32 / h as f32;
        let rows = par::map_range(h, |y| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let ty = fy - y0 as f32;
            (0..w)
                .map(|x| {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.w - 1);
                    let tx = fx - x0 as f32;
                    let top = self.at(x0, y0) * (1.0 - tx) + self.at(x1, y0) * tx;
                    let bot = self.at(x0, y1) * (1.0 - tx) + self.at(x1, y1) * tx;
                    top * (1.0 - ty) + bot * ty
                })
                .collect::<Vec<_>>()
        });
        Plane {
            w,
            h,
            data: rows.concat(),
        }
    }

    /// Keep every second pixel in each direction.
    pub fn decimate(&self) -> Plane {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    pub fn sub(&self, other: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Odd kernel length `ceil(6 sigma)`, bumped to the next odd number.
pub(crate) fn kernel_len(sigma: f32) -> usize {
    let n = (6.0 * sigma).ceil().max(1.0) as usize;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let n = kernel_len(sigma);
    let r = (n / 2) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub(crate) fn gaussian_blur(src: &Plane, sigma: f32) -> Plane {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (src.w, src.h);

    let horiz = par::map_range(h, |y| {
        let row = &src.data[y * w..(y + 1) * w];
        (0..w)
            .map(|x| {
                k.iter()
                    .enumerate()
                    .map(|(j, kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                    .sum::<f32>()
            })
            .collect::<Vec<_>>()
    })
    .concat();

    let vert = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                k.iter()
                    .enumerate()
                    .map(|(j, kv)| kv * horiz[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum::<f32>()
            })
            .collect::<Vec<_>>()
    })
    .concat();

    Plane {
        w,
        h,
        data: vert,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_lengths_are_odd() {
        assert_eq!(kernel_len(1.0), 7);
        assert_eq!(kernel_len(1.6), 11);
        assert_eq!(kernel_len(2.0), 13);
        assert_eq!(kernel_len(0.1), 1);
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k.len() % 2, 1);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<_> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let p = Plane {
            w: 9,
            h: 4,
            data: vec![3.5; 36],
        };
        let b = gaussian_blur(&p, 2.5);
        assert!(b.data.iter().all(|v| (v - 3.5).abs() < 1e-5));
    }
}
