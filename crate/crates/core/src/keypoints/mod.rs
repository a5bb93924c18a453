//! Interest point detection and description on 8-bit grayscale images.
//!
//! Two pipelines are provided:
//!
//! * [`detect_describe_binary`]: FAST-9 corners on a small scale pyramid,
//!   ranked by Harris response, oriented by intensity centroid and described
//!   by 256 rotated pairwise intensity tests.
//! * [`detect_describe_float`]: difference-of-Gaussians extrema with
//!   quadratic refinement, contrast and edge rejection, dominant gradient
//!   orientation and a 4x4x8 gradient histogram descriptor.

mod binary;
mod filter;
mod float;
mod pattern;

use std::fmt;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use binary::{detect_describe_binary, BinaryParams};
pub use float::{detect_describe_float, FloatParams};
pub use pattern::{BRIEF_PATTERN, PATTERN_SEED};

/// Images below this size in either dimension produce no keypoints.
pub const MIN_DETECT_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("PGM parse error at byte offset {offset}: {message}")]
    Pgm { offset: usize, message: String },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("PNG decode error: {0}")]
    Png(String),
    #[error("pixel buffer has {found} bytes, expected {expected} for {width}x{height}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        found: usize,
    },
}

/// Row-major 8-bit luminance raster.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferSize {
                width,
                height,
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Diameter of the described neighbourhood in pixels.
    pub size: f32,
    /// Radians in [0, 2pi), measured from +x towards +y (image rows grow down).
    pub angle: f32,
    pub response: f32,
    pub octave: i32,
}

/// 256 test bits, bit `i` stored in byte `i / 8` at position `i % 8`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor(pub [u8; 32]);

impl BinaryDescriptor {
    pub fn hamming(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] >> (i % 8) & 1 == 1
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryDescriptor({})", hex::encode(self.0))
    }
}

impl Serialize for BinaryDescriptor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for BinaryDescriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(D::Error::custom)?;
        Ok(BinaryDescriptor(out))
    }
}

/// 128 non-negative components with unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FloatDescriptor(pub Vec<f32>);

impl FloatDescriptor {
    pub const LEN: usize = 128;

    pub fn euclidean(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryFeature {
    #[serde(flatten)]
    pub keypoint: Keypoint,
    pub descriptor: BinaryDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatFeature {
    #[serde(flatten)]
    pub keypoint: Keypoint,
    pub descriptor: FloatDescriptor,
}

pub fn load_gray(path: &Path) -> Result<GrayImage, ImageError> {
    let bytes = std::fs::read(path)?;
    decode_gray(&bytes)
}

/// Decode an 8-bit binary PGM (P5) or an 8-bit PNG.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    if bytes.starts_with(b"P5") {
        parse_pgm(bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        Err(ImageError::Unsupported(
            "expected binary PGM (P5) or PNG".into(),
        ))
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(ImageError::Pgm {
                        offset: pos,
                        message: "truncated header".into(),
                    })
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Pgm {
                offset: pos,
                message: "expected a decimal number".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| ImageError::Pgm {
            offset: start,
            message: "number out of range".into(),
        })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::Pgm {
                offset: pos,
                message: "expected a single whitespace after maxval".into(),
            })
        }
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!(
            "PGM maxval {maxval} (only 8-bit supported)"
        )));
    }
    let n = width.checked_mul(height).ok_or_else(|| ImageError::Pgm {
        offset: 2,
        message: "dimensions overflow".into(),
    })?;
    if bytes.len() - pos < n {
        return Err(ImageError::Pgm {
            offset: bytes.len(),
            message: format!("truncated pixel data, wanted {n} bytes"),
        });
    }
    GrayImage::new(width, height, bytes[pos..pos + n].to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bt601 = |r: u8, g: u8, b: u8| ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8;
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| bt601(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(buf) => {
            buf.pixels().map(|p| bt601(p.0[0], p.0[1], p.0[2])).collect()
        }
        other => {
            return Err(ImageError::Unsupported(format!(
                "PNG color type {:?} (only 8-bit supported)",
                other.color()
            )))
        }
    };
    GrayImage::new(w, h, data)
}
