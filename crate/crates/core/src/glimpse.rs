//! Fixed-size square crops of a grayscale image at normalized locations.
//!
//! Coordinates are normalized to `[-1, 1]` per axis: `(-1, -1)` is the top-left
//! pixel center, `(1, 1)` the bottom-right one and `(0, 0)` the image center.
//! A glimpse of size `g` covers the `g x g` pixel window whose top-left corner is
//! `round(center - g / 2)` on each axis. Pixels falling outside the image read as 0.

use crate::numerics::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image of {height}x{width} needs {expected} pixels, got {found}")]
    Size {
        height: usize,
        width: usize,
        expected: usize,
        found: usize,
    },
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    Range { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Tensor,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(ImageError::Size {
                height,
                width,
                expected: height * width,
                found: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::Range { index, value });
        }
        let pixels = Tensor::new(vec![height, width], pixels).expect("size checked above");
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from raw bytes scaled by 1/255.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels.data()[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub y: f64,
    pub x: f64,
}

impl Location {
    pub const CENTER: Location = Location { y: 0.0, x: 0.0 };

    pub fn new(y: f64, x: f64) -> Self {
        Self { y, x }
    }

    pub fn clamped(self) -> Self {
        Self {
            y: self.y.clamp(-1.0, 1.0),
            x: self.x.clamp(-1.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.y, self.x]
    }

    pub fn from_array(v: [f64; 2]) -> Self {
        Self { y: v[0], x: v[1] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlimpsePatch {
    size: usize,
    pixels: Tensor,
}

impl GlimpsePatch {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

/// Continuous pixel coordinate `(row, col)` of the center of a (clamped) location.
pub fn location_to_pixel(l: Location, height: usize, width: usize) -> (f64, f64) {
    let l = l.clamped();
    let row = (l.y + 1.0) / 2.0 * (height as f64 - 1.0);
    let col = (l.x + 1.0) / 2.0 * (width as f64 - 1.0);
    (row, col)
}

/// Integer top-left corner of the `g x g` window around `l`.
pub fn window_origin(l: Location, height: usize, width: usize, g: usize) -> (i64, i64) {
    let (row, col) = location_to_pixel(l, height, width);
    let half = g as f64 / 2.0;
    ((row - half).round() as i64, (col - half).round() as i64)
}

/// Writes the flattened glimpse into `out` (length `g * g`), zero-padding outside
/// the image.
pub fn extract_glimpse_into(image: &ImageGray, l: Location, g: usize, out: &mut [f64]) {
    assert_eq!(out.len(), g * g, "glimpse buffer must hold g*g values");
    let (r0, c0) = window_origin(l, image.height, image.width, g);
    let (h, w) = (image.height as i64, image.width as i64);
    let src = image.pixels.data();
    for (i, out_row) in out.chunks_exact_mut(g).enumerate() {
        let r = r0 + i as i64;
        if r < 0 || r >= h {
            out_row.fill(0.0);
            continue;
        }
        for (j, v) in out_row.iter_mut().enumerate() {
            let c = c0 + j as i64;
            *v = if c < 0 || c >= w {
                0.0
            } else {
                src[(r * w + c) as usize]
            };
        }
    }
}

pub fn extract_glimpse(image: &ImageGray, l: Location, g: usize) -> GlimpsePatch {
    assert!(g >= 1, "glimpse size must be at least 1");
    let mut data = vec![0.0; g * g];
    extract_glimpse_into(image, l, g, &mut data);
    GlimpsePatch {
        size: g,
        pixels: Tensor::new(vec![g, g], data).expect("g >= 1"),
    }
}
