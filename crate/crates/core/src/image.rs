//! Single-channel rasters and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ViewKind;
use crate::error::{Error, Result};

/// An 8-bit single-channel raster. Row-major, `0` is dark and `255` bright.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    pub view: ViewKind,
    /// Micrometers per pixel, when the acquisition recorded it.
    pub pixel_pitch: Option<f64>,
}

impl GrayImage {
    pub fn from_raw(height: usize, width: usize, pixels: Vec<u8>, view: ViewKind) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty raster {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} raster needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            view,
            pixel_pitch: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8, view: ViewKind) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        Self {
            height,
            width,
            pixels: vec![value; height * width],
            view,
            pixel_pitch: None,
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        view: ViewKind,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
            view,
            pixel_pitch: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Same geometry and metadata, new pixel values.
    pub fn map(&self, mut f: impl FnMut(u8) -> u8) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn with_pixels(&self, height: usize, width: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Self {
            height,
            width,
            pixels,
            view: self.view,
            pixel_pitch: self.pixel_pitch,
        }
    }

    pub fn load_png(path: &Path, view: ViewKind) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        match decoded {
            image::DynamicImage::ImageLuma8(gray) => {
                let (w, h) = gray.dimensions();
                GrayImage::from_raw(h as usize, w as usize, gray.into_raw(), view)
            }
            other => Ok(crate::preprocess::to_grayscale(&other.to_rgb8(), view)),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buffer =
            image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("raster length checked at construction");
        buffer.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Encodes the raster as PNG bytes.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let buffer =
            image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("raster length checked at construction");
        buffer
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl GrayImage {
    /// Copies the part of `rect` that lies inside the image.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        let x1 = (rect.x + rect.width).min(self.width);
        let y1 = (rect.y + rect.height).min(self.height);
        if rect.x >= x1 || rect.y >= y1 {
            return Err(Error::Parameter(format!(
                "crop {rect:?} does not intersect {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity((x1 - rect.x) * (y1 - rect.y));
        for r in rect.y..y1 {
            pixels.extend_from_slice(&self.row(r)[rect.x..x1]);
        }
        Ok(self.with_pixels(y1 - rect.y, x1 - rect.x, pixels))
    }
}

/// Resamples to `height`×`width`. Each axis is handled separately: area
/// averaging when it shrinks, bilinear interpolation when it grows.
pub fn resize(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    assert!(height > 0 && width > 0, "empty resize target");
    if img.dims() == (height, width) {
        return img.clone();
    }
    let src: Vec<f32> = img.pixels.iter().map(|&v| v as f32).collect();
    let (h0, w0) = img.dims();

    let col_taps = axis_taps(w0, width);
    let mut horizontal = vec![0f32; h0 * width];
    for r in 0..h0 {
        let row = &src[r * w0..(r + 1) * w0];
        for (c, taps) in col_taps.iter().enumerate() {
            horizontal[r * width + c] = taps.iter().map(|&(i, w)| row[i] * w).sum();
        }
    }

    let row_taps = axis_taps(h0, height);
    let mut out = Vec::with_capacity(height * width);
    for taps in &row_taps {
        for c in 0..width {
            let v: f32 = taps.iter().map(|&(i, w)| horizontal[i * width + c] * w).sum();
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img.with_pixels(height, width, out)
}

/// Per output index, the source indices and weights (summing to one).
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if dst < src {
                let lo = i as f64 * scale;
                let hi = lo + scale;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < src {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, (overlap / scale) as f32));
                    }
                    j += 1;
                }
                taps
            } else {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let j = pos.floor() as usize;
                let frac = pos - j as f64;
                if j + 1 < src && frac > 0.0 {
                    vec![(j, (1.0 - frac) as f32), (j + 1, frac as f32)]
                } else {
                    vec![(j, 1.0)]
                }
            }
        })
        .collect()
}
