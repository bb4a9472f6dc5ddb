//! Reduction of raw microscope views to normalized single-channel inputs.
//!
//! Plan views (top, bottom) go through grayscale conversion, 10-level
//! quantization, a grid search for the dark foam disc, masking of everything
//! outside it, cropping to its bounding square and resizing. Profiles are
//! quantized and their foreground is centered on a black canvas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExampleGroup, ViewKind};
use crate::error::{Error, Result};
use crate::image::{resize, GrayImage};

pub const DEFAULT_BINS: u32 = 10;

/// ITU-R 601 luma, rounded and clamped.
pub fn to_grayscale(rgb: &image::RgbImage, view: ViewKind) -> GrayImage {
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            luma.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::from_raw(h as usize, w as usize, pixels, view).expect("dimensions from a valid buffer")
}

/// Representative gray level of bin `b` out of `bins`: the bin's center.
pub fn bin_value(b: u32, bins: u32) -> u8 {
    let v = (b as f64 + 0.5) * 256.0 / bins as f64 - 0.5;
    v.round().clamp(0.0, 255.0) as u8
}

pub fn bin_index(v: u8, bins: u32) -> u32 {
    (v as u32 * bins / 256).min(bins - 1)
}

/// Maps every pixel to the center of its intensity bin.
pub fn quantize(img: &GrayImage, bins: u32) -> Result<GrayImage> {
    if bins < 2 {
        return Err(Error::Parameter(format!("quantize needs at least 2 bins, got {bins}")));
    }
    let mut table = [0u8; 256];
    for (v, slot) in table.iter_mut().enumerate() {
        *slot = bin_value(bin_index(v as u8, bins), bins);
    }
    Ok(img.map(|v| table[v as usize]))
}

/// A circle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Circle {
    pub cx: usize,
    pub cy: usize,
    pub r: usize,
}

impl Circle {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = col as i64 - self.cx as i64;
        let dy = row as i64 - self.cy as i64;
        dx * dx + dy * dy <= (self.r * self.r) as i64
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.r > 0
            && self.cx >= self.r
            && self.cy >= self.r
            && self.cx + self.r < width
            && self.cy + self.r < height
    }
}

/// Search grid for [`find_circle`]. Radii and the center window are
/// fractions of the image's smaller side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleSearchParams {
    pub bright_threshold: u8,
    pub radius_range: (f64, f64),
    pub center_window: f64,
    pub step: usize,
}

impl Default for CircleSearchParams {
    fn default() -> Self {
        Self {
            bright_threshold: 128,
            radius_range: (0.30, 0.48),
            center_window: 0.05,
            step: 2,
        }
    }
}

impl CircleSearchParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        if !(0.0 < lo && lo < hi && hi <= 0.5) {
            return Err(Error::Parameter(format!("radius range ({lo}, {hi}) must satisfy 0 < lo < hi <= 0.5")));
        }
        if self.step == 0 {
            return Err(Error::Parameter("circle search step must be >= 1".into()));
        }
        if !(self.center_window >= 0.0) {
            return Err(Error::Parameter("center window must be non-negative".into()));
        }
        Ok(())
    }

    /// Radii in descending order and center offsets symmetric about zero.
    pub fn grid(&self, height: usize, width: usize) -> (Vec<usize>, Vec<i64>) {
        let m = height.min(width) as f64;
        let r_lo = (self.radius_range.0 * m).ceil().max(1.0) as usize;
        let r_hi = (self.radius_range.1 * m).floor() as usize;
        let radii = if r_hi >= r_lo {
            (r_lo..=r_hi).rev().step_by(self.step).collect()
        } else {
            Vec::new()
        };
        let window = (self.center_window * m).floor() as i64;
        let step = self.step as i64;
        let k = window / step;
        let offsets = (-k..=k).map(|i| i * step).collect();
        (radii, offsets)
    }
}

/// The winning circle and its dark-minus-bright score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircleFit {
    pub circle: Circle,
    pub score: i64,
}

/// Ordering used to pick among candidates: higher score, then larger radius,
/// then closer to the image center, then smaller `(cy, cx)`.
pub fn candidate_key(fit: &CircleFit, height: usize, width: usize) -> (i64, usize, std::cmp::Reverse<i64>, std::cmp::Reverse<(usize, usize)>) {
    let (cy0, cx0) = ((height / 2) as i64, (width / 2) as i64);
    let dx = fit.circle.cx as i64 - cx0;
    let dy = fit.circle.cy as i64 - cy0;
    (
        fit.score,
        fit.circle.r,
        std::cmp::Reverse(dx * dx + dy * dy),
        std::cmp::Reverse((fit.circle.cy, fit.circle.cx)),
    )
}

/// Finds the circle around the image center that holds the most dark and
/// the fewest bright pixels. Assumes the foam is darker than its
/// surroundings.
pub fn find_circle(img: &GrayImage, params: &CircleSearchParams) -> Result<CircleFit> {
    params.validate()?;
    let (h, w) = img.dims();
    let (radii, offsets) = params.grid(h, w);
    let (cy0, cx0) = ((h / 2) as i64, (w / 2) as i64);

    // Row-wise prefix counts of dark pixels.
    let mut prefix = vec![0u32; h * (w + 1)];
    for r in 0..h {
        let row = img.row(r);
        let base = r * (w + 1);
        for c in 0..w {
            let dark = (row[c] < params.bright_threshold) as u32;
            prefix[base + c + 1] = prefix[base + c] + dark;
        }
    }

    let mut best: Option<CircleFit> = None;
    for &rad in &radii {
        let half_widths: Vec<usize> = (0..=rad).map(|dy| isqrt(rad * rad - dy * dy)).collect();
        for &oy in &offsets {
            for &ox in &offsets {
                let (cx, cy) = (cx0 + ox, cy0 + oy);
                if cx < 0 || cy < 0 {
                    continue;
                }
                let circle = Circle {
                    cx: cx as usize,
                    cy: cy as usize,
                    r: rad,
                };
                if !circle.fits(h, w) {
                    continue;
                }
                let mut dark = 0i64;
                let mut inside = 0i64;
                for row in circle.cy - rad..=circle.cy + rad {
                    let hw = half_widths[row.abs_diff(circle.cy)];
                    let base = row * (w + 1);
                    let (c0, c1) = (circle.cx - hw, circle.cx + hw + 1);
                    dark += (prefix[base + c1] - prefix[base + c0]) as i64;
                    inside += (c1 - c0) as i64;
                }
                let fit = CircleFit {
                    circle,
                    score: 2 * dark - inside,
                };
                let better = match &best {
                    None => true,
                    Some(b) => candidate_key(&fit, h, w) > candidate_key(b, h, w),
                };
                if better {
                    best = Some(fit);
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::Parameter(format!("circle search grid is empty for a {h}x{w} image"))
    })
}

fn isqrt(n: usize) -> usize {
    let mut x = (n as f64).sqrt() as usize;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Zeroes every pixel farther than `r` from the circle center.
pub fn mask_outside(img: &GrayImage, c: &Circle) -> GrayImage {
    let mut out = img.clone();
    for row in 0..img.height() {
        for col in 0..img.width() {
            if !c.contains(row, col) {
                out.set(row, col, 0);
            }
        }
    }
    out
}

/// Crops to the circle's bounding square, clipped to the image.
pub fn bound_circle(img: &GrayImage, c: &Circle) -> GrayImage {
    let r0 = c.cy.saturating_sub(c.r);
    let c0 = c.cx.saturating_sub(c.r);
    let r1 = (c.cy + c.r).min(img.height() - 1);
    let c1 = (c.cx + c.r).min(img.width() - 1);
    let mut pixels = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    for row in r0..=r1 {
        pixels.extend_from_slice(&img.row(row)[c0..=c1]);
    }
    img.with_pixels(r1 - r0 + 1, c1 - c0 + 1, pixels)
}

/// Sets pixels at or below `level` to 0.
pub fn suppress_floor(img: &GrayImage, level: u8) -> GrayImage {
    img.map(|v| if v <= level { 0 } else { v })
}

/// Moves the bounding box of the nonzero pixels to the middle of a black
/// `target` canvas, center-cropping where the box is larger than the canvas.
pub fn center_profile(img: &GrayImage, target: (usize, usize)) -> Result<GrayImage> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Parameter("empty profile target".into()));
    }
    let h = img.height();
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for (c, &v) in img.row(r).iter().enumerate() {
            if v > 0 {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    if rmin == usize::MAX {
        return Err(Error::Validation("profile has no foreground".into()));
    }
    let (bh, bw) = (rmax - rmin + 1, cmax - cmin + 1);

    // Per axis: (first source index, first destination index, length).
    let place = |src_start: usize, len: usize, target: usize| {
        if len <= target {
            (src_start, (target - len) / 2, len)
        } else {
            (src_start + (len - target) / 2, 0, target)
        }
    };
    let (sr, dr, nr) = place(rmin, bh, th);
    let (sc, dc, nc) = place(cmin, bw, tw);
    let mut out = vec![0u8; th * tw];
    for i in 0..nr {
        let src = &img.row(sr + i)[sc..sc + nc];
        out[(dr + i) * tw + dc..(dr + i) * tw + dc + nc].copy_from_slice(src);
    }
    Ok(img.with_pixels(th, tw, out))
}

/// Full plan-view chain; also returns the detected circle.
pub fn preprocess_plan(
    img: &GrayImage,
    params: &CircleSearchParams,
    target: (usize, usize),
) -> Result<(GrayImage, CircleFit)> {
    let q = quantize(img, DEFAULT_BINS)?;
    let fit = find_circle(&q, params)?;
    let bounded = bound_circle(&mask_outside(&q, &fit.circle), &fit.circle);
    Ok((resize(&bounded, target.0, target.1), fit))
}

/// Applies the plan-view geometry (mask, crop, resize) to a binary mask
/// given in raw-image coordinates. Any nonzero output pixel is set.
pub fn transform_plan_mask(mask: &GrayImage, circle: &Circle, target: (usize, usize)) -> GrayImage {
    let bounded = bound_circle(&mask_outside(mask, circle), circle);
    resize(&bounded, target.0, target.1).map(|v| if v > 0 { 255 } else { 0 })
}

pub fn preprocess_profile(
    img: &GrayImage,
    crop: Option<crate::image::Rect>,
    target: (usize, usize),
) -> Result<GrayImage> {
    let img = match crop {
        Some(rect) => img.crop(rect)?,
        None => img.clone(),
    };
    let q = quantize(&img, DEFAULT_BINS)?;
    let floor = bin_value(0, DEFAULT_BINS);
    center_profile(&suppress_floor(&q, floor), target)
}

/// Runs the plan or profile chain on each of the five views.
pub fn preprocess_group(
    g: &ExampleGroup,
    params: &CircleSearchParams,
    target: (usize, usize),
) -> Result<ExampleGroup> {
    let mut out = ExampleGroup {
        images: Default::default(),
        issues: Vec::new(),
        ..g.clone()
    };
    for view in ViewKind::ALL {
        let img = g.image(view)?;
        let processed = if view.is_plan() {
            preprocess_plan(img, params, target).map(|(img, _)| img)
        } else {
            preprocess_profile(img, g.crops.get(&view).copied(), target)
        }
        .map_err(|e| e.in_view(view))?;
        out.images.insert(view, processed);
    }
    // Manual crops are in raw coordinates and no longer apply.
    out.crops.clear();
    Ok(out)
}

/// Preprocesses groups on up to `jobs` threads. Output order matches input
/// order.
pub fn preprocess_all(
    groups: &[ExampleGroup],
    params: &CircleSearchParams,
    target: (usize, usize),
    jobs: usize,
) -> Vec<Result<ExampleGroup>> {
    crate::with_pool(jobs, || {
        groups
            .par_iter()
            .map(|g| preprocess_group(g, params, target))
            .collect()
    })
}
