//! Training-set expansion: rotation permutations per view family plus
//! gaussian noise, brightness and contrast jitter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ExampleGroup, ViewKind};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    /// Degrees, applied to all three profiles.
    pub profile_angles: Vec<f64>,
    /// Degrees, applied to top and bottom.
    pub plan_angles: Vec<f64>,
    /// Gray levels.
    pub noise_sigma: f64,
    /// Brightness offsets are drawn from `±brightness_delta` (fraction of 255).
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            profile_angles: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            plan_angles: vec![0.0, 90.0, 180.0, 270.0],
            noise_sigma: 5.0,
            brightness_delta: 0.10,
            contrast_range: (0.90, 1.10),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Rotation only, no photometric change.
    pub fn identity() -> Self {
        Self {
            profile_angles: vec![0.0],
            plan_angles: vec![0.0],
            noise_sigma: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile_angles.is_empty() || self.plan_angles.is_empty() {
            return Err(Error::Parameter("augmentation angle lists must be non-empty".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise sigma must be >= 0".into()));
        }
        let (lo, hi) = self.contrast_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Parameter(format!("contrast range ({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.brightness_delta >= 0.0) {
            return Err(Error::Parameter("brightness delta must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of augmented groups produced per source group.
    pub fn variants(&self) -> usize {
        lcm(self.plan_angles.len(), self.profile_angles.len())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    a / gcd(a, b) * b
}

/// Rotates counter-clockwise about the image center, keeping the canvas.
/// Multiples of 90° on square images (and 180° on any image) are exact
/// pixel permutations; other angles use bilinear sampling with exposed
/// corners set to 0.
pub fn rotate(img: &GrayImage, angle: f64) -> GrayImage {
    let (h, w) = img.dims();
    let turns = angle / 90.0;
    if turns.fract() == 0.0 {
        let quarter = (turns as i64).rem_euclid(4);
        match quarter {
            0 => return img.clone(),
            2 => {
                let mut px = img.pixels().to_vec();
                px.reverse();
                return img.with_pixels(h, w, px);
            }
            1 if h == w => return img.with_pixels(h, w, permute(img, |r, c| (c, w - 1 - r))),
            3 if h == w => return img.with_pixels(h, w, permute(img, |r, c| (h - 1 - c, r))),
            _ => {}
        }
    }

    let (sin, cos) = angle.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            out.push(sample_bilinear(img, sy, sx));
        }
    }
    img.with_pixels(h, w, out)
}

fn permute(img: &GrayImage, src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = src(r, c);
            out.push(img.get(sr, sc));
        }
    }
    out
}

fn sample_bilinear(img: &GrayImage, y: f64, x: f64) -> u8 {
    let (h, w) = img.dims();
    const EPS: f64 = 1e-9;
    if y < -EPS || x < -EPS || y > (h - 1) as f64 + EPS || x > (w - 1) as f64 + EPS {
        return 0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) as f64 * (1.0 - fx) + img.get(y0, x1) as f64 * fx;
    let bottom = img.get(y1, x0) as f64 * (1.0 - fx) + img.get(y1, x1) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
}

/// Adds rounded `N(0, sigma)` noise to every nonzero pixel; masked (zero)
/// background stays zero.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, rng: &mut impl Rng) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    img.map(|v| {
        if v == 0 {
            0
        } else {
            (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8
        }
    })
}

/// Scales nonzero pixels about their mean by `factor` and shifts them by
/// `255 * delta`. Zero pixels are left alone.
pub fn adjust_brightness_contrast(img: &GrayImage, delta: f64, factor: f64) -> GrayImage {
    let (sum, n) = img
        .pixels()
        .iter()
        .filter(|&&v| v > 0)
        .fold((0.0, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    if n == 0 {
        return img.clone();
    }
    let mean = sum / n as f64;
    img.map(|v| {
        if v == 0 {
            0
        } else {
            (factor * (v as f64 - mean) + mean + 255.0 * delta).round().clamp(0.0, 255.0) as u8
        }
    })
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..=hi) } else { lo }
}

/// The `index`-th augmented copy of `g` (index taken modulo
/// [`AugmentSpec::variants`]).
pub fn augment_variant(g: &ExampleGroup, spec: &AugmentSpec, index: usize) -> ExampleGroup {
    let index = index % spec.variants();
    let plan_angle = spec.plan_angles[index % spec.plan_angles.len()];
    let profile_angle = spec.profile_angles[index % spec.profile_angles.len()];
    let mut out = ExampleGroup {
        id: format!("{}__aug{index}", g.id),
        images: Default::default(),
        ..g.clone()
    };
    for (&view, img) in &g.images {
        let angle = if view.is_plan() { plan_angle } else { profile_angle };
        let mut rng = seed::rng(
            spec.seed,
            &[b"augment", g.id.as_bytes(), &(index as u64).to_le_bytes(), view.as_str().as_bytes()],
        );
        let delta = draw(&mut rng, -spec.brightness_delta, spec.brightness_delta);
        let factor = draw(&mut rng, spec.contrast_range.0, spec.contrast_range.1);
        let rotated = rotate(img, angle);
        let adjusted = if delta == 0.0 && factor == 1.0 {
            rotated
        } else {
            adjust_brightness_contrast(&rotated, delta, factor)
        };
        out.images.insert(view, add_gaussian_noise(&adjusted, spec.noise_sigma, &mut rng));
    }
    out
}

/// Every augmented copy of `g`: copy `i` pairs the `i`-th plan angle with
/// the `i`-th profile angle (each list cycled), for `lcm` of the two list
/// lengths copies.
pub fn augment_group(g: &ExampleGroup, spec: &AugmentSpec) -> Result<Vec<ExampleGroup>> {
    spec.validate()?;
    Ok((0..spec.variants()).map(|i| augment_variant(g, spec, i)).collect())
}

/// Angles used for a view family.
pub fn angles_for(spec: &AugmentSpec, view: ViewKind) -> &[f64] {
    if view.is_plan() { &spec.plan_angles } else { &spec.profile_angles }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawLabel;
    use proptest::prelude::*;

    fn smooth_disc(size: usize, phase: f64) -> GrayImage {
        let c = (size as f64 - 1.0) / 2.0;
        GrayImage::from_fn(size, size, ViewKind::Top, |r, col| {
            let (dy, dx) = (r as f64 - c, col as f64 - c);
            let d = (dx * dx + dy * dy).sqrt();
            if d > 0.4 * size as f64 {
                0
            } else {
                (120.0 + 60.0 * (dx / 9.0 + phase).sin() * (dy / 11.0).cos()).round() as u8
            }
        })
    }

    fn group() -> ExampleGroup {
        let mut g = ExampleGroup::new("g1", Some(RawLabel::Defective));
        for (i, v) in ViewKind::ALL.into_iter().enumerate() {
            let mut img = smooth_disc(32, i as f64);
            img.view = v;
            g.images.insert(v, img);
        }
        g
    }

    #[test]
    fn right_angle_rotations() {
        let img = GrayImage::from_fn(5, 5, ViewKind::Top, |r, c| (r * 5 + c) as u8);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(rotate(&rotate(&img, 90.0), 270.0), img);
        assert_eq!(rotate(&rotate(&img, 180.0), 180.0), img);
        // Counter-clockwise: the top-right corner moves to the top-left.
        assert_eq!(rotate(&img, 90.0).get(0, 0), img.get(0, 4));
        assert_eq!(rotate(&img, -90.0), rotate(&img, 270.0));
    }

    #[test]
    fn small_rotation_roundtrip_error() {
        // 5 degrees forward and back; the disc rim, where zero fill bleeds
        // in, is left out.
        let c = 31.5;
        for k in 0..10 {
            let img = smooth_disc(64, k as f64 * 0.6);
            let back = rotate(&rotate(&img, 5.0), -5.0);
            let (mut sum, mut n) = (0.0, 0.0);
            for r in 0..64 {
                for col in 0..64 {
                    let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                    if d <= 0.4 * 64.0 - 2.0 {
                        sum += (img.get(r, col) as f64 - back.get(r, col) as f64).abs();
                        n += 1.0;
                    }
                }
            }
            assert!(sum / n <= 2.0, "image {k}: mean abs diff {}", sum / n);
        }
    }

    #[test]
    fn noise_statistics() {
        let img = GrayImage::filled(128, 128, 128, ViewKind::Top);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut seed::rng(0, &[])), img);
        let noisy = add_gaussian_noise(&img, 5.0, &mut seed::rng(1, &[b"noise"]));
        let n = noisy.pixels().len() as f64;
        let mean = noisy.mean();
        let var = noisy.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 128.0).abs() <= 1.0, "mean {mean}");
        assert!((4.0..=6.0).contains(&var.sqrt()), "std {}", var.sqrt());

        let masked = GrayImage::from_fn(16, 16, ViewKind::Top, |r, _| if r < 8 { 0 } else { 100 });
        let noisy = add_gaussian_noise(&masked, 30.0, &mut seed::rng(2, &[]));
        assert!((0..8).all(|r| noisy.row(r).iter().all(|&v| v == 0)));
    }

    #[test]
    fn brightness_contrast_examples() {
        let img = GrayImage::from_fn(2, 2, ViewKind::Top, |r, c| match (r, c) {
            (0, 0) => 0,
            (0, 1) => 50,
            _ => 150,
        });
        assert_eq!(adjust_brightness_contrast(&img, 0.0, 1.0), img);
        let two = GrayImage::from_fn(1, 2, ViewKind::Top, |_, c| if c == 0 { 50 } else { 150 });
        assert_eq!(adjust_brightness_contrast(&two, 0.0, 1.1).pixels(), &[45, 155]);
        // +0.10 adds 25.5, rounded half away from zero.
        assert_eq!(adjust_brightness_contrast(&two, 0.10, 1.0).pixels(), &[76, 176]);
        let bright = GrayImage::from_fn(1, 3, ViewKind::Top, |_, c| [0, 240, 250][c]);
        assert_eq!(adjust_brightness_contrast(&bright, 0.10, 1.0).pixels(), &[0, 255, 255]);
    }

    #[test]
    fn default_spec_yields_twenty_variants() {
        let spec = AugmentSpec::default();
        assert_eq!(spec.profile_angles, vec![-10.0, -5.0, 0.0, 5.0, 10.0]);
        assert_eq!(spec.plan_angles, vec![0.0, 90.0, 180.0, 270.0]);
        let out = augment_group(&group(), &spec).unwrap();
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|g| g.raw_label == Some(RawLabel::Defective)));
        assert!(out.iter().all(|a| a.images.iter().all(|(v, img)| img.dims() == group().images[v].dims())));
        assert_eq!(out, augment_group(&group(), &spec).unwrap());
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let g = group();
        let out = augment_group(&g, &AugmentSpec::identity()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].images, g.images);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = AugmentSpec::default();
        spec.plan_angles.clear();
        assert!(augment_group(&group(), &spec).is_err());
        let spec = AugmentSpec { contrast_range: (0.0, 1.0), ..Default::default() };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn right_angles_permute_pixels(n in 1usize..12, pixels in prop::collection::vec(any::<u8>(), 144), k in 0i64..8) {
            let img = GrayImage::from_raw(n, n, pixels[..n * n].to_vec(), ViewKind::Top).unwrap();
            let rotated = rotate(&img, 90.0 * k as f64);
            let mut a = img.pixels().to_vec();
            let mut b = rotated.pixels().to_vec();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn variant_count_is_lcm(p in 1usize..7, q in 1usize..7) {
            let spec = AugmentSpec {
                plan_angles: (0..p).map(|i| 90.0 * i as f64).collect(),
                profile_angles: (0..q).map(|i| i as f64).collect(),
                ..AugmentSpec::identity()
            };
            let g = ExampleGroup::new("x", Some(RawLabel::Normal))
                .with_image(GrayImage::filled(4, 4, 9, ViewKind::Top));
            let out = augment_group(&g, &spec).unwrap();
            prop_assert_eq!(out.len(), lcm(p, q));
        }
    }
}
