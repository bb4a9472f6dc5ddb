//! Seeded generator of labeled synthetic foams.
//!
//! Plan views are a dark foam disc on a bright field, with a faint holder
//! ring outside the disc. Profiles are a bright slab band on a dark field.
//! Defective foams get bright stains or scratches on the plan views and
//! possibly dark holes in a profile; normal-defective foams get exactly one
//! stain too small to matter (under half a percent of the disc area).
//! Every defect pixel is recorded in a per-view ground-truth mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ExampleGroup, RawLabel, ViewKind};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::preprocess::Circle;
use crate::seed;

/// Upper bound on a normal-defective blemish, as a fraction of disc area.
pub const ND_AREA_LIMIT: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefectIntensity {
    /// Plan-view defects per defective foam (inclusive range).
    pub plan_defects: (usize, usize),
    /// Probability that a plan-view defect is a stain rather than a scratch.
    pub stain_probability: f64,
    /// Stain area as a fraction of the disc area.
    pub stain_area: (f64, f64),
    /// Scratch length as a fraction of the disc radius.
    pub scratch_length: (f64, f64),
    /// Scratch width in pixels.
    pub scratch_width: (usize, usize),
    /// Chance that a defective foam also shows a dark hole in one profile.
    pub dark_hole_probability: f64,
}

impl Default for DefectIntensity {
    fn default() -> Self {
        Self {
            plan_defects: (1, 2),
            stain_probability: 0.6,
            stain_area: (0.015, 0.04),
            scratch_length: (0.5, 1.0),
            scratch_width: (1, 3),
            dark_hole_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_groups: usize,
    pub image_size: usize,
    /// Integer upsampling of the rendered canvas.
    pub raw_scale: usize,
    /// Fractions of normal, normal-defective and defective foams.
    pub class_mix: [f64; 3],
    pub defects: DefectIntensity,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_groups: 200,
            image_size: 224,
            raw_scale: 1,
            class_mix: [1.0 / 3.0; 3],
            defects: DefectIntensity::default(),
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 {
            return Err(Error::Parameter("n_groups must be >= 1".into()));
        }
        if self.image_size < 16 || self.raw_scale == 0 {
            return Err(Error::Parameter("image_size must be >= 16 and raw_scale >= 1".into()));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if self.class_mix.iter().any(|&f| !(f >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("class mix {:?} must be non-negative and sum to 1", self.class_mix)));
        }
        let d = &self.defects;
        if d.plan_defects.0 == 0 || d.plan_defects.0 > d.plan_defects.1 {
            return Err(Error::Parameter("plan_defects must be an ordered range starting at >= 1".into()));
        }
        if d.stain_area.0 <= ND_AREA_LIMIT || d.stain_area.0 > d.stain_area.1 {
            return Err(Error::Parameter("stain area must be ordered and above the normal-defective limit".into()));
        }
        if d.scratch_width.0 == 0 || d.scratch_width.0 > d.scratch_width.1 {
            return Err(Error::Parameter("scratch width must be an ordered range starting at >= 1".into()));
        }
        Ok(())
    }

    /// Per-class counts: largest-remainder rounding of `class_mix * n`.
    pub fn class_counts(&self) -> [usize; 3] {
        let quotas: Vec<f64> = self.class_mix.iter().map(|f| f * self.n_groups as f64).collect();
        let mut counts = [0usize; 3];
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = (q + 1e-9).floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut left = self.n_groups - counts.iter().sum::<usize>();
        for i in order.into_iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// Ground truth of one generated foam.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub circles: BTreeMap<ViewKind, Circle>,
    /// Binary (0/255) defect masks, one per view.
    pub defect_masks: BTreeMap<ViewKind, GrayImage>,
    pub raw_label: RawLabel,
}

impl SynthTruth {
    pub fn defect_pixels(&self, view: ViewKind) -> usize {
        self.defect_masks
            .get(&view)
            .map_or(0, |m| m.pixels().iter().filter(|&&v| v > 0).count())
    }
}

pub fn generate(params: &SynthParams) -> Result<Vec<(ExampleGroup, SynthTruth)>> {
    params.validate()?;
    let counts = params.class_counts();
    let mut labels: Vec<RawLabel> = RawLabel::ALL
        .into_iter()
        .zip(counts)
        .flat_map(|(l, n)| std::iter::repeat(l).take(n))
        .collect();
    labels.shuffle(&mut seed::rng(params.seed, &[b"synth-labels"]));
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_one(params, i, label))
        .collect())
}

/// Renders group `index` with the given label.
pub fn generate_one(params: &SynthParams, index: usize, label: RawLabel) -> (ExampleGroup, SynthTruth) {
    let mut rng = seed::rng(params.seed, &[b"synth-group", &(index as u64).to_le_bytes()]);
    let size = params.image_size * params.raw_scale;
    let id = format!("syn{index:04}");
    let mut group = ExampleGroup::new(id, Some(label));
    let mut truth = SynthTruth {
        circles: BTreeMap::new(),
        defect_masks: BTreeMap::new(),
        raw_label: label,
    };

    let mut plans: BTreeMap<ViewKind, PlanCanvas> = ViewKind::PLAN
        .into_iter()
        .map(|v| (v, PlanCanvas::new(size, v, &mut rng)))
        .collect();
    let mut profiles: BTreeMap<ViewKind, ProfileCanvas> = ViewKind::PROFILES
        .into_iter()
        .map(|v| (v, ProfileCanvas::new(size, v, &mut rng)))
        .collect();

    let d = &params.defects;
    match label {
        RawLabel::Normal => {}
        RawLabel::NormalDefective => {
            let view = *ViewKind::PLAN.choose(&mut rng).unwrap();
            let canvas = plans.get_mut(&view).unwrap();
            let limit = ND_AREA_LIMIT * canvas.disc_area();
            // Strictly below the limit, whatever the disc size.
            let most = (limit.ceil() as usize - 1).max(1);
            let pixels = ((rng.random_range(0.4..0.9) * limit).round() as usize).clamp(1, most);
            canvas.blemish(pixels, &mut rng);
        }
        RawLabel::Defective => {
            let n = rng.random_range(d.plan_defects.0..=d.plan_defects.1);
            for _ in 0..n {
                let view = *ViewKind::PLAN.choose(&mut rng).unwrap();
                let canvas = plans.get_mut(&view).unwrap();
                if rng.random_bool(d.stain_probability.clamp(0.0, 1.0)) {
                    let area = rng.random_range(d.stain_area.0..=d.stain_area.1) * canvas.disc_area();
                    canvas.stain(area, &mut rng);
                } else {
                    let length = rng.random_range(d.scratch_length.0..=d.scratch_length.1) * canvas.circle.r as f64;
                    let width = rng.random_range(d.scratch_width.0..=d.scratch_width.1);
                    canvas.scratch(length, width, &mut rng);
                }
            }
            if rng.random_bool(d.dark_hole_probability.clamp(0.0, 1.0)) {
                let view = *ViewKind::PROFILES.choose(&mut rng).unwrap();
                profiles.get_mut(&view).unwrap().hole(&mut rng);
            }
        }
    }

    for (view, canvas) in plans {
        truth.circles.insert(view, canvas.circle);
        let (img, mask) = canvas.finish(&mut rng);
        group.images.insert(view, img);
        truth.defect_masks.insert(view, mask);
    }
    for (view, canvas) in profiles {
        let (img, mask) = canvas.finish(&mut rng);
        group.images.insert(view, img);
        truth.defect_masks.insert(view, mask);
    }
    (group, truth)
}

struct PlanCanvas {
    size: usize,
    view: ViewKind,
    circle: Circle,
    background: f64,
    disc: f64,
    ring: f64,
    field: Vec<f64>,
    mask: Vec<bool>,
}

impl PlanCanvas {
    fn new(size: usize, view: ViewKind, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let jitter = (0.05 * s).floor() as i64;
        let r = rng.random_range((0.30 * s).ceil() as usize..=(0.45 * s).floor() as usize);
        let mut offset = || rng.random_range(-jitter..=jitter);
        let circle = Circle {
            cx: (size as i64 / 2 + offset()) as usize,
            cy: (size as i64 / 2 + offset()) as usize,
            r,
        };
        let background = rng.random_range(200.0..=230.0);
        let disc = rng.random_range(10.0..=40.0);
        let ring = rng.random_range(150.0..=180.0);
        Self {
            size,
            view,
            circle,
            background,
            disc,
            ring,
            field: vec![f64::NAN; size * size],
            mask: vec![false; size * size],
        }
    }

    fn disc_area(&self) -> f64 {
        std::f64::consts::PI * (self.circle.r * self.circle.r) as f64
    }

    /// A random point inside the disc at least `margin` from its edge.
    fn point_inside(&self, margin: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let reach = (self.circle.r as f64 - margin).max(0.0);
        let rho = reach * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        (self.circle.cy as f64 + rho * theta.sin(), self.circle.cx as f64 + rho * theta.cos())
    }

    fn paint(&mut self, row: i64, col: i64, value: f64) {
        let n = self.size as i64;
        if row < 0 || col < 0 || row >= n || col >= n {
            return;
        }
        let (row, col) = (row as usize, col as usize);
        if !self.circle.contains(row, col) {
            return;
        }
        let i = row * self.size + col;
        self.field[i] = value;
        self.mask[i] = true;
    }

    /// Bright ellipse of about `area` pixels.
    fn stain(&mut self, area: f64, rng: &mut ChaCha8Rng) {
        let aspect = rng.random_range(1.0..=1.8);
        let b = (area / (std::f64::consts::PI * aspect)).sqrt().max(0.5);
        let a = b * aspect;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (cy, cx) = self.point_inside(a + 2.0, rng);
        let value = rng.random_range(170.0..=230.0);
        let (sin, cos) = angle.sin_cos();
        let reach = a.ceil() as i64 + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let row = cy.round() as i64 + dy;
                let col = cx.round() as i64 + dx;
                let (y, x) = (row as f64 - cy, col as f64 - cx);
                let u = x * cos + y * sin;
                let v = -x * sin + y * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    self.paint(row, col, value);
                }
            }
        }
        // Sub-pixel blemishes still mark their center pixel.
        if area < 3.0 {
            self.paint(cy.round() as i64, cx.round() as i64, value);
        }
    }

    /// Bright compact blob of exactly `pixels` pixels: the ones nearest to a
    /// random interior point.
    fn blemish(&mut self, pixels: usize, rng: &mut ChaCha8Rng) {
        let reach = (pixels as f64).sqrt().ceil() as i64 + 1;
        let (cy, cx) = self.point_inside(reach as f64 + 1.0, rng);
        let value = rng.random_range(170.0..=230.0);
        let (r0, c0) = (cy.round() as i64, cx.round() as i64);
        let mut cells: Vec<(i64, i64, i64)> = (-reach..=reach)
            .flat_map(|dy| (-reach..=reach).map(move |dx| (dy * dy + dx * dx, dy, dx)))
            .collect();
        cells.sort();
        for &(_, dy, dx) in cells.iter().take(pixels) {
            self.paint(r0 + dy, c0 + dx, value);
        }
    }

    /// Bright polyline of two or three segments.
    fn scratch(&mut self, length: f64, width: usize, rng: &mut ChaCha8Rng) {
        let segments = rng.random_range(2..=3);
        let (mut y, mut x) = self.point_inside(length / 2.0, rng);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let value = rng.random_range(150.0..=220.0);
        let half = (width as f64 - 1.0) / 2.0;
        for _ in 0..segments {
            let seg = length / segments as f64;
            let steps = (seg * 2.0).ceil() as usize;
            for _ in 0..steps {
                let reach = half.ceil() as i64;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if ((dy * dy + dx * dx) as f64).sqrt() <= half + 0.5 {
                            self.paint(y.round() as i64 + dy, x.round() as i64 + dx, value);
                        }
                    }
                }
                y += 0.5 * heading.sin();
                x += 0.5 * heading.cos();
            }
            heading += rng.random_range(-0.8..=0.8);
        }
    }

    fn finish(self, rng: &mut ChaCha8Rng) -> (GrayImage, GrayImage) {
        let noise = Normal::new(0.0, 4.0).unwrap();
        let c = self.circle;
        let ring_in = (c.r as f64 + 0.04 * self.size as f64).round();
        let ring_out = ring_in + 2.0;
        let mut pixels = Vec::with_capacity(self.size * self.size);
        for row in 0..self.size {
            for col in 0..self.size {
                let i = row * self.size + col;
                let dy = row as f64 - c.cy as f64;
                let dx = col as f64 - c.cx as f64;
                let d = (dx * dx + dy * dy).sqrt();
                let base = if !self.field[i].is_nan() {
                    self.field[i]
                } else if c.contains(row, col) {
                    // Mild radial shading and sparse pores.
                    let pore = if rng.random_bool(0.02) { 15.0 } else { 0.0 };
                    self.disc + 6.0 * (d / c.r as f64) + pore
                } else if d >= ring_in && d <= ring_out {
                    self.ring
                } else {
                    self.background
                };
                pixels.push((base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
        let img = GrayImage::from_raw(self.size, self.size, pixels, self.view).unwrap();
        let mask = mask_image(&self.mask, self.size, self.size, self.view);
        (img, mask)
    }
}

struct ProfileCanvas {
    size: usize,
    view: ViewKind,
    band: (usize, usize, usize, usize),
    band_value: f64,
    holes: Vec<(f64, f64, f64, f64)>,
}

impl ProfileCanvas {
    fn new(size: usize, view: ViewKind, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let bh = (rng.random_range(0.25..=0.35) * s).round() as usize;
        let bw = (rng.random_range(0.60..=0.80) * s).round() as usize;
        let top = rng.random_range(1..size - bh);
        let left = rng.random_range(1..size - bw);
        Self {
            size,
            view,
            band: (top, left, bh, bw),
            band_value: rng.random_range(170.0..=210.0),
            holes: Vec::new(),
        }
    }

    fn hole(&mut self, rng: &mut ChaCha8Rng) {
        let (top, left, bh, bw) = self.band;
        let ry = (bh as f64 * rng.random_range(0.15..=0.3)).max(1.0);
        let rx = ry * rng.random_range(1.0..=2.0);
        let cy = top as f64 + rng.random_range(ry + 1.0..=(bh as f64 - ry - 1.0).max(ry + 1.0));
        let cx = left as f64 + rng.random_range(rx + 1.0..=(bw as f64 - rx - 1.0).max(rx + 1.0));
        self.holes.push((cy, cx, ry, rx));
    }

    fn finish(self, rng: &mut ChaCha8Rng) -> (GrayImage, GrayImage) {
        let noise = Normal::new(0.0, 3.0).unwrap();
        let (top, left, bh, bw) = self.band;
        let mut mask = vec![false; self.size * self.size];
        let mut pixels = Vec::with_capacity(self.size * self.size);
        for row in 0..self.size {
            for col in 0..self.size {
                let in_band = (top..top + bh).contains(&row) && (left..left + bw).contains(&col);
                let in_hole = self.holes.iter().any(|&(cy, cx, ry, rx)| {
                    ((row as f64 - cy) / ry).powi(2) + ((col as f64 - cx) / rx).powi(2) <= 1.0
                });
                let base = if in_band && in_hole {
                    mask[row * self.size + col] = true;
                    20.0
                } else if in_band {
                    // Layered texture along the slab.
                    self.band_value + 8.0 * ((row - top) as f64 * 0.7).sin()
                } else {
                    8.0
                };
                pixels.push((base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
        let img = GrayImage::from_raw(self.size, self.size, pixels, self.view).unwrap();
        (img, mask_image(&mask, self.size, self.size, self.view))
    }
}

fn mask_image(mask: &[bool], h: usize, w: usize, view: ViewKind) -> GrayImage {
    GrayImage::from_raw(h, w, mask.iter().map(|&m| if m { 255 } else { 0 }).collect(), view).unwrap()
}

/// Run-length encoding of a binary mask in row-major order. Runs alternate
/// starting with unset pixels (the first run may be zero).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl MaskRle {
    pub fn encode(mask: &GrayImage) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in mask.pixels() {
            let set = v > 0;
            if set != current {
                runs.push(len);
                len = 0;
                current = set;
            }
            len += 1;
        }
        runs.push(len);
        Self {
            height: mask.height(),
            width: mask.width(),
            runs,
        }
    }

    pub fn decode(&self, view: ViewKind) -> Result<GrayImage> {
        let mut pixels = Vec::with_capacity(self.height * self.width);
        for (i, &len) in self.runs.iter().enumerate() {
            let v = if i % 2 == 0 { 0 } else { 255 };
            pixels.extend(std::iter::repeat(v).take(len));
        }
        GrayImage::from_raw(self.height, self.width, pixels, view)
    }
}

/// On-disk form of [`SynthTruth`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub id: String,
    pub label: RawLabel,
    pub circles: BTreeMap<ViewKind, Circle>,
    pub masks: BTreeMap<ViewKind, MaskRle>,
}

impl TruthSidecar {
    pub fn new(id: &str, truth: &SynthTruth) -> Self {
        Self {
            id: id.to_string(),
            label: truth.raw_label,
            circles: truth.circles.clone(),
            masks: truth.defect_masks.iter().map(|(&v, m)| (v, MaskRle::encode(m))).collect(),
        }
    }

    pub fn into_truth(self) -> Result<SynthTruth> {
        let mut defect_masks = BTreeMap::new();
        for (view, rle) in &self.masks {
            defect_masks.insert(*view, rle.decode(*view)?);
        }
        Ok(SynthTruth {
            circles: self.circles,
            defect_masks,
            raw_label: self.label,
        })
    }
}

pub const TRUTH_FILE: &str = "truth.json";

/// Writes `<dir>/<id>/<view>.png`, `<dir>/<id>/truth.json` and
/// `<dir>/manifest.json`. Returns the manifest path.
pub fn write_dataset(dir: &Path, items: &[(ExampleGroup, SynthTruth)]) -> Result<PathBuf> {
    for (group, truth) in items {
        let sidecar = serde_json::to_vec_pretty(&TruthSidecar::new(&group.id, truth))?;
        crate::write_atomic(&dir.join(&group.id).join(TRUTH_FILE), &sidecar)?;
    }
    let groups: Vec<ExampleGroup> = items.iter().map(|(g, _)| g.clone()).collect();
    crate::data::write_groups(dir, &groups)
}

pub fn read_truth(group_dir: &Path) -> Result<SynthTruth> {
    let path = group_dir.join(TRUTH_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice::<TruthSidecar>(&bytes)?.into_truth()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{find_circle, quantize, CircleSearchParams};

    fn small(n: usize, mix: [f64; 3], seed: u64) -> SynthParams {
        SynthParams {
            n_groups: n,
            image_size: 64,
            class_mix: mix,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn class_counts_follow_mix() {
        let p = SynthParams { n_groups: 200, seed: 7, ..Default::default() };
        let counts = p.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 200);
        for (c, target) in counts.iter().zip([66, 67, 67]) {
            assert!(c.abs_diff(target) <= 1, "{counts:?}");
        }
        let items = generate(&small(200, [1.0 / 3.0; 3], 7)).unwrap();
        assert_eq!(items.len(), 200);
        for (label, expected) in RawLabel::ALL.into_iter().zip(counts) {
            assert_eq!(items.iter().filter(|(g, _)| g.raw_label == Some(label)).count(), expected);
        }
    }

    #[test]
    fn normal_foams_have_no_defects() {
        for (g, t) in generate(&small(12, [1.0, 0.0, 0.0], 1)).unwrap() {
            assert!(g.is_complete());
            assert!(ViewKind::ALL.iter().all(|&v| t.defect_pixels(v) == 0));
        }
    }

    #[test]
    fn defect_labels_match_masks() {
        for (_, t) in generate(&small(60, [0.0, 0.5, 0.5], 3)).unwrap() {
            let plan: usize = ViewKind::PLAN.iter().map(|&v| t.defect_pixels(v)).sum();
            assert!(plan > 0, "{:?} without plan defect", t.raw_label);
            if t.raw_label == RawLabel::NormalDefective {
                let view = *ViewKind::PLAN.iter().find(|&&v| t.defect_pixels(v) > 0).unwrap();
                let r = t.circles[&view].r as f64;
                let area = std::f64::consts::PI * r * r;
                assert_eq!(plan, t.defect_pixels(view));
                assert!((plan as f64) < ND_AREA_LIMIT * area, "{plan} px vs disc {area}");
            }
        }
    }

    #[test]
    fn defects_contrast_with_surroundings() {
        for (g, t) in generate(&small(20, [0.0, 0.0, 1.0], 4)).unwrap() {
            for view in ViewKind::ALL {
                let mask = &t.defect_masks[&view];
                let img = &g.images[&view];
                let (mut inside, mut n_in) = (0.0, 0.0);
                for (&m, &v) in mask.pixels().iter().zip(img.pixels()) {
                    if m > 0 {
                        inside += v as f64;
                        n_in += 1.0;
                    }
                }
                if n_in == 0.0 {
                    continue;
                }
                // Local background: the disc for plan views, the slab for profiles.
                let reference = if view.is_plan() { 40.0 } else { 170.0 };
                assert!((inside / n_in - reference).abs() >= 40.0, "{view}: {}", inside / n_in);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = small(6, [0.2, 0.3, 0.5], 9);
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ga, ta), (gb, tb)) in a.iter().zip(&b) {
            assert_eq!(ga, gb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn bad_mix_is_rejected() {
        assert!(generate(&small(5, [0.5, 0.5, 0.5], 0)).is_err());
        assert!(generate(&small(0, [1.0, 0.0, 0.0], 0)).is_err());
    }

    #[test]
    fn circle_recovered_on_most_plan_views() {
        let items = generate(&small(50, [1.0 / 3.0; 3], 21)).unwrap();
        let mut hits = 0;
        for (g, t) in &items {
            for view in ViewKind::PLAN {
                let q = quantize(&g.images[&view], 10).unwrap();
                let c = find_circle(&q, &CircleSearchParams::default()).unwrap().circle;
                let truth = t.circles[&view];
                if c.cx.abs_diff(truth.cx) <= 2 && c.cy.abs_diff(truth.cy) <= 2 && c.r.abs_diff(truth.r) <= 2 {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn rle_roundtrip_and_sidecar_io() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate(&small(3, [0.0, 0.0, 1.0], 5)).unwrap();
        let manifest = write_dataset(dir.path(), &items).unwrap();
        let loaded = crate::data::load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((g, t), l) in items.iter().zip(&loaded) {
            assert!(l.is_complete() && l.issues.is_empty());
            assert_eq!(l.images, g.images);
            assert_eq!(&read_truth(&dir.path().join(&g.id)).unwrap(), t);
        }
    }
}
