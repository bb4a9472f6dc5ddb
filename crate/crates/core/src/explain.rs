//! Perturbation-based segment attributions for one-view predictions.
//!
//! The image is cut into grid tiles intersected with its nonzero area;
//! zero (masked) pixels form one background segment. Random subsets of
//! segments are blanked, the model's normal-class probability is recorded
//! for each, and a kernel-weighted ridge regression on the keep/drop
//! indicators gives one signed weight per segment: positive pushes toward
//! normal (green), negative toward defective (red).

use std::collections::BTreeMap;

use candle_core::DType;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{Classifier, ViewMode};
use crate::seed;

/// Segment labels over an image; segment 0 is the background (zero
/// pixels), segments 1.. are nonzero parts of grid tiles in row-major tile
/// order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub segments: usize,
}

pub const BACKGROUND: usize = 0;

impl SegmentMap {
    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.segments];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

pub fn segment(img: &GrayImage, cell: usize) -> Result<SegmentMap> {
    let (h, w) = img.dims();
    if cell == 0 || cell > h.min(w) {
        return Err(Error::Parameter(format!("cell {cell} does not fit a {h}×{w} image")));
    }
    let (th, tw) = (h.div_ceil(cell), w.div_ceil(cell));
    let mut tile_id = vec![0usize; th * tw];
    for r in 0..h {
        for (c, &v) in img.row(r).iter().enumerate() {
            if v > 0 {
                tile_id[(r / cell) * tw + c / cell] = 1;
            }
        }
    }
    let mut next = 1;
    for t in tile_id.iter_mut() {
        if *t == 1 {
            *t = next;
            next += 1;
        }
    }
    let labels = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            if img.pixels()[i] == 0 {
                BACKGROUND
            } else {
                tile_id[(r / cell) * tw + c / cell]
            }
        })
        .collect();
    Ok(SegmentMap {
        height: h,
        width: w,
        labels,
        segments: next,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainParams {
    pub n_samples: usize,
    pub cell: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub seed: u64,
    /// Perturbed images per model call.
    pub batch: usize,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            cell: 28,
            kernel_width: 0.25,
            ridge: 1e-3,
            seed: 0,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub segments: SegmentMap,
    pub segment_weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² of the surrogate; 0 when the target has no variance.
    pub fidelity_r2: f64,
    /// Model probability on the unperturbed image.
    pub model_full: f64,
    /// Surrogate on the all-kept mask: intercept + Σ weights.
    pub surrogate_full: f64,
}

impl Explanation {
    /// `{segment_id: weight}`.
    pub fn weights_json(&self) -> serde_json::Value {
        let m: BTreeMap<String, f64> = self.segment_weights.iter().enumerate().map(|(i, &w)| (i.to_string(), w)).collect();
        serde_json::to_value(m).expect("map of floats serializes")
    }

    /// Segment with the most negative weight (toward defective), if any is
    /// negative.
    pub fn most_negative(&self) -> Option<usize> {
        self.segment_weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Image with the segments where `keep` is false set to 0.
pub fn perturb(img: &GrayImage, seg: &SegmentMap, keep: &[bool]) -> GrayImage {
    let mut out = img.clone();
    for (p, &l) in out.pixels_mut().iter_mut().zip(&seg.labels) {
        if !keep[l] {
            *p = 0;
        }
    }
    out
}

/// Explains `predict` (probabilities of the explained class for a batch of
/// images) around `img`.
pub fn explain_with(img: &GrayImage, params: &ExplainParams, mut predict: impl FnMut(&[GrayImage]) -> Result<Vec<f64>>) -> Result<Explanation> {
    if !(params.kernel_width > 0.0) || !(params.ridge >= 0.0) || params.batch == 0 {
        return Err(Error::Parameter("kernel width must be positive, ridge non-negative, batch >= 1".into()));
    }
    let seg = segment(img, params.cell)?;
    let s = seg.segments;
    if params.n_samples < s + 1 {
        return Err(Error::Parameter(format!(
            "{} samples cannot determine {s} segment weights and an intercept",
            params.n_samples
        )));
    }
    let mut rng = seed::rng(params.seed, &[b"explain"]);
    let masks: Vec<Vec<bool>> = (0..params.n_samples).map(|_| (0..s).map(|_| rng.random_bool(0.5)).collect()).collect();

    let mut y = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(params.batch) {
        let imgs: Vec<GrayImage> = chunk.iter().map(|m| perturb(img, &seg, m)).collect();
        let p = predict(&imgs)?;
        if p.len() != imgs.len() {
            return Err(Error::Shape(format!("{} predictions for {} images", p.len(), imgs.len())));
        }
        y.extend(p);
    }
    let model_full = predict(std::slice::from_ref(img))?[0];

    let pi: Vec<f64> = masks
        .iter()
        .map(|m| {
            let k = m.iter().filter(|&&b| b).count();
            let d = if k == 0 { 1.0 } else { 1.0 - (k as f64 / s as f64).sqrt() };
            (-(d * d) / (params.kernel_width * params.kernel_width)).exp()
        })
        .collect();
    let z = DMatrix::from_fn(masks.len(), s, |i, j| if masks[i][j] { 1.0 } else { 0.0 });
    let (weights, intercept, r2) = weighted_ridge(&z, &DVector::from_vec(y), &DVector::from_vec(pi), params.ridge)?;
    let surrogate_full = intercept + weights.iter().sum::<f64>();
    Ok(Explanation {
        segments: seg,
        segment_weights: weights,
        intercept,
        fidelity_r2: r2,
        model_full,
        surrogate_full,
    })
}

/// Ridge regression with sample weights and an unpenalized intercept.
/// Returns (coefficients, intercept, weighted R²).
pub fn weighted_ridge(z: &DMatrix<f64>, y: &DVector<f64>, pi: &DVector<f64>, ridge: f64) -> Result<(Vec<f64>, f64, f64)> {
    let (n, s) = z.shape();
    let wsum: f64 = pi.sum();
    if n == 0 || !(wsum > 0.0) {
        return Err(Error::Validation("no weighted samples".into()));
    }
    let zbar = DVector::from_fn(s, |j, _| (0..n).map(|i| pi[i] * z[(i, j)]).sum::<f64>() / wsum);
    let ybar = pi.dot(y) / wsum;
    let yc = y.map(|v| v - ybar);
    let ss_tot: f64 = (0..n).map(|i| pi[i] * yc[i] * yc[i]).sum();
    // A target with (numerically) no variance carries no attribution and
    // has no R² to speak of.
    if ss_tot / wsum <= 1e-18 * ybar.abs().max(1.0).powi(2) {
        return Ok((vec![0.0; s], ybar, 0.0));
    }
    let zc = DMatrix::from_fn(n, s, |i, j| z[(i, j)] - zbar[j]);
    let wz = DMatrix::from_fn(n, s, |i, j| pi[i] * zc[(i, j)]);
    let mut a = zc.transpose() * &wz;
    for j in 0..s {
        a[(j, j)] += ridge;
    }
    let rhs = wz.transpose() * &yc;
    let coef = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Validation("surrogate system is singular".into()))?,
    };
    let intercept = ybar - zbar.dot(&coef);
    let fitted = &zc * &coef;
    let ss_res: f64 = (0..n).map(|i| pi[i] * (yc[i] - fitted[i]).powi(2)).sum();
    Ok((coef.iter().copied().collect(), intercept, 1.0 - ss_res / ss_tot))
}

/// Explains a one-view, single-view classifier's normal-class probability.
pub fn explain(clf: &Classifier, img: &GrayImage, params: &ExplainParams) -> Result<Explanation> {
    if clf.config.mode != ViewMode::OneView || clf.config.views.len() != 1 {
        return Err(Error::Validation("explanations need a one-view model with a single view".into()));
    }
    explain_with(img, params, |imgs| normal_probabilities(clf, imgs))
}

/// Eval-mode P(normal) for a batch of single images.
pub fn normal_probabilities(clf: &Classifier, imgs: &[GrayImage]) -> Result<Vec<f64>> {
    let samples: Vec<Vec<&GrayImage>> = imgs.iter().map(|i| vec![i]).collect();
    let logits: Vec<Vec<f64>> = clf.forward_samples(&samples, false)?.to_dtype(DType::F64)?.to_vec2()?;
    Ok(logits.iter().map(|l| 1.0 - crate::model::defective_probability([l[0], l[1]])).collect())
}

/// Grayscale image with the `top_k` largest-|weight| segments tinted green
/// (positive) or red (negative), opacity proportional to |w| / max |w|.
pub fn render_overlay(img: &GrayImage, expl: &Explanation, top_k: usize) -> image::RgbImage {
    let w = &expl.segment_weights;
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    let mut alpha = vec![0.0; w.len()];
    for &i in order.iter().take(top_k) {
        alpha[i] = 0.6 * w[i].abs() / max;
    }
    let (h, wd) = img.dims();
    image::RgbImage::from_fn(wd as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = img.get(r, c) as f64;
        let l = expl.segments.label(r, c);
        let a = alpha[l];
        if a == 0.0 {
            return image::Rgb([g as u8; 3]);
        }
        let target = if w[l] > 0.0 { [0.0, 255.0, 0.0] } else { [255.0, 0.0, 0.0] };
        image::Rgb(target.map(|t| ((1.0 - a) * g + a * t).round() as u8))
    })
}
