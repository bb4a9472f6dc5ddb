//! The truncated residual backbone, view pooling and the two-class head.
//!
//! The backbone keeps the stem and the first two stages of a 34-layer
//! residual network (3 + 4 basic blocks, 64 and 128 channels), takes one
//! gray channel and ends in global average pooling, so every view maps to
//! a 128-dim embedding. Multi-view models take the element-wise maximum of
//! the view embeddings before the 128→2 head.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{ExampleGroup, ViewKind};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed;

pub mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, load_weights, save_checkpoint, CheckpointHeader};

use layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d, Linear, ParamBuilder};

/// Learnable parameters of the truncated backbone plus its head.
pub const TRUNCATED_PARAMS: usize = 1_341_890;
/// The untruncated 3-channel reference with its 1000-class layer and a
/// two-way output on top.
pub const REFERENCE_PARAMS: usize = 21_799_674;
pub const EMBEDDING_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    /// Residual stages; every stage after the first halves the resolution.
    pub stages: Vec<StageSpec>,
    /// Widths of the linear layers after global pooling (the last is the
    /// class count).
    pub classifier: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::truncated(224)
    }
}

impl BackboneSpec {
    pub fn truncated(input_size: usize) -> Self {
        Self {
            input_channels: 1,
            input_size,
            stem_channels: 64,
            stages: vec![StageSpec { blocks: 3, channels: 64 }, StageSpec { blocks: 4, channels: 128 }],
            classifier: vec![2],
        }
    }

    /// The full 34-layer network: RGB input, four stages, 1000 classes,
    /// and a 1000→2 output layer.
    pub fn reference() -> Self {
        Self {
            input_channels: 3,
            input_size: 224,
            stem_channels: 64,
            stages: [(3, 64), (4, 128), (6, 256), (3, 512)]
                .into_iter()
                .map(|(blocks, channels)| StageSpec { blocks, channels })
                .collect(),
            classifier: vec![1000, 2],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    pub fn conv_layers(&self) -> usize {
        1 + self.stages.iter().map(|s| 2 * s.blocks).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_channels == 0 || self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return Err(Error::Parameter("backbone widths and depths must be >= 1".into()));
        }
        if self.classifier.is_empty() || self.classifier.contains(&0) {
            return Err(Error::Parameter("classifier needs at least one non-empty layer".into()));
        }
        // Stem /4, then /2 per further stage.
        let min = 4usize << self.stages.len().saturating_sub(1);
        if self.input_size < min {
            return Err(Error::Parameter(format!("input size {} below the minimum {min}", self.input_size)));
        }
        Ok(())
    }

    /// Names and shapes of the learnable parameters, in build order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            out.push((format!("{name}.weight"), vec![c]));
            out.push((format!("{name}.bias"), vec![c]));
        };
        out.push(("conv1.weight".into(), vec![self.stem_channels, self.input_channels, 7, 7]));
        bn(&mut out, "bn1".into(), self.stem_channels);
        let mut c_in = self.stem_channels;
        for (s, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let p = format!("layer{}.{b}", s + 1);
                let c = stage.channels;
                let from = if b == 0 { c_in } else { c };
                out.push((format!("{p}.conv1.weight"), vec![c, from, 3, 3]));
                bn(&mut out, format!("{p}.bn1"), c);
                out.push((format!("{p}.conv2.weight"), vec![c, c, 3, 3]));
                bn(&mut out, format!("{p}.bn2"), c);
                if b == 0 && (s > 0 || from != c) {
                    out.push((format!("{p}.downsample.0.weight"), vec![c, from, 1, 1]));
                    bn(&mut out, format!("{p}.downsample.1"), c);
                }
            }
            c_in = stage.channels;
        }
        let mut d_in = self.embedding_dim();
        for (i, &d) in self.classifier.iter().enumerate() {
            let name = classifier_name(i);
            out.push((format!("{name}.weight"), vec![d, d_in]));
            out.push((format!("{name}.bias"), vec![d]));
            d_in = d;
        }
        out
    }

    /// Parameter count from the layout alone.
    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Digest of the architecture; guards checkpoint loading.
    pub fn spec_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, shape) in self.param_layout() {
            h.update(format!("{name}:{shape:?};").as_bytes());
        }
        h.update(format!("input={}", self.input_size).as_bytes());
        hex::encode(h.finalize())
    }
}

fn classifier_name(i: usize) -> String {
    if i == 0 {
        "fc".into()
    } else {
        format!("fc{}", i + 1)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let out = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward(&self.conv2.forward(&out)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((out + shortcut)?.relu()?)
    }
}

/// A built backbone plus classifier layers.
pub struct Network {
    spec: BackboneSpec,
    dtype: DType,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    classifier: Vec<Linear>,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl Network {
    /// Builds the network with seeded initial weights.
    pub fn new(spec: &BackboneSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::new(seed::rng(seed, &[b"init"]), dtype);
        let conv1 = Conv2d::new(&mut b, "conv1", spec.input_channels, spec.stem_channels, 7, 2, 3)?;
        let bn1 = BatchNorm2d::new(&mut b, "bn1", spec.stem_channels)?;
        let mut stages = Vec::new();
        let mut c_in = spec.stem_channels;
        for (s, stage) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..stage.blocks {
                let p = format!("layer{}.{i}", s + 1);
                let c = stage.channels;
                let (from, stride) = if i == 0 { (c_in, if s == 0 { 1 } else { 2 }) } else { (c, 1) };
                let conv1 = Conv2d::new(&mut b, &format!("{p}.conv1"), from, c, 3, stride, 1)?;
                let bn1 = BatchNorm2d::new(&mut b, &format!("{p}.bn1"), c)?;
                let conv2 = Conv2d::new(&mut b, &format!("{p}.conv2"), c, c, 3, 1, 1)?;
                let bn2 = BatchNorm2d::new(&mut b, &format!("{p}.bn2"), c)?;
                let downsample = if stride != 1 || from != c {
                    Some((
                        Conv2d::new(&mut b, &format!("{p}.downsample.0"), from, c, 1, stride, 0)?,
                        BatchNorm2d::new(&mut b, &format!("{p}.downsample.1"), c)?,
                    ))
                } else {
                    None
                };
                blocks.push(BasicBlock { conv1, bn1, conv2, bn2, downsample });
            }
            stages.push(blocks);
            c_in = stage.channels;
        }
        let mut classifier = Vec::new();
        let mut d_in = spec.embedding_dim();
        for (i, &d) in spec.classifier.iter().enumerate() {
            classifier.push(Linear::new(&mut b, &classifier_name(i), d_in, d)?);
            d_in = d;
        }
        Ok(Self {
            spec: spec.clone(),
            dtype,
            conv1,
            bn1,
            stages,
            classifier,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Learnable parameter count of the built network.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    /// (N, C, H, W) images → (N, E) embeddings.
    pub fn embed(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.spec.input_size;
        if c != self.spec.input_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected {}×{s}×{s} input, got {c}×{h}×{w}",
                self.spec.input_channels
            )));
        }
        let mut x = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        x = max_pool_3x3_s2(&x)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, train)?;
            }
        }
        global_avg_pool(&x)
    }

    /// (N, E) embeddings → (N, classes) logits.
    pub fn head(&self, emb: &Tensor) -> Result<Tensor> {
        let mut x = emb.clone();
        for layer in &self.classifier {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Copies of every parameter and buffer, keyed by layer path.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters and buffers from `tensors`; every entry must be
    /// present with the right shape.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let t = tensors.get(name).ok_or_else(|| Error::Init {
                layer: name.clone(),
                message: "missing from weights".into(),
            })?;
            set_checked(name, var, t)?;
        }
        Ok(())
    }

    /// Copies stem and stage weights from a reference network's weights
    /// (layer paths as in the torchvision export). A 3-channel stem kernel
    /// is summed over its input channels; deeper stages and the reference
    /// classifier are ignored, the head keeps its fresh initialization.
    pub fn load_pretrained(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            if name.starts_with("fc") {
                continue;
            }
            let t = tensors.get(name).ok_or_else(|| Error::Init {
                layer: name.clone(),
                message: "missing from pretrained weights".into(),
            })?;
            let t = if name == "conv1.weight" && t.rank() == 4 && t.dims()[1] != self.spec.input_channels && self.spec.input_channels == 1 {
                t.sum_keepdim(1)?
            } else {
                t.clone()
            };
            set_checked(name, var, &t)?;
        }
        Ok(())
    }
}

fn set_checked(name: &str, var: &Var, t: &Tensor) -> Result<()> {
    if t.dims() != var.dims() {
        return Err(Error::Init {
            layer: name.to_string(),
            message: format!("expected shape {:?}, found {:?}", var.dims(), t.dims()),
        });
    }
    var.set(&t.to_dtype(var.dtype())?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    OneView,
    MultiView,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ViewMode,
    pub views: Vec<ViewKind>,
    pub include_nd: bool,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub freeze_stem: bool,
}

/// The view sets of the six configurations, in table row order.
const VIEW_SETS: [(&str, &[ViewKind]); 5] = [
    ("Top", &[ViewKind::Top]),
    ("Bottom", &[ViewKind::Bottom]),
    ("Top-Bottom", &[ViewKind::Top, ViewKind::Bottom]),
    ("Profiles", &ViewKind::PROFILES),
    ("Full Group", &ViewKind::ALL),
];

impl ModelConfig {
    pub fn new(mode: ViewMode, views: &[ViewKind], include_nd: bool) -> Self {
        Self {
            mode,
            views: views.to_vec(),
            include_nd,
            pretrained: false,
            freeze_stem: false,
        }
    }

    /// OV{top}, OV{bottom}, OV{top,bottom}, MV{top,bottom}, MV{profiles},
    /// MV{all five}.
    pub fn presets(include_nd: bool) -> Vec<ModelConfig> {
        use ViewMode::*;
        vec![
            Self::new(OneView, &[ViewKind::Top], include_nd),
            Self::new(OneView, &[ViewKind::Bottom], include_nd),
            Self::new(OneView, &[ViewKind::Top, ViewKind::Bottom], include_nd),
            Self::new(MultiView, &[ViewKind::Top, ViewKind::Bottom], include_nd),
            Self::new(MultiView, &ViewKind::PROFILES, include_nd),
            Self::new(MultiView, &ViewKind::ALL, include_nd),
        ]
    }

    /// The twelve cells: six configurations with and without ND groups.
    pub fn grid() -> Vec<ModelConfig> {
        Self::presets(true).into_iter().chain(Self::presets(false)).collect()
    }

    /// Configured views in canonical order, deduplicated.
    pub fn canonical_views(&self) -> Vec<ViewKind> {
        let mut v = self.views.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Row label of the view set ("Top", "Top-Bottom", ...).
    pub fn view_set_name(&self) -> Option<&'static str> {
        let views = self.canonical_views();
        VIEW_SETS.iter().find(|(_, v)| *v == views.as_slice()).map(|(n, _)| *n)
    }

    /// Column label in the results tables; "-ND" marks runs without ND
    /// groups.
    pub fn column_name(&self) -> String {
        let mode = match self.mode {
            ViewMode::OneView => "One-view",
            ViewMode::MultiView => "Multi-view",
        };
        if self.include_nd {
            mode.to_string()
        } else {
            format!("{mode}-ND")
        }
    }

    pub fn name(&self) -> String {
        let mode = match self.mode {
            ViewMode::OneView => "OV",
            ViewMode::MultiView => "MV",
        };
        let nd = if self.include_nd { "+ND" } else { "-ND" };
        format!("{mode} {} {nd}", self.view_set_name().unwrap_or("?"))
    }

    /// Accepts exactly the six (mode, view set) pairs.
    pub fn validate(&self) -> Result<()> {
        let views = self.canonical_views();
        if views.len() != self.views.len() {
            return Err(Error::Validation("duplicate views in model config".into()));
        }
        let ok = Self::presets(self.include_nd)
            .iter()
            .any(|p| p.mode == self.mode && p.canonical_views() == views);
        if !ok {
            return Err(Error::Validation(format!(
                "({:?}, {:?}) is not one of the six model configurations",
                self.mode, self.views
            )));
        }
        Ok(())
    }
}

/// Standardization applied after scaling pixels to [0,1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const FALLBACK: Normalization = Normalization { mean: 0.3, std: 0.25 };

    /// Pixel statistics over the given views of `groups`; falls back to the
    /// constants when there is nothing to measure.
    pub fn from_groups(groups: &[&ExampleGroup], views: &[ViewKind]) -> Self {
        let (mut n, mut sum, mut sq) = (0.0f64, 0.0f64, 0.0f64);
        for g in groups {
            for v in views {
                if let Some(img) = g.images.get(v) {
                    for &p in img.pixels() {
                        let x = p as f64 / 255.0;
                        n += 1.0;
                        sum += x;
                        sq += x * x;
                    }
                }
            }
        }
        if n < 2.0 {
            return Self::FALLBACK;
        }
        let mean = sum / n;
        let std = ((sq / n) - mean * mean).max(0.0).sqrt();
        if std < 1e-6 {
            return Self::FALLBACK;
        }
        Self { mean, std }
    }
}

/// Stacks images into an (N, 1, H, W) tensor of standardized values.
pub fn images_tensor(images: &[&GrayImage], norm: Normalization, dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("no images".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Shape(format!("mixed image sizes {:?} and {:?}", (h, w), img.dims())));
        }
        data.extend(img.pixels().iter().map(|&p| ((p as f64 / 255.0 - norm.mean) / norm.std) as f32));
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Element-wise maximum over view embeddings.
pub fn view_pool(embeddings: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = embeddings.first().ok_or_else(|| Error::Validation("view pooling needs at least one embedding".into()))?;
    let mut out = first.clone();
    for e in &embeddings[1..] {
        if e.len() != out.len() {
            return Err(Error::Shape(format!("embedding lengths {} and {}", out.len(), e.len())));
        }
        for (o, &v) in out.iter_mut().zip(e) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Numerically stable two-way softmax; returns P(defective).
pub fn defective_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// A network bound to a configuration and input normalization.
pub struct Classifier {
    pub net: Network,
    pub config: ModelConfig,
    pub norm: Normalization,
}

impl Classifier {
    pub fn new(spec: &BackboneSpec, config: ModelConfig, norm: Normalization, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: Network::new(spec, dtype, seed)?,
            config,
            norm,
        })
    }

    /// Eval-mode embedding of one view.
    pub fn embed_view(&self, img: &GrayImage) -> Result<Vec<f32>> {
        let x = images_tensor(&[img], self.norm, self.net.dtype())?;
        let e = self.net.embed(&x, false)?;
        Ok(e.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    fn head_logits(&self, emb: &[f32]) -> Result<[f64; 2]> {
        let t = Tensor::from_slice(emb, (1, emb.len()), &Device::Cpu)?.to_dtype(self.net.dtype())?;
        let l: Vec<f64> = self.net.head(&t)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        match l.as_slice() {
            [a, b] => Ok([*a, *b]),
            _ => Err(Error::Shape(format!("head produced {} logits", l.len()))),
        }
    }

    /// Logits of a single image under the shared model (one-view scoring).
    pub fn image_logits(&self, img: &GrayImage) -> Result<[f64; 2]> {
        self.head_logits(&self.embed_view(img)?)
    }

    /// Eval-mode group logits. Each view is embedded on its own, so the
    /// result does not depend on the order views are listed in.
    pub fn classify_group(&self, g: &ExampleGroup) -> Result<[f64; 2]> {
        let views = self.config.canonical_views();
        for &v in &views {
            g.image(v)?;
        }
        match self.config.mode {
            ViewMode::MultiView => {
                let embs = views
                    .iter()
                    .map(|&v| self.embed_view(&g.images[&v]))
                    .collect::<Result<Vec<_>>>()?;
                self.head_logits(&view_pool(&embs)?)
            }
            ViewMode::OneView => {
                // Several views: keep the image that looks most defective.
                let mut best: Option<[f64; 2]> = None;
                for &v in &views {
                    let l = self.image_logits(&g.images[&v])?;
                    if best.is_none_or(|b| defective_probability(l) > defective_probability(b)) {
                        best = Some(l);
                    }
                }
                Ok(best.expect("validated config has views"))
            }
        }
    }

    /// Training-time forward over samples of equal view count: each sample
    /// is one image (one-view) or one image per view (multi-view).
    /// Returns (N, 2) logits.
    pub fn forward_samples(&self, samples: &[Vec<&GrayImage>], train: bool) -> Result<Tensor> {
        let n = samples.len();
        let v = samples.first().map_or(0, |s| s.len());
        if n == 0 || v == 0 || samples.iter().any(|s| s.len() != v) {
            return Err(Error::Shape("samples must be non-empty with equal view counts".into()));
        }
        let flat: Vec<&GrayImage> = samples.iter().flatten().copied().collect();
        let x = images_tensor(&flat, self.norm, self.net.dtype())?;
        let emb = self.net.embed(&x, train)?;
        let pooled = if v == 1 {
            emb
        } else {
            emb.reshape((n, v, self.net.spec().embedding_dim()))?.max(1)?
        };
        self.net.head(&pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parameter_counts() {
        let spec = BackboneSpec::truncated(224);
        assert_eq!(spec.param_count(), TRUNCATED_PARAMS);
        assert_eq!(spec.param_count() - 258, 1_341_632);
        assert_eq!(BackboneSpec::reference().param_count(), REFERENCE_PARAMS);
        // The two removed stages hold 18 main-path convolutions.
        assert_eq!(BackboneSpec::reference().conv_layers() - spec.conv_layers(), 18);
        let ratio = TRUNCATED_PARAMS as f64 / REFERENCE_PARAMS as f64;
        assert!((ratio - 0.0616).abs() < 5e-4);
        // Built network agrees with the layout, and does not depend on input size.
        for size in [224, 32] {
            let net = Network::new(&BackboneSpec::truncated(size), DType::F32, 0).unwrap();
            assert_eq!(net.param_count(), TRUNCATED_PARAMS);
            let built: Vec<(String, Vec<usize>)> =
                net.params().iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect();
            assert_eq!(built, spec.param_layout());
        }
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let net = Network::new(&BackboneSpec::truncated(224), DType::F32, 1).unwrap();
        let x = Tensor::zeros((1, 1, 224, 224), DType::F32, &Device::Cpu).unwrap();
        let emb = net.embed(&x, false).unwrap();
        assert_eq!(emb.dims(), &[1, EMBEDDING_DIM]);
        let logits = net.head(&emb).unwrap();
        assert_eq!(logits.dims(), &[1, 2]);
        let v: Vec<f32> = logits.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let wrong = Tensor::zeros((1, 1, 200, 224), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.embed(&wrong, false), Err(Error::Shape(_))));
    }

    #[test]
    fn view_pool_examples() {
        let a = vec![1.0, 0.0, -1.0];
        let b = vec![0.0, 2.0, -3.0];
        assert_eq!(view_pool(&[a.clone()]).unwrap(), a);
        assert_eq!(view_pool(&[a.clone(), b.clone()]).unwrap(), vec![1.0, 2.0, -1.0]);
        assert_eq!(view_pool(&[b, a]).unwrap(), vec![1.0, 2.0, -1.0]);
        assert!(view_pool(&[]).is_err());
    }

    #[test]
    fn six_configurations() {
        let presets = ModelConfig::presets(true);
        assert_eq!(presets.len(), 6);
        assert!(presets.iter().all(|c| c.validate().is_ok()));
        assert_eq!(ModelConfig::grid().len(), 12);
        let bad = ModelConfig::new(ViewMode::OneView, &ViewKind::PROFILES, true);
        assert!(bad.validate().is_err());
        let swapped = ModelConfig::new(ViewMode::MultiView, &[ViewKind::Bottom, ViewKind::Top], false);
        assert!(swapped.validate().is_ok());
        assert_eq!(swapped.name(), "MV Top-Bottom -ND");
        assert_eq!(swapped.column_name(), "Multi-view-ND");
    }

    fn random_group(rng: &mut impl Rng, size: usize, id: &str) -> ExampleGroup {
        let mut g = ExampleGroup::new(id, None);
        for v in ViewKind::ALL {
            let img = GrayImage::from_fn(size, size, v, |_, _| rng.random_range(0..=255u8));
            g.images.insert(v, img);
        }
        g
    }

    #[test]
    fn multi_view_ignores_view_order_and_other_views() {
        let mut rng = seed::rng(3, &[b"groups"]);
        let spec = BackboneSpec::truncated(32);
        let cfg = ModelConfig::new(ViewMode::MultiView, &[ViewKind::Top, ViewKind::Bottom], true);
        let clf = Classifier::new(&spec, cfg, Normalization::FALLBACK, DType::F32, 5).unwrap();
        let mut swapped = Classifier::new(&spec, clf.config.clone(), Normalization::FALLBACK, DType::F32, 5).unwrap();
        swapped.config.views.reverse();
        let g = random_group(&mut rng, 32, "a");
        let l = clf.classify_group(&g).unwrap();
        assert_eq!(l.map(f64::to_bits), swapped.classify_group(&g).unwrap().map(f64::to_bits));

        let ov = Classifier::new(&spec, ModelConfig::new(ViewMode::OneView, &[ViewKind::Top], true), Normalization::FALLBACK, DType::F32, 5).unwrap();
        let mut other = g.clone();
        other.images.insert(ViewKind::Bottom, GrayImage::filled(32, 32, 0, ViewKind::Bottom));
        other.images.insert(ViewKind::Profile1, GrayImage::filled(32, 32, 9, ViewKind::Profile1));
        assert_eq!(ov.classify_group(&g).unwrap(), ov.classify_group(&other).unwrap());

        let mut missing = g.clone();
        missing.images.remove(&ViewKind::Bottom);
        assert!(clf.classify_group(&missing).is_err());
    }

    #[test]
    fn zeroing_a_view_acts_only_through_its_winning_coordinates() {
        let mut rng = seed::rng(4, &[b"groups"]);
        let spec = BackboneSpec::truncated(32);
        let clf = Classifier::new(&spec, ModelConfig::new(ViewMode::MultiView, &ViewKind::ALL, true), Normalization::FALLBACK, DType::F64, 6).unwrap();
        for k in 0..3 {
            let g = random_group(&mut rng, 32, &format!("g{k}"));
            let mut z = g.clone();
            z.images.insert(ViewKind::Profile3, GrayImage::filled(32, 32, 0, ViewKind::Profile3));
            let embs: Vec<Vec<f32>> = ViewKind::ALL.iter().map(|&v| clf.embed_view(&g.images[&v]).unwrap()).collect();
            let zeroed = clf.embed_view(&z.images[&ViewKind::Profile3]).unwrap();
            let others = view_pool(&embs[..4]).unwrap();
            let before = view_pool(&embs).unwrap();
            let after = view_pool(&[others.clone(), zeroed.clone()]).unwrap();
            // Coordinates the profile wins in neither case are untouched.
            for i in 0..before.len() {
                if embs[4][i] <= others[i] && zeroed[i] <= others[i] {
                    assert_eq!(before[i], after[i]);
                }
            }
            assert_eq!(clf.classify_group(&z).unwrap(), clf.head_logits(&after).unwrap());
            assert_eq!(clf.classify_group(&g).unwrap(), clf.head_logits(&before).unwrap());
        }
    }

    #[test]
    fn one_view_pair_keeps_more_defective_image() {
        let mut rng = seed::rng(5, &[b"groups"]);
        let spec = BackboneSpec::truncated(32);
        let cfg = ModelConfig::new(ViewMode::OneView, &[ViewKind::Top, ViewKind::Bottom], true);
        let clf = Classifier::new(&spec, cfg, Normalization::FALLBACK, DType::F32, 7).unwrap();
        let g = random_group(&mut rng, 32, "x");
        let top = clf.image_logits(&g.images[&ViewKind::Top]).unwrap();
        let bottom = clf.image_logits(&g.images[&ViewKind::Bottom]).unwrap();
        let want = if defective_probability(bottom) > defective_probability(top) { bottom } else { top };
        assert_eq!(clf.classify_group(&g).unwrap(), want);
    }

    #[test]
    fn identical_images_embed_identically() {
        let spec = BackboneSpec::truncated(32);
        let clf = Classifier::new(&spec, ModelConfig::presets(true)[0].clone(), Normalization::FALLBACK, DType::F32, 8).unwrap();
        let img = GrayImage::from_fn(32, 32, ViewKind::Top, |r, c| ((r * 7 + c * 3) % 256) as u8);
        let a = clf.embed_view(&img).unwrap();
        assert_eq!(a.len(), EMBEDDING_DIM);
        assert_eq!(a, clf.embed_view(&img.clone()).unwrap());
        let zeros = clf.embed_view(&GrayImage::filled(32, 32, 0, ViewKind::Top)).unwrap();
        assert!(zeros.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_statistics() {
        let g = ExampleGroup::new("n", None)
            .with_image(GrayImage::from_fn(2, 2, ViewKind::Top, |r, _| if r == 0 { 0 } else { 255 }));
        let n = Normalization::from_groups(&[&g], &[ViewKind::Top]);
        assert!((n.mean - 0.5).abs() < 1e-12 && (n.std - 0.5).abs() < 1e-12);
        assert_eq!(Normalization::from_groups(&[], &[ViewKind::Top]), Normalization::FALLBACK);
    }

    #[test]
    fn pretrained_stem_is_channel_summed() {
        let reference = Network::new(&BackboneSpec::reference(), DType::F32, 11).unwrap();
        let weights: HashMap<String, Tensor> = reference.named_tensors().unwrap().into_iter().collect();
        let net = Network::new(&BackboneSpec::truncated(32), DType::F32, 12).unwrap();
        let fc_before = net.params().iter().find(|(n, _)| n == "fc.weight").unwrap().1.as_tensor().copy().unwrap();
        net.load_pretrained(&weights).unwrap();
        let mine: HashMap<String, Tensor> = net.named_tensors().unwrap().into_iter().collect();
        let summed = weights["conv1.weight"].sum_keepdim(1).unwrap();
        let diff = (&mine["conv1.weight"] - &summed).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let same = |k: &str| (&mine[k] - &weights[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same("layer2.3.conv2.weight"), 0.0);
        assert_eq!(same("layer1.0.bn1.running_var"), 0.0);
        let fc_after = &mine["fc.weight"];
        assert_eq!((fc_after - &fc_before).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);

        let mut broken = weights.clone();
        broken.insert("layer2.0.downsample.0.weight".into(), Tensor::zeros((128, 32, 1, 1), DType::F32, &Device::Cpu).unwrap());
        match net.load_pretrained(&broken) {
            Err(Error::Init { layer, .. }) => assert_eq!(layer, "layer2.0.downsample.0.weight"),
            other => panic!("expected init error, got {other:?}"),
        }
        broken.remove("layer1.2.bn2.bias");
        assert!(matches!(net.load_pretrained(&broken), Err(Error::Init { .. })));
    }
}
