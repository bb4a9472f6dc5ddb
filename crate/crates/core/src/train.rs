//! Training, min-loss checkpoint selection, evaluation, the configuration
//! grid and the data-size ablation.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_variant, AugmentSpec};
use crate::data::{stratified_split, BinaryLabel, DatasetSplit, ExampleGroup, RawLabel};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{accuracy, roc_auc};
use crate::model::{defective_probability, load_weights, BackboneSpec, Classifier, ModelConfig, Normalization, ViewMode};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Groups per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
    /// Online augmentation: every epoch each training group is replaced by
    /// one seeded variant.
    pub augmentation: Option<AugmentSpec>,
    pub input_size: usize,
    pub split_ratio: f64,
    pub seed: u64,
    /// Reference weights (safetensors, torchvision layer names) used when a
    /// configuration asks for a pretrained backbone.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            class_weights: true,
            augmentation: Some(AugmentSpec::default()),
            input_size: 224,
            split_ratio: 0.7,
            seed: 0,
            pretrained_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("learning rate must be positive and weight decay non-negative".into()));
        }
        if let Some(spec) = &self.augmentation {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub id: String,
    pub p_defective: f64,
    pub label: BinaryLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ModelConfig,
    pub split: DatasetSplit,
    pub train_config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Percent.
    pub accuracy_at_min_loss: f64,
    /// Percent; absent when the test set lacks a class.
    pub auc: Option<f64>,
    /// Test predictions of the selected epoch.
    pub predictions: Vec<GroupPrediction>,
}

impl TrainReport {
    /// The selected epoch is the first minimum of the test loss.
    pub fn min_loss_epoch(epochs: &[EpochRecord]) -> usize {
        let mut best = 0;
        for (i, e) in epochs.iter().enumerate() {
            if e.test_loss < epochs[best].test_loss {
                best = i;
            }
        }
        best
    }
}

/// Accuracy, AUC and per-group probabilities on a set of groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percent.
    pub accuracy: f64,
    /// Percent; `None` when a class is missing (see [`Evaluation::auc`]).
    pub auc: Option<f64>,
    pub loss: f64,
    pub predictions: Vec<GroupPrediction>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or_else(|| Error::Metric("AUC needs both classes in the evaluated groups".into()))
    }
}

/// Mean of `weights[label] * nll` over samples, divided by the weight sum.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], class_weights: [f64; 2]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if n != labels.len() || c != 2 {
        return Err(Error::Shape(format!("logits {n}×{c} for {} labels", labels.len())));
    }
    let mut mask = vec![0f64; n * 2];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        mask[i * 2 + l] = class_weights[l];
        total += class_weights[l];
    }
    let mask = Tensor::from_vec(mask, (n, 2), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    Ok((logp.mul(&mask)?.sum_all()?.neg()? / total)?)
}

fn nll(logits: [f64; 2], label: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label]
}

fn binary(g: &ExampleGroup) -> Result<usize> {
    g.binary_label()
        .map(BinaryLabel::index)
        .ok_or_else(|| Error::Validation(format!("group {} is unlabeled", g.id)))
}

/// Inverse-frequency weights `n / (2 n_c)`; ones when disabled.
pub fn class_weights(labels: &[usize], enabled: bool) -> [f64; 2] {
    if !enabled {
        return [1.0, 1.0];
    }
    let n = labels.len() as f64;
    let mut w = [1.0; 2];
    for (c, wc) in w.iter_mut().enumerate() {
        let k = labels.iter().filter(|&&l| l == c).count() as f64;
        if k > 0.0 {
            *wc = n / (2.0 * k);
        }
    }
    w
}

/// Eval-mode scores of `groups`. AUC is `None` when one class is absent.
pub fn evaluate(clf: &Classifier, groups: &[&ExampleGroup], weights: [f64; 2]) -> Result<Evaluation> {
    if groups.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(groups.len());
    let (mut loss, mut wsum) = (0.0, 0.0);
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    for g in groups {
        let label = binary(g)?;
        let logits = clf.classify_group(g)?;
        loss += weights[label] * nll(logits, label);
        wsum += weights[label];
        let p = defective_probability(logits);
        labels.push(label);
        predicted.push(usize::from(logits[1] > logits[0]));
        predictions.push(GroupPrediction {
            id: g.id.clone(),
            p_defective: p,
            label: BinaryLabel::from_index(label),
        });
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.p_defective).collect();
    let auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(100.0 * a),
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        accuracy: 100.0 * accuracy(&predicted, &labels)?,
        auc,
        loss: loss / wsum,
        predictions,
    })
}

/// Images of one training sample: one view (one-view) or all views in
/// canonical order (multi-view).
fn samples<'a>(g: &'a ExampleGroup, cfg: &ModelConfig) -> Result<Vec<Vec<&'a GrayImage>>> {
    let views = cfg.canonical_views();
    let imgs = views.iter().map(|&v| g.image(v)).collect::<Result<Vec<_>>>()?;
    Ok(match cfg.mode {
        ViewMode::MultiView => vec![imgs],
        ViewMode::OneView => imgs.into_iter().map(|i| vec![i]).collect(),
    })
}

/// Trains a fresh classifier on the split's training groups and returns it
/// restored to the minimum-test-loss epoch.
pub fn train(groups: &[ExampleGroup], split: &DatasetSplit, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(TrainReport, Classifier)> {
    tcfg.validate()?;
    cfg.validate()?;
    if split.include_nd != cfg.include_nd {
        return Err(Error::Validation("split and model config disagree on ND inclusion".into()));
    }
    let (train_set, test_set) = split.select(groups);
    if train_set.len() != split.train.len() || test_set.len() != split.test.len() {
        return Err(Error::Validation("split names groups missing from the dataset".into()));
    }
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Validation("empty train or test split".into()));
    }
    for g in train_set.iter().chain(&test_set) {
        if !cfg.include_nd && g.raw_label == Some(RawLabel::NormalDefective) {
            return Err(Error::Validation(format!("ND group {} in a run without ND", g.id)));
        }
    }

    let views = cfg.canonical_views();
    let norm = Normalization::from_groups(&train_set, &views);
    let spec = BackboneSpec::truncated(tcfg.input_size);
    let init_seed = seed::derive(tcfg.seed, &[b"model", cfg.name().as_bytes()]);
    let clf = Classifier::new(&spec, cfg.clone(), norm, DType::F32, init_seed)?;
    if cfg.pretrained {
        let path = tcfg
            .pretrained_weights
            .as_ref()
            .ok_or_else(|| Error::Validation("pretrained configuration without reference weights".into()))?;
        clf.net.load_pretrained(&load_weights(path)?)?;
    }

    let train_labels = train_set.iter().map(|g| binary(g)).collect::<Result<Vec<_>>>()?;
    let weights = class_weights(&train_labels, tcfg.class_weights);
    let vars = clf
        .net
        .params()
        .iter()
        .filter(|(n, _)| !(cfg.freeze_stem && (n.starts_with("conv1.") || n.starts_with("bn1."))))
        .map(|(_, v)| v.clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: tcfg.learning_rate,
            weight_decay: tcfg.weight_decay,
            ..Default::default()
        },
    )?;

    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, Vec<(String, Tensor)>, Evaluation)> = None;
    for epoch in 0..tcfg.epochs {
        let started = Instant::now();
        let ebytes = (epoch as u64).to_le_bytes();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(tcfg.seed, &[b"order", &ebytes]));
        let aug = tcfg.augmentation.as_ref().map(|a| AugmentSpec {
            seed: seed::derive(tcfg.seed, &[b"augment", &ebytes]),
            ..a.clone()
        });

        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<ExampleGroup> = chunk
                .iter()
                .map(|&i| {
                    let g = train_set[i];
                    match &aug {
                        Some(a) => {
                            let pick = seed::derive(tcfg.seed, &[b"variant", &ebytes, g.id.as_bytes()]);
                            augment_variant(g, a, (pick % a.variants() as u64) as usize)
                        }
                        None => g.clone(),
                    }
                })
                .collect();
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for g in &batch {
                let label = binary(g)?;
                for s in samples(g, cfg)? {
                    inputs.push(s);
                    labels.push(label);
                }
            }
            let logits = clf.forward_samples(&inputs, true)?;
            let loss = weighted_cross_entropy(&logits, &labels, weights)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite training loss {value}"),
                });
            }
            opt.backward_step(&loss)?;
            let batch_w: f64 = labels.iter().map(|&l| weights[l]).sum();
            loss_sum += value * batch_w;
            weight_sum += batch_w;
            let l: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
            correct += l.iter().zip(&labels).filter(|(z, &y)| usize::from(z[1] > z[0]) == y).count();
            seen += labels.len();
        }

        let eval = evaluate(&clf, &test_set, weights)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("non-finite test loss {}", eval.loss),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / weight_sum,
            train_acc: 100.0 * correct as f64 / seen as f64,
            test_loss: eval.loss,
            test_acc: eval.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.4} acc {:.1} | test loss {:.4} acc {:.1}",
            cfg.name(),
            record.train_loss,
            record.train_acc,
            record.test_loss,
            record.test_acc
        );
        if best.as_ref().is_none_or(|(l, _, _)| eval.loss < *l) {
            best = Some((eval.loss, clf.net.named_tensors()?, eval));
        }
        epochs.push(record);
    }

    let (_, weights_at_best, eval) = best.expect("at least one epoch");
    clf.net.load_tensors(&weights_at_best.into_iter().collect())?;
    let selected_epoch = TrainReport::min_loss_epoch(&epochs);
    let report = TrainReport {
        config: cfg.clone(),
        split: split.clone(),
        train_config: tcfg.clone(),
        accuracy_at_min_loss: epochs[selected_epoch].test_acc,
        auc: eval.auc,
        predictions: eval.predictions,
        epochs,
        selected_epoch,
    };
    Ok((report, clf))
}

/// One run of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: ModelConfig,
    pub seed: u64,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
}

/// Runs the twelve configurations for every seed. A failing cell is
/// recorded and the grid continues.
pub fn run_grid(groups: &[ExampleGroup], seeds: &[u64], tcfg: &TrainConfig, jobs: usize) -> Result<GridResult> {
    run_cells(groups, seeds, &ModelConfig::grid(), tcfg, jobs)
}

/// Runs `configs` for every seed; see [`run_grid`].
pub fn run_cells(groups: &[ExampleGroup], seeds: &[u64], configs: &[ModelConfig], tcfg: &TrainConfig, jobs: usize) -> Result<GridResult> {
    tcfg.validate()?;
    let jobs_list: Vec<(u64, ModelConfig)> = seeds
        .iter()
        .flat_map(|&s| configs.iter().map(move |c| (s, c.clone())))
        .collect();
    let run = |(s, cfg): &(u64, ModelConfig)| -> GridCell {
        let t = TrainConfig { seed: *s, ..tcfg.clone() };
        let outcome = stratified_split(groups, t.split_ratio, cfg.include_nd, *s).and_then(|split| train(groups, &split, cfg, &t));
        match outcome {
            Ok((report, _)) => GridCell {
                config: cfg.clone(),
                seed: *s,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                log::warn!("{} (seed {s}) failed: {e}", cfg.name());
                GridCell {
                    config: cfg.clone(),
                    seed: *s,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let cells = crate::with_pool(jobs, || jobs_list.par_iter().map(run).collect());
    Ok(GridResult { cells })
}

/// One cell of a results table; serialized as a number, `"failed"` or
/// `"--"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridEntry {
    Value(f64),
    /// Ran, but every seed errored.
    Failed,
    /// No such configuration.
    Missing,
}

impl std::fmt::Display for GridEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridEntry::Value(v) => write!(f, "{v:.1}"),
            GridEntry::Failed => f.write_str("failed"),
            GridEntry::Missing => f.write_str("--"),
        }
    }
}

impl Serialize for GridEntry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GridEntry::Value(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for GridEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => Ok(GridEntry::Value(n.as_f64().unwrap_or(f64::NAN))),
            serde_json::Value::String(s) if s == "failed" => Ok(GridEntry::Failed),
            serde_json::Value::String(s) if s == "--" => Ok(GridEntry::Missing),
            v => Err(serde::de::Error::custom(format!("not a grid entry: {v}"))),
        }
    }
}

/// Row labels of the results tables.
pub const GRID_ROWS: [&str; 5] = ["Top", "Bottom", "Top-Bottom", "Profiles", "Full Group"];
/// Column labels; "-ND" columns exclude normal-defective groups.
pub const GRID_COLUMNS: [&str; 4] = ["One-view", "One-view-ND", "Multi-view", "Multi-view-ND"];

impl GridResult {
    /// Mean over seeds of a successful cell's metric, by (row, column).
    pub fn cell_mean(&self, row: &str, column: &str, metric: impl Fn(&TrainReport) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.config.view_set_name() == Some(row) && c.config.column_name() == column)
            .filter_map(|c| c.report.as_ref().and_then(&metric))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    fn has_cell(&self, row: &str, column: &str) -> bool {
        self.cells
            .iter()
            .any(|c| c.config.view_set_name() == Some(row) && c.config.column_name() == column)
    }

    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_none()).count()
    }

    /// One metric laid out by [`GRID_ROWS`] × [`GRID_COLUMNS`].
    pub fn table(&self, metric: impl Fn(&TrainReport) -> Option<f64>) -> Vec<Vec<GridEntry>> {
        GRID_ROWS
            .iter()
            .map(|row| {
                GRID_COLUMNS
                    .iter()
                    .map(|col| {
                        if !self.has_cell(row, col) {
                            GridEntry::Missing
                        } else {
                            self.cell_mean(row, col, &metric).map_or(GridEntry::Failed, GridEntry::Value)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Two tables (accuracy, then AUC) in the row/column layout of the
    /// results tables: `--` for configurations that do not exist, `failed`
    /// for runs that errored, percentages rounded to one decimal.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        let metrics: [(&str, fn(&TrainReport) -> Option<f64>); 2] =
            [("ACCURACY", |r| Some(r.accuracy_at_min_loss)), ("AUC", |r| r.auc)];
        for (name, metric) in metrics {
            let mut header = vec![name.to_string()];
            header.extend(GRID_COLUMNS.iter().map(|s| s.to_string()));
            w.write_record(&header).map_err(csv_err)?;
            for (row, entries) in GRID_ROWS.iter().zip(self.table(metric)) {
                let mut rec = vec![row.to_string()];
                rec.extend(entries.iter().map(GridEntry::to_string));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Mean accuracy over all successful cells.
    pub fn mean_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter_map(|c| c.report.as_ref()).map(|r| r.accuracy_at_min_loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Drops `removed` training groups, spread over raw-label classes by largest
/// remainder and chosen by a seeded shuffle. The test set is unchanged.
pub fn reduce_train(split: &DatasetSplit, groups: &[ExampleGroup], removed: usize, seed: u64) -> Result<DatasetSplit> {
    if removed >= split.train.len() {
        return Err(Error::Validation(format!(
            "cannot remove {removed} of {} training groups",
            split.train.len()
        )));
    }
    let (train_set, _) = split.select(groups);
    let mut by_class: Vec<Vec<&str>> = RawLabel::ALL
        .iter()
        .map(|&l| train_set.iter().filter(|g| g.raw_label == Some(l)).map(|g| g.id.as_str()).collect())
        .collect();
    let n = train_set.len() as f64;
    let quotas: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * removed as f64 / n).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - take[a] as f64;
        let rb = quotas[b] - take[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = removed - take.iter().sum::<usize>();
    for i in order.into_iter().cycle().take(3 * (removed + 1)) {
        if left == 0 {
            break;
        }
        if take[i] < by_class[i].len() {
            take[i] += 1;
            left -= 1;
        }
    }
    let mut dropped = std::collections::BTreeSet::new();
    for ((label, ids), k) in RawLabel::ALL.iter().zip(by_class.iter_mut()).zip(take) {
        ids.shuffle(&mut seed::rng(seed, &[b"ablate", label.as_str().as_bytes()]));
        dropped.extend(ids[..k].iter().map(|s| s.to_string()));
    }
    Ok(DatasetSplit {
        train: split.train.iter().filter(|id| !dropped.contains(*id)).cloned().collect(),
        ..split.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub config: ModelConfig,
    pub seed: u64,
    /// Percent, full training set.
    pub full_accuracy: f64,
    pub full_auc: Option<f64>,
    /// Percent, training set minus `removed` groups.
    pub reduced_accuracy: f64,
    pub reduced_auc: Option<f64>,
}

impl AblationCell {
    pub fn accuracy_delta(&self) -> f64 {
        self.full_accuracy - self.reduced_accuracy
    }

    pub fn auc_delta(&self) -> Option<f64> {
        Some(self.full_auc? - self.reduced_auc?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub removed: usize,
    pub cells: Vec<AblationCell>,
    pub failures: Vec<String>,
}

impl AblationReport {
    /// Mean accuracy gain from the extra groups, over all cells of `seed`
    /// (or of every seed).
    pub fn mean_accuracy_delta(&self, seed: Option<u64>) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| seed.is_none_or(|s| c.seed == s))
            .map(AblationCell::accuracy_delta)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_auc_delta(&self, seed: Option<u64>) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| seed.is_none_or(|s| c.seed == s))
            .filter_map(AblationCell::auc_delta)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains each configuration on the full training set and on the training
/// set minus `removed` groups, with the same test set and seed.
pub fn ablate_data_size(
    groups: &[ExampleGroup],
    removed: usize,
    seeds: &[u64],
    configs: &[ModelConfig],
    tcfg: &TrainConfig,
    jobs: usize,
) -> Result<AblationReport> {
    tcfg.validate()?;
    let work: Vec<(u64, ModelConfig)> = seeds
        .iter()
        .flat_map(|&s| configs.iter().map(move |c| (s, c.clone())))
        .collect();
    let run = |(s, cfg): &(u64, ModelConfig)| -> Result<AblationCell> {
        let t = TrainConfig { seed: *s, ..tcfg.clone() };
        let split = stratified_split(groups, t.split_ratio, cfg.include_nd, *s)?;
        let (full, _) = train(groups, &split, cfg, &t)?;
        let reduced = if removed == 0 {
            full.clone()
        } else {
            train(groups, &reduce_train(&split, groups, removed, *s)?, cfg, &t)?.0
        };
        Ok(AblationCell {
            config: cfg.clone(),
            seed: *s,
            full_accuracy: full.accuracy_at_min_loss,
            full_auc: full.auc,
            reduced_accuracy: reduced.accuracy_at_min_loss,
            reduced_auc: reduced.auc,
        })
    };
    let results: Vec<Result<AblationCell>> = crate::with_pool(jobs, || work.par_iter().map(run).collect());
    let mut report = AblationReport {
        removed,
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for ((s, cfg), r) in work.iter().zip(results) {
        match r {
            Ok(c) => report.cells.push(c),
            Err(e) => report.failures.push(format!("{} seed {s}: {e}", cfg.name())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ViewKind;

    fn record(test_loss: f64, test_acc: f64) -> EpochRecord {
        EpochRecord {
            epoch: 0,
            train_loss: 1.0,
            train_acc: 50.0,
            test_loss,
            test_acc,
            seconds: 0.0,
        }
    }

    #[test]
    fn min_loss_epoch_takes_first_minimum() {
        let e = vec![record(0.9, 50.0), record(0.4, 70.0), record(0.6, 80.0), record(0.4, 75.0)];
        assert_eq!(TrainReport::min_loss_epoch(&e), 1);
        assert_eq!(TrainReport::min_loss_epoch(&e[..1]), 0);
    }

    #[test]
    fn weighted_loss_matches_hand_computation() {
        let logits = Tensor::new(&[[2.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let labels = [0, 0, 1];
        let w = [2.0, 0.5];
        let got: f64 = weighted_cross_entropy(&logits, &labels, w).unwrap().to_scalar().unwrap();
        let nlls = [nll([2.0, 0.0], 0), nll([0.0, 1.0], 0), nll([1.0, 1.0], 1)];
        let want = (2.0 * nlls[0] + 2.0 * nlls[1] + 0.5 * nlls[2]) / 4.5;
        assert!((got - want).abs() < 1e-12);
        assert!((nll([1.0, 1.0], 1) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[0, 1, 1, 1], true), [2.0, 2.0 / 3.0]);
        assert_eq!(class_weights(&[0, 1, 1, 1], false), [1.0, 1.0]);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn groups(counts: [usize; 3]) -> Vec<ExampleGroup> {
        let mut out = Vec::new();
        for (label, n) in RawLabel::ALL.into_iter().zip(counts) {
            for i in 0..n {
                let mut g = ExampleGroup::new(format!("{}-{i:02}", label.as_str()), Some(label));
                for v in ViewKind::ALL {
                    g.images.insert(v, GrayImage::filled(1, 1, 0, v));
                }
                out.push(g);
            }
        }
        out
    }

    #[test]
    fn reduce_train_is_stratified_and_keeps_test() {
        let gs = groups([30, 25, 25]);
        let split = stratified_split(&gs, 0.7, true, 3).unwrap();
        let reduced = reduce_train(&split, &gs, 20, 3).unwrap();
        assert_eq!(reduced.train.len(), split.train.len() - 20);
        assert_eq!(reduced.test, split.test);
        assert!(reduced.train.iter().all(|id| split.train.contains(id)));
        let count = |s: &DatasetSplit, p: &str| s.train.iter().filter(|id| id.starts_with(p)).count();
        for p in ["normal-", "normal_defective-", "defective-"] {
            let removed = count(&split, p) - count(&reduced, p);
            assert!((6..=8).contains(&removed), "{p}: {removed}");
        }
        assert_eq!(reduce_train(&split, &gs, 0, 3).unwrap(), split);
        assert!(reduce_train(&split, &gs, split.train.len(), 3).is_err());
    }

    #[test]
    fn grid_csv_layout() {
        let mut cells = Vec::new();
        for (i, cfg) in ModelConfig::grid().into_iter().enumerate() {
            let report = (i != 3).then(|| TrainReport {
                config: cfg.clone(),
                split: DatasetSplit {
                    train: vec![],
                    test: vec![],
                    seed: 0,
                    include_nd: cfg.include_nd,
                },
                train_config: TrainConfig::default(),
                epochs: vec![record(0.5, 80.0 + i as f64)],
                selected_epoch: 0,
                accuracy_at_min_loss: 80.0 + i as f64,
                auc: Some(70.0),
                predictions: vec![],
            });
            cells.push(GridCell {
                config: cfg,
                seed: 0,
                error: report.is_none().then(|| "boom".into()),
                report,
            });
        }
        let grid = GridResult { cells };
        let csv = grid.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "ACCURACY,One-view,One-view-ND,Multi-view,Multi-view-ND");
        assert_eq!(lines[1], "Top,80.0,86.0,--,--");
        assert_eq!(lines[3], "Top-Bottom,82.0,88.0,failed,89.0");
        assert_eq!(lines[5], "Full Group,--,--,85.0,91.0");
        assert_eq!(lines[6], "AUC,One-view,One-view-ND,Multi-view,Multi-view-ND");
        assert_eq!(grid.failed(), 1);
    }
}
