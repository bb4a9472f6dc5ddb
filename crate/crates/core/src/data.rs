//! The dataset model: five-view example groups, labels, manifest ingestion
//! and stratified train/test splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Rect};
use crate::seed;

/// One of the five microscope views of a foam.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewKind {
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "bottom")]
    Bottom,
    #[serde(rename = "profile_1")]
    Profile1,
    #[serde(rename = "profile_2")]
    Profile2,
    #[serde(rename = "profile_3")]
    Profile3,
}

impl ViewKind {
    pub const ALL: [ViewKind; 5] = [
        ViewKind::Top,
        ViewKind::Bottom,
        ViewKind::Profile1,
        ViewKind::Profile2,
        ViewKind::Profile3,
    ];
    pub const PLAN: [ViewKind; 2] = [ViewKind::Top, ViewKind::Bottom];
    pub const PROFILES: [ViewKind; 3] = [ViewKind::Profile1, ViewKind::Profile2, ViewKind::Profile3];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Top => "top",
            ViewKind::Bottom => "bottom",
            ViewKind::Profile1 => "profile_1",
            ViewKind::Profile2 => "profile_2",
            ViewKind::Profile3 => "profile_3",
        }
    }

    /// Top and bottom surface images.
    pub fn is_plan(self) -> bool {
        matches!(self, ViewKind::Top | ViewKind::Bottom)
    }

    pub fn is_profile(self) -> bool {
        !self.is_plan()
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown view `{s}`")))
    }
}

/// The expert's three-way verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLabel {
    Normal,
    NormalDefective,
    Defective,
}

impl RawLabel {
    pub const ALL: [RawLabel; 3] = [RawLabel::Normal, RawLabel::NormalDefective, RawLabel::Defective];

    pub fn as_str(self) -> &'static str {
        match self {
            RawLabel::Normal => "normal",
            RawLabel::NormalDefective => "normal_defective",
            RawLabel::Defective => "defective",
        }
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RawLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RawLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown label `{s}`")))
    }
}

/// The two classes the network learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Normal,
    Defective,
}

impl BinaryLabel {
    /// Column of this class in the logits.
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Defective => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            BinaryLabel::Normal
        } else {
            BinaryLabel::Defective
        }
    }
}

/// Normal-defective foams are treated as defective: a doubtful foam is not
/// shot.
pub fn collapse_label(raw: RawLabel) -> BinaryLabel {
    match raw {
        RawLabel::Normal => BinaryLabel::Normal,
        RawLabel::NormalDefective | RawLabel::Defective => BinaryLabel::Defective,
    }
}

/// Something wrong with one view of one group found while loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupIssue {
    pub view: ViewKind,
    pub message: String,
}

/// One foam: its five views plus label and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleGroup {
    pub id: String,
    pub images: BTreeMap<ViewKind, GrayImage>,
    pub raw_label: Option<RawLabel>,
    pub source_paths: BTreeMap<ViewKind, String>,
    /// Manual crop rectangles that override automatic profile bounding.
    pub crops: BTreeMap<ViewKind, Rect>,
    pub issues: Vec<GroupIssue>,
}

impl ExampleGroup {
    pub fn new(id: impl Into<String>, raw_label: Option<RawLabel>) -> Self {
        Self {
            id: id.into(),
            images: BTreeMap::new(),
            raw_label,
            source_paths: BTreeMap::new(),
            crops: BTreeMap::new(),
            issues: Vec::new(),
        }
    }

    pub fn with_image(mut self, img: GrayImage) -> Self {
        self.images.insert(img.view, img);
        self
    }

    pub fn image(&self, view: ViewKind) -> Result<&GrayImage> {
        self.images
            .get(&view)
            .ok_or_else(|| Error::Validation(format!("group {} has no {view} view", self.id)))
    }

    pub fn is_complete(&self) -> bool {
        ViewKind::ALL.iter().all(|v| self.images.contains_key(v))
    }

    pub fn binary_label(&self) -> Option<BinaryLabel> {
        self.raw_label.map(collapse_label)
    }

    /// Complete and labeled, i.e. usable for training or evaluation.
    pub fn is_eligible(&self) -> bool {
        self.is_complete() && self.raw_label.is_some()
    }
}

pub fn eligible(groups: &[ExampleGroup]) -> Vec<&ExampleGroup> {
    groups.iter().filter(|g| g.is_eligible()).collect()
}

/// One manifest entry as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default)]
    pub label: Option<RawLabel>,
    pub views: BTreeMap<ViewKind, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub crop: BTreeMap<ViewKind, Rect>,
}

/// Parses a manifest without touching the images it references.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<ManifestRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!(
                "{}: duplicate group id `{}`",
                path.display(),
                r.id
            )));
        }
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(records)?;
    crate::write_atomic(path, json.as_bytes())
}

/// Writes each group's images as `<dir>/<id>/<view>.png` and a manifest
/// referencing them; returns the manifest path.
pub fn write_groups(dir: &Path, groups: &[ExampleGroup]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(groups.len());
    for g in groups {
        let mut views = BTreeMap::new();
        for (view, img) in &g.images {
            let rel = format!("{}/{}.png", g.id, view);
            img.save_png(&dir.join(&rel))?;
            views.insert(*view, rel);
        }
        records.push(ManifestRecord {
            id: g.id.clone(),
            label: g.raw_label,
            views,
            crop: g.crops.clone(),
        });
    }
    let manifest = dir.join("manifest.json");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Loads every group of a manifest. Image paths are relative to the
/// manifest's directory. Missing or unreadable images do not abort the load:
/// they are recorded on the group, which is then incomplete.
pub fn load_manifest(path: &Path) -> Result<Vec<ExampleGroup>> {
    let records = read_manifest(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(records.into_iter().map(|r| load_record(&base, r)).collect())
}

fn load_record(base: &Path, record: ManifestRecord) -> ExampleGroup {
    let mut group = ExampleGroup::new(record.id, record.label);
    group.crops = record.crop;
    for view in ViewKind::ALL {
        let Some(rel) = record.views.get(&view) else {
            group.issues.push(GroupIssue {
                view,
                message: "missing from manifest".into(),
            });
            continue;
        };
        group.source_paths.insert(view, rel.clone());
        let full: PathBuf = base.join(rel);
        match GrayImage::load_png(&full, view) {
            Ok(img) => {
                group.images.insert(view, img);
            }
            Err(e) => group.issues.push(GroupIssue {
                view,
                message: e.to_string(),
            }),
        }
    }
    group
}

/// Disjoint train/test partition of group ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub include_nd: bool,
}

impl DatasetSplit {
    pub fn select<'a>(&self, groups: &'a [ExampleGroup]) -> (Vec<&'a ExampleGroup>, Vec<&'a ExampleGroup>) {
        let by_id: BTreeMap<&str, &ExampleGroup> = groups.iter().map(|g| (g.id.as_str(), g)).collect();
        let pick = |ids: &[String]| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
        (pick(&self.train), pick(&self.test))
    }
}

/// Splits the eligible groups so every raw-label class is divided at
/// `ratio`. The test share of the whole set is `ceil((1 - ratio) * n)` and is
/// apportioned to the classes by largest remainder (ties go to the earlier
/// class: normal, normal-defective, defective), so each class lands within
/// one group of its exact share. Membership within a class is a seeded
/// shuffle.
pub fn stratified_split(
    groups: &[ExampleGroup],
    ratio: f64,
    include_nd: bool,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} outside (0, 1)")));
    }
    let classes: Vec<RawLabel> = RawLabel::ALL
        .into_iter()
        .filter(|&l| include_nd || l != RawLabel::NormalDefective)
        .collect();

    let mut members: Vec<Vec<&str>> = classes
        .iter()
        .map(|&label| {
            let mut ids: Vec<&str> = groups
                .iter()
                .filter(|g| g.is_eligible() && g.raw_label == Some(label))
                .map(|g| g.id.as_str())
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    for (label, ids) in classes.iter().zip(&members) {
        if ids.is_empty() {
            return Err(Error::Validation(format!("no eligible `{label}` groups to split")));
        }
    }

    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let test_counts = apportion_test(&sizes, 1.0 - ratio);

    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed,
        include_nd,
    };
    for ((label, ids), n_test) in classes.iter().zip(members.iter_mut()).zip(test_counts) {
        let mut rng = seed::rng(seed, &[b"split", label.as_str().as_bytes()]);
        ids.shuffle(&mut rng);
        split.test.extend(ids[..n_test].iter().map(|s| s.to_string()));
        split.train.extend(ids[n_test..].iter().map(|s| s.to_string()));
    }
    split.train.sort();
    split.test.sort();
    Ok(split)
}

fn apportion_test(sizes: &[usize], test_fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    // The guard keeps exact products such as 0.3 * 10 from rounding up.
    let seats = ((test_fraction * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let quotas: Vec<f64> = sizes.iter().map(|&n| n as f64 * test_fraction).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = seats.saturating_sub(counts.iter().sum());
    for i in order {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn labeled_groups(counts: [usize; 3]) -> Vec<ExampleGroup> {
        let mut out = Vec::new();
        for (label, n) in RawLabel::ALL.into_iter().zip(counts) {
            for i in 0..n {
                let mut g = ExampleGroup::new(format!("{}-{i:03}", label.as_str()), Some(label));
                for v in ViewKind::ALL {
                    g.images.insert(v, GrayImage::filled(1, 1, 0, v));
                }
                out.push(g);
            }
        }
        out
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_label(RawLabel::Normal), BinaryLabel::Normal);
        assert_eq!(collapse_label(RawLabel::NormalDefective), BinaryLabel::Defective);
        assert_eq!(collapse_label(RawLabel::Defective), BinaryLabel::Defective);
    }

    #[test]
    fn collapse_is_idempotent_on_its_image() {
        for raw in RawLabel::ALL {
            let once = collapse_label(raw);
            let back = match once {
                BinaryLabel::Normal => RawLabel::Normal,
                BinaryLabel::Defective => RawLabel::Defective,
            };
            assert_eq!(collapse_label(back), once);
        }
    }

    #[test]
    fn reproduces_reported_split_counts() {
        let groups = labeled_groups([33, 31, 31]);
        let split = stratified_split(&groups, 0.70, true, 1).unwrap();
        assert_eq!(split.train.len(), 66);
        assert_eq!(split.test.len(), 29);
        let count = |ids: &[String], prefix: &str| {
            ids.iter().filter(|id| id.starts_with(&format!("{prefix}-"))).count()
        };
        assert_eq!(
            [count(&split.train, "normal"), count(&split.train, "normal_defective"), count(&split.train, "defective")],
            [23, 21, 22]
        );
        assert_eq!(
            [count(&split.test, "normal"), count(&split.test, "normal_defective"), count(&split.test, "defective")],
            [10, 10, 9]
        );
    }

    #[test]
    fn single_class_rounding() {
        let groups: Vec<_> = labeled_groups([10, 0, 0]);
        // Binary learning needs both classes, so a lone class is rejected...
        assert!(stratified_split(&groups, 0.7, false, 0).is_err());
        // ...but the per-class arithmetic is the apportionment rule.
        assert_eq!(apportion_test(&[10], 0.3), vec![3]);
    }

    #[test]
    fn excluding_nd_drops_the_class() {
        let groups = labeled_groups([10, 10, 10]);
        let split = stratified_split(&groups, 0.7, false, 3).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 20);
        assert!(split.train.iter().chain(&split.test).all(|id| !id.starts_with("normal_defective")));
        let nd_missing = labeled_groups([10, 0, 10]);
        assert!(stratified_split(&nd_missing, 0.7, true, 3).is_err());
        assert!(stratified_split(&nd_missing, 0.7, false, 3).is_ok());
    }

    #[test]
    fn rejects_degenerate_ratio() {
        let groups = labeled_groups([4, 4, 4]);
        assert!(stratified_split(&groups, 0.0, true, 0).is_err());
        assert!(stratified_split(&groups, 1.0, true, 0).is_err());
    }

    #[test]
    fn incomplete_groups_are_not_eligible() {
        let mut groups = labeled_groups([5, 5, 5]);
        groups[0].images.remove(&ViewKind::Profile3);
        assert!(!groups[0].is_eligible());
        let split = stratified_split(&groups, 0.7, true, 0).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 14);
        assert!(!split.train.contains(&groups[0].id) && !split.test.contains(&groups[0].id));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "[\n  {\"id\": \"a\",\n   \"views\": {\"top\": 3}}\n]").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, r#"[{"id":"a","views":{}},{"id":"a","views":{}}]"#).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Validation(_))));
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
        std::fs::write(&path, "[]").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn split_invariants(
            n in prop::array::uniform3(1usize..40),
            ratio in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let groups = labeled_groups(n);
            let split = stratified_split(&groups, ratio, true, seed).unwrap();
            prop_assert_eq!(&split, &stratified_split(&groups, ratio, true, seed).unwrap());
            prop_assert_eq!(split.train.len() + split.test.len(), groups.len());
            let train: HashSet<_> = split.train.iter().collect();
            prop_assert!(split.test.iter().all(|id| !train.contains(id)));
            for (label, size) in RawLabel::ALL.into_iter().zip(n) {
                let prefix = format!("{}-", label.as_str());
                let k = split.train.iter().filter(|id| id.starts_with(&prefix)).count();
                let frac = k as f64 / size as f64;
                prop_assert!((frac - ratio).abs() <= 1.0 / size as f64 + 1e-9,
                    "{label}: {k}/{size} vs {ratio}");
            }
        }
    }
}
