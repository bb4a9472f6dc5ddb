//! Quality control for five-view micrographs of low-density foam targets.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`data`]: example groups, labels, manifests and stratified splits;
//! * [`preprocess`]: grayscale, quantization, circle extraction, profile
//!   centering;
//! * [`augment`]: rotation permutations and photometric jitter;
//! * [`synth`]: a seeded generator of labeled synthetic foams with ground
//!   truth;
//! * [`model`]: the truncated residual backbone, view pooling and the
//!   two-class head;
//! * [`train`]: training, min-loss checkpoint selection, accuracy/AUC, the
//!   configuration grid and the data-size ablation;
//! * [`explain`]: perturbation-based segment attributions.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod augment;
pub mod data;
pub mod error;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod synth;
pub mod train;

pub use data::{collapse_label, BinaryLabel, DatasetSplit, ExampleGroup, RawLabel, ViewKind};
pub use error::{Error, Result};
pub use image::GrayImage;

use std::path::Path;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `f` inside a rayon pool limited to `jobs` threads (0 = all cores).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
}
