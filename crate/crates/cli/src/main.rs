//! `foamqc`: every pipeline stage behind one command.
//!
//! Logs go to stderr; results go to files under `--out`, each run leaving a
//! `<command>.run.json` provenance record. Exit status: 0 success, 1 bad
//! input or usage, 2 internal failure.

mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foamqc::augment::augment_group;
use foamqc::data::{load_manifest, read_manifest, stratified_split, write_groups, write_manifest, DatasetSplit};
use foamqc::explain::{explain, render_overlay};
use foamqc::model::{load_checkpoint, save_checkpoint, ModelConfig, ViewMode};
use foamqc::preprocess::preprocess_all;
use foamqc::synth::{generate, write_dataset};
use foamqc::train::{ablate_data_size, class_weights, evaluate, run_cells, train, GridResult};
use foamqc::{ExampleGroup, ViewKind};
use serde_json::json;

use manifest::{hash_inputs, RunManifest};
use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs: exit 1.
    User(String),
    /// Anything else: exit 2.
    Internal(String),
}

impl From<foamqc::Error> for CliError {
    fn from(e: foamqc::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<foamqc_review::ReviewError> for CliError {
    fn from(e: foamqc_review::ReviewError) -> Self {
        match e {
            foamqc_review::ReviewError::Core(c) => c.into(),
            foamqc_review::ReviewError::Journal { .. } => CliError::User(e.to_string()),
            e => CliError::Internal(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "foamqc", version, about = "Quality control for foam target micrographs")]
struct Cli {
    /// Flat JSON config overriding built-in defaults (flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for preprocess/augment/grid/ablate (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset with ground-truth sidecars.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Class proportions normal,normal_defective,defective.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        mix: Option<Vec<f64>>,
    },
    /// Grayscale, quantize, extract circles and center profiles.
    Preprocess {
        #[command(flatten)]
        data: DataArg,
        /// Output side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Write every augmented copy of every group.
    Augment {
        #[command(flatten)]
        data: DataArg,
    },
    /// Stratified train/test split.
    Split {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ratio: Option<f64>,
        /// Leave normal-defective groups out.
        #[arg(long)]
        exclude_nd: bool,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArgs,
        /// Split file from `split`; computed from the seed if absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train all twelve configurations.
    Grid {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Retrain with fewer training groups and compare.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        /// Training groups to remove.
        #[arg(long, default_value_t = 20)]
        remove: usize,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on a dataset (or the test side of a split).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Explain a one-view checkpoint's prediction for one image.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        group: String,
        #[arg(long)]
        view: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the review service (port from FOAMQC_PORT, default 8080).
    Serve {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// One-view single-view checkpoint for explanations.
        #[arg(long)]
        explain_ckpt: Option<PathBuf>,
        /// Directory holding grid.json for /api/metrics.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Built review UI to serve at /.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Hide predictions until an item is reviewed.
        #[arg(long)]
        blind: bool,
        #[arg(long, value_enum, default_value_t = Order::Uncertainty)]
        order: Order,
    },
    /// Write a copy of the manifest with the expert labels from a review
    /// journal applied. Images and the source manifest are left alone.
    ExportLabels {
        #[command(flatten)]
        data: DataArg,
        /// Review state directory (`<serve --out>/review`).
        #[arg(long)]
        review: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset manifest, or a directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Mode::MultiView)]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "top,bottom")]
    views: Vec<String>,
    /// Train and test without normal-defective groups.
    #[arg(long)]
    exclude_nd: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Input side in pixels; must match the preprocessed images.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Reference weights (safetensors) for the stem.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    OneView,
    MultiView,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Order {
    Uncertainty,
    Id,
}

struct Ctx {
    out: PathBuf,
    force: bool,
    jobs: usize,
    settings: Settings,
}

impl Ctx {
    /// Refuses to clobber existing outputs unless `--force`.
    fn claim(&self, names: &[&str]) -> CliResult<Vec<PathBuf>> {
        let paths: Vec<PathBuf> = names.iter().map(|n| self.out.join(n)).collect();
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::User(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Internal(format!("{}: {e}", self.out.display())))?;
        Ok(paths)
    }

    fn record(&self, command: &str, config: serde_json::Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<()> {
        let m = RunManifest {
            command: command.into(),
            config,
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            input_hash: hash_inputs(inputs)?,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let path = m.write(&self.out)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn manifest_path(data: &Path) -> CliResult<PathBuf> {
    let p = if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() };
    if !p.is_file() {
        return Err(CliError::User(format!("no dataset manifest at {}", p.display())));
    }
    Ok(p)
}

fn load(data: &Path) -> CliResult<(PathBuf, Vec<ExampleGroup>)> {
    let m = manifest_path(data)?;
    let groups = load_manifest(&m)?;
    for g in groups.iter().filter(|g| !g.issues.is_empty()) {
        for i in &g.issues {
            log::warn!("{} {}: {}", g.id, i.view, i.message);
        }
    }
    Ok((m, groups))
}

// The dataset's directory: the run manifest hashes the images too.
fn data_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(foamqc::write_atomic(path, &bytes)?)
}

fn read_split(path: &Path) -> CliResult<DatasetSplit> {
    let bytes = std::fs::read(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn parse_views(names: &[String]) -> CliResult<Vec<ViewKind>> {
    names.iter().map(|v| v.parse::<ViewKind>().map_err(CliError::from)).collect()
}

fn apply_train_args(s: &mut Settings, a: &TrainArgs) {
    let t = &mut s.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.input_size {
        t.input_size = v;
    }
    if a.no_augment {
        t.augmentation = None;
    }
    if let Some(p) = &a.pretrained {
        t.pretrained_weights = Some(p.clone());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.set_seed(seed);
    }
    let mut ctx = Ctx {
        out: cli.out.clone(),
        force: cli.force,
        jobs: cli.jobs,
        settings,
    };
    match cli.command {
        Command::Synth { n, size, mix } => {
            let p = &mut ctx.settings.synth;
            if let Some(n) = n {
                p.n_groups = n;
            }
            if let Some(s) = size {
                p.image_size = s;
            }
            if let Some(m) = mix {
                p.class_mix = [m[0], m[1], m[2]];
            }
            let outputs = ctx.claim(&["manifest.json"])?;
            let items = generate(&ctx.settings.synth)?;
            write_dataset(&ctx.out, &items)?;
            log::info!("{} groups written to {}", items.len(), ctx.out.display());
            ctx.record("synth", json!(ctx.settings.synth), &[], &outputs)
        }
        Command::Preprocess { data, size } => {
            if let Some(s) = size {
                ctx.settings.train.input_size = s;
            }
            ctx.settings.circle.validate()?;
            let outputs = ctx.claim(&["manifest.json", "failures.json"])?;
            let (m, groups) = load(&data.data)?;
            let side = ctx.settings.train.input_size;
            let results = preprocess_all(&groups, &ctx.settings.circle, (side, side), ctx.jobs);
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            for (g, r) in groups.iter().zip(results) {
                match r {
                    Ok(p) => ok.push(p),
                    Err(e) => {
                        log::warn!("{}: {e}", g.id);
                        failures.push(json!({"id": g.id, "error": e.to_string()}));
                    }
                }
            }
            write_groups(&ctx.out, &ok)?;
            write_json(&outputs[1], &failures)?;
            log::info!("{} groups preprocessed, {} failed", ok.len(), failures.len());
            let cfg = json!({"circle": ctx.settings.circle, "input_size": side});
            ctx.record("preprocess", cfg, &[data_root(&m)], &outputs)
        }
        Command::Augment { data } => {
            ctx.settings.augment.validate()?;
            let outputs = ctx.claim(&["manifest.json"])?;
            let (m, groups) = load(&data.data)?;
            let spec = ctx.settings.augment.clone();
            let copies: Vec<Vec<ExampleGroup>> = foamqc::with_pool(ctx.jobs, || {
                use rayon::prelude::*;
                groups.par_iter().map(|g| augment_group(g, &spec)).collect::<foamqc::Result<_>>()
            })?;
            let all: Vec<ExampleGroup> = copies.into_iter().flatten().collect();
            write_groups(&ctx.out, &all)?;
            log::info!("{} augmented groups from {}", all.len(), groups.len());
            ctx.record("augment", json!(spec), &[data_root(&m)], &outputs)
        }
        Command::Split { data, ratio, exclude_nd } => {
            if let Some(r) = ratio {
                ctx.settings.train.split_ratio = r;
            }
            let outputs = ctx.claim(&["split.json"])?;
            let (m, groups) = load(&data.data)?;
            let t = &ctx.settings.train;
            let split = stratified_split(&groups, t.split_ratio, !exclude_nd, t.seed)?;
            write_json(&outputs[0], &split)?;
            log::info!("{} train / {} test", split.train.len(), split.test.len());
            let cfg = json!({"split_ratio": t.split_ratio, "include_nd": !exclude_nd, "seed": t.seed});
            ctx.record("split", cfg, &[m], &outputs)
        }
        Command::Train { data, model, split, train: targs } => {
            apply_train_args(&mut ctx.settings, &targs);
            let mode = match model.mode {
                Mode::OneView => ViewMode::OneView,
                Mode::MultiView => ViewMode::MultiView,
            };
            let cfg = ModelConfig::new(mode, &parse_views(&model.views)?, !model.exclude_nd);
            cfg.validate()?;
            ctx.settings.train.validate()?;
            let outputs = ctx.claim(&["model.safetensors", "report.json", "curves.csv"])?;
            let (m, groups) = load(&data.data)?;
            let t = ctx.settings.train.clone();
            let mut inputs = vec![data_root(&m)];
            let split = match &split {
                Some(p) => {
                    inputs.push(p.clone());
                    read_split(p)?
                }
                None => stratified_split(&groups, t.split_ratio, cfg.include_nd, t.seed)?,
            };
            let (report, clf) = train(&groups, &split, &cfg, &t)?;
            let metrics = json!({"accuracy": report.accuracy_at_min_loss, "auc": report.auc});
            save_checkpoint(&outputs[0], &clf, report.selected_epoch, metrics)?;
            write_json(&outputs[1], &report)?;
            let mut curves = String::from("epoch,train_loss,train_acc,test_loss,test_acc\n");
            for e in &report.epochs {
                curves += &format!("{},{},{},{},{}\n", e.epoch, e.train_loss, e.train_acc, e.test_loss, e.test_acc);
            }
            foamqc::write_atomic(&outputs[2], curves.as_bytes())?;
            log::info!(
                "{}: epoch {} selected, accuracy {:.1}%, AUC {}",
                cfg.name(),
                report.selected_epoch,
                report.accuracy_at_min_loss,
                report.auc.map_or("n/a".into(), |a| format!("{a:.1}%"))
            );
            ctx.record("train", json!({"model": cfg, "train": t}), &inputs, &outputs)
        }
        Command::Grid { data, seeds, train: targs } => {
            apply_train_args(&mut ctx.settings, &targs);
            ctx.settings.train.validate()?;
            let outputs = ctx.claim(&["grid.csv", "grid.json"])?;
            let (m, groups) = load(&data.data)?;
            let seeds = seeds.unwrap_or_else(|| vec![ctx.settings.train.seed]);
            let grid: GridResult = run_cells(&groups, &seeds, &ModelConfig::grid(), &ctx.settings.train, ctx.jobs)?;
            foamqc::write_atomic(&outputs[0], grid.to_csv()?.as_bytes())?;
            write_json(&outputs[1], &grid)?;
            if grid.failed() > 0 {
                log::warn!("{} of {} runs failed", grid.failed(), grid.cells.len());
            }
            ctx.record("grid", json!({"seeds": seeds, "train": ctx.settings.train}), &[data_root(&m)], &outputs)
        }
        Command::Ablate { data, remove, seeds, train: targs } => {
            apply_train_args(&mut ctx.settings, &targs);
            ctx.settings.train.validate()?;
            let outputs = ctx.claim(&["ablation.json", "ablation.csv"])?;
            let (m, groups) = load(&data.data)?;
            let seeds = seeds.unwrap_or_else(|| vec![ctx.settings.train.seed]);
            let report = ablate_data_size(&groups, remove, &seeds, &ModelConfig::grid(), &ctx.settings.train, ctx.jobs)?;
            write_json(&outputs[0], &report)?;
            let mut csv = String::from("config,seed,full_accuracy,reduced_accuracy,full_auc,reduced_auc\n");
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.1}"));
            for c in &report.cells {
                csv += &format!(
                    "{},{},{:.1},{:.1},{},{}\n",
                    c.config.name(),
                    c.seed,
                    c.full_accuracy,
                    c.reduced_accuracy,
                    opt(c.full_auc),
                    opt(c.reduced_auc)
                );
            }
            foamqc::write_atomic(&outputs[1], csv.as_bytes())?;
            if let Some(d) = report.mean_accuracy_delta(None) {
                log::info!("mean accuracy change from removing {remove} groups: {:+.1} points", -d);
            }
            let cfg = json!({"removed": remove, "seeds": seeds, "train": ctx.settings.train});
            ctx.record("ablate", cfg, &[data_root(&m)], &outputs)
        }
        Command::Eval { ckpt, data, split } => {
            let outputs = ctx.claim(&["eval.json"])?;
            let (clf, header) = load_checkpoint(&ckpt, None)?;
            let (m, groups) = load(&data.data)?;
            let mut inputs = vec![ckpt.clone(), data_root(&m)];
            let selected: Vec<&ExampleGroup> = match &split {
                Some(p) => {
                    inputs.push(p.clone());
                    read_split(p)?.select(&groups).1
                }
                None => groups
                    .iter()
                    .filter(|g| g.is_eligible() && (clf.config.include_nd || g.raw_label != Some(foamqc::RawLabel::NormalDefective)))
                    .collect(),
            };
            let labels: Vec<usize> = selected.iter().filter_map(|g| g.binary_label()).map(|l| l.index()).collect();
            // Loss weighting as in training, from the evaluated labels.
            let e = evaluate(&clf, &selected, class_weights(&labels, true))?;
            write_json(&outputs[0], &json!({"config": header.config, "evaluation": e}))?;
            log::info!(
                "{} groups: accuracy {:.1}%, AUC {}",
                selected.len(),
                e.accuracy,
                e.auc.map_or("n/a".into(), |a| format!("{a:.1}%"))
            );
            ctx.record("eval", json!({"checkpoint": header}), &inputs, &outputs)
        }
        Command::Explain {
            ckpt,
            data,
            group,
            view,
            samples,
        } => {
            if let Some(n) = samples {
                ctx.settings.explain.n_samples = n;
            }
            let (clf, _) = load_checkpoint(&ckpt, None)?;
            let view = match view {
                Some(v) => v.parse::<ViewKind>()?,
                None => *clf.config.views.first().ok_or_else(|| CliError::User("checkpoint has no views".into()))?,
            };
            if clf.config.views != [view] {
                return Err(CliError::User(format!(
                    "checkpoint model `{}` cannot explain the {view} view",
                    clf.config.name()
                )));
            }
            let stem = format!("{group}_{view}");
            let outputs = ctx.claim(&[&format!("{stem}_overlay.png"), &format!("{stem}_weights.json")])?;
            let (m, groups) = load(&data.data)?;
            let g = groups
                .iter()
                .find(|g| g.id == group)
                .ok_or_else(|| CliError::User(format!("no group `{group}` in {}", m.display())))?;
            let img = g.image(view)?;
            let e = explain(&clf, img, &ctx.settings.explain)?;
            let overlay = render_overlay(img, &e, 6);
            let mut png = std::io::Cursor::new(Vec::new());
            overlay
                .write_to(&mut png, image::ImageFormat::Png)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            foamqc::write_atomic(&outputs[0], &png.into_inner())?;
            write_json(&outputs[1], &e.weights_json())?;
            log::info!(
                "P(normal) {:.3}, surrogate {:.3}, weighted R² {:.3}",
                e.model_full,
                e.surrogate_full,
                e.fidelity_r2
            );
            ctx.record("explain", json!(ctx.settings.explain), &[ckpt, data_root(&m)], &outputs)
        }
        Command::Serve {
            data,
            ckpt,
            explain_ckpt,
            runs,
            ui_dir,
            blind,
            order,
        } => {
            let port = foamqc_review::port_from_env().map_err(CliError::User)?;
            let mut cfg = foamqc_review::ServiceConfig::new(manifest_path(&data.data)?, ckpt, ctx.out.join("review"));
            cfg.explain_checkpoint = explain_ckpt;
            cfg.runs = runs;
            cfg.ui_dir = ui_dir;
            cfg.blind = blind;
            cfg.order = match order {
                Order::Uncertainty => foamqc_review::QueueOrder::Uncertainty,
                Order::Id => foamqc_review::QueueOrder::Id,
            };
            cfg.explain = ctx.settings.explain.clone();
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(foamqc_review::serve(cfg, ([0, 0, 0, 0], port).into()))?;
            Ok(())
        }
        Command::ExportLabels { data, review } => {
            let outputs = ctx.claim(&["manifest.json"])?;
            let m = manifest_path(&data.data)?;
            let mut records = read_manifest(&m)?;
            let state = foamqc_review::ReviewStore::rebuild(&review)?;
            let root = std::path::absolute(data_root(&m)).map_err(|e| CliError::Internal(e.to_string()))?;
            let mut changed = 0;
            for r in &mut records {
                // The copy lives elsewhere; point it at the original images.
                for path in r.views.values_mut() {
                    *path = root.join(&*path).to_string_lossy().into_owned();
                }
                if let Some(rev) = state.reviews.get(&r.id) {
                    changed += usize::from(r.label != Some(rev.expert_label));
                    r.label = Some(rev.expert_label);
                }
            }
            if let Some(id) = state.reviews.keys().find(|id| !records.iter().any(|r| &r.id == *id)) {
                log::warn!("journal labels {id}, which is not in {}", m.display());
            }
            write_manifest(&outputs[0], &records)?;
            log::info!("{} expert labels applied, {changed} differ from the manifest", state.reviews.len());
            let cfg = json!({"reviewed": state.reviews.len(), "changed": changed});
            ctx.record("export-labels", cfg, &[m, review], &outputs)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            log::error!("{m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            log::error!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
