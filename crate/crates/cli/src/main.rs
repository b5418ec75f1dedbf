//! `lungseg`: generate phantom data, train and evaluate U-Net segmenters and
//! diagnosis classifiers, run cross-validation and render label overlays.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::Serialize;

use lungseg_core::augment::expand_sixfold;
use lungseg_core::dataset::{load_dataset, resize_samples, write_dataset, DatasetError};
use lungseg_core::harness::{self, HarnessError};
use lungseg_core::labels::{colorize, to_schema, LabelMap, RgbImage};
use lungseg_core::model::{load_weights, save_weights, ModelError, ModelWeights};
use lungseg_core::netpbm::{save_ppm, NetpbmError};
use lungseg_core::phantom::{gen_dataset, DatasetSpec, Sample};
use lungseg_core::tensor::gradcheck;
use lungseg_core::train::{self, EvalSplit, TrainError};
use lungseg_core::{ExperimentConfig, Grouping, LabelSchema, PretrainSource, Task, TrainConfig, UNetConfig};

#[derive(Parser, Debug)]
#[command(name = "lungseg", version, about = "Lung ultrasound segmentation and reverse-transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand takes.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags given on the command line win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Preset::Demo)]
        preset: Preset,
        /// Override the preset image size, e.g. 96x128.
        #[arg(long, value_parser = parse_size)]
        size: Option<[usize; 2]>,
    },
    /// Expand a dataset sixfold with flips and intensity scaling.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Convert dense label maps to the sparse schema.
    Remap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a U-Net segmenter.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SchemaArg::Dense)]
        schema: SchemaArg,
    },
    /// Train a diagnosis classifier, optionally from segmentation weights.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Segmentation checkpoint to start from; omit to train from scratch.
        #[arg(long, value_name = "CKPT")]
        pretrain: Option<PathBuf>,
        /// Update only the classification head.
        #[arg(long)]
        freeze: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score segmentation in this schema (a dense model is merged for sparse).
        #[arg(long, value_enum)]
        schema: Option<SchemaArg>,
        #[arg(long, value_parser = parse_size)]
        size: Option<[usize; 2]>,
    },
    /// K-fold cross-validation of one task.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        /// `auto` (train per fold), a checkpoint path, or `default` (`<out>/pretrain_<schema>.ckpt`).
        #[arg(long)]
        pretrain: Option<PretrainSource>,
        /// Epochs for `--pretrain auto` segmentation runs.
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        /// Split augmented images independently instead of by group. Copies
        /// of one source image can then land in both train and test folds.
        #[arg(long)]
        paper_protocol: bool,
    },
    /// Draw image / expert / predicted label grids as PPM.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Dense segmentation checkpoint.
        #[arg(long, value_name = "CKPT")]
        dense: PathBuf,
        /// Sparse segmentation checkpoint.
        #[arg(long, value_name = "CKPT")]
        sparse: PathBuf,
        /// Number of samples (rows) to draw.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_parser = parse_size)]
        size: Option<[usize; 2]>,
    },
    /// Finite-difference gradient check of every layer type.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Seeds per layer.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

/// Training knobs shared by the training commands. Unset flags keep the
/// config file's value, or the built-in default.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation manifest; without it a share of training groups is held back.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Resize every sample to HxW first.
    #[arg(long, value_parser = parse_size)]
    size: Option<[usize; 2]>,
    #[arg(long, value_enum)]
    eval_split: Option<EvalSplitArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Demo,
    SemanticLung,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemaArg {
    Dense,
    Sparse,
}

impl From<SchemaArg> for LabelSchema {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Dense => LabelSchema::Dense,
            SchemaArg::Sparse => LabelSchema::Sparse,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplitArg {
    Test,
    Validation,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok([h, w])
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

enum CliError {
    Validation(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        HarnessError::from(e).into()
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_samples(manifest: &Path, size: Option<[usize; 2]>) -> CliResult<Vec<Sample>> {
    let samples = load_dataset(manifest).map_err(input)?;
    match size {
        Some([h, w]) => resize_samples(&samples, (h, w)).map_err(input),
        None => Ok(samples),
    }
}

fn load_checkpoint(path: &Path) -> CliResult<ModelWeights> {
    load_weights(path).map_err(|e: ModelError| CliError::Validation(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_samples(dir: &Path, samples: &[Sample]) -> CliResult<PathBuf> {
    write_dataset(dir, samples).map_err(|e: DatasetError| runtime(e))
}

fn read_experiment(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.split_seed = seed;
        cfg.init_seed = seed;
        cfg.train.shuffle_seed = seed;
        cfg.pretrain_train.shuffle_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_run(cfg: &mut ExperimentConfig, run: &RunArgs) {
    if let Some(d) = &run.data {
        cfg.manifest = d.clone();
    }
    if let Some(v) = run.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = run.batch_size {
        cfg.train.batch_size = v;
        cfg.pretrain_train.batch_size = v;
    }
    if let Some(v) = run.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = run.depth {
        cfg.depth = v;
    }
    if let Some(v) = run.base_channels {
        cfg.base_channels = v;
    }
    if run.size.is_some() {
        cfg.image_size = run.size;
    }
    if let Some(s) = run.eval_split {
        cfg.train.eval_split = match s {
            EvalSplitArg::Test => EvalSplit::Test,
            EvalSplitArg::Validation => EvalSplit::Validation,
        };
    }
}

/// Training and eval samples for a single run.
fn train_eval_sets(cfg: &ExperimentConfig, run: &RunArgs) -> CliResult<(Vec<Sample>, Vec<Sample>)> {
    let all = load_samples(&cfg.manifest, cfg.image_size)?;
    match &run.eval {
        Some(path) => Ok((all, load_samples(path, cfg.image_size)?)),
        None => Ok(train::split_validation(&all, cfg.train.validation_fraction, cfg.split_seed)?),
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    n_train: usize,
    n_eval: usize,
    best_epoch: usize,
    metrics: &'a IndexMap<String, f64>,
}

fn print_metrics(m: &IndexMap<String, f64>) {
    for (k, v) in m {
        println!("{k:<28} {v:.4}");
    }
}

fn finish_run(
    cfg: &ExperimentConfig,
    task: Task,
    w: &ModelWeights,
    hist: &lungseg_core::TrainHistory,
    train_n: usize,
    eval: &[Sample],
) -> CliResult<()> {
    let metrics = harness::score(task, w, eval, cfg.train.batch_size)?;
    save_weights(&cfg.out_dir.join("checkpoint.ckpt"), w).map_err(runtime)?;
    hist.write_jsonl(&cfg.out_dir.join("history.jsonl"))?;
    let summary = RunSummary { n_train: train_n, n_eval: eval.len(), best_epoch: hist.best_epoch, metrics: &metrics };
    write_json(&cfg.out_dir.join("metrics.json"), &summary)?;
    println!("best epoch {} of {}", hist.best_epoch, hist.records.len());
    print_metrics(&metrics);
    println!("wrote {}", cfg.out_dir.join("checkpoint.ckpt").display());
    Ok(())
}

fn gen_data(common: &Common, preset: Preset, size: Option<[usize; 2]>) -> CliResult<()> {
    let seed = common.seed.unwrap_or(0);
    let mut spec = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<DatasetSpec>(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => match preset {
            Preset::Demo => DatasetSpec::demo(seed),
            Preset::SemanticLung => DatasetSpec::semantic_lung(seed),
        },
    };
    if common.seed.is_some() {
        spec.seed = seed;
    }
    if let Some([h, w]) = size {
        spec.base.height = h;
        spec.base.width = w;
    }
    let samples = gen_dataset(&spec).map_err(input)?;
    let out = common.out.clone().unwrap_or_else(|| "data".into());
    let manifest = write_samples(&out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

fn augment(common: &Common, data: &Path) -> CliResult<()> {
    let samples = load_samples(data, None)?;
    if let Some(s) = samples.iter().find(|s| s.augment.is_some()) {
        return Err(CliError::Validation(format!("{} is already augmented ({})", data.display(), s.id)));
    }
    let out = common.out.clone().unwrap_or_else(|| "data_aug".into());
    let expanded = expand_sixfold(&samples);
    let manifest = write_samples(&out, &expanded)?;
    println!("wrote {} samples ({} x 6) to {}", expanded.len(), samples.len(), manifest.display());
    Ok(())
}

fn remap(common: &Common, data: &Path) -> CliResult<()> {
    let samples = load_samples(data, None)?;
    let remapped = samples
        .into_iter()
        .map(|s| Ok(Sample { labels: to_schema(&s.labels, LabelSchema::Sparse).map_err(input)?, ..s }))
        .collect::<CliResult<Vec<_>>>()?;
    let out = common.out.clone().unwrap_or_else(|| "data_sparse".into());
    let manifest = write_samples(&out, &remapped)?;
    println!("wrote {} sparse-labelled samples to {}", remapped.len(), manifest.display());
    Ok(())
}

fn train_seg(common: &Common, run: &RunArgs, schema: SchemaArg) -> CliResult<()> {
    let mut cfg = read_experiment(common)?;
    if common.out.is_none() && common.config.is_none() {
        cfg.out_dir = "runs/seg".into();
    }
    apply_run(&mut cfg, run);
    let schema = LabelSchema::from(schema);
    let task = if schema == LabelSchema::Dense { Task::SegDense } else { Task::SegSparse };
    let (train_set, eval_set) = train_eval_sets(&cfg, run)?;
    let (w, hist) = train::train_segmentation(&train_set, &eval_set, &cfg.unet(schema), &cfg.train, cfg.init_seed)?;
    finish_run(&cfg, task, &w, &hist, train_set.len(), &eval_set)
}

fn train_cls(common: &Common, run: &RunArgs, pretrain: Option<&Path>, freeze: bool) -> CliResult<()> {
    let mut cfg = read_experiment(common)?;
    if common.config.is_none() {
        cfg.train = TrainConfig { shuffle_seed: cfg.train.shuffle_seed, ..TrainConfig::classification() };
        if common.out.is_none() {
            cfg.out_dir = "runs/cls".into();
        }
    }
    let pretrained = pretrain.map(load_checkpoint).transpose()?;
    // Architecture follows the checkpoint unless flags say otherwise.
    if let Some(p) = &pretrained {
        cfg.depth = p.unet_config().depth;
        cfg.base_channels = p.unet_config().base_channels;
    }
    apply_run(&mut cfg, run);
    if freeze {
        cfg.train.freeze_seg_weights = true;
    }
    let arch = match &pretrained {
        Some(p) => UNetConfig { depth: cfg.depth, base_channels: cfg.base_channels, ..*p.unet_config() },
        None => cfg.unet(LabelSchema::Dense),
    };
    let (train_set, eval_set) = train_eval_sets(&cfg, run)?;
    let (w, hist) = train::train_classification(&train_set, &eval_set, &arch, &cfg.train, pretrained.as_ref(), cfg.init_seed)?;
    finish_run(&cfg, Task::ClsScratch, &w, &hist, train_set.len(), &eval_set)
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, schema: Option<SchemaArg>, size: Option<[usize; 2]>) -> CliResult<()> {
    let w = load_checkpoint(checkpoint)?;
    let samples = load_samples(data, size)?;
    let metrics = if w.has_head() {
        harness::score(Task::ClsScratch, &w, &samples, 4)?
    } else {
        let model_schema = train::schema_of(w.unet_config())?;
        let schema = schema.map(LabelSchema::from).unwrap_or(model_schema);
        let c = train::evaluate_segmentation(&w, &samples, schema, 4)?;
        let s = lungseg_core::metrics::iou_scores(&c).map_err(runtime)?;
        lungseg_core::metrics::seg_metric_map(schema, &s)
    };
    print_metrics(&metrics);
    if let Some(out) = &common.out {
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn crossval(
    common: &Common,
    run: &RunArgs,
    task: Option<Task>,
    pretrain: Option<PretrainSource>,
    pretrain_epochs: Option<usize>,
    folds: Option<usize>,
    paper_protocol: bool,
) -> CliResult<()> {
    let mut cfg = read_experiment(common)?;
    if let Some(t) = task {
        cfg.task = t;
        if common.config.is_none() && !t.is_segmentation() {
            cfg.train = TrainConfig { shuffle_seed: cfg.train.shuffle_seed, ..TrainConfig::classification() };
        }
    }
    if common.out.is_none() && common.config.is_none() {
        cfg.out_dir = PathBuf::from("runs").join(cfg.task.name());
    }
    apply_run(&mut cfg, run);
    if let Some(p) = pretrain {
        cfg.pretrain = p;
    }
    if let Some(e) = pretrain_epochs {
        cfg.pretrain_train.epochs = e;
    }
    if let Some(k) = folds {
        cfg.k = k;
    }
    if paper_protocol {
        cfg.grouping = Grouping::ByAugmentedImage;
    }
    let result = harness::run_crossval(&cfg)?;
    print!("{}", harness::render_report(&result));
    println!("wrote {}", cfg.out_dir.join("aggregate.json").display());
    Ok(())
}

const GAP: usize = 2;
const WHITE: [u8; 3] = [255, 255, 255];

fn blit(canvas: &mut RgbImage, img: &RgbImage, top: usize, left: usize) {
    for y in 0..img.height {
        for x in 0..img.width {
            canvas.pixels[(top + y) * canvas.width + left + x] = img.pixels[y * img.width + x];
        }
    }
}

fn grey_rgb(s: &Sample) -> RgbImage {
    let (h, w) = s.grey.dims();
    let pixels = s.grey.data().iter().map(|&v| [(v * 255.0).round() as u8; 3]).collect();
    RgbImage { height: h, width: w, pixels }
}

fn render(common: &Common, data: &Path, dense: &Path, sparse: &Path, count: usize, size: Option<[usize; 2]>) -> CliResult<()> {
    let samples = load_samples(data, size)?;
    let rows: Vec<Sample> = samples.into_iter().take(count.max(1)).collect();
    let dense_w = load_checkpoint(dense)?;
    let sparse_w = load_checkpoint(sparse)?;
    for (w, want) in [(&dense_w, LabelSchema::Dense), (&sparse_w, LabelSchema::Sparse)] {
        if train::schema_of(w.unet_config())? != want {
            return Err(CliError::Validation(format!("expected a {want} segmentation checkpoint")));
        }
    }
    let ai_dense = train::predict_labels(&dense_w, &rows, 4)?;
    let ai_sparse = train::predict_labels(&sparse_w, &rows, 4)?;
    let (h, w) = rows[0].grey.dims();
    let cols = 5;
    let mut canvas = RgbImage::filled(rows.len() * (h + GAP) - GAP, cols * (w + GAP) - GAP, WHITE);
    for (r, s) in rows.iter().enumerate() {
        let expert_sparse: LabelMap = to_schema(&s.labels, LabelSchema::Sparse).map_err(input)?;
        let tiles = [grey_rgb(s), colorize(&expert_sparse), colorize(&ai_sparse[r]), colorize(&ai_dense[r]), colorize(&s.labels)];
        for (c, tile) in tiles.iter().enumerate() {
            blit(&mut canvas, tile, r * (h + GAP), c * (w + GAP));
        }
    }
    let out = common.out.clone().unwrap_or_else(|| "render".into());
    let path = out.join("grid.ppm");
    save_ppm(&path, &canvas).map_err(|e: NetpbmError| runtime(e))?;
    println!("columns: image | expert sparse | predicted sparse | predicted dense | expert dense");
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

fn run_gradcheck(common: &Common, seeds: u64) -> CliResult<()> {
    let first = common.seed.unwrap_or(0);
    let results = gradcheck::run_suite(first, seeds).map_err(runtime)?;
    let mut ok = true;
    for (layer, err) in &results {
        let pass = *err < 1e-4;
        ok &= pass;
        println!("{:<26} max rel err {err:.3e}  {}", layer.name(), if pass { "ok" } else { "FAIL" });
    }
    if let Some(out) = &common.out {
        let rows: IndexMap<&str, f64> = results.iter().map(|(l, e)| (l.name(), *e)).collect();
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check exceeded 1e-4".into()))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, preset, size } => gen_data(&common, preset, size),
        Command::Augment { common, data } => augment(&common, &data),
        Command::Remap { common, data } => remap(&common, &data),
        Command::TrainSeg { common, run, schema } => train_seg(&common, &run, schema),
        Command::TrainCls { common, run, pretrain, freeze } => train_cls(&common, &run, pretrain.as_deref(), freeze),
        Command::Eval { common, checkpoint, data, schema, size } => eval(&common, &checkpoint, &data, schema, size),
        Command::Crossval { common, run, task, pretrain, pretrain_epochs, folds, paper_protocol } => {
            crossval(&common, &run, task, pretrain, pretrain_epochs, folds, paper_protocol)
        }
        Command::Render { common, data, dense, sparse, count, size } => render(&common, &data, &dense, &sparse, count, size),
        Command::Gradcheck { common, seeds } => run_gradcheck(&common, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
