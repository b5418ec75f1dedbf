//! K-fold experiments: fold assignment, per-fold training and scoring,
//! artifacts on disk and the aggregate report.
//!
//! Output layout of [`run_crossval`]:
//!
//! ```text
//! <out>/fold_<i>/checkpoint.ckpt
//! <out>/fold_<i>/history.jsonl
//! <out>/fold_<i>/metrics.json
//! <out>/fold_<i>/pretrain.ckpt            only with `pretrain: auto`
//! <out>/fold_<i>/pretrain_history.jsonl   only with `pretrain: auto`
//! <out>/aggregate.json
//! <out>/report.txt
//! ```
//!
//! Group folds are stratified: groups are shuffled within each diagnosis and
//! dealt round-robin, the dealer position carrying over from one diagnosis to
//! the next. Folds therefore hold whole groups and near-equal group counts per
//! diagnosis, while sample counts vary with group length.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_dataset, resize_samples, write_file, DatasetError};
use crate::labels::LabelSchema;
use crate::metrics::{
    cls_metric_map, cls_report, cls_table, fold_aggregate, iou_scores, seg_metric_map, seg_table, FoldAggregate,
    MetricsError,
};
use crate::model::{load_weights, save_weights, ModelError, ModelWeights, UNetConfig};
use crate::phantom::{Diagnosis, Sample};
use crate::rng::SplitMix64;
use crate::train::{
    evaluate_segmentation, predict_diagnoses, split_validation, train_classification, train_segmentation, EvalSplit,
    TrainConfig, TrainError, TrainHistory,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("missing {what}: {path} ({hint})")]
    MissingArtifact { what: String, path: String, hint: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl HarnessError {
    /// Bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::MissingArtifact { .. } => true,
            HarnessError::Train(TrainError::Config(_) | TrainError::Architecture { .. } | TrainError::Label(_)) => true,
            HarnessError::Dataset(
                DatasetError::Json { .. } | DatasetError::Validation(_) | DatasetError::Label(_) | DatasetError::Io { .. },
            ) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Whole groups stay in one fold.
    #[default]
    ByGroupId,
    /// Every (augmented) sample is placed independently.
    ByAugmentedImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub grouping: Grouping,
    pub seed: u64,
    /// Sample id to fold index, in dataset order.
    pub assignments: IndexMap<String, usize>,
}

impl FoldSpec {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Indices into `samples` for training and testing on fold `i`.
    pub fn split(&self, samples: &[Sample], i: usize) -> (Vec<usize>, Vec<usize>) {
        (0..samples.len()).partition(|&j| self.assignments[&samples[j].id] != i)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn kfold_split(samples: &[Sample], k: usize, grouping: Grouping, seed: u64) -> Result<FoldSpec, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Config(format!("k must be at least 2, got {k}")));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(HarnessError::Config(format!("duplicate sample id `{}`", dup.id)));
    }
    let mut rng = SplitMix64::stream(seed, 0xF01D);
    let assignments = match grouping {
        Grouping::ByAugmentedImage => {
            if k > samples.len() {
                return Err(HarnessError::Config(format!("k = {k} exceeds {} samples", samples.len())));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            rng.shuffle(&mut order);
            let mut fold = vec![0; samples.len()];
            for (pos, &i) in order.iter().enumerate() {
                fold[i] = pos % k;
            }
            samples.iter().zip(fold).map(|(s, f)| (s.id.clone(), f)).collect()
        }
        Grouping::ByGroupId => {
            let mut by_diag: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
            let mut diag_of: BTreeMap<&str, Diagnosis> = BTreeMap::new();
            for s in samples {
                if let Some(d) = diag_of.insert(&s.group_id, s.diagnosis) {
                    if d != s.diagnosis {
                        return Err(HarnessError::Config(format!("group `{}` mixes diagnoses", s.group_id)));
                    }
                }
            }
            for (g, d) in &diag_of {
                by_diag.entry(d.index()).or_default().push(g);
            }
            if k > diag_of.len() {
                return Err(HarnessError::Config(format!("k = {k} exceeds {} groups", diag_of.len())));
            }
            let mut group_fold: BTreeMap<&str, usize> = BTreeMap::new();
            let mut dealer = 0;
            for groups in by_diag.values_mut() {
                rng.shuffle(groups);
                for g in groups.iter() {
                    group_fold.insert(g, dealer % k);
                    dealer += 1;
                }
            }
            samples.iter().map(|s| (s.id.clone(), group_fold[s.group_id.as_str()])).collect()
        }
    };
    Ok(FoldSpec { k, grouping, seed, assignments })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    SegDense,
    SegSparse,
    ClsDensePretrain,
    ClsSparsePretrain,
    ClsScratch,
}

impl Task {
    pub const ALL: [Task; 5] =
        [Task::SegDense, Task::SegSparse, Task::ClsDensePretrain, Task::ClsSparsePretrain, Task::ClsScratch];

    pub fn name(self) -> &'static str {
        match self {
            Task::SegDense => "seg_dense",
            Task::SegSparse => "seg_sparse",
            Task::ClsDensePretrain => "cls_dense_pretrain",
            Task::ClsSparsePretrain => "cls_sparse_pretrain",
            Task::ClsScratch => "cls_scratch",
        }
    }

    /// Schema of the segmentation network the task trains or starts from.
    pub fn schema(self) -> LabelSchema {
        match self {
            Task::SegSparse | Task::ClsSparsePretrain => LabelSchema::Sparse,
            // Scratch classifiers use the dense head width.
            Task::SegDense | Task::ClsDensePretrain | Task::ClsScratch => LabelSchema::Dense,
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, Task::SegDense | Task::SegSparse)
    }

    pub fn uses_pretraining(self) -> bool {
        matches!(self, Task::ClsDensePretrain | Task::ClsSparsePretrain)
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Task::SegDense => "U-Net, dense labels",
            Task::SegSparse => "U-Net, sparse labels",
            Task::ClsDensePretrain => "Dense-pretrained",
            Task::ClsSparsePretrain => "Sparse-pretrained",
            Task::ClsScratch => "Non-pretrained",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            format!("unknown task `{s}` (expected one of {})", Task::ALL.map(Task::name).join(", "))
        })
    }
}

/// Where a pretraining task gets its segmentation weights.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum PretrainSource {
    /// `<out>/pretrain_<schema>.ckpt`, which must already exist.
    #[default]
    Default,
    /// Train a segmentation network on each fold's training split first.
    Auto,
    Path(PathBuf),
}

impl FromStr for PretrainSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "" => return Err("empty pretrain source".into()),
            "auto" => PretrainSource::Auto,
            "default" => PretrainSource::Default,
            path => PretrainSource::Path(path.into()),
        })
    }
}

impl fmt::Display for PretrainSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PretrainSource::Default => f.write_str("default"),
            PretrainSource::Auto => f.write_str("auto"),
            PretrainSource::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for PretrainSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PretrainSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything one cross-validation run needs. Also the JSON config file schema;
/// every field is optional there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub task: Task,
    pub out_dir: PathBuf,
    pub k: usize,
    pub grouping: Grouping,
    pub split_seed: u64,
    /// Weight initialisation seed; fold `i` uses `derive(init_seed, i)`.
    pub init_seed: u64,
    pub depth: usize,
    pub base_channels: usize,
    /// `[H, W]` to resize every sample to before splitting.
    pub image_size: Option<[usize; 2]>,
    /// Settings for the task itself.
    pub train: TrainConfig,
    /// Settings for `pretrain: auto` segmentation runs.
    pub pretrain_train: TrainConfig,
    pub pretrain: PretrainSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
            task: Task::SegDense,
            out_dir: PathBuf::from("runs"),
            k: 3,
            grouping: Grouping::ByGroupId,
            split_seed: 0,
            init_seed: 0,
            depth: 3,
            base_channels: 8,
            image_size: None,
            train: TrainConfig::segmentation(),
            pretrain_train: TrainConfig::segmentation(),
            pretrain: PretrainSource::Default,
        }
    }
}

impl ExperimentConfig {
    pub fn unet(&self, schema: LabelSchema) -> UNetConfig {
        UNetConfig::for_schema(schema, self.depth, self.base_channels)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.unet(LabelSchema::Dense).validate()?;
        self.train.validate()?;
        if self.task.uses_pretraining() && self.pretrain == PretrainSource::Auto {
            self.pretrain_train.validate()?;
        }
        if !self.task.uses_pretraining() && self.pretrain != PretrainSource::Default {
            return Err(HarnessError::Config(format!("task {} takes no pretrained weights", self.task)));
        }
        Ok(())
    }

    pub fn default_pretrain_path(&self, schema: LabelSchema) -> PathBuf {
        self.out_dir.join(format!("pretrain_{schema}.ckpt"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitProvenance {
    /// `scratch` or `pretrained`.
    pub kind: String,
    pub source: Option<String>,
    pub pretrain_schema: Option<LabelSchema>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub task: Task,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_test: usize,
    pub eval_split: EvalSplit,
    pub best_epoch: usize,
    pub init: InitProvenance,
    /// Test-fold scores of the selected checkpoint.
    pub metrics: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalResult {
    pub task: Task,
    pub grouping: Grouping,
    pub fold_sizes: Vec<usize>,
    pub folds: Vec<FoldResult>,
    pub aggregate: FoldAggregate,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializes");
    bytes.push(b'\n');
    Ok(write_file(path, &bytes)?)
}

/// Scores of `w` on `test` for `task`. A dense segmenter is also scored after
/// merging onto the sparse classes, under `merged/` keys.
pub fn score(task: Task, w: &ModelWeights, test: &[Sample], batch_size: usize) -> Result<IndexMap<String, f64>, HarnessError> {
    if task.is_segmentation() {
        let schema = task.schema();
        let mut m = seg_metric_map(schema, &iou_scores(&evaluate_segmentation(w, test, schema, batch_size)?)?);
        if schema == LabelSchema::Dense {
            let merged = iou_scores(&evaluate_segmentation(w, test, LabelSchema::Sparse, batch_size)?)?;
            for (k, v) in seg_metric_map(LabelSchema::Sparse, &merged) {
                m.insert(format!("merged/{k}"), v);
            }
        }
        Ok(m)
    } else {
        let preds = predict_diagnoses(w, test, batch_size)?;
        let gts: Vec<Diagnosis> = test.iter().map(|s| s.diagnosis).collect();
        Ok(cls_metric_map(&cls_report(&preds, &gts)?))
    }
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Load the manifest named in `cfg` and run [`run_crossval_on`].
pub fn run_crossval(cfg: &ExperimentConfig) -> Result<CrossvalResult, HarnessError> {
    cfg.validate()?;
    if !cfg.manifest.exists() {
        return Err(HarnessError::MissingArtifact {
            what: "dataset manifest".into(),
            path: cfg.manifest.display().to_string(),
            hint: "create one with `lungseg gen-data`".into(),
        });
    }
    let samples = load_dataset(&cfg.manifest)?;
    run_crossval_on(&samples, cfg)
}

/// Train and score one model per fold, then write the artifacts and report.
pub fn run_crossval_on(samples: &[Sample], cfg: &ExperimentConfig) -> Result<CrossvalResult, HarnessError> {
    cfg.validate()?;
    let samples = match cfg.image_size {
        Some([h, w]) => resize_samples(samples, (h, w))?,
        None => samples.to_vec(),
    };
    let folds = kfold_split(&samples, cfg.k, cfg.grouping, cfg.split_seed)?;
    let schema = cfg.task.schema();
    let arch = cfg.unet(schema);

    // Resolve fixed pretrained weights up front so a missing file fails fast.
    let fixed_pretrain = match (&cfg.pretrain, cfg.task.uses_pretraining()) {
        (_, false) | (PretrainSource::Auto, true) => None,
        (PretrainSource::Path(p), true) => Some((p.clone(), load_pretrained(p, &arch)?)),
        (PretrainSource::Default, true) => {
            let p = cfg.default_pretrain_path(schema);
            if !p.exists() {
                return Err(HarnessError::MissingArtifact {
                    what: format!("{schema} segmentation checkpoint for {}", cfg.task),
                    path: p.display().to_string(),
                    hint: "train one with `lungseg train-seg`, pass `--pretrain <checkpoint>`, or use `--pretrain auto`"
                        .into(),
                });
            }
            Some((p.clone(), load_pretrained(&p, &arch)?))
        }
    };

    let mut results = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let dir = cfg.out_dir.join(format!("fold_{i}"));
        let (train_idx, test_idx) = folds.split(&samples, i);
        let train_all = pick(&samples, &train_idx);
        let test = pick(&samples, &test_idx);
        if train_all.is_empty() || test.is_empty() {
            return Err(HarnessError::Config(format!("fold {i} has an empty train or test split")));
        }
        let (train, eval) = match cfg.train.eval_split {
            EvalSplit::Test => (train_all.clone(), test.clone()),
            EvalSplit::Validation => {
                split_validation(&train_all, cfg.train.validation_fraction, SplitMix64::derive(cfg.split_seed, i as u64))?
            }
        };
        let seed = SplitMix64::derive(cfg.init_seed, i as u64);

        let (weights, history, init) = if cfg.task.is_segmentation() {
            let (w, h) = train_segmentation(&train, &eval, &arch, &cfg.train, seed)?;
            (w, h, InitProvenance { kind: "scratch".into(), source: None, pretrain_schema: None, seed })
        } else if cfg.task.uses_pretraining() {
            let (pre, source) = match &fixed_pretrain {
                Some((p, w)) => (w.clone(), p.display().to_string()),
                None => {
                    let (w, h) = train_segmentation(&train, &eval, &arch, &cfg.pretrain_train, seed)?;
                    let p = dir.join("pretrain.ckpt");
                    save_weights(&p, &w)?;
                    h.write_jsonl(&dir.join("pretrain_history.jsonl"))?;
                    (w, "auto".to_string())
                }
            };
            let (w, h) = train_classification(&train, &eval, &arch, &cfg.train, Some(&pre), seed)?;
            let init = InitProvenance { kind: "pretrained".into(), source: Some(source), pretrain_schema: Some(schema), seed };
            (w, h, init)
        } else {
            let (w, h) = train_classification(&train, &eval, &arch, &cfg.train, None, seed)?;
            (w, h, InitProvenance { kind: "scratch".into(), source: None, pretrain_schema: None, seed })
        };

        let metrics = score(cfg.task, &weights, &test, cfg.train.batch_size)?;
        let result = FoldResult {
            fold: i,
            task: cfg.task,
            n_train: train.len(),
            n_eval: eval.len(),
            n_test: test.len(),
            eval_split: cfg.train.eval_split,
            best_epoch: history.best_epoch,
            init,
            metrics,
        };
        save_weights(&dir.join("checkpoint.ckpt"), &weights)?;
        write_history(&dir.join("history.jsonl"), &history)?;
        write_json(&dir.join("metrics.json"), &result)?;
        results.push(result);
    }

    let aggregate = fold_aggregate(&results.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())?;
    let out = CrossvalResult { task: cfg.task, grouping: cfg.grouping, fold_sizes: folds.fold_sizes(), folds: results, aggregate };
    write_json(&cfg.out_dir.join("aggregate.json"), &out.aggregate)?;
    write_file(&cfg.out_dir.join("report.txt"), render_report(&out).as_bytes())?;
    Ok(out)
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<(), HarnessError> {
    Ok(h.write_jsonl(path)?)
}

fn load_pretrained(path: &Path, arch: &UNetConfig) -> Result<ModelWeights, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            what: "pretrained segmentation checkpoint".into(),
            path: path.display().to_string(),
            hint: "check the `--pretrain` path".into(),
        });
    }
    let w = load_weights(path)?;
    if w.unet_config() != arch {
        return Err(HarnessError::Train(TrainError::Architecture { found: *w.unet_config(), expected: *arch }));
    }
    Ok(w)
}

/// Plain-text table of the aggregate, one row for the task.
pub fn render_report(r: &CrossvalResult) -> String {
    let mut out = format!(
        "task: {}  folds: {}  grouping: {}  fold sizes: {:?}\n\n",
        r.task,
        r.aggregate.k,
        serde_json::to_value(r.grouping).expect("serializes").as_str().unwrap_or_default(),
        r.fold_sizes
    );
    if r.task.is_segmentation() {
        out.push_str(&seg_table(r.task.schema(), &[(r.task.label(), &r.aggregate)]));
        if r.task == Task::SegDense {
            let merged = FoldAggregate {
                k: r.aggregate.k,
                metrics: r
                    .aggregate
                    .metrics
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix("merged/").map(|k| (k.to_string(), *v)))
                    .collect(),
            };
            out.push_str("\nscored on the sparse classes:\n");
            out.push_str(&seg_table(LabelSchema::Sparse, &[(r.task.label(), &merged)]));
        }
    } else {
        out.push_str(&cls_table(&[(r.task.label(), &r.aggregate)]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{GreyImage, LabelMap};
    use proptest::prelude::*;
    use std::collections::{BTreeSet, HashMap};

    fn stub(id: String, group: String, diagnosis: Diagnosis) -> Sample {
        Sample {
            id,
            grey: GreyImage::new(1, 1, vec![0.0]).unwrap(),
            labels: LabelMap::filled(LabelSchema::Dense, 1, 1, 6).unwrap(),
            diagnosis,
            group_id: group,
            frame_index: 0,
            seed: 0,
            augment: None,
        }
    }

    fn grouped(frames: &[usize]) -> Vec<Sample> {
        let mut out = Vec::new();
        for (g, &n) in frames.iter().enumerate() {
            for f in 0..n {
                out.push(stub(format!("g{g}-f{f}"), format!("g{g}"), Diagnosis::ALL[g % 3]));
            }
        }
        out
    }

    #[test]
    fn image_mode_gives_equal_folds() {
        let samples: Vec<Sample> = (0..912).map(|i| stub(format!("s{i}"), format!("g{}", i / 6), Diagnosis::Normal)).collect();
        let f = kfold_split(&samples, 3, Grouping::ByAugmentedImage, 4).unwrap();
        assert_eq!(f.fold_sizes(), vec![304, 304, 304]);
    }

    #[test]
    fn group_mode_deals_three_groups_per_fold() {
        let samples = grouped(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let f = kfold_split(&samples, 3, Grouping::ByGroupId, 1).unwrap();
        let mut groups_per_fold = vec![BTreeSet::new(); 3];
        for s in &samples {
            groups_per_fold[f.fold_of(&s.id).unwrap()].insert(&s.group_id);
        }
        assert!(groups_per_fold.iter().all(|g| g.len() == 3));
        assert_eq!(f.fold_sizes().iter().sum::<usize>(), 45);
    }

    #[test]
    fn same_seed_same_assignment() {
        let samples = grouped(&[3, 1, 4, 1, 5, 9, 2, 6]);
        for grouping in [Grouping::ByGroupId, Grouping::ByAugmentedImage] {
            assert_eq!(kfold_split(&samples, 3, grouping, 8).unwrap(), kfold_split(&samples, 3, grouping, 8).unwrap());
        }
    }

    #[test]
    fn split_errors() {
        let samples = grouped(&[2, 2]);
        assert!(kfold_split(&samples, 3, Grouping::ByGroupId, 0).is_err());
        assert!(kfold_split(&samples, 5, Grouping::ByAugmentedImage, 0).is_err());
        assert!(kfold_split(&samples, 1, Grouping::ByAugmentedImage, 0).is_err());
        let mut dup = grouped(&[2, 2, 2]);
        dup[1].id = dup[0].id.clone();
        assert!(kfold_split(&dup, 3, Grouping::ByGroupId, 0).is_err());
    }

    proptest! {
        #[test]
        fn groups_never_straddle_folds(frames in proptest::collection::vec(1usize..6, 3..20), seed: u64, k in 2usize..4) {
            prop_assume!(k <= frames.len());
            let samples = grouped(&frames);
            let f = kfold_split(&samples, k, Grouping::ByGroupId, seed).unwrap();
            prop_assert_eq!(f.assignments.len(), samples.len());
            let mut home: HashMap<&str, usize> = HashMap::new();
            for s in &samples {
                let fold = f.fold_of(&s.id).unwrap();
                prop_assert!(fold < k);
                prop_assert_eq!(*home.entry(&s.group_id).or_insert(fold), fold);
            }
            // Stratified dealing keeps per-diagnosis group counts within one of each other.
            for d in Diagnosis::ALL {
                let mut counts = vec![0usize; k];
                for (g, &fold) in &home {
                    if samples.iter().any(|s| s.group_id == *g && s.diagnosis == d) {
                        counts[fold] += 1;
                    }
                }
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn task_and_source_parsing() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("cls".parse::<Task>().is_err());
        assert_eq!("auto".parse::<PretrainSource>().unwrap(), PretrainSource::Auto);
        assert_eq!("a/b.ckpt".parse::<PretrainSource>().unwrap(), PretrainSource::Path("a/b.ckpt".into()));
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"task": "cls_scratch", "pretrain": "default", "train": {"epochs": 2}}"#).unwrap();
        assert_eq!((cfg.task, cfg.train.epochs, cfg.k), (Task::ClsScratch, 2, 3));
        assert_eq!(Task::ClsScratch.schema().n_classes(), 7);
    }

    #[test]
    fn pretrain_task_without_checkpoint_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { task: Task::ClsDensePretrain, out_dir: dir.path().into(), ..Default::default() };
        let err = run_crossval_on(&grouped(&[1; 6]), &cfg).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("pretrain_dense.ckpt"), "{err}");
    }
}
