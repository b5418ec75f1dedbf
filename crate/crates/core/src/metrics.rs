//! Segmentation and classification scores, fold aggregation and text tables.
//!
//! IoU is computed from a confusion matrix accumulated over the whole
//! evaluation set, not per image. Classes with an empty union (absent from
//! both ground truth and prediction) are left out of the mean. Precision or
//! recall with a zero denominator is 0. Fold spreads are population standard
//! deviations.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{remap_dense_to_sparse, LabelError, LabelMap, LabelSchema};
use crate::phantom::Diagnosis;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// Pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfusion {
    schema: LabelSchema,
    counts: Vec<u64>,
}

impl SegConfusion {
    pub fn new(schema: LabelSchema) -> Self {
        let n = schema.n_classes();
        Self { schema, counts: vec![0; n * n] }
    }

    pub fn schema(&self) -> LabelSchema {
        self.schema
    }

    pub fn n_classes(&self) -> usize {
        self.schema.n_classes()
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), MetricsError> {
        if pred.schema() != self.schema || gt.schema() != self.schema {
            return Err(MetricsError::Validation(format!(
                "confusion is {} but prediction is {} and ground truth {}",
                self.schema,
                pred.schema(),
                gt.schema()
            )));
        }
        if pred.dims() != gt.dims() {
            return Err(MetricsError::Validation(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let n = self.n_classes();
        for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SegConfusion) -> Result<(), MetricsError> {
        if other.schema != self.schema {
            return Err(MetricsError::Validation("cannot merge confusions of different schemas".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn seg_confusion(pred: &LabelMap, gt: &LabelMap) -> Result<SegConfusion, MetricsError> {
    let mut c = SegConfusion::new(gt.schema());
    c.add(pred, gt)?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    /// `None` where the class has an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

pub fn iou_scores(c: &SegConfusion) -> Result<IouScores, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::Validation("empty confusion matrix".into()));
    }
    let n = c.n_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut trace = 0;
    for k in 0..n {
        let diag = c.get(k, k);
        let row: u64 = (0..n).map(|p| c.get(k, p)).sum();
        let col: u64 = (0..n).map(|g| c.get(g, k)).sum();
        let union = row + col - diag;
        trace += diag;
        per_class.push((union > 0).then(|| diag as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_iou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouScores { per_class, mean_iou, pixel_accuracy: trace as f64 / total as f64 })
}

/// Collapse a dense prediction onto the sparse classes so it can be scored
/// against sparse ground truth. Same table as the label remap.
pub fn merge_dense_prediction_for_sparse_scoring(pred: &LabelMap) -> Result<LabelMap, MetricsError> {
    Ok(remap_dense_to_sparse(pred)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    /// Keyed by diagnosis name, in [`Diagnosis::ALL`] order.
    pub per_class: IndexMap<String, ClassScores>,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn cls_report(preds: &[Diagnosis], gts: &[Diagnosis]) -> Result<ClsReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Validation(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(MetricsError::Validation("no predictions to score".into()));
    }
    let mut per_class = IndexMap::new();
    for d in Diagnosis::ALL {
        let tp = preds.iter().zip(gts).filter(|&(&p, &g)| p == d && g == d).count();
        let predicted = preds.iter().filter(|&&p| p == d).count();
        let actual = gts.iter().filter(|&&g| g == d).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.insert(d.name().to_string(), ClassScores { precision, recall, f1 });
    }
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(ClsReport { per_class, accuracy: ratio(correct, preds.len()) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Per-metric mean and spread over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub k: usize,
    pub metrics: IndexMap<String, MeanStd>,
}

/// Every fold must report the same metric names; order follows the first fold.
pub fn fold_aggregate(folds: &[IndexMap<String, f64>]) -> Result<FoldAggregate, MetricsError> {
    if folds.len() < 2 {
        return Err(MetricsError::Validation(format!("need at least 2 folds, got {}", folds.len())));
    }
    let mut metrics = IndexMap::new();
    for name in folds[0].keys() {
        let values = folds
            .iter()
            .enumerate()
            .map(|(i, f)| f.get(name).copied().ok_or_else(|| MetricsError::Validation(format!("fold {i} lacks `{name}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        metrics.insert(name.clone(), MeanStd { mean, std: var.sqrt() });
    }
    if folds.iter().any(|f| f.len() != folds[0].len()) {
        return Err(MetricsError::Validation("folds report different metric sets".into()));
    }
    Ok(FoldAggregate { k: folds.len(), metrics })
}

/// Flat metric map for one segmentation evaluation: `iou/<class>`, `mean_iou`,
/// `pixel_accuracy`. Absent classes are omitted.
pub fn seg_metric_map(schema: LabelSchema, s: &IouScores) -> IndexMap<String, f64> {
    let mut m = IndexMap::new();
    for (name, iou) in schema.class_names().iter().zip(&s.per_class) {
        if let Some(v) = iou {
            m.insert(format!("iou/{name}"), *v);
        }
    }
    m.insert("mean_iou".into(), s.mean_iou);
    m.insert("pixel_accuracy".into(), s.pixel_accuracy);
    m
}

/// Flat metric map: `accuracy` then `<class>/{precision,recall,f1}`.
pub fn cls_metric_map(r: &ClsReport) -> IndexMap<String, f64> {
    let mut m = IndexMap::new();
    m.insert("accuracy".into(), r.accuracy);
    for (name, s) in &r.per_class {
        m.insert(format!("{name}/precision"), s.precision);
        m.insert(format!("{name}/recall"), s.recall);
        m.insert(format!("{name}/f1"), s.f1);
    }
    m
}

fn cell(agg: &FoldAggregate, key: &str) -> String {
    agg.metrics.get(key).map_or_else(|| "-".into(), |m| m.to_string())
}

fn table(header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (label, cells) in rows {
        widths[0] = widths[0].max(label.chars().count());
        for (i, c) in cells.iter().enumerate() {
            widths[i + 1] = widths[i + 1].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", line(header.iter().map(String::as_str).collect())).unwrap();
    writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
    for (label, cells) in rows {
        let mut all = vec![label.as_str()];
        all.extend(cells.iter().map(String::as_str));
        writeln!(out, "{}", line(all)).unwrap();
    }
    out
}

/// Segmentation table: one row per method, IoU per class then mean and pixel accuracy.
pub fn seg_table(schema: LabelSchema, rows: &[(&str, &FoldAggregate)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(schema.class_names().iter().map(|s| s.to_string()));
    header.push("mIoU".into());
    header.push("Pixel acc".into());
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(label, agg)| {
            let mut cells: Vec<String> = schema.class_names().iter().map(|n| cell(agg, &format!("iou/{n}"))).collect();
            cells.push(cell(agg, "mean_iou"));
            cells.push(cell(agg, "pixel_accuracy"));
            (label.to_string(), cells)
        })
        .collect();
    table(&header, &body)
}

/// Classification table: one row per method, accuracy then P/R/F1 per diagnosis.
pub fn cls_table(rows: &[(&str, &FoldAggregate)]) -> String {
    let mut header = vec!["Method".to_string(), "Accuracy".to_string()];
    for d in Diagnosis::ALL {
        for m in ["P", "R", "F1"] {
            header.push(format!("{} {m}", d.name()));
        }
    }
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(label, agg)| {
            let mut cells = vec![cell(agg, "accuracy")];
            for d in Diagnosis::ALL {
                for m in ["precision", "recall", "f1"] {
                    cells.push(cell(agg, &format!("{}/{m}", d.name())));
                }
            }
            (label.to_string(), cells)
        })
        .collect();
    table(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{dense, sparse, to_schema};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;
    use Diagnosis::*;

    fn map(schema: LabelSchema, h: usize, w: usize, px: &[u8]) -> LabelMap {
        LabelMap::new(schema, h, w, px.to_vec()).unwrap()
    }

    fn random_map(rng: &mut SplitMix64, schema: LabelSchema, h: usize, w: usize) -> LabelMap {
        let n = schema.n_classes() as u64;
        map(schema, h, w, &(0..h * w).map(|_| rng.below(n) as u8).collect::<Vec<_>>())
    }

    #[test]
    fn identical_maps_give_diagonal() {
        let m = map(LabelSchema::Sparse, 2, 2, &[0, 1, 3, 3]);
        let c = seg_confusion(&m, &m).unwrap();
        for g in 0..4 {
            for p in 0..4 {
                assert_eq!(c.get(g, p) > 0, g == p && m.pixels().contains(&(g as u8)));
            }
        }
    }

    #[test]
    fn hand_counted_two_pixel_confusion() {
        // 1-based classes 1,2 are indices 0,1.
        let gt = map(LabelSchema::Sparse, 2, 1, &[0, 1]);
        let pred = map(LabelSchema::Sparse, 2, 1, &[1, 1]);
        let c = seg_confusion(&pred, &gt).unwrap();
        assert_eq!((c.get(0, 1), c.get(1, 1), c.total()), (1, 1, 2));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut rng = SplitMix64::new(1);
        let (a, b) = (random_map(&mut rng, LabelSchema::Dense, 3, 4), random_map(&mut rng, LabelSchema::Dense, 3, 4));
        let (pa, pb) = (random_map(&mut rng, LabelSchema::Dense, 3, 4), random_map(&mut rng, LabelSchema::Dense, 3, 4));
        let mut acc = seg_confusion(&pa, &a).unwrap();
        acc.add(&pb, &b).unwrap();
        let cat = |x: &LabelMap, y: &LabelMap| map(LabelSchema::Dense, 6, 4, &[x.pixels(), y.pixels()].concat());
        assert_eq!(acc, seg_confusion(&cat(&pa, &pb), &cat(&a, &b)).unwrap());
    }

    #[test]
    fn mismatches_are_rejected() {
        let a = map(LabelSchema::Sparse, 1, 2, &[0, 1]);
        assert!(seg_confusion(&map(LabelSchema::Sparse, 2, 1, &[0, 1]), &a).is_err());
        assert!(seg_confusion(&map(LabelSchema::Dense, 1, 2, &[0, 1]), &a).is_err());
        assert!(iou_scores(&SegConfusion::new(LabelSchema::Dense)).is_err());
    }

    #[test]
    fn half_and_half_example() {
        let gt = map(LabelSchema::Sparse, 1, 4, &[0, 0, 1, 1]);
        let pred = map(LabelSchema::Sparse, 1, 4, &[0, 0, 0, 0]);
        let s = iou_scores(&seg_confusion(&pred, &gt).unwrap()).unwrap();
        assert_eq!(s.per_class, vec![Some(0.5), Some(0.0), None, None]);
        assert_eq!((s.mean_iou, s.pixel_accuracy), (0.25, 0.5));
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(LabelSchema::Dense, 1, 3, &[0, 4, 6]);
        let s = iou_scores(&seg_confusion(&gt, &gt).unwrap()).unwrap();
        assert!(s.per_class.iter().flatten().all(|&v| v == 1.0));
        assert_eq!((s.mean_iou, s.pixel_accuracy), (1.0, 1.0));
    }

    #[test]
    fn merge_keeps_line_classes_and_joins_pleura() {
        let pred = map(LabelSchema::Dense, 1, 3, &[dense::HEALTHY_PLEURAL_LINE; 3]);
        assert_eq!(merge_dense_prediction_for_sparse_scoring(&pred).unwrap().pixels(), &[sparse::PLEURAL_LINE; 3]);
        let lines = map(LabelSchema::Dense, 1, 2, &[dense::A_LINE, dense::B_LINE]);
        assert_eq!(merge_dense_prediction_for_sparse_scoring(&lines).unwrap().pixels(), &[sparse::A_LINE, sparse::B_LINE]);
        let sparse_map = map(LabelSchema::Sparse, 1, 1, &[0]);
        assert!(merge_dense_prediction_for_sparse_scoring(&sparse_map).is_err());
    }

    #[test]
    fn merged_scoring_matches_remapped_scoring() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..20 {
            let pred = random_map(&mut rng, LabelSchema::Dense, 5, 6);
            let gt = random_map(&mut rng, LabelSchema::Dense, 5, 6);
            let sparse_gt = to_schema(&gt, LabelSchema::Sparse).unwrap();
            let merged = seg_confusion(&merge_dense_prediction_for_sparse_scoring(&pred).unwrap(), &sparse_gt).unwrap();
            let remapped = seg_confusion(&remap_dense_to_sparse(&pred).unwrap(), &remap_dense_to_sparse(&gt).unwrap()).unwrap();
            assert_eq!(merged, remapped);
        }
    }

    #[test]
    fn cls_hand_example() {
        let r = cls_report(&[Covid19, Normal, Normal], &[Covid19, Covid19, Normal]).unwrap();
        let c = &r.per_class["COVID-19"];
        assert_eq!((c.precision, c.recall), (1.0, 0.5));
        assert!((c.f1 - 2.0 / 3.0).abs() < 1e-15);
        let n = &r.per_class["Normal"];
        assert_eq!((n.precision, n.recall), (0.5, 1.0));
        assert!((n.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        // Pneumonia never appears: 0/0 ratios are 0.
        assert_eq!(r.per_class["Pneumonia"], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0 });
    }

    #[test]
    fn cls_all_correct_and_errors() {
        let all = [Normal, Pneumonia, Covid19];
        let r = cls_report(&all, &all).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.values().all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0));
        assert!(cls_report(&all, &all[..2]).is_err());
        assert!(cls_report(&[], &[]).is_err());
    }

    fn folds(vals: &[f64]) -> Vec<IndexMap<String, f64>> {
        vals.iter().map(|&v| IndexMap::from([("m".to_string(), v)])).collect()
    }

    #[test]
    fn fold_aggregate_examples() {
        let a = fold_aggregate(&folds(&[0.6, 0.8])).unwrap();
        assert!((a.metrics["m"].mean - 0.7).abs() < 1e-15);
        assert!((a.metrics["m"].std - 0.1).abs() < 1e-15);
        assert_eq!(fold_aggregate(&folds(&[0.3, 0.3, 0.3])).unwrap().metrics["m"].std, 0.0);
        assert!(fold_aggregate(&folds(&[0.3])).is_err());
        let mut uneven = folds(&[0.1, 0.2]);
        uneven[1].insert("other".into(), 1.0);
        assert!(fold_aggregate(&uneven).is_err());
    }

    #[test]
    fn tables_have_one_row_per_method() {
        let agg = fold_aggregate(&[
            seg_metric_map(LabelSchema::Sparse, &IouScores { per_class: vec![Some(0.5); 4], mean_iou: 0.5, pixel_accuracy: 0.9 }),
            seg_metric_map(LabelSchema::Sparse, &IouScores { per_class: vec![Some(0.7); 4], mean_iou: 0.7, pixel_accuracy: 0.9 }),
        ])
        .unwrap();
        let t = seg_table(LabelSchema::Sparse, &[("U-Net (sparse)", &agg)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("0.600±0.100"), "{t}");
        let r = cls_report(&[Normal], &[Normal]).unwrap();
        let agg = fold_aggregate(&[cls_metric_map(&r), cls_metric_map(&r)]).unwrap();
        assert!(cls_table(&[("Scratch", &agg)]).contains("1.000±0.000"));
    }

    proptest! {
        #[test]
        fn fold_aggregate_is_permutation_invariant(vals in proptest::collection::vec(0.0f64..1.0, 2..6), seed: u64) {
            let mut shuffled = vals.clone();
            SplitMix64::new(seed).shuffle(&mut shuffled);
            let a = fold_aggregate(&folds(&vals)).unwrap().metrics["m"];
            let b = fold_aggregate(&folds(&shuffled)).unwrap().metrics["m"];
            prop_assert!((a.mean - b.mean).abs() < 1e-12 && (a.std - b.std).abs() < 1e-12);
        }

        #[test]
        fn scores_lie_in_unit_interval(seed: u64) {
            let mut rng = SplitMix64::new(seed);
            let s = iou_scores(&seg_confusion(&random_map(&mut rng, LabelSchema::Dense, 4, 4), &random_map(&mut rng, LabelSchema::Dense, 4, 4)).unwrap()).unwrap();
            prop_assert!(s.per_class.iter().flatten().chain([&s.mean_iou, &s.pixel_accuracy]).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
