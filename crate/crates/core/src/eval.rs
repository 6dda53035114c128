//! Detection accuracy metrics: IoU-thresholded TP/FP assignment,
//! cumulative precision/recall and 11-point interpolated average precision.
//!
//! Matching follows the PASCAL VOC convention. Detections are visited in
//! descending score order (stable, so equal scores keep input order). Each
//! detection looks up the same-class ground-truth box in its image with the
//! highest IoU; it is a true positive when that IoU is at or above the
//! threshold and the box has not been claimed yet, otherwise a false
//! positive.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detect::ClassLabel;
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("class `{0}` is not in the ground-truth registry")]
    UnknownClass(String),
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("{detections} detections but no ground truth to measure recall against")]
    NoGroundTruth { detections: usize },
    #[error("IoU threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

/// Ground-truth boxes per image plus the set of known classes.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthSet {
    images: BTreeMap<String, Vec<(ClassLabel, BBox)>>,
    classes: BTreeSet<ClassLabel>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a class even if no box of it is present.
    pub fn register_class(&mut self, label: ClassLabel) {
        self.classes.insert(label);
    }

    /// Declares an image with its boxes; each image may be declared once.
    pub fn add_image(
        &mut self,
        image: &str,
        boxes: Vec<(ClassLabel, BBox)>,
    ) -> Result<(), EvalError> {
        if self.images.contains_key(image) {
            return Err(EvalError::DuplicateImage(image.into()));
        }
        for (l, _) in &boxes {
            self.classes.insert(l.clone());
        }
        self.images.insert(image.into(), boxes);
        Ok(())
    }

    /// Appends one box, creating the image entry if needed.
    pub fn push(&mut self, image: &str, label: ClassLabel, bbox: BBox) {
        self.classes.insert(label.clone());
        self.images.entry(image.into()).or_default().push((label, bbox));
    }

    pub fn classes(&self) -> &BTreeSet<ClassLabel> {
        &self.classes
    }

    pub fn boxes(&self, image: &str) -> &[(ClassLabel, BBox)] {
        self.images.get(image).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Number of ground-truth boxes of `label` across all images.
    pub fn count(&self, label: &ClassLabel) -> usize {
        self.images
            .values()
            .flat_map(|v| v.iter())
            .filter(|(l, _)| l == label)
            .count()
    }
}

/// A prediction on one evaluation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub image: String,
    pub label: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FP")]
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assigned {
    /// Index into the input slice.
    pub detection: usize,
    pub label: ClassLabel,
    pub score: f64,
    pub outcome: Outcome,
    /// Best IoU against same-class ground truth in the image (0 if none).
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Detections in descending score order with their outcome.
    pub items: Vec<Assigned>,
    /// Ground-truth boxes per class.
    pub total_gt: BTreeMap<ClassLabel, usize>,
    /// Unclaimed ground-truth boxes per class.
    pub false_negatives: BTreeMap<ClassLabel, usize>,
}

impl Assignment {
    /// Items of one class, still in descending score order.
    pub fn outcomes_for(&self, label: &ClassLabel) -> Vec<Outcome> {
        self.items
            .iter()
            .filter(|a| &a.label == label)
            .map(|a| a.outcome)
            .collect()
    }

    pub fn total_gt_for(&self, label: &ClassLabel) -> usize {
        self.total_gt.get(label).copied().unwrap_or(0)
    }
}

/// Stable descending-score order of `detections`.
pub fn score_order(detections: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    order
}

pub fn assign_tp_fp(
    detections: &[ScoredDetection],
    gt: &GroundTruthSet,
    iou_threshold: f64,
) -> Result<Assignment, EvalError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    if let Some(d) = detections.iter().find(|d| !gt.classes.contains(&d.label)) {
        return Err(EvalError::UnknownClass(d.label.as_str().into()));
    }
    let mut claimed: BTreeMap<&str, Vec<bool>> = gt
        .images
        .iter()
        .map(|(k, v)| (k.as_str(), alloc::vec![false; v.len()]))
        .collect();
    let mut items = Vec::with_capacity(detections.len());
    for i in score_order(detections) {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (label, b)) in gt.boxes(&d.image).iter().enumerate() {
            if label != &d.label {
                continue;
            }
            let v = iou(&d.bbox, b);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        let (outcome, best_iou) = match best {
            Some((gi, v)) if v >= iou_threshold && v > 0.0 => {
                let slot = &mut claimed.get_mut(d.image.as_str()).expect("image has boxes")[gi];
                if *slot {
                    (Outcome::FalsePositive, v)
                } else {
                    *slot = true;
                    (Outcome::TruePositive, v)
                }
            }
            Some((_, v)) => (Outcome::FalsePositive, v),
            None => (Outcome::FalsePositive, 0.0),
        };
        items.push(Assigned {
            detection: i,
            label: d.label.clone(),
            score: d.score,
            outcome,
            iou: best_iou,
        });
    }

    let mut total_gt = BTreeMap::new();
    let mut false_negatives = BTreeMap::new();
    for label in &gt.classes {
        total_gt.insert(label.clone(), 0);
        false_negatives.insert(label.clone(), 0);
    }
    for (image, boxes) in &gt.images {
        let used = &claimed[image.as_str()];
        for ((label, _), &hit) in boxes.iter().zip(used) {
            *total_gt.get_mut(label).expect("registered") += 1;
            if !hit {
                *false_negatives.get_mut(label).expect("registered") += 1;
            }
        }
    }
    Ok(Assignment {
        items,
        total_gt,
        false_negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    /// Score of the detection that closes this prefix.
    pub score_at: f64,
}

/// Cumulative precision and recall after each detection. `outcomes` must be
/// in descending score order; `scores` aligned with it.
pub fn precision_recall(
    outcomes: &[Outcome],
    scores: &[f64],
    total_gt: usize,
) -> Result<Vec<PrPoint>, EvalError> {
    if total_gt == 0 && !outcomes.is_empty() {
        return Err(EvalError::NoGroundTruth {
            detections: outcomes.len(),
        });
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(outcomes
        .iter()
        .zip(scores)
        .map(|(o, &s)| {
            match o {
                Outcome::TruePositive => tp += 1,
                Outcome::FalsePositive => fp += 1,
            }
            PrPoint {
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
                tp,
                fp,
                score_at: s,
            }
        })
        .collect())
}

/// The recall levels 0, 0.1, ..., 1.
pub fn recall_levels() -> [f64; 11] {
    core::array::from_fn(|i| i as f64 / 10.0)
}

/// Interpolated precision at `level`: the best precision among points with
/// recall at or above the level, 0 if none reach it.
pub fn interpolated_precision(curve: &[PrPoint], level: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.recall >= level)
        .map(|p| p.precision)
        .fold(0.0, f64::max)
}

/// 11-point interpolated average precision.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    recall_levels()
        .iter()
        .map(|&r| interpolated_precision(curve, r))
        .sum::<f64>()
        / 11.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub total_gt: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class: ClassLabel,
    pub iou_threshold: f64,
    pub ap: f64,
    pub pr_curve: Vec<PrPoint>,
    pub counts: Counts,
}

/// Per-class report at one IoU threshold. Classes without ground truth are
/// skipped (recall is undefined for them).
pub fn evaluate_at(
    detections: &[ScoredDetection],
    gt: &GroundTruthSet,
    iou_threshold: f64,
) -> Result<Vec<EvalReport>, EvalError> {
    let assignment = assign_tp_fp(detections, gt, iou_threshold)?;
    let mut reports = Vec::new();
    for label in gt.classes() {
        let total = assignment.total_gt_for(label);
        if total == 0 {
            continue;
        }
        let (outcomes, scores): (Vec<Outcome>, Vec<f64>) = assignment
            .items
            .iter()
            .filter(|a| &a.label == label)
            .map(|a| (a.outcome, a.score))
            .unzip();
        let curve = precision_recall(&outcomes, &scores, total)?;
        let tp = outcomes.iter().filter(|o| **o == Outcome::TruePositive).count();
        reports.push(EvalReport {
            class: label.clone(),
            iou_threshold,
            ap: average_precision(&curve),
            counts: Counts {
                total_gt: total,
                detections: outcomes.len(),
                tp,
                fp: outcomes.len() - tp,
                fn_: assignment.false_negatives[label],
            },
            pr_curve: curve,
        });
    }
    Ok(reports)
}

/// Mean of per-class AP, `None` for an empty set.
pub fn mean_average_precision(reports: &[&EvalReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| r.ap).sum::<f64>() / reports.len() as f64)
}
