//! Detection-mAP and segmentation-mAP, plus the two score-conversion
//! procedures between sparse instance predictions and dense per-frame
//! score grids.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::geom::{tiou, Segment};
use crate::tensor::Tensor;

/// One action instance: a segment, a class, and (for predictions) a
/// ranking score. Ground-truth instances carry no score.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: Option<f64>,
}

impl ActionInstance {
    pub fn ground_truth(start: f64, end: f64, class_id: usize) -> Self {
        ActionInstance { start, end, class_id, score: None }
    }

    pub fn prediction(start: f64, end: f64, class_id: usize, score: f64) -> Self {
        ActionInstance { start, end, class_id, score: Some(score) }
    }

    pub fn segment(&self) -> Segment {
        Segment::new(self.start, self.end)
    }
}

/// Per-class mean and standard deviation of action durations, in frames.
/// The standard deviation is floored at one frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassDurationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ClassDurationStats {
    /// Computes stats from per-class duration samples. Classes without
    /// samples fall back to the global mean (or 1 frame) with unit std.
    pub fn from_durations(per_class: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = per_class.iter().flatten().cloned().collect();
        let global_mean = if all.is_empty() {
            1.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        };
        let mut mean = Vec::with_capacity(per_class.len());
        let mut std = Vec::with_capacity(per_class.len());
        for durations in per_class {
            if durations.is_empty() {
                mean.push(global_mean);
                std.push(1.0);
                continue;
            }
            let m = durations.iter().sum::<f64>() / durations.len() as f64;
            let var =
                durations.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / durations.len() as f64;
            mean.push(m);
            std.push(libm::sqrt(var).max(1.0));
        }
        ClassDurationStats { mean, std }
    }

    pub fn num_classes(&self) -> usize {
        self.mean.len()
    }
}

/// A `T' x C` grid of per-frame class scores in `[0, 1]`, with the number
/// of grid frames per normalized time unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseScores {
    pub scores: Tensor,
    pub frame_rate: f64,
}

impl DenseScores {
    pub fn new(scores: Tensor) -> Self {
        let t = scores.shape()[0];
        DenseScores { scores, frame_rate: t as f64 }
    }

    pub fn frames(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// No class has any ground-truth instance; mAP is undefined.
    NoGroundTruth,
    /// A prediction is missing its ranking score.
    MissingScore,
    /// Dense score grid and dense ground truth have different shapes.
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::NoGroundTruth => {
                write!(f, "mAP undefined: the ground truth contains no instances")
            }
            EvalError::MissingScore => write!(f, "prediction without a score"),
            EvalError::ShapeMismatch { lhs, rhs } => {
                write!(f, "dense grids disagree: {lhs:?} vs {rhs:?}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

/// The detection protocol thresholds: 0.1, 0.2, ..., 0.9.
pub fn standard_tiou_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Detection mAP per tIoU threshold plus the average over thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub thresholds: Vec<f64>,
    pub per_threshold_map: Vec<f64>,
    pub avg_map: f64,
}

impl DetectionReport {
    /// mAP at a given threshold (linear search; the list is tiny).
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.per_threshold_map[i])
    }
}

/// Average precision from ranked binary outcomes.
///
/// Outcomes must be sorted by descending score. Equal scores are collapsed
/// into a single operating point, and the precision envelope (all-point
/// interpolation) is integrated over recall.
fn ap_from_outcomes(outcomes: &[(f64, bool)], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    // PR points at distinct-score boundaries.
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < outcomes.len() {
        let score = outcomes[i].0;
        while i < outcomes.len() && outcomes[i].0 == score {
            if outcomes[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    // Precision envelope from the right.
    let mut env = points;
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k].1 = env[k].1.max(env[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in env {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Sort predictions by descending score with deterministic tie-breaking.
fn sort_preds(preds: &mut [(usize, ActionInstance, f64)]) {
    preds.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.start.partial_cmp(&b.1.start).unwrap_or(core::cmp::Ordering::Equal))
            .then_with(|| a.1.end.partial_cmp(&b.1.end).unwrap_or(core::cmp::Ordering::Equal))
    });
}

/// Instance-level detection mAP over a set of tIoU thresholds.
///
/// Predictions and ground truths are `(video_id, instance)` pairs. For each
/// class and threshold, predictions are taken in descending score order and
/// greedily matched to the not-yet-matched same-class ground truth of the
/// same video with the highest tIoU; a match at or above the threshold is a
/// true positive. AP integrates the interpolated precision-recall curve;
/// mAP averages over classes that have at least one ground truth.
pub fn detection_map(
    preds: &[(usize, ActionInstance)],
    gts: &[(usize, ActionInstance)],
    thresholds: &[f64],
) -> Result<DetectionReport, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let mut classes: Vec<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_threshold_map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut ap_sum = 0.0;
        for &class in &classes {
            let mut class_preds: Vec<(usize, ActionInstance, f64)> = Vec::new();
            for (vid, p) in preds {
                if p.class_id == class {
                    let score = p.score.ok_or(EvalError::MissingScore)?;
                    class_preds.push((*vid, p.clone(), score));
                }
            }
            sort_preds(&mut class_preds);

            let class_gts: Vec<(usize, Segment)> = gts
                .iter()
                .filter(|(_, g)| g.class_id == class)
                .map(|(vid, g)| (*vid, g.segment()))
                .collect();
            let mut matched = vec![false; class_gts.len()];

            let mut outcomes: Vec<(f64, bool)> = Vec::with_capacity(class_preds.len());
            for (vid, p, score) in &class_preds {
                let seg = p.segment();
                let mut best: Option<(usize, f64)> = None;
                for (gi, (gvid, gseg)) in class_gts.iter().enumerate() {
                    if gvid != vid || matched[gi] {
                        continue;
                    }
                    let overlap = tiou(seg, *gseg);
                    if best.map_or(true, |(_, b)| overlap > b) {
                        best = Some((gi, overlap));
                    }
                }
                match best {
                    Some((gi, overlap)) if overlap >= thr => {
                        matched[gi] = true;
                        outcomes.push((*score, true));
                    }
                    _ => outcomes.push((*score, false)),
                }
            }
            ap_sum += ap_from_outcomes(&outcomes, class_gts.len());
        }
        per_threshold_map.push(ap_sum / classes.len() as f64);
    }
    let avg_map = per_threshold_map.iter().sum::<f64>() / per_threshold_map.len().max(1) as f64;
    Ok(DetectionReport { thresholds: thresholds.to_vec(), per_threshold_map, avg_map })
}

/// Frame-level mAP: per class, every frame is an independent binary
/// example scored by `S[t][c]`; classes absent from the ground truth are
/// excluded from the mean.
pub fn segmentation_map(dense: &DenseScores, dense_gt: &Tensor) -> Result<f64, EvalError> {
    if dense.scores.shape() != dense_gt.shape() {
        return Err(EvalError::ShapeMismatch {
            lhs: dense.scores.shape().to_vec(),
            rhs: dense_gt.shape().to_vec(),
        });
    }
    let t = dense.frames();
    let c = dense.classes();
    let mut ap_sum = 0.0;
    let mut n_classes = 0usize;
    for class in 0..c {
        let mut outcomes: Vec<(f64, bool)> = Vec::with_capacity(t);
        let mut n_pos = 0usize;
        for frame in 0..t {
            let positive = dense_gt.at2(frame, class) > 0.5;
            if positive {
                n_pos += 1;
            }
            outcomes.push((dense.scores.at2(frame, class), positive));
        }
        if n_pos == 0 {
            continue;
        }
        outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        ap_sum += ap_from_outcomes(&outcomes, n_pos);
        n_classes += 1;
    }
    if n_classes == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(ap_sum / n_classes as f64)
}

/// Fuses sparse predictions into a dense score grid.
///
/// Every prediction with score above `gamma` contributes a Gaussian bump
/// per class: center at the segment midpoint, sigma equal to half the
/// duration (floored at half a frame), amplitude equal to the score. The
/// result is `beta * bumps + (1 - beta) * s`, clipped to `[0, 1]`.
pub fn sparse_to_dense(
    preds: &[ActionInstance],
    s: &DenseScores,
    beta: f64,
    gamma: f64,
) -> DenseScores {
    let t = s.frames();
    let c = s.classes();
    let mut bumps = vec![0.0; t * c];
    for p in preds {
        let score = p.score.unwrap_or(0.0);
        if score <= gamma || p.class_id >= c {
            continue;
        }
        let start_f = p.start * t as f64;
        let end_f = p.end * t as f64;
        let mid = 0.5 * (start_f + end_f);
        let sigma = (0.5 * (end_f - start_f)).max(0.5);
        for frame in 0..t {
            let x = frame as f64 + 0.5 - mid;
            bumps[frame * c + p.class_id] += score * libm::exp(-x * x / (2.0 * sigma * sigma));
        }
    }
    let mut out = Vec::with_capacity(t * c);
    for (i, base) in s.scores.data().iter().enumerate() {
        let v = beta * bumps[i] + (1.0 - beta) * base;
        out.push(v.max(0.0).min(1.0));
    }
    DenseScores {
        scores: Tensor::from_vec(vec![t, c], out).expect("same shape"),
        frame_rate: s.frame_rate,
    }
}

/// Converts dense per-frame scores to sparse instances.
///
/// Per class, frames with score at or above `bin_thresh` are binarized and
/// each maximal run of `L_f` consecutive positive frames becomes one
/// instance scored `sum(p_i) * exp(-0.01 (L_f - mean_c)^2 / std_c^2)`.
pub fn dense_to_sparse(
    dense: &DenseScores,
    stats: &ClassDurationStats,
    bin_thresh: f64,
) -> Vec<ActionInstance> {
    let t = dense.frames();
    let c = dense.classes();
    let mut out = Vec::new();
    for class in 0..c.min(stats.num_classes()) {
        let mut frame = 0;
        while frame < t {
            if dense.scores.at2(frame, class) < bin_thresh {
                frame += 1;
                continue;
            }
            let run_start = frame;
            let mut sum_p = 0.0;
            while frame < t && dense.scores.at2(frame, class) >= bin_thresh {
                sum_p += dense.scores.at2(frame, class);
                frame += 1;
            }
            let run_len = (frame - run_start) as f64;
            let d = run_len - stats.mean[class];
            let score = sum_p * libm::exp(-0.01 * d * d / (stats.std[class] * stats.std[class]));
            out.push(ActionInstance::prediction(
                run_start as f64 / t as f64,
                frame as f64 / t as f64,
                class,
                score,
            ));
        }
    }
    out
}
