//! The training objective: localization loss, classification loss (set
//! prediction plus dense per-frame supervision) and the layer-summed total
//! with per-layer Hungarian re-matching.

use alloc::vec::Vec;
use core::fmt;

use crate::eval::ActionInstance;
use crate::geom::Segment;
use crate::graph::{Graph, Var};
use crate::matching::{hungarian_assign, matching_cost, MatchError, MatchResult, PredictionView};
use crate::tensor::{Tensor, TensorError};

/// Matching-cost weights (alpha) and loss weights (lambda).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub alpha_l1: f64,
    pub alpha_iou: f64,
    pub alpha_cls: f64,
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_l1: 5.0,
            alpha_iou: 5.0,
            alpha_cls: 10.0,
            lambda_loc: 5.0,
            lambda_cls: 10.0,
            lambda_seg: 1.0,
        }
    }
}

/// Graph handles for one decoder layer's predictions.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `N_q x (C + 1)` class logits; the last column is no-action.
    pub class_logits: Var,
    /// Pseudo-segment start per query (scalar nodes).
    pub seg_starts: Vec<Var>,
    /// Pseudo-segment end per query (scalar nodes).
    pub seg_ends: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    Tensor(TensorError),
    Match(MatchError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::Tensor(e) => write!(f, "{e}"),
            LossError::Match(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

impl From<MatchError> for LossError {
    fn from(e: MatchError) -> Self {
        LossError::Match(e)
    }
}

/// Detached plain-value snapshot of a layer for the matcher: pseudo
/// segments and softmax class probabilities (no gradient flows through).
pub fn prediction_view(g: &Graph, layer: &LayerPrediction) -> PredictionView {
    let logits = g.value(layer.class_logits);
    let n_q = logits.shape()[0];
    let width = logits.shape()[1];
    let mut class_probs: Vec<Vec<f64>> = Vec::with_capacity(n_q);
    for q in 0..n_q {
        let row = logits.row(q);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
        let total: f64 = exps.iter().sum();
        class_probs.push(exps.iter().map(|e| e / total).collect());
    }
    debug_assert_eq!(width, class_probs[0].len());
    let segments = layer
        .seg_starts
        .iter()
        .zip(&layer.seg_ends)
        .map(|(s, e)| {
            Segment::new(
                g.value(*s).item().expect("segment start is scalar"),
                g.value(*e).item().expect("segment end is scalar"),
            )
        })
        .collect();
    PredictionView { segments, class_probs }
}

/// Differentiable tIoU of a predicted segment (scalar nodes) against a
/// constant ground-truth segment. A degenerate union yields a constant 0,
/// keeping gradients finite while the L1 term still steers the points.
pub fn segment_tiou(
    g: &mut Graph,
    pred: (Var, Var),
    gt: Segment,
) -> Result<Var, TensorError> {
    let gs = g.scalar(gt.start());
    let ge = g.scalar(gt.end());
    let lo = g.max2(pred.0, gs)?;
    let hi = g.min2(pred.1, ge)?;
    let raw = g.sub(hi, lo)?;
    let inter = g.relu(raw);
    let pred_len = g.sub(pred.1, pred.0)?;
    let lens = g.offset(pred_len, gt.length());
    let union = g.sub(lens, inter)?;
    if g.value(union).item()? <= 1e-12 {
        return Ok(g.scalar(0.0));
    }
    g.div(inter, union)
}

/// Localization loss of one layer (Eq.-level: `L1 + (1 - tIoU)` per matched
/// query, averaged over matched queries). Zero when nothing is matched.
pub fn localization_loss(
    g: &mut Graph,
    pred: &LayerPrediction,
    gt: &[ActionInstance],
    matched: &MatchResult,
) -> Result<Var, TensorError> {
    let mut terms: Vec<Var> = Vec::new();
    for (q, gi) in matched.pairs() {
        let gseg = gt[gi].segment();
        let (s, e) = (pred.seg_starts[q], pred.seg_ends[q]);
        // L1 = (|ds| + |de|) / 2
        let ds_raw = g.offset(s, -gseg.start());
        let ds = g.abs(ds_raw);
        let de_raw = g.offset(e, -gseg.end());
        let de = g.abs(de_raw);
        let l1_sum = g.add(ds, de)?;
        let l1 = g.scale(l1_sum, 0.5);
        let overlap = segment_tiou(g, (s, e), gseg)?;
        let neg = g.neg(overlap);
        let one_minus = g.offset(neg, 1.0);
        let term = g.add(l1, one_minus)?;
        terms.push(term);
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let n = terms.len() as f64;
    let mut flat = Vec::with_capacity(terms.len());
    for t in terms {
        flat.push(g.reshape(t, &[1])?);
    }
    let stacked = g.concat(&flat, 0)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / n))
}

/// Classification loss of one layer: cross-entropy of every query's
/// `C + 1` softmax against its assigned class (no-action for unmatched
/// queries), averaged over all queries; plus, when the dense pair is given,
/// `lambda_seg` times the per-frame binary cross-entropy.
pub fn classification_loss(
    g: &mut Graph,
    pred: &LayerPrediction,
    gt: &[ActionInstance],
    matched: &MatchResult,
    dense: Option<(Var, &Tensor)>,
    w: &LossWeights,
) -> Result<Var, TensorError> {
    let shape = g.value(pred.class_logits).shape().to_vec();
    let (n_q, width) = (shape[0], shape[1]);
    let no_action = width - 1;
    let log_probs = g.log_softmax(pred.class_logits, 1)?;
    let mut indices = Vec::with_capacity(n_q);
    for q in 0..n_q {
        let target = matched.assignment[q].map_or(no_action, |gi| gt[gi].class_id);
        indices.push(q * width + target);
    }
    let picked = g.gather(log_probs, &indices)?;
    let picked_mean = g.mean(picked);
    let mut loss = g.neg(picked_mean);
    if let Some((dense_logits, dense_gt)) = dense {
        let seg = g.bce_with_logits_mean(dense_logits, dense_gt)?;
        let seg_scaled = g.scale(seg, w.lambda_seg);
        loss = g.add(loss, seg_scaled)?;
    }
    Ok(loss)
}

/// Scalar components of the assembled objective, for logging.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    /// Sum over layers of the localization term (unweighted).
    pub loc_value: f64,
    /// Sum over layers of the query classification term (unweighted).
    pub cls_value: f64,
    /// Dense per-frame BCE (unweighted), counted once.
    pub seg_value: f64,
    /// Per-layer assignments, in layer order.
    pub assignments: Vec<MatchResult>,
}

/// Assembles the full objective with Hungarian matching recomputed per
/// layer; the dense term is attached to the final layer only.
pub fn total_loss(
    g: &mut Graph,
    layers: &[LayerPrediction],
    gt: &[ActionInstance],
    dense: (Var, &Tensor),
    w: &LossWeights,
) -> Result<TotalLoss, LossError> {
    let mut assignments = Vec::with_capacity(layers.len());
    for layer in layers {
        let view = prediction_view(g, layer);
        let cost = matching_cost(&view, gt, w);
        assignments.push(hungarian_assign(&cost)?);
    }
    total_loss_with_assignments(g, layers, gt, dense, w, &assignments)
}

/// Same objective with externally fixed assignments. Used by the
/// finite-difference end-to-end check, where the discrete matching step
/// must be frozen across perturbed evaluations.
pub fn total_loss_with_assignments(
    g: &mut Graph,
    layers: &[LayerPrediction],
    gt: &[ActionInstance],
    dense: (Var, &Tensor),
    w: &LossWeights,
    assignments: &[MatchResult],
) -> Result<TotalLoss, LossError> {
    let mut total: Option<Var> = None;
    let mut loc_value = 0.0;
    let mut cls_value = 0.0;
    let mut seg_value = 0.0;
    let last = layers.len() - 1;
    for (li, (layer, matched)) in layers.iter().zip(assignments).enumerate() {
        let loc = localization_loss(g, layer, gt, matched)?;
        loc_value += g.value(loc).item()?;
        let dense_here = if li == last { Some((dense.0, dense.1)) } else { None };
        let cls = classification_loss(g, layer, gt, matched, dense_here, w)?;
        if li == last {
            let bce = g.bce_with_logits_mean(dense.0, dense.1)?;
            let seg = g.value(bce).item()?;
            seg_value = seg;
            cls_value += g.value(cls).item()? - w.lambda_seg * seg;
        } else {
            cls_value += g.value(cls).item()?;
        }
        let loc_w = g.scale(loc, w.lambda_loc);
        let cls_w = g.scale(cls, w.lambda_cls);
        let layer_total = g.add(loc_w, cls_w)?;
        total = Some(match total {
            Some(t) => g.add(t, layer_total)?,
            None => layer_total,
        });
    }
    let total = total.expect("at least one layer");
    Ok(TotalLoss {
        total,
        loc_value,
        cls_value,
        seg_value,
        assignments: assignments.to_vec(),
    })
}
