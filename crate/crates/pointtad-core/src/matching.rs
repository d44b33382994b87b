//! Bipartite label assignment between query predictions and ground truths.
//!
//! The cost combines an L1 endpoint term, a tIoU term and a class
//! probability term; a shortest-augmenting-path Hungarian solver assigns
//! every ground truth to a distinct query and maps the remaining queries to
//! the no-action slot.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::eval::ActionInstance;
use crate::geom::{tiou, Segment};
use crate::loss::LossWeights;

/// Plain-value snapshot of one decoder layer used for matching. Matching is
/// computed on detached predictions; no gradient flows through it.
#[derive(Debug, Clone)]
pub struct PredictionView {
    /// Pseudo segment per query.
    pub segments: Vec<Segment>,
    /// Softmax over `C + 1` classes per query; the last slot is no-action.
    pub class_probs: Vec<Vec<f64>>,
}

/// Result of the assignment: per query, the matched ground-truth index (or
/// none for the no-action slot), plus the optimal total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn num_matched(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    /// Iterator over `(query, gt)` index pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(q, a)| a.map(|g| (q, g)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchError {
    /// More ground truths than queries; every ground truth must be assigned.
    Capacity { n_gt: usize, n_queries: usize },
    /// Ragged or inconsistent cost matrix.
    BadMatrix,
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::Capacity { n_gt, n_queries } => write!(
                f,
                "{n_gt} ground truths exceed {n_queries} queries; \
                 use smaller windows or increase the query count"
            ),
            MatchError::BadMatrix => write!(f, "cost matrix rows have inconsistent lengths"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MatchError {}

/// Mean absolute endpoint difference between two segments in normalized
/// time: `(|ds| + |de|) / 2`.
pub fn l1_endpoints(a: Segment, b: Segment) -> f64 {
    0.5 * ((a.start() - b.start()).abs() + (a.end() - b.end()).abs())
}

/// Builds the `N_q x N_g` matching cost matrix:
/// `C[n][m] = a_l1 * L1 - a_iou * tIoU - a_cls * p_n(class_m)`.
///
/// An empty ground-truth list yields a matrix of empty rows (every query
/// maps to no-action).
pub fn matching_cost(
    pred: &PredictionView,
    gt: &[ActionInstance],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let mut cost = Vec::with_capacity(pred.segments.len());
    for (seg, probs) in pred.segments.iter().zip(&pred.class_probs) {
        let mut row = Vec::with_capacity(gt.len());
        for g in gt {
            let gseg = g.segment();
            let p_class = probs.get(g.class_id).copied().unwrap_or(0.0);
            row.push(
                w.alpha_l1 * l1_endpoints(*seg, gseg) - w.alpha_iou * tiou(*seg, gseg)
                    - w.alpha_cls * p_class,
            );
        }
        cost.push(row);
    }
    cost
}

/// Minimum-cost one-to-one assignment of every column (ground truth) to a
/// distinct row (query) of an `N_q x N_g` cost matrix, `N_g <= N_q`.
///
/// Shortest-augmenting-path Hungarian solver with dual potentials; exact
/// for any finite real costs.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let n_queries = cost.len();
    let n_gt = cost.first().map_or(0, |row| row.len());
    if cost.iter().any(|row| row.len() != n_gt) {
        return Err(MatchError::BadMatrix);
    }
    if n_gt > n_queries {
        return Err(MatchError::Capacity { n_gt, n_queries });
    }
    if n_gt == 0 {
        return Ok(MatchResult { assignment: vec![None; n_queries], total_cost: 0.0 });
    }

    // Solve with rows = ground truths (n), columns = queries (m), n <= m.
    // 1-based arrays; p[j] is the row assigned to column j (0 = free).
    let n = n_gt;
    let m = n_queries;
    let at = |i: usize, j: usize| cost[j - 1][i - 1]; // transposed access
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; n_queries];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[j - 1] = Some(p[j] - 1);
        }
    }
    // Sum in ground-truth order so the total is bit-for-bit reproducible.
    let mut query_of_gt = vec![0usize; n_gt];
    for (q, a) in assignment.iter().enumerate() {
        if let Some(gi) = a {
            query_of_gt[*gi] = q;
        }
    }
    let total_cost = (0..n_gt).map(|gi| cost[query_of_gt[gi]][gi]).sum();
    Ok(MatchResult { assignment, total_cost })
}
