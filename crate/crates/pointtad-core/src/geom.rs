//! Temporal intervals, query point sets, and the self-paced refinement rule.
//!
//! All functions here are pure and operate on plain values; the decoder
//! replays the same arithmetic through the autodiff graph so that gradients
//! reach the point parameters.

use alloc::vec::Vec;

/// Lower clamp bound for refined query points: half a window before the clip.
pub const POINT_MIN: f64 = -0.5;
/// Upper clamp bound for refined query points: half a window past the clip.
pub const POINT_MAX: f64 = 1.5;

/// A closed interval in normalized clip time with `start <= end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    /// Orders the endpoints so the invariant holds for any input pair.
    pub fn new(a: f64, b: f64) -> Self {
        if a <= b {
            Segment { start: a, end: b }
        } else {
            Segment { start: b, end: a }
        }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Temporal intersection-over-union of two segments.
///
/// Returns 0 when the union has zero length (both segments degenerate and
/// coincident included), so degenerate intermediates stay finite.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Number of "local" points for a point set of size `n_s`: ceil(2/3 * n_s).
pub fn local_point_count(n_s: usize) -> usize {
    (2 * n_s).div_ceil(3)
}

/// The query points of one query: `n_s` normalized times plus a fixed mask
/// marking the local subset used by the partial min-max transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<f64>,
    local_mask: Vec<bool>,
}

impl PointSet {
    /// Builds a point set with the canonical mask: the first
    /// `ceil(2/3 * n)` indices are local. The mask is fixed across layers
    /// and across training/inference so predictions stay deterministic.
    pub fn with_canonical_mask(points: Vec<f64>) -> Self {
        let k = local_point_count(points.len());
        let local_mask = (0..points.len()).map(|i| i < k).collect();
        PointSet { points, local_mask }
    }

    /// Builds a point set with an explicit mask (mainly for tests).
    pub fn with_mask(points: Vec<f64>, local_mask: Vec<bool>) -> Self {
        debug_assert_eq!(points.len(), local_mask.len());
        PointSet { points, local_mask }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn local_mask(&self) -> &[bool] {
        &self.local_mask
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Span of the point set: max - min.
    pub fn span(&self) -> f64 {
        let (lo, hi) = min_max(&self.points);
        hi - lo
    }

    /// Min-max transform: the tightest segment containing every point.
    pub fn minmax_transform(&self) -> Segment {
        let (lo, hi) = min_max(&self.points);
        Segment::new(lo, hi)
    }

    /// Partial min-max transform: min/max over the local subset only.
    pub fn partial_minmax_transform(&self) -> Segment {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (p, m) in self.points.iter().zip(&self.local_mask) {
            if *m {
                lo = lo.min(*p);
                hi = hi.max(*p);
            }
        }
        debug_assert!(lo.is_finite(), "local mask must select at least one point");
        Segment::new(lo, hi)
    }

    /// Self-paced refinement: `t' = t + delta * span * 0.5`, clamped to
    /// `[POINT_MIN, POINT_MAX]`. A zero-span point set is a fixed point.
    pub fn refine(&self, deltas: &[f64]) -> PointSet {
        debug_assert_eq!(deltas.len(), self.points.len());
        let s = self.span();
        let points = self
            .points
            .iter()
            .zip(deltas)
            .map(|(t, d)| (t + d * s * 0.5).max(POINT_MIN).min(POINT_MAX))
            .collect();
        PointSet { points, local_mask: self.local_mask.clone() }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    debug_assert!(!values.is_empty());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    (lo, hi)
}
