//! The action decoder: a synthetic feature encoder, stacked layers of
//! inter-query self-attention plus the multi-level interactive module
//! (deformable point sampling and query-conditioned frame/channel mixing),
//! and the prediction heads with iterative point refinement.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::geom::{local_point_count, PointSet, Segment, POINT_MAX, POINT_MIN};
use crate::graph::{Graph, Var};
use crate::loss::LayerPrediction;
use crate::nn::{GraphParams, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// How a query localizes its action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Representation {
    /// Learnable query points with deformable sampling (the full model).
    Points,
    /// Segment baseline: uniform bin-center sampling over a start/end pair
    /// (temporal RoI align with one sample per bin).
    SegmentRoi,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub n_points: usize,
    pub n_layers: usize,
    pub d: usize,
    pub d_prime: usize,
    pub n_heads: usize,
    pub n_subpoints: usize,
    pub n_classes: usize,
    /// Width of the raw observation sequence fed to the encoder.
    pub feature_width: usize,
    /// Temporal stride applied after the encoder stack.
    pub stride: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_representation"))]
    pub representation: Representation,
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub frame_mixing: bool,
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub channel_mixing: bool,
}

#[cfg(feature = "serde")]
fn default_representation() -> Representation {
    Representation::Points
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl DecoderConfig {
    /// Small configuration for desk-scale experiments and tests.
    pub fn desk(n_classes: usize, feature_width: usize) -> Self {
        DecoderConfig {
            n_queries: 8,
            n_points: 7,
            n_layers: 2,
            d: 64,
            d_prime: 16,
            n_heads: 4,
            n_subpoints: 4,
            n_classes,
            feature_width,
            stride: 1,
            representation: Representation::Points,
            frame_mixing: true,
            channel_mixing: true,
        }
    }

    /// Full-scale configuration matching the published protocol
    /// (48 queries, 21 points per query, 4 layers, 4 sub-points).
    pub fn paper(n_classes: usize, feature_width: usize) -> Self {
        DecoderConfig {
            n_queries: 48,
            n_points: 21,
            n_layers: 4,
            d: 256,
            d_prime: 64,
            n_heads: 8,
            n_subpoints: 4,
            n_classes,
            feature_width,
            stride: 4,
            representation: Representation::Points,
            frame_mixing: true,
            channel_mixing: true,
        }
    }

    /// Tiny configuration used by the end-to-end gradient check.
    pub fn tiny(n_classes: usize, feature_width: usize) -> Self {
        DecoderConfig {
            n_queries: 2,
            n_points: 3,
            n_layers: 1,
            d: 8,
            d_prime: 4,
            n_heads: 2,
            n_subpoints: 2,
            n_classes,
            feature_width,
            stride: 1,
            representation: Representation::Points,
            frame_mixing: true,
            channel_mixing: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_queries < 1 {
            return Err(ConfigError::new("n_queries must be at least 1"));
        }
        if self.n_points < 2 {
            return Err(ConfigError::new("n_points must be at least 2"));
        }
        if self.n_layers < 1 {
            return Err(ConfigError::new("n_layers must be at least 1"));
        }
        if self.d == 0 || self.d % self.n_heads != 0 {
            return Err(ConfigError::new("d must be a positive multiple of n_heads"));
        }
        if self.d_prime > self.d || self.d_prime == 0 {
            return Err(ConfigError::new("d_prime must be in [1, d]"));
        }
        if self.n_subpoints < 1 {
            return Err(ConfigError::new("n_subpoints must be at least 1"));
        }
        if self.n_classes < 1 {
            return Err(ConfigError::new("n_classes must be at least 1"));
        }
        if self.stride < 1 {
            return Err(ConfigError::new("stride must be at least 1"));
        }
        if !self.frame_mixing && !self.channel_mixing {
            return Err(ConfigError::new("at least one mixing branch must be enabled"));
        }
        Ok(())
    }

    /// Width of the flattened mixed features entering the output projection.
    fn mix_width(&self) -> usize {
        let branches = usize::from(self.frame_mixing) + usize::from(self.channel_mixing);
        branches * self.n_points * self.d
    }

    /// State columns per query: point count, or two segment endpoints.
    fn state_width(&self) -> usize {
        match self.representation {
            Representation::Points => self.n_points,
            Representation::SegmentRoi => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(&'static str);

impl ConfigError {
    fn new(msg: &'static str) -> Self {
        ConfigError(msg)
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid decoder config: {}", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

/// Encoded observation sequence inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSequence {
    pub x: Var,
    pub frames: usize,
    /// Feature-index units per normalized time unit: index = t * frame_rate.
    pub frame_rate: f64,
}

/// Plain-value outputs of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub class_logits: Tensor,
    pub pseudo_segments: Vec<Segment>,
    pub points: Vec<PointSet>,
}

/// Graph handles produced by a full forward pass.
pub struct ForwardOutput {
    /// Per-layer prediction handles for the loss.
    pub layer_preds: Vec<LayerPrediction>,
    /// Per-layer query state (`N_q x state_width` tensors), layer order.
    pub layer_states: Vec<Var>,
    /// The initial query state node.
    pub init_state: Var,
    /// Dense per-frame class logits, `T' x C`.
    pub dense_logits: Var,
    pub features: FeatureSequence,
    pub params: GraphParams,
}

impl ForwardOutput {
    /// Materializes spec-level layer outputs (logits, pseudo segments,
    /// point sets) from the graph.
    pub fn layer_outputs(&self, g: &Graph, cfg: &DecoderConfig) -> Vec<LayerOutput> {
        self.layer_preds
            .iter()
            .zip(&self.layer_states)
            .map(|(pred, state)| {
                let class_logits = g.value(pred.class_logits).clone();
                let pseudo_segments = pred
                    .seg_starts
                    .iter()
                    .zip(&pred.seg_ends)
                    .map(|(s, e)| {
                        Segment::new(
                            g.value(*s).item().expect("scalar"),
                            g.value(*e).item().expect("scalar"),
                        )
                    })
                    .collect();
                let points = state_to_point_sets(g.value(*state), cfg);
                LayerOutput { class_logits, pseudo_segments, points }
            })
            .collect()
    }

    /// Query points per layer, including the initial state (so there are
    /// `L + 1` snapshots).
    pub fn points_per_layer(&self, g: &Graph, cfg: &DecoderConfig) -> Vec<Vec<PointSet>> {
        let mut out = Vec::with_capacity(self.layer_states.len() + 1);
        out.push(state_to_point_sets(g.value(self.init_state), cfg));
        for state in &self.layer_states {
            out.push(state_to_point_sets(g.value(*state), cfg));
        }
        out
    }
}

fn state_to_point_sets(state: &Tensor, cfg: &DecoderConfig) -> Vec<PointSet> {
    let n_q = state.shape()[0];
    (0..n_q)
        .map(|q| {
            let row = state.row(q);
            match cfg.representation {
                Representation::Points => PointSet::with_canonical_mask(row.to_vec()),
                Representation::SegmentRoi => {
                    // bin centers of the segment, canonical mask
                    let (s, e) = (row[0], row[1]);
                    let pts = (0..cfg.n_points)
                        .map(|i| s + (i as f64 + 0.5) / cfg.n_points as f64 * (e - s))
                        .collect();
                    PointSet::with_canonical_mask(pts)
                }
            }
        })
        .collect()
}

struct DecoderLayer {
    attn: MultiHeadAttention,
    offset_head: Linear,
    weight_head: Linear,
    frame_mix_head: Option<Linear>,
    channel_mix_head1: Option<Linear>,
    channel_mix_head2: Option<Linear>,
    frame_norm: Option<LayerNorm>,
    channel_norm1: Option<LayerNorm>,
    channel_norm2: Option<LayerNorm>,
    out_proj: Linear,
    class_head: Linear,
    refine_head: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, cfg: &DecoderConfig, li: usize, rng: &mut ChaCha20Rng) -> Self {
        let p = format!("layers.{li}");
        let d = cfg.d;
        let attn = MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.n_heads, rng);

        // Deformable heads: offset weights zeroed with biases 1..n_subpoints,
        // weight head fully zeroed (uniform softmax).
        let offset_head = Linear::new_zeroed(store, &format!("{p}.offsets"), d, cfg.n_subpoints);
        let bias = (1..=cfg.n_subpoints).map(|k| k as f64).collect::<Vec<_>>();
        store.get_mut(offset_head.b).value = Tensor::vector(&bias);
        let weight_head = Linear::new_zeroed(store, &format!("{p}.weights"), d, cfg.n_subpoints);

        let n_s = cfg.n_points;
        let (frame_mix_head, frame_norm) = if cfg.frame_mixing {
            (
                Some(Linear::new(store, &format!("{p}.mix_f"), d, n_s * n_s, rng)),
                Some(LayerNorm::new(store, &format!("{p}.norm_f"), n_s)),
            )
        } else {
            (None, None)
        };
        let (channel_mix_head1, channel_mix_head2, channel_norm1, channel_norm2) =
            if cfg.channel_mixing {
                (
                    Some(Linear::new(store, &format!("{p}.mix_c1"), d, d * cfg.d_prime, rng)),
                    Some(Linear::new(store, &format!("{p}.mix_c2"), d, cfg.d_prime * d, rng)),
                    Some(LayerNorm::new(store, &format!("{p}.norm_c1"), cfg.d_prime)),
                    Some(LayerNorm::new(store, &format!("{p}.norm_c2"), d)),
                )
            } else {
                (None, None, None, None)
            };

        let out_proj = Linear::new(store, &format!("{p}.out_proj"), cfg.mix_width(), d, rng);
        let class_head = Linear::new(store, &format!("{p}.class_head"), d, cfg.n_classes + 1, rng);
        // Zero-initialized refinement keeps points at their start positions
        // until gradients move them.
        let refine_head =
            Linear::new_zeroed(store, &format!("{p}.refine_head"), d, cfg.state_width());

        DecoderLayer {
            attn,
            offset_head,
            weight_head,
            frame_mix_head,
            channel_mix_head1,
            channel_mix_head2,
            frame_norm,
            channel_norm1,
            channel_norm2,
            out_proj,
            class_head,
            refine_head,
        }
    }

    /// Deformable point feature (points representation): predicts sub-point
    /// offsets (feature-index units) and softmax weights from the query row,
    /// interpolates each sub-point and returns the weighted sum.
    fn point_feature(
        &self,
        g: &mut Graph,
        x: &FeatureSequence,
        t_index: Var,
        offsets: Var,
        weights: Var,
        n_subpoints: usize,
    ) -> Result<Var, TensorError> {
        let t_index = g.reshape(t_index, &[1])?;
        let mut acc: Option<Var> = None;
        for k in 0..n_subpoints {
            let o_k = g.gather(offsets, &[k])?;
            let t_k = g.add(t_index, o_k)?;
            let feat = g.bilinear_interp_1d(x.x, t_k)?;
            let w_k = g.gather(weights, &[k])?;
            let weighted = g.mul_scalar(feat, w_k)?;
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok(acc.expect("n_subpoints >= 1"))
    }

    /// Instance-level adaptive mixing (frame and channel branches in
    /// parallel), flattened, projected back to the query width and added
    /// residually to the query row.
    fn adaptive_mix(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        cfg: &DecoderConfig,
        x: Var,
        q_row: Var,
    ) -> Result<Var, TensorError> {
        let n_s = cfg.n_points;
        let d = cfg.d;
        let mut branches: Vec<Var> = Vec::new();

        if let (Some(head), Some(norm)) = (&self.frame_mix_head, &self.frame_norm) {
            let mf_flat = head.forward_vec(g, p, q_row)?;
            let mf = g.reshape(mf_flat, &[n_s, n_s])?;
            let xt = g.transpose(x)?; // D x N_s
            let mixed = g.matmul(xt, mf)?; // D x N_s
            let normed = norm.forward(g, p, mixed, 1)?;
            let active = g.relu(normed);
            branches.push(g.transpose(active)?); // N_s x D
        }
        if let (Some(h1), Some(h2), Some(n1), Some(n2)) = (
            &self.channel_mix_head1,
            &self.channel_mix_head2,
            &self.channel_norm1,
            &self.channel_norm2,
        ) {
            let mc1_flat = h1.forward_vec(g, p, q_row)?;
            let mc1 = g.reshape(mc1_flat, &[d, cfg.d_prime])?;
            let mc2_flat = h2.forward_vec(g, p, q_row)?;
            let mc2 = g.reshape(mc2_flat, &[cfg.d_prime, d])?;
            let inner = g.matmul(x, mc1)?; // N_s x D'
            let inner_n = n1.forward(g, p, inner, 1)?;
            let inner_a = g.relu(inner_n);
            let outer = g.matmul(inner_a, mc2)?; // N_s x D
            let outer_n = n2.forward(g, p, outer, 1)?;
            branches.push(g.relu(outer_n));
        }

        let merged = if branches.len() == 1 { branches[0] } else { g.concat(&branches, 1)? };
        let flat = g.reshape(merged, &[1, cfg.mix_width()])?;
        let squeezed = self.out_proj.forward(g, p, flat)?;
        let out_vec = g.reshape(squeezed, &[d])?;
        g.add(q_row, out_vec)
    }
}

/// The full detector: encoder, decoder layers, and prediction heads.
pub struct PointTadModel {
    pub config: DecoderConfig,
    pub params: ParamStore,
    encoder1: Linear,
    encoder2: Linear,
    layers: Vec<DecoderLayer>,
    dense_head: Linear,
    init_queries: ParamId,
    init_state: ParamId,
}

impl PointTadModel {
    /// Builds a model with the published initialization recipe: query
    /// points at constant 0.5, deformable offset biases `1..n_subpoints`,
    /// zeroed deformable-weight and refinement heads.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let encoder1 =
            Linear::new(&mut store, "encoder.lin1", config.feature_width, config.d, &mut rng);
        let encoder2 = Linear::new(&mut store, "encoder.lin2", config.d, config.d, &mut rng);

        let init_queries = store.add(
            "init.queries",
            crate::nn::normal(&mut rng, &[config.n_queries, config.d], 1.0),
        );
        let init_state_value = match config.representation {
            Representation::Points => {
                Tensor::full(&[config.n_queries, config.n_points], 0.5)
            }
            Representation::SegmentRoi => {
                let mut t = Tensor::zeros(&[config.n_queries, 2]);
                for q in 0..config.n_queries {
                    t.data_mut()[q * 2] = 0.25;
                    t.data_mut()[q * 2 + 1] = 0.75;
                }
                t
            }
        };
        let init_state = store.add("init.state", init_state_value);

        let layers = (0..config.n_layers)
            .map(|li| DecoderLayer::new(&mut store, &config, li, &mut rng))
            .collect();

        let dense_head = Linear::new(&mut store, "dense_head", config.d, config.n_classes, &mut rng);

        Ok(PointTadModel {
            config,
            params: store,
            encoder1,
            encoder2,
            layers,
            dense_head,
            init_queries,
            init_state,
        })
    }

    /// Two affine+ReLU layers followed by temporal striding.
    pub fn encode_features(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        raw: &Tensor,
    ) -> Result<FeatureSequence, TensorError> {
        if raw.rank() != 2 || raw.shape()[1] != self.config.feature_width {
            return Err(TensorError::ShapeMismatch {
                op: "encode_features",
                lhs: raw.shape().to_vec(),
                rhs: vec![raw.shape().first().copied().unwrap_or(0), self.config.feature_width],
            });
        }
        let input = g.constant(raw.clone());
        let h1 = self.encoder1.forward(g, p, input)?;
        let a1 = g.relu(h1);
        let h2 = self.encoder2.forward(g, p, a1)?;
        let a2 = g.relu(h2);

        let t_in = raw.shape()[0];
        let stride = self.config.stride;
        let x = if stride == 1 {
            a2
        } else {
            let rows: Vec<usize> = (0..t_in).step_by(stride).collect();
            let idx: Vec<usize> = rows
                .iter()
                .flat_map(|r| (0..self.config.d).map(move |c| r * self.config.d + c))
                .collect();
            let flat = g.gather(a2, &idx)?;
            g.reshape(flat, &[rows.len(), self.config.d])?
        };
        let frames = g.value(x).shape()[0];
        Ok(FeatureSequence { x, frames, frame_rate: (frames.max(2) - 1) as f64 })
    }

    /// Per-frame class logits from the encoded features.
    pub fn predict_dense(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        features: &FeatureSequence,
    ) -> Result<Var, TensorError> {
        self.dense_head.forward(g, p, features.x)
    }

    /// Full forward pass over one window of raw observations.
    pub fn forward(&self, g: &mut Graph, raw: &Tensor) -> Result<ForwardOutput, TensorError> {
        let p = self.params.inject(g);
        let features = self.encode_features(g, &p, raw)?;
        let dense_logits = self.predict_dense(g, &p, &features)?;

        let cfg = &self.config;
        let n_q = cfg.n_queries;
        let mut q = p.var(self.init_queries);
        let init_state = p.var(self.init_state);
        let mut state = init_state;

        let mut layer_preds = Vec::with_capacity(cfg.n_layers);
        let mut layer_states = Vec::with_capacity(cfg.n_layers);

        for layer in &self.layers {
            q = layer.attn.forward(g, &p, q)?;

            // Dynamic quantities for all queries at once.
            let offsets_all = layer.offset_head.forward(g, &p, q)?;
            let weight_logits = layer.weight_head.forward(g, &p, q)?;
            let weights_all = g.softmax(weight_logits, 1)?;

            let mut new_q_rows = Vec::with_capacity(n_q);
            for qi in 0..n_q {
                let q_row_flat = g.gather(q, &row_indices(qi, cfg.d))?;
                let offsets = g.gather(offsets_all, &row_indices(qi, cfg.n_subpoints))?;
                let weights = g.gather(weights_all, &row_indices(qi, cfg.n_subpoints))?;

                // Sampling locations in normalized time, per representation.
                let mut point_rows = Vec::with_capacity(cfg.n_points);
                match cfg.representation {
                    Representation::Points => {
                        for j in 0..cfg.n_points {
                            let t = g.gather(state, &[qi * cfg.n_points + j])?;
                            let t_index = g.scale(t, features.frame_rate);
                            let feat = layer.point_feature(
                                g,
                                &features,
                                t_index,
                                offsets,
                                weights,
                                cfg.n_subpoints,
                            )?;
                            point_rows.push(g.reshape(feat, &[1, cfg.d])?);
                        }
                    }
                    Representation::SegmentRoi => {
                        let s = g.gather(state, &[qi * 2])?;
                        let e = g.gather(state, &[qi * 2 + 1])?;
                        let len = g.sub(e, s)?;
                        for j in 0..cfg.n_points {
                            let frac = (j as f64 + 0.5) / cfg.n_points as f64;
                            let off = g.scale(len, frac);
                            let t = g.add(s, off)?;
                            let t_index = g.scale(t, features.frame_rate);
                            let feat = g.bilinear_interp_1d(features.x, t_index)?;
                            point_rows.push(g.reshape(feat, &[1, cfg.d])?);
                        }
                    }
                }
                let x = g.concat(&point_rows, 0)?; // N_s x D
                let mixed = layer.adaptive_mix(g, &p, cfg, x, q_row_flat)?;
                new_q_rows.push(g.reshape(mixed, &[1, cfg.d])?);
            }
            q = g.concat(&new_q_rows, 0)?;

            // Heads and state refinement.
            let class_logits = layer.class_head.forward(g, &p, q)?;
            let deltas = layer.refine_head.forward(g, &p, q)?;
            let mut new_state_rows = Vec::with_capacity(n_q);
            let mut seg_starts = Vec::with_capacity(n_q);
            let mut seg_ends = Vec::with_capacity(n_q);
            let width = cfg.state_width();
            for qi in 0..n_q {
                let row = g.gather(state, &row_indices(qi, width))?;
                let d_row = g.gather(deltas, &row_indices(qi, width))?;
                let hi = g.max_all(row)?;
                let lo = g.min_all(row)?;
                let span = g.sub(hi, lo)?;
                let scaled = g.mul_scalar(d_row, span)?;
                let step = g.scale(scaled, 0.5);
                let moved = g.add(row, step)?;
                let clamped = g.clamp(moved, POINT_MIN, POINT_MAX);

                match cfg.representation {
                    Representation::Points => {
                        // pseudo segment from the local subset
                        let k = local_point_count(cfg.n_points);
                        let local: Vec<usize> = (0..k).collect();
                        let local_pts = g.gather(clamped, &local)?;
                        seg_starts.push(g.min_all(local_pts)?);
                        seg_ends.push(g.max_all(local_pts)?);
                        new_state_rows.push(g.reshape(clamped, &[1, width])?);
                    }
                    Representation::SegmentRoi => {
                        // keep endpoints ordered after the update
                        let a = g.gather(clamped, &[0])?;
                        let b = g.gather(clamped, &[1])?;
                        let s_new = g.min2(a, b)?;
                        let e_new = g.max2(a, b)?;
                        seg_starts.push(s_new);
                        seg_ends.push(e_new);
                        let pair = g.concat(&[s_new, e_new], 0)?;
                        new_state_rows.push(g.reshape(pair, &[1, 2])?);
                    }
                }
            }
            state = g.concat(&new_state_rows, 0)?;
            layer_states.push(state);
            layer_preds.push(LayerPrediction { class_logits, seg_starts, seg_ends });
        }

        Ok(ForwardOutput {
            layer_preds,
            layer_states,
            init_state,
            dense_logits,
            features,
            params: p,
        })
    }
}

fn row_indices(row: usize, width: usize) -> Vec<usize> {
    (row * width..(row + 1) * width).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;

    fn raw_window(seed: u64, frames: usize, width: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t = normal(&mut rng, &[frames, width], 1.0);
        // keep the encoder identity case meaningful: nonnegative inputs
        for v in t.data_mut() {
            *v = v.abs();
        }
        t
    }

    #[test]
    fn config_validation_rejects_bad_widths() {
        let mut cfg = DecoderConfig::desk(5, 16);
        cfg.n_heads = 3; // 64 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = DecoderConfig::desk(5, 16);
        cfg.frame_mixing = false;
        cfg.channel_mixing = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_layer_returns_one_output() {
        let mut cfg = DecoderConfig::tiny(3, 4);
        cfg.n_layers = 1;
        let model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(1, 10, 4)).unwrap();
        assert_eq!(out.layer_preds.len(), 1);
        let outputs = out.layer_outputs(&g, &cfg);
        assert_eq!(outputs.len(), 1);
        assert_eq!(outputs[0].class_logits.shape(), &[2, 4]);
        assert_eq!(outputs[0].pseudo_segments.len(), 2);
    }

    #[test]
    fn zeroed_refinement_keeps_points_at_half() {
        let cfg = DecoderConfig::desk(3, 8);
        let model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(2, 16, 8)).unwrap();
        for snapshot in out.points_per_layer(&g, &cfg) {
            for ps in snapshot {
                for t in ps.points() {
                    assert!((t - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pseudo_segments_are_ordered_at_every_layer() {
        let cfg = DecoderConfig::desk(3, 8);
        let mut model = PointTadModel::new(cfg.clone(), 3).unwrap();
        // randomize the refinement heads so points actually move
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for li in 0..cfg.n_layers {
            let id = model.params.find(&format!("layers.{li}.refine_head.weight")).unwrap();
            model.params.get_mut(id).value = normal(&mut rng, &[cfg.d, cfg.n_points], 0.3);
        }
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(4, 16, 8)).unwrap();
        for layer in out.layer_outputs(&g, &cfg) {
            for seg in &layer.pseudo_segments {
                assert!(seg.start() <= seg.end());
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = DecoderConfig::desk(3, 8);
        let model = PointTadModel::new(cfg.clone(), 5).unwrap();
        let raw = raw_window(6, 16, 8);
        let mut g1 = Graph::new();
        let out1 = model.forward(&mut g1, &raw).unwrap();
        let mut g2 = Graph::new();
        let out2 = model.forward(&mut g2, &raw).unwrap();
        let a = g1.value(out1.layer_preds.last().unwrap().class_logits);
        let b = g2.value(out2.layer_preds.last().unwrap().class_logits);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn query_permutation_equivariance() {
        let mut cfg = DecoderConfig::tiny(3, 4);
        cfg.n_queries = 4;
        let mut model = PointTadModel::new(cfg.clone(), 7).unwrap();
        // give queries distinct states so the permutation is observable
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let qid = model.params.find("init.queries").unwrap();
        model.params.get_mut(qid).value = normal(&mut rng, &[4, cfg.d], 1.0);
        let sid = model.params.find("init.state").unwrap();
        let mut pts = Tensor::full(&[4, cfg.n_points], 0.5);
        for (i, v) in pts.data_mut().iter_mut().enumerate() {
            *v += (i % 5) as f64 * 0.07;
        }
        model.params.get_mut(sid).value = pts.clone();
        let raw = raw_window(8, 12, 4);

        let mut g1 = Graph::new();
        let out1 = model.forward(&mut g1, &raw).unwrap();
        let logits1 = g1.value(out1.layer_preds.last().unwrap().class_logits).clone();

        // permute queries: rotate rows by one
        let perm: Vec<usize> = (0..4).map(|i| (i + 1) % 4).collect();
        let q_orig = model.params.get(qid).value.clone();
        let mut q_perm = Tensor::zeros(&[4, cfg.d]);
        let mut s_perm = Tensor::zeros(&[4, cfg.n_points]);
        for (dst, src) in perm.iter().enumerate() {
            q_perm.data_mut()[dst * cfg.d..(dst + 1) * cfg.d]
                .copy_from_slice(&q_orig.data()[src * cfg.d..(src + 1) * cfg.d]);
            s_perm.data_mut()[dst * cfg.n_points..(dst + 1) * cfg.n_points]
                .copy_from_slice(&pts.data()[src * cfg.n_points..(src + 1) * cfg.n_points]);
        }
        model.params.get_mut(qid).value = q_perm;
        model.params.get_mut(sid).value = s_perm;

        let mut g2 = Graph::new();
        let out2 = model.forward(&mut g2, &raw).unwrap();
        let logits2 = g2.value(out2.layer_preds.last().unwrap().class_logits).clone();

        let width = cfg.n_classes + 1;
        for (dst, src) in perm.iter().enumerate() {
            for c in 0..width {
                let a = logits1.at2(*src, c);
                let b = logits2.at2(dst, c);
                assert!((a - b).abs() < 1e-12, "query {src}->{dst} class {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn collapsed_points_stay_finite() {
        let cfg = DecoderConfig::desk(3, 8);
        let model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(10, 16, 8)).unwrap();
        let logits = g.value(out.layer_preds.last().unwrap().class_logits);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        for layer in out.layer_outputs(&g, &cfg) {
            for seg in &layer.pseudo_segments {
                assert!(seg.start().is_finite() && seg.end().is_finite());
            }
        }
    }

    #[test]
    fn deformable_reduces_to_interpolation_with_one_subpoint() {
        // n_subpoints = 1, zero offset bias, zero weight head: the point
        // feature must equal plain interpolation at t_j.
        let mut cfg = DecoderConfig::tiny(2, 4);
        cfg.n_subpoints = 1;
        let mut model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let oid = model.params.find("layers.0.offsets.bias").unwrap();
        model.params.get_mut(oid).value = Tensor::zeros(&[1]);

        let layer = &model.layers[0];
        let mut g = Graph::new();
        let p = model.params.inject(&mut g);
        let rows: Vec<f64> = (0..8 * cfg.d).map(|i| i as f64 * 0.1).collect();
        let x_t = Tensor::from_vec(vec![8, cfg.d], rows).unwrap();
        let x = g.constant(x_t.clone());
        let feats = FeatureSequence { x, frames: 8, frame_rate: 7.0 };

        let zero_q = g.constant(Tensor::zeros(&[cfg.d]));
        let offsets = layer.offset_head.forward_vec(&mut g, &p, zero_q).unwrap();
        let weights_raw = layer.weight_head.forward_vec(&mut g, &p, zero_q).unwrap();
        let weights = g.softmax(weights_raw, 0).unwrap();

        let t = g.scalar(3.4);
        let feat = layer
            .point_feature(&mut g, &feats, t, offsets, weights, 1)
            .unwrap();
        let t2 = g.scalar(3.4);
        let direct = g.bilinear_interp_1d(x, t2).unwrap();
        for (a, b) in g.value(feat).data().iter().zip(g.value(direct).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deformable_linear_ramp_evaluates_at_weighted_mean() {
        // uniform weights, offset biases 1..4: for features linear in t the
        // result equals interpolation at t + mean(offsets).
        let cfg = DecoderConfig::tiny(2, 4);
        let mut model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let oid = model.params.find("layers.0.offsets.bias").unwrap();
        model.params.get_mut(oid).value = Tensor::vector(&[1.0, 2.0]);

        let layer = &model.layers[0];
        let mut g = Graph::new();
        let p = model.params.inject(&mut g);
        // rows linear in index: X[i] = [i, 2i, 3i, 4i]
        let rows: Vec<f64> = (0..10)
            .flat_map(|i| (1..=cfg.d).map(move |c| (i * c) as f64))
            .collect();
        let x = g.constant(Tensor::from_vec(vec![10, cfg.d], rows).unwrap());
        let feats = FeatureSequence { x, frames: 10, frame_rate: 9.0 };

        let zero_q = g.constant(Tensor::zeros(&[cfg.d]));
        let offsets = layer.offset_head.forward_vec(&mut g, &p, zero_q).unwrap();
        let w_raw = layer.weight_head.forward_vec(&mut g, &p, zero_q).unwrap();
        let weights = g.softmax(w_raw, 0).unwrap();

        let t = g.scalar(2.0);
        let feat = layer.point_feature(&mut g, &feats, t, offsets, weights, 2).unwrap();
        // mean offset = 1.5 -> effective location 3.5
        let expected: Vec<f64> = (1..=cfg.d).map(|c| 3.5 * c as f64).collect();
        for (a, b) in g.value(feat).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_identity_case_and_stride() {
        // F == D, identity-initialized stack, nonnegative input -> output
        // equals input.
        let mut cfg = DecoderConfig::tiny(2, 8);
        cfg.d = 8;
        cfg.d_prime = 4;
        cfg.feature_width = 8;
        let mut model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let eye = {
            let mut t = Tensor::zeros(&[8, 8]);
            for i in 0..8 {
                t.data_mut()[i * 8 + i] = 1.0;
            }
            t
        };
        for name in ["encoder.lin1.weight", "encoder.lin2.weight"] {
            let id = model.params.find(name).unwrap();
            model.params.get_mut(id).value = eye.clone();
        }
        let raw = raw_window(3, 6, 8);
        let mut g = Graph::new();
        let p = model.params.inject(&mut g);
        let feats = model.encode_features(&mut g, &p, &raw).unwrap();
        for (a, b) in g.value(feats.x).data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // stride halves the frame count (shape arithmetic)
        let mut cfg2 = cfg.clone();
        cfg2.stride = 2;
        let model2 = PointTadModel::new(cfg2, 0).unwrap();
        let mut g2 = Graph::new();
        let p2 = model2.params.inject(&mut g2);
        let feats2 = model2.encode_features(&mut g2, &p2, &raw).unwrap();
        assert_eq!(g2.value(feats2.x).shape(), &[3, 8]);
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let cfg = DecoderConfig::tiny(2, 4);
        let model = PointTadModel::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = model.params.inject(&mut g);
        let raw = Tensor::zeros(&[6, 5]);
        assert!(model.encode_features(&mut g, &p, &raw).is_err());
    }

    #[test]
    fn dense_head_constant_with_zero_weights() {
        let cfg = DecoderConfig::tiny(3, 4);
        let mut model = PointTadModel::new(cfg.clone(), 0).unwrap();
        let wid = model.params.find("dense_head.weight").unwrap();
        model.params.get_mut(wid).value = Tensor::zeros(&[cfg.d, cfg.n_classes]);
        let bid = model.params.find("dense_head.bias").unwrap();
        model.params.get_mut(bid).value = Tensor::vector(&[0.3, -0.2, 0.9]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(12, 10, 4)).unwrap();
        let dense = g.value(out.dense_logits);
        assert_eq!(dense.shape(), &[10, 3]);
        for r in 0..10 {
            assert_eq!(dense.row(r), &[0.3, -0.2, 0.9]);
        }
    }

    #[test]
    fn segment_roi_variant_runs_and_orders_endpoints() {
        let mut cfg = DecoderConfig::desk(3, 8);
        cfg.representation = Representation::SegmentRoi;
        let mut model = PointTadModel::new(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for li in 0..cfg.n_layers {
            let id = model.params.find(&format!("layers.{li}.refine_head.weight")).unwrap();
            model.params.get_mut(id).value = normal(&mut rng, &[cfg.d, 2], 0.5);
        }
        let mut g = Graph::new();
        let out = model.forward(&mut g, &raw_window(14, 16, 8)).unwrap();
        for layer in out.layer_outputs(&g, &cfg) {
            for seg in &layer.pseudo_segments {
                assert!(seg.start() <= seg.end());
                assert!(seg.start() >= POINT_MIN && seg.end() <= POINT_MAX);
            }
        }
    }
}
