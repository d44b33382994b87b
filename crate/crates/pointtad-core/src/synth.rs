//! Synthetic multi-label temporal dataset generation and sliding-window
//! preprocessing.
//!
//! Each class owns a channel group and a temporal envelope; classes sharing
//! a group differ only in envelope shape, so per-frame channel energy alone
//! cannot separate them and the detector has to reason across frames.
//! Concurrent instances superpose linearly; instances of the same group
//! never overlap, keeping every clip decodable by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::eval::{ActionInstance, ClassDurationStats};
use crate::nn::normal;
use crate::tensor::Tensor;

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticConfig {
    pub n_classes: usize,
    /// Clip length in frames.
    pub clip_length: usize,
    pub feature_width: usize,
    /// Maximum number of instances covering any single frame.
    pub max_concurrency: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Instance duration range in frames (inclusive).
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_std: f64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Desk-scale benchmark defaults: 5 classes, short clips, mild noise.
    pub fn desk(seed: u64) -> Self {
        SyntheticConfig {
            n_classes: 5,
            clip_length: 96,
            feature_width: 18,
            max_concurrency: 3,
            instances_min: 2,
            instances_max: 5,
            duration_min: 10,
            duration_max: 28,
            noise_std: 0.08,
            train_clips: 200,
            test_clips: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.max_concurrency < 2 {
            return Err(GenerateError::config("max_concurrency must be at least 2"));
        }
        if self.duration_min < 2 || self.duration_min > self.duration_max {
            return Err(GenerateError::config("invalid duration range"));
        }
        if self.duration_max > self.clip_length {
            return Err(GenerateError::config("durations must fit inside a clip"));
        }
        if self.instances_min > self.instances_max {
            return Err(GenerateError::config("invalid instances_per_clip range"));
        }
        if self.n_classes == 0 {
            return Err(GenerateError::config("need at least one class"));
        }
        if self.feature_width < 2 * self.n_groups() {
            return Err(GenerateError::config("feature_width too small for the class groups"));
        }
        Ok(())
    }

    /// Channel groups; two classes share each group.
    pub fn n_groups(&self) -> usize {
        self.n_classes.div_ceil(2)
    }

    /// Channel range owned by a class's group.
    pub fn class_channels(&self, class_id: usize) -> Range<usize> {
        let groups = self.n_groups();
        let per = self.feature_width / groups;
        let g = class_id / 2;
        g * per..(g + 1) * per
    }

    /// Additive feature signature of `class_id` at relative position
    /// `u` in `(0, 1)`: envelope times a per-channel pattern on the class's
    /// channel group, zero elsewhere.
    pub fn signature(&self, class_id: usize, u: f64) -> Vec<f64> {
        let mut row = alloc::vec![0.0; self.feature_width];
        let env = if class_id % 2 == 0 {
            libm::sin(core::f64::consts::PI * u)
        } else {
            1.0 - u // falling ramp, temporally asymmetric
        };
        for (i, ch) in self.class_channels(class_id).enumerate() {
            let pattern = if i % 2 == 0 { 1.0 } else { 0.6 };
            row[ch] = 1.5 * env * pattern;
        }
        row
    }
}

/// Instance in clip frame coordinates; `end_frame` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameInstance {
    pub start_frame: usize,
    pub end_frame: usize,
    pub class_id: usize,
}

impl FrameInstance {
    pub fn duration(&self) -> usize {
        self.end_frame - self.start_frame
    }
}

/// One generated clip: features plus exact annotations.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    pub features: Tensor,
    pub instances: Vec<FrameInstance>,
}

/// A generated dataset with train/test splits and training-set duration
/// statistics.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Vec<ClipData>,
    pub test: Vec<ClipData>,
    pub stats: ClassDurationStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerateError {
    Config(&'static str),
    Placement { clip: String },
}

impl GenerateError {
    fn config(msg: &'static str) -> Self {
        GenerateError::Config(msg)
    }
}

impl fmt::Display for GenerateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerateError::Config(msg) => write!(f, "invalid synthetic config: {msg}"),
            GenerateError::Placement { clip } => {
                write!(f, "could not place instances in clip {clip} within the retry budget")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GenerateError {}

const PLACEMENT_RETRIES: usize = 200;

fn generate_clip(
    cfg: &SyntheticConfig,
    id: String,
    rng: &mut ChaCha20Rng,
) -> Result<ClipData, GenerateError> {
    let t = cfg.clip_length;
    let f = cfg.feature_width;
    let n_inst = rng.gen_range(cfg.instances_min..=cfg.instances_max);

    let mut instances: Vec<FrameInstance> = Vec::with_capacity(n_inst);
    let mut concurrency = alloc::vec![0usize; t];
    'outer: for _ in 0..n_inst {
        for _ in 0..PLACEMENT_RETRIES {
            let class_id = rng.gen_range(0..cfg.n_classes);
            let dur = rng.gen_range(cfg.duration_min..=cfg.duration_max);
            let start = rng.gen_range(0..=t - dur);
            let end = start + dur;
            // concurrency cap
            if concurrency[start..end].iter().any(|&c| c + 1 > cfg.max_concurrency) {
                continue;
            }
            // same-group instances must not touch (2-frame gap keeps the
            // per-group energy runs separable)
            let group = class_id / 2;
            let conflict = instances.iter().any(|inst| {
                inst.class_id / 2 == group
                    && start < inst.end_frame + 2
                    && inst.start_frame < end + 2
            });
            if conflict {
                continue;
            }
            for c in &mut concurrency[start..end] {
                *c += 1;
            }
            instances.push(FrameInstance { start_frame: start, end_frame: end, class_id });
            continue 'outer;
        }
        return Err(GenerateError::Placement { clip: id });
    }
    instances.sort_by_key(|i| (i.start_frame, i.end_frame, i.class_id));

    let mut features = if cfg.noise_std > 0.0 {
        normal(rng, &[t, f], cfg.noise_std)
    } else {
        Tensor::zeros(&[t, f])
    };
    for inst in &instances {
        let dur = inst.duration() as f64;
        for frame in inst.start_frame..inst.end_frame {
            let u = (frame - inst.start_frame) as f64 + 0.5;
            let row = cfg.signature(inst.class_id, u / dur);
            let dst = &mut features.data_mut()[frame * f..(frame + 1) * f];
            for (d, s) in dst.iter_mut().zip(&row) {
                *d += s;
            }
        }
    }
    Ok(ClipData { id, features, instances })
}

/// Generates the full dataset. Reproducible from the config seed; every
/// clip has its own derived seed so generation order does not matter.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset, GenerateError> {
    cfg.validate()?;
    let clip_rng = |index: u64| {
        ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15)))
    };
    let mut train = Vec::with_capacity(cfg.train_clips);
    for i in 0..cfg.train_clips {
        let id = format!("train_{i:04}");
        train.push(generate_clip(cfg, id, &mut clip_rng(i as u64))?);
    }
    let mut test = Vec::with_capacity(cfg.test_clips);
    for i in 0..cfg.test_clips {
        let id = format!("test_{i:04}");
        test.push(generate_clip(cfg, id, &mut clip_rng((cfg.train_clips + i) as u64))?);
    }

    let mut per_class = alloc::vec![Vec::new(); cfg.n_classes];
    for clip in &train {
        for inst in &clip.instances {
            per_class[inst.class_id].push(inst.duration() as f64);
        }
    }
    let stats = ClassDurationStats::from_durations(&per_class);
    Ok(SyntheticDataset { config: cfg.clone(), train, test, stats })
}

/// One training/inference window over a clip.
#[derive(Debug, Clone)]
pub struct Window {
    pub clip_id: String,
    pub start_frame: usize,
    pub window_frames: usize,
    /// `window_frames x F`, zero-padded past the clip end.
    pub features: Tensor,
    /// Ground-truth instances clipped to the window and renormalized to
    /// `[0, 1]` window time.
    pub instances: Vec<ActionInstance>,
}

/// Slices a clip into windows of `window_frames` with the given overlap
/// ratio. Stride is `window * (1 - overlap)`; windows start at every
/// multiple of the stride below the clip length, so zero overlap tiles the
/// clip with `ceil(clip / window)` windows (the last one zero-padded).
/// Instances are dropped when less than half of their extent survives the
/// clipping.
pub fn sliding_windows(clip: &ClipData, window_frames: usize, overlap_ratio: f64) -> Vec<Window> {
    debug_assert!((0.0..1.0).contains(&overlap_ratio));
    let clip_len = clip.features.shape()[0];
    let f = clip.features.shape()[1];
    let stride =
        ((window_frames as f64 * (1.0 - overlap_ratio)) as usize).max(1);

    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        let end = start + window_frames;
        let mut feats = Tensor::zeros(&[window_frames, f]);
        let copy_end = end.min(clip_len);
        if start < clip_len {
            let n = (copy_end - start) * f;
            feats.data_mut()[..n].copy_from_slice(&clip.features.data()[start * f..copy_end * f]);
        }
        let mut instances = Vec::new();
        for inst in &clip.instances {
            let is = inst.start_frame.max(start);
            let ie = inst.end_frame.min(end);
            if ie <= is {
                continue;
            }
            let kept = (ie - is) as f64 / inst.duration() as f64;
            if kept < 0.5 {
                continue;
            }
            instances.push(ActionInstance::ground_truth(
                (is - start) as f64 / window_frames as f64,
                (ie - start) as f64 / window_frames as f64,
                inst.class_id,
            ));
        }
        out.push(Window {
            clip_id: clip.id.clone(),
            start_frame: start,
            window_frames,
            features: feats,
            instances,
        });
        start += stride;
        if start >= clip_len {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_classes: 4,
            clip_length: 48,
            feature_width: 8,
            max_concurrency: 3,
            instances_min: 1,
            instances_max: 3,
            duration_min: 6,
            duration_max: 14,
            noise_std: 0.0,
            train_clips: 4,
            test_clips: 2,
            seed,
        }
    }

    #[test]
    fn noiseless_features_are_exact_signature_sums() {
        let cfg = tiny_cfg(3);
        let ds = generate_dataset(&cfg).unwrap();
        for clip in ds.train.iter().chain(&ds.test) {
            let t = cfg.clip_length;
            let f = cfg.feature_width;
            let mut expected = alloc::vec![0.0; t * f];
            for inst in &clip.instances {
                let dur = inst.duration() as f64;
                for frame in inst.start_frame..inst.end_frame {
                    let u = ((frame - inst.start_frame) as f64 + 0.5) / dur;
                    for (ch, v) in cfg.signature(inst.class_id, u).iter().enumerate() {
                        expected[frame * f + ch] += v;
                    }
                }
            }
            for (a, b) in clip.features.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = generate_dataset(&tiny_cfg(7)).unwrap();
        let b = generate_dataset(&tiny_cfg(7)).unwrap();
        for (ca, cb) in a.train.iter().zip(&b.train) {
            assert_eq!(ca.id, cb.id);
            assert_eq!(ca.instances, cb.instances);
            assert_eq!(ca.features.data(), cb.features.data());
        }
    }

    #[test]
    fn duration_stats_match_recomputation() {
        let ds = generate_dataset(&tiny_cfg(11)).unwrap();
        let mut per_class = alloc::vec![Vec::new(); 4];
        for clip in &ds.train {
            for inst in &clip.instances {
                per_class[inst.class_id].push(inst.duration() as f64);
            }
        }
        let again = ClassDurationStats::from_durations(&per_class);
        assert_eq!(ds.stats, again);
    }

    #[test]
    fn concurrency_and_group_overlap_limits_hold() {
        let mut cfg = tiny_cfg(13);
        cfg.train_clips = 20;
        cfg.instances_max = 5;
        let ds = generate_dataset(&cfg).unwrap();
        for clip in &ds.train {
            let mut conc = alloc::vec![0usize; cfg.clip_length];
            for inst in &clip.instances {
                for c in &mut conc[inst.start_frame..inst.end_frame] {
                    *c += 1;
                }
            }
            assert!(conc.iter().all(|&c| c <= cfg.max_concurrency));
            for (i, a) in clip.instances.iter().enumerate() {
                for b in &clip.instances[i + 1..] {
                    if a.class_id / 2 == b.class_id / 2 {
                        let disjoint =
                            a.end_frame + 2 <= b.start_frame || b.end_frame + 2 <= a.start_frame;
                        assert!(disjoint, "same-group overlap in {}", clip.id);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_overlap_tiles_the_clip() {
        let cfg = tiny_cfg(17);
        let ds = generate_dataset(&cfg).unwrap();
        let clip = &ds.train[0];
        let windows = sliding_windows(clip, 20, 0.0);
        assert_eq!(windows.len(), cfg.clip_length.div_ceil(20));
        // coverage: every clip frame appears in exactly one window
        let mut covered = alloc::vec![0usize; cfg.clip_length];
        for w in &windows {
            for frame in w.start_frame..(w.start_frame + 20).min(cfg.clip_length) {
                covered[frame] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn overlap_three_quarters_gives_quarter_stride() {
        let cfg = tiny_cfg(19);
        let ds = generate_dataset(&cfg).unwrap();
        let windows = sliding_windows(&ds.train[0], 16, 0.75);
        assert_eq!(windows[1].start_frame - windows[0].start_frame, 4);
        // the protocol case: 256-frame windows at 0.75 overlap stride by 64
        assert_eq!(((256.0_f64 * (1.0 - 0.75)) as usize).max(1), 64);
    }

    #[test]
    fn window_instance_renormalization_and_retention() {
        let clip = ClipData {
            id: String::from("c"),
            features: Tensor::zeros(&[40, 4]),
            instances: alloc::vec![
                FrameInstance { start_frame: 4, end_frame: 12, class_id: 0 },
                // straddles the boundary at 20 with only 25% inside window 0
                FrameInstance { start_frame: 18, end_frame: 26, class_id: 1 },
            ],
        };
        let windows = sliding_windows(&clip, 20, 0.0);
        let w0 = &windows[0];
        assert_eq!(w0.instances.len(), 1);
        assert!((w0.instances[0].start - 4.0 / 20.0).abs() < 1e-12);
        assert!((w0.instances[0].end - 12.0 / 20.0).abs() < 1e-12);
        // window 1 keeps 75% of the straddling instance
        let w1 = &windows[1];
        assert_eq!(w1.instances.len(), 1);
        assert_eq!(w1.instances[0].class_id, 1);
        assert!((w1.instances[0].start - 0.0).abs() < 1e-12);
        assert!((w1.instances[0].end - 6.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn window_longer_than_clip_zero_pads() {
        let clip = ClipData {
            id: String::from("c"),
            features: Tensor::full(&[10, 3], 1.0),
            instances: alloc::vec![FrameInstance { start_frame: 2, end_frame: 8, class_id: 0 }],
        };
        let windows = sliding_windows(&clip, 16, 0.0);
        assert_eq!(windows.len(), 1);
        let w = &windows[0];
        assert_eq!(w.features.shape(), &[16, 3]);
        for frame in 10..16 {
            assert!(w.features.row(frame).iter().all(|v| *v == 0.0));
        }
        assert!(w.instances.iter().all(|i| i.start >= 0.0 && i.end <= 1.0));
    }

    #[test]
    fn emitted_window_instances_stay_in_unit_range() {
        let cfg = tiny_cfg(23);
        let ds = generate_dataset(&cfg).unwrap();
        for clip in &ds.train {
            for w in sliding_windows(clip, 16, 0.75) {
                for inst in &w.instances {
                    assert!(0.0 <= inst.start && inst.start <= inst.end && inst.end <= 1.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_config_reports_placement_error() {
        let mut cfg = tiny_cfg(29);
        // 5 instances of length 40+ cannot fit in 48 frames at concurrency 2
        cfg.max_concurrency = 2;
        cfg.duration_min = 40;
        cfg.duration_max = 46;
        cfg.instances_min = 5;
        cfg.instances_max = 5;
        cfg.n_classes = 2; // single group -> no overlap allowed at all
        let err = generate_dataset(&cfg).unwrap_err();
        assert!(matches!(err, GenerateError::Placement { .. }));
    }
}
