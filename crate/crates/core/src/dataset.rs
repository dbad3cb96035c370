//! Turns annotated frame sequences into labeled two-stream training
//! samples: positive windows from strokes, negative windows from
//! stroke-free regions, seeded shuffling and batching.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    compute_flow, read_flo, stack_flow_fields, to_grayscale, write_flo, FlowConfig, FlowError,
    FlowField,
};
use crate::tensor::Tensor;
use crate::video_io::{resize_bilinear, AnnotationSet, FrameSequence, Segment, VideoIoError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("window [{0}, {1}) out of range for a {2}-frame video")]
    WindowOutOfRange(usize, usize, usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    VideoIo(#[from] VideoIoError),
}

/// Binary window label. The numeric class index doubles as the logit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    NonStroke,
    Stroke,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::NonStroke => 0,
            Label::Stroke => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Label::NonStroke),
            1 => Some(Label::Stroke),
            _ => None,
        }
    }
}

/// One network input: an RGB cuboid in [0,1], its motion cuboid in [-1,1],
/// the label, and the source frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Tensor,
    pub flow: Tensor,
    pub label: Label,
    pub window: Segment,
}

/// Window extraction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub window_len: usize,
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            window_len: 75,
            negative_ratio: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.window_len < 1 {
            return Err(DatasetError::InvalidConfig(
                "window_len must be at least 1".into(),
            ));
        }
        if !(self.negative_ratio >= 0.0) || !self.negative_ratio.is_finite() {
            return Err(DatasetError::InvalidConfig(format!(
                "negative_ratio {} must be non-negative and finite",
                self.negative_ratio
            )));
        }
        Ok(())
    }
}

/// Positive windows plus a flag set when the video is shorter than one
/// window (no positives can be cut then).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveWindows {
    pub windows: Vec<Segment>,
    pub video_too_short: bool,
}

/// One window per stroke of at most window length, centered on the stroke
/// and clamped inside the video; longer strokes are tiled with
/// `floor(duration / window_len)` consecutive windows from their begin.
pub fn positive_windows(ann: &AnnotationSet, window_len: usize) -> PositiveWindows {
    let total = ann.total_frames();
    if total < window_len {
        return PositiveWindows {
            windows: Vec::new(),
            video_too_short: true,
        };
    }
    let mut windows = Vec::new();
    for stroke in ann.strokes() {
        let duration = stroke.len();
        if duration <= window_len {
            let raw = (stroke.begin + stroke.end) as isize - window_len as isize;
            let begin = raw.div_euclid(2).clamp(0, (total - window_len) as isize) as usize;
            windows.push(Segment::new(begin, begin + window_len));
        } else {
            for i in 0..duration / window_len {
                let begin = stroke.begin + i * window_len;
                windows.push(Segment::new(begin, begin + window_len));
            }
        }
    }
    PositiveWindows {
        windows,
        video_too_short: false,
    }
}

/// Negative windows plus how many of the requested draws could not be
/// satisfied (zero when enough stroke-free space exists).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeWindows {
    pub windows: Vec<Segment>,
    pub shortfall: usize,
}

/// Seeded uniform draws (without replacement) of window starts whose
/// windows overlap no stroke at all; returned sorted by begin.
pub fn negative_windows(
    ann: &AnnotationSet,
    count: usize,
    window_len: usize,
    seed: u64,
) -> NegativeWindows {
    let total = ann.total_frames();
    let mut starts: Vec<usize> = Vec::new();
    if window_len >= 1 && total >= window_len {
        // walk the stroke-free gaps; a start s is valid when [s, s+len)
        // fits inside a gap
        let mut gap_begin = 0usize;
        let push_gap = |gap: (usize, usize), starts: &mut Vec<usize>| {
            let (b, e) = gap;
            if e >= b + window_len {
                starts.extend(b..=e - window_len);
            }
        };
        for stroke in ann.strokes() {
            push_gap((gap_begin, stroke.begin), &mut starts);
            gap_begin = stroke.end;
        }
        push_gap((gap_begin, total), &mut starts);
    }

    let shortfall = count.saturating_sub(starts.len());
    let mut chosen = if count >= starts.len() {
        starts
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        starts.shuffle(&mut rng);
        starts.truncate(count);
        starts
    };
    chosen.sort_unstable();
    NegativeWindows {
        windows: chosen
            .into_iter()
            .map(|s| Segment::new(s, s + window_len))
            .collect(),
        shortfall,
    }
}

/// Labeled windows for one annotated video: every positive window plus
/// `round(negative_ratio * positives)` negative draws, sorted by begin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledWindows {
    pub windows: Vec<(Segment, Label)>,
    pub video_too_short: bool,
    pub negative_shortfall: usize,
}

/// Cuts the labeled windows of one video. The negative seed folds the
/// video id into `cfg.seed`, so a video keeps the same draws no matter
/// where it sits in a split.
pub fn labeled_windows(
    ann: &AnnotationSet,
    cfg: &SamplingConfig,
) -> Result<LabeledWindows, DatasetError> {
    cfg.validate()?;
    let positives = positive_windows(ann, cfg.window_len);
    if positives.video_too_short {
        return Ok(LabeledWindows {
            windows: Vec::new(),
            video_too_short: true,
            negative_shortfall: 0,
        });
    }
    let requested = (cfg.negative_ratio * positives.windows.len() as f64).round() as usize;
    let seed = crate::synth::splitmix64(cfg.seed ^ fnv1a(ann.video_id()));
    let negatives = negative_windows(ann, requested, cfg.window_len, seed);
    let mut windows: Vec<(Segment, Label)> = positives
        .windows
        .into_iter()
        .map(|w| (w, Label::Stroke))
        .chain(negatives.windows.into_iter().map(|w| (w, Label::NonStroke)))
        .collect();
    windows.sort_by_key(|&(w, _)| (w.begin, w.end));
    Ok(LabeledWindows {
        windows,
        video_too_short: false,
        negative_shortfall: negatives.shortfall,
    })
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// On-disk cache for per-pair flow fields, keyed by video, absolute frame
/// index, solver parameters, and working resolution.
#[derive(Debug, Clone)]
pub struct FlowCacheConfig {
    pub dir: PathBuf,
    pub video_key: String,
}

/// Builds network inputs from frame windows: bilinear resize to the model
/// resolution, RGB scaled by 1/255, and the motion stream from
/// consecutive-pair flow (optionally cached on disk).
#[derive(Debug, Clone)]
pub struct SampleBuilder {
    flow_cfg: FlowConfig,
    out_w: usize,
    out_h: usize,
    cache: Option<FlowCacheConfig>,
}

impl SampleBuilder {
    pub fn new(flow_cfg: FlowConfig) -> Self {
        SampleBuilder {
            flow_cfg,
            out_w: 320,
            out_h: 128,
            cache: None,
        }
    }

    pub fn with_output_size(mut self, out_w: usize, out_h: usize) -> Self {
        self.out_w = out_w;
        self.out_h = out_h;
        self
    }

    pub fn with_cache(mut self, cache: FlowCacheConfig) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.out_w, self.out_h)
    }

    pub fn flow_cfg(&self) -> &FlowConfig {
        &self.flow_cfg
    }

    pub fn build(
        &self,
        seq: &FrameSequence,
        window: Segment,
        label: Label,
    ) -> Result<Sample, DatasetError> {
        let (rgb, flow) = self.input_tensors(seq, window)?;
        Ok(Sample {
            rgb,
            flow,
            label,
            window,
        })
    }

    /// The (rgb, flow) tensor pair for one window, without a label; the
    /// inference path uses this directly.
    pub fn input_tensors(
        &self,
        seq: &FrameSequence,
        window: Segment,
    ) -> Result<(Tensor, Tensor), DatasetError> {
        if window.is_empty() || window.end > seq.frame_count() {
            return Err(DatasetError::WindowOutOfRange(
                window.begin,
                window.end,
                seq.frame_count(),
            ));
        }
        self.flow_cfg.validate()?;
        let t = window.len();
        let (w, h) = (self.out_w, self.out_h);

        let resized: Vec<Vec<u8>> = (window.begin..window.end)
            .into_par_iter()
            .map(|i| resize_bilinear(seq.width(), seq.height(), seq.frame(i), w, h))
            .collect::<Result<_, _>>()?;

        let mut rgb = Tensor::zeros(&[3, t, h, w]);
        {
            let data = rgb.data_mut();
            let plane = h * w;
            for (ti, frame) in resized.iter().enumerate() {
                for p in 0..plane {
                    for c in 0..3 {
                        data[c * t * plane + ti * plane + p] = frame[p * 3 + c] as f64 / 255.0;
                    }
                }
            }
        }

        let gray: Vec<_> = resized
            .iter()
            .map(|frame| to_grayscale(w, h, frame))
            .collect::<Result<_, _>>()?;

        let fields: Vec<FlowField> = (0..t - 1)
            .into_par_iter()
            .map(|pair| self.pair_flow(&gray, window.begin, pair))
            .collect::<Result<_, _>>()?;
        let flow = stack_flow_fields(&fields)?;
        Ok((rgb, flow))
    }

    fn pair_flow(
        &self,
        gray: &[crate::flow::GrayImage],
        window_begin: usize,
        pair: usize,
    ) -> Result<FlowField, FlowError> {
        let compute = || compute_flow(&gray[pair], &gray[pair + 1], &self.flow_cfg);
        let Some(cache) = &self.cache else {
            return compute();
        };
        let dir = cache.dir.join(&cache.video_key).join(format!(
            "{}_{}x{}",
            self.flow_cfg.cache_tag(),
            self.out_w,
            self.out_h
        ));
        let path = dir.join(format!("flow_{:06}.flo", window_begin + pair));
        if path.exists() {
            return read_flo(&path);
        }
        let field = compute()?;
        std::fs::create_dir_all(&dir).map_err(|e| FlowError::Io {
            path: dir.clone(),
            source: e,
        })?;
        // write-then-rename keeps a concurrent reader from seeing a
        // half-written file
        let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| FlowError::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_flo(&field, tmp.path())?;
        tmp.persist(&path).map_err(|e| FlowError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        // serve the quantized on-disk values so warm and cold runs agree
        read_flo(&path)
    }
}

/// Batch index order for one epoch: a seeded permutation (fold the epoch
/// number into the seed so epochs differ but reruns agree), chunked with
/// the final partial batch kept.
pub fn epoch_batches(
    sample_count: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size < 1 {
        return Err(DatasetError::InvalidConfig(
            "batch_size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(total: usize, strokes: &[(usize, usize)]) -> AnnotationSet {
        AnnotationSet::new(
            "test_video",
            total,
            strokes.iter().map(|&(b, e)| Segment::new(b, e)).collect(),
        )
        .expect("valid annotations")
    }

    #[test]
    fn short_stroke_window_is_centered() {
        let got = positive_windows(&ann(1000, &[(100, 160)]), 75);
        assert!(!got.video_too_short);
        assert_eq!(got.windows, vec![Segment::new(92, 167)]);
    }

    #[test]
    fn early_stroke_window_clamps_to_zero() {
        let got = positive_windows(&ann(1000, &[(0, 20)]), 75);
        assert_eq!(got.windows, vec![Segment::new(0, 75)]);
    }

    #[test]
    fn late_stroke_window_clamps_to_video_end() {
        let got = positive_windows(&ann(1000, &[(990, 1000)]), 75);
        assert_eq!(got.windows, vec![Segment::new(925, 1000)]);
    }

    #[test]
    fn long_stroke_is_tiled() {
        let got = positive_windows(&ann(1000, &[(0, 160)]), 75);
        assert_eq!(got.windows, vec![Segment::new(0, 75), Segment::new(75, 150)]);
    }

    #[test]
    fn short_video_sets_flag() {
        let got = positive_windows(&ann(50, &[(10, 30)]), 75);
        assert!(got.video_too_short);
        assert!(got.windows.is_empty());
    }

    #[test]
    fn positive_windows_cover_most_of_their_stroke() {
        let strokes = [(0, 10), (30, 100), (400, 410), (800, 1000)];
        let set = ann(1000, &strokes);
        let wl = 75;
        let got = positive_windows(&set, wl);
        let mut wi = 0;
        for &(b, e) in &strokes {
            let d = e - b;
            let n = if d <= wl { 1 } else { d / wl };
            for _ in 0..n {
                let win = got.windows[wi];
                wi += 1;
                let inter = win.end.min(e).saturating_sub(win.begin.max(b));
                assert!(
                    inter + 1 >= d.min(wl),
                    "window {win:?} covers {inter} frames of stroke [{b}, {e})"
                );
            }
        }
        assert_eq!(wi, got.windows.len());
    }

    #[test]
    fn negative_windows_never_touch_strokes() {
        let set = ann(500, &[(60, 120), (300, 340)]);
        let got = negative_windows(&set, 10, 75, 42);
        assert_eq!(got.windows.len(), 10);
        assert_eq!(got.shortfall, 0);
        for w in &got.windows {
            assert_eq!(w.len(), 75);
            assert!(w.end <= 500);
            for s in set.strokes() {
                let inter = w.end.min(s.end).saturating_sub(w.begin.max(s.begin));
                assert_eq!(inter, 0, "window {w:?} overlaps stroke {s:?}");
            }
        }
        let mut begins: Vec<_> = got.windows.iter().map(|w| w.begin).collect();
        let sorted = begins.clone();
        begins.dedup();
        assert_eq!(begins, sorted, "starts must be distinct and sorted");
    }

    #[test]
    fn fully_covered_video_has_no_negatives() {
        let set = ann(200, &[(0, 200)]);
        let got = negative_windows(&set, 5, 75, 1);
        assert!(got.windows.is_empty());
        assert_eq!(got.shortfall, 5);
    }

    #[test]
    fn stroke_free_video_draws_from_full_range() {
        let set = ann(1000, &[]);
        let got = negative_windows(&set, 3, 75, 9);
        assert_eq!(got.windows.len(), 3);
        assert!(got.windows.iter().all(|w| w.begin <= 925));
    }

    #[test]
    fn negative_draws_are_deterministic() {
        let set = ann(2000, &[(100, 300), (900, 1000)]);
        let a = negative_windows(&set, 7, 75, 5);
        let b = negative_windows(&set, 7, 75, 5);
        assert_eq!(a, b);
        let c = negative_windows(&set, 7, 75, 6);
        assert_ne!(a, c, "a different seed should reorder the draw");
    }

    fn black_sequence(frames: usize, w: usize, h: usize) -> FrameSequence {
        FrameSequence::new(w, h, 120.0, vec![vec![0u8; w * h * 3]; frames]).expect("valid")
    }

    #[test]
    fn labeled_windows_pair_positives_with_ratio_negatives() {
        let set = ann(2000, &[(100, 160), (600, 660), (1200, 1260)]);
        let cfg = SamplingConfig {
            window_len: 75,
            negative_ratio: 1.0,
            seed: 4,
        };
        let got = labeled_windows(&set, &cfg).expect("valid config");
        assert!(!got.video_too_short);
        assert_eq!(got.negative_shortfall, 0);
        let positives = got.windows.iter().filter(|(_, l)| *l == Label::Stroke).count();
        let negatives = got
            .windows
            .iter()
            .filter(|(_, l)| *l == Label::NonStroke)
            .count();
        assert_eq!(positives, 3);
        assert_eq!(negatives, 3);
        for pair in got.windows.windows(2) {
            assert!(pair[0].0.begin <= pair[1].0.begin);
        }
        for (w, label) in &got.windows {
            let touches = set.strokes().iter().any(|s| w.begin < s.end && s.begin < w.end);
            assert_eq!(touches, *label == Label::Stroke);
        }
    }

    #[test]
    fn labeled_windows_fold_the_video_id_into_the_draw() {
        let strokes = vec![Segment::new(300, 360)];
        let a = AnnotationSet::new("video_a", 2000, strokes.clone()).unwrap();
        let also_a = AnnotationSet::new("video_a", 2000, strokes.clone()).unwrap();
        let b = AnnotationSet::new("video_b", 2000, strokes).unwrap();
        let cfg = SamplingConfig {
            window_len: 75,
            negative_ratio: 3.0,
            seed: 0,
        };
        let first = labeled_windows(&a, &cfg).unwrap();
        assert_eq!(first, labeled_windows(&also_a, &cfg).unwrap());
        assert_ne!(first, labeled_windows(&b, &cfg).unwrap());
    }

    #[test]
    fn labeled_windows_round_the_negative_request() {
        let set = ann(4000, &[(100, 160), (600, 660), (1200, 1260)]);
        let cfg = SamplingConfig {
            window_len: 75,
            negative_ratio: 0.5,
            seed: 11,
        };
        let got = labeled_windows(&set, &cfg).expect("valid config");
        let negatives = got
            .windows
            .iter()
            .filter(|(_, l)| *l == Label::NonStroke)
            .count();
        assert_eq!(negatives, 2);
    }

    #[test]
    fn labeled_windows_flag_short_videos() {
        let set = ann(50, &[(10, 20)]);
        let got = labeled_windows(&set, &SamplingConfig::default()).expect("valid config");
        assert!(got.video_too_short);
        assert!(got.windows.is_empty());
    }

    #[test]
    fn all_black_window_gives_zero_tensors() {
        let seq = black_sequence(6, 16, 12);
        let builder = SampleBuilder::new(FlowConfig::default()).with_output_size(16, 12);
        let sample = builder
            .build(&seq, Segment::new(0, 6), Label::NonStroke)
            .expect("build");
        assert_eq!(sample.rgb.shape(), &[3, 6, 12, 16]);
        assert_eq!(sample.flow.shape(), &[2, 6, 12, 16]);
        assert!(sample.rgb.data().iter().all(|&v| v == 0.0));
        assert!(sample.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_pixels_normalize_to_one() {
        let seq = FrameSequence::new(4, 4, 120.0, vec![vec![255u8; 48]; 3]).expect("valid");
        let builder = SampleBuilder::new(FlowConfig::default()).with_output_size(4, 4);
        let sample = builder
            .build(&seq, Segment::new(0, 3), Label::Stroke)
            .expect("build");
        assert!(sample.rgb.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_window_is_rejected() {
        let seq = black_sequence(5, 8, 8);
        let builder = SampleBuilder::new(FlowConfig::default()).with_output_size(8, 8);
        assert!(matches!(
            builder.build(&seq, Segment::new(2, 7), Label::Stroke),
            Err(DatasetError::WindowOutOfRange(2, 7, 5))
        ));
    }

    #[test]
    fn cached_and_fresh_flow_agree_bitwise() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let frames: Vec<Vec<u8>> = (0..4)
            .map(|_| (0..16 * 16 * 3).map(|_| rng.gen()).collect())
            .collect();
        let seq = FrameSequence::new(16, 16, 120.0, frames).expect("valid");
        let window = Segment::new(0, 4);

        let plain = SampleBuilder::new(FlowConfig::default()).with_output_size(16, 16);
        let fresh = plain.input_tensors(&seq, window).expect("fresh").1;

        let dir = tempfile::tempdir().expect("tempdir");
        let cached = plain.clone().with_cache(FlowCacheConfig {
            dir: dir.path().to_path_buf(),
            video_key: "vid".into(),
        });
        let cold = cached.input_tensors(&seq, window).expect("cold").1;
        let warm = cached.input_tensors(&seq, window).expect("warm").1;

        assert_eq!(cold.data(), fresh.data());
        assert_eq!(warm.data(), cold.data());
        let cache_files = walk_flo_count(dir.path());
        assert_eq!(cache_files, 3, "one flow file per consecutive pair");
    }

    fn walk_flo_count(dir: &std::path::Path) -> usize {
        let mut count = 0;
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).expect("read_dir") {
                let path = entry.expect("entry").path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|e| e == "flo") {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn batches_chunk_with_partial_tail() {
        let batches = epoch_batches(25, 10, 3, 0, true).expect("batches");
        let sizes: Vec<_> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        let mut seen: Vec<_> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffled_batches_keep_insertion_order() {
        let batches = epoch_batches(7, 3, 99, 4, false).expect("batches");
        assert_eq!(batches, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }

    #[test]
    fn batch_order_is_seeded_per_epoch() {
        let a = epoch_batches(20, 6, 11, 2, true).expect("batches");
        let b = epoch_batches(20, 6, 11, 2, true).expect("batches");
        assert_eq!(a, b);
        let c = epoch_batches(20, 6, 11, 3, true).expect("batches");
        assert_ne!(a, c, "different epochs should reshuffle");
    }

    #[test]
    fn empty_sample_list_gives_no_batches() {
        assert!(epoch_batches(0, 10, 0, 0, true).expect("batches").is_empty());
        assert!(epoch_batches(5, 0, 0, 0, true).is_err());
    }
}
