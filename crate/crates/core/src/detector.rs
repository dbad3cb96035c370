//! Whole-video inference: the video is cut into non-overlapping windows,
//! each window is classified, and maximal runs of stroke-labeled windows
//! are fused into single detections. An optional duration cap splits
//! pathologically long runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SampleBuilder};
use crate::model::{predict_proba, ModelError, ModelParams};
use crate::video_io::{FrameSequence, Segment};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("detector window length {detector} does not match model input length {model}")]
    WindowMismatch { model: usize, detector: usize },
    #[error("window scores are not a contiguous ascending lattice: {0}")]
    NonContiguous(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed detections file {path}: {detail}")]
    MalformedDetections { path: String, detail: String },
}

/// One fused detection: a frame interval and the mean stroke probability
/// of the windows that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub segment: Segment,
    pub confidence: f64,
}

/// Classification score for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScore {
    pub window: Segment,
    pub p_stroke: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub window_len: usize,
    /// A window counts as stroke when `p_stroke >= stroke_threshold`.
    pub stroke_threshold: f64,
    /// When set, fused runs are split into chunks of at most this many
    /// frames. Off by default.
    pub max_duration: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window_len: 75,
            stroke_threshold: 0.5,
            max_duration: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.window_len == 0 {
            return Err(DetectError::InvalidConfig("window_len must be positive".into()));
        }
        if !(self.stroke_threshold > 0.0 && self.stroke_threshold < 1.0) {
            return Err(DetectError::InvalidConfig(format!(
                "stroke_threshold must lie strictly between 0 and 1, got {}",
                self.stroke_threshold
            )));
        }
        if let Some(cap) = self.max_duration {
            if cap == 0 {
                return Err(DetectError::InvalidConfig(
                    "max_duration must be positive when set".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Non-overlapping windows `[0,L), [L,2L), ...`; an incomplete tail is
/// dropped, so trailing frames may stay unclassified.
pub fn sliding_windows(total_frames: usize, window_len: usize) -> Vec<Segment> {
    if window_len == 0 {
        return Vec::new();
    }
    (0..total_frames / window_len)
        .map(|i| Segment::new(i * window_len, (i + 1) * window_len))
        .collect()
}

/// Window scores for one video, plus a flag for videos shorter than a
/// single window (which produce no scores at all).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub scores: Vec<WindowScore>,
    pub video_too_short: bool,
}

/// Classifies every full window of `seq` in ascending order.
pub fn classify_video(
    params: &ModelParams,
    seq: &FrameSequence,
    builder: &SampleBuilder,
    det_cfg: &DetectorConfig,
) -> Result<WindowScores, DetectError> {
    det_cfg.validate()?;
    if det_cfg.window_len != params.cfg.input_t {
        return Err(DetectError::WindowMismatch {
            model: params.cfg.input_t,
            detector: det_cfg.window_len,
        });
    }
    let (out_w, out_h) = builder.output_size();
    if out_w != params.cfg.input_w || out_h != params.cfg.input_h {
        return Err(DetectError::InvalidConfig(format!(
            "sample builder resizes to {out_w}x{out_h}, model expects {}x{}",
            params.cfg.input_w, params.cfg.input_h
        )));
    }
    let windows = sliding_windows(seq.frame_count(), det_cfg.window_len);
    let video_too_short = windows.is_empty();
    let mut scores = Vec::with_capacity(windows.len());
    for window in windows {
        let (rgb, flow) = builder.input_tensors(seq, window)?;
        let (_, p_stroke) = predict_proba(params, &rgb, &flow)?;
        scores.push(WindowScore { window, p_stroke });
    }
    Ok(WindowScores {
        scores,
        video_too_short,
    })
}

fn check_lattice(scores: &[WindowScore], window_len: usize) -> Result<(), DetectError> {
    for (i, s) in scores.iter().enumerate() {
        if s.window.len() != window_len {
            return Err(DetectError::NonContiguous(format!(
                "window {i} spans [{}, {}), expected length {window_len}",
                s.window.begin, s.window.end
            )));
        }
        if i > 0 && s.window.begin != scores[i - 1].window.end {
            return Err(DetectError::NonContiguous(format!(
                "window {i} begins at {} but the previous window ends at {}",
                s.window.begin,
                scores[i - 1].window.end
            )));
        }
        if !(s.p_stroke.is_finite() && (0.0..=1.0).contains(&s.p_stroke)) {
            return Err(DetectError::NonContiguous(format!(
                "window {i} has probability {} outside [0, 1]",
                s.p_stroke
            )));
        }
    }
    Ok(())
}

fn split_run(run: &[WindowScore], cap: Option<usize>, out: &mut Vec<Detection>) {
    let begin = run[0].window.begin;
    let end = run[run.len() - 1].window.end;
    match cap {
        None => {
            let mean = run.iter().map(|s| s.p_stroke).sum::<f64>() / run.len() as f64;
            out.push(Detection {
                segment: Segment::new(begin, end),
                confidence: mean,
            });
        }
        Some(cap) => {
            let mut chunk_begin = begin;
            while chunk_begin < end {
                let chunk_end = (chunk_begin + cap).min(end);
                let mut sum = 0.0;
                let mut n = 0usize;
                for s in run {
                    if s.window.begin < chunk_end && chunk_begin < s.window.end {
                        sum += s.p_stroke;
                        n += 1;
                    }
                }
                out.push(Detection {
                    segment: Segment::new(chunk_begin, chunk_end),
                    confidence: sum / n as f64,
                });
                chunk_begin = chunk_end;
            }
        }
    }
}

/// Fuses maximal runs of stroke-labeled windows into detections.
pub fn fuse(scores: &[WindowScore], cfg: &DetectorConfig) -> Result<Vec<Detection>, DetectError> {
    cfg.validate()?;
    check_lattice(scores, cfg.window_len)?;
    let mut detections = Vec::new();
    let mut run_start = None;
    for (i, s) in scores.iter().enumerate() {
        let stroke = s.p_stroke >= cfg.stroke_threshold;
        match (stroke, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                split_run(&scores[start..i], cfg.max_duration, &mut detections);
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(start) = run_start {
        split_run(&scores[start..], cfg.max_duration, &mut detections);
    }
    Ok(detections)
}

/// Detections plus the raw window scores that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRun {
    pub detections: Vec<Detection>,
    pub scores: Vec<WindowScore>,
    pub video_too_short: bool,
}

/// Classifies `seq` window by window and fuses the result.
pub fn detect(
    params: &ModelParams,
    seq: &FrameSequence,
    builder: &SampleBuilder,
    det_cfg: &DetectorConfig,
) -> Result<DetectionRun, DetectError> {
    let classified = classify_video(params, seq, builder, det_cfg)?;
    let detections = fuse(&classified.scores, det_cfg)?;
    Ok(DetectionRun {
        detections,
        scores: classified.scores,
        video_too_short: classified.video_too_short,
    })
}

/// On-disk detection record for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub video_id: String,
    pub detections: Vec<Detection>,
}

pub fn write_detections(path: &Path, file: &DetectionFile) -> Result<(), DetectError> {
    let mut body = serde_json::to_string_pretty(file).expect("serializable");
    body.push('\n');
    fs::write(path, body).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_detections(path: &Path) -> Result<DetectionFile, DetectError> {
    let body = fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: DetectionFile =
        serde_json::from_str(&body).map_err(|e| DetectError::MalformedDetections {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    validate_detection_file(&file, path)?;
    Ok(file)
}

fn validate_detection_file(file: &DetectionFile, path: &Path) -> Result<(), DetectError> {
    for (i, d) in file.detections.iter().enumerate() {
        if d.segment.begin >= d.segment.end {
            return Err(DetectError::MalformedDetections {
                path: path.display().to_string(),
                detail: format!(
                    "detection {i} of {} spans [{}, {})",
                    file.video_id, d.segment.begin, d.segment.end
                ),
            });
        }
        if !(d.confidence.is_finite() && (0.0..=1.0).contains(&d.confidence)) {
            return Err(DetectError::MalformedDetections {
                path: path.display().to_string(),
                detail: format!(
                    "detection {i} of {} has confidence {}",
                    file.video_id, d.confidence
                ),
            });
        }
    }
    Ok(())
}

/// Writes per-video detection records as one JSON array.
pub fn write_detection_batch(path: &Path, files: &[DetectionFile]) -> Result<(), DetectError> {
    let mut body = serde_json::to_string_pretty(files).expect("serializable");
    body.push('\n');
    fs::write(path, body).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads detection records for one or more videos: either a single
/// `{"video_id", "detections"}` object or a JSON array of them. Video ids
/// must be unique.
pub fn read_detection_batch(path: &Path) -> Result<Vec<DetectionFile>, DetectError> {
    let body = fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let files: Vec<DetectionFile> = if body.trim_start().starts_with('[') {
        serde_json::from_str(&body).map_err(|e| DetectError::MalformedDetections {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
    } else {
        vec![
            serde_json::from_str(&body).map_err(|e| DetectError::MalformedDetections {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?,
        ]
    };
    for file in &files {
        validate_detection_file(file, path)?;
    }
    for (i, file) in files.iter().enumerate() {
        if files[..i].iter().any(|f| f.video_id == file.video_id) {
            return Err(DetectError::MalformedDetections {
                path: path.display().to_string(),
                detail: format!("duplicate video id {}", file.video_id),
            });
        }
    }
    Ok(files)
}
