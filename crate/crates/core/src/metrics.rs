//! Temporal-detection evaluation: interval IoU, average precision over
//! ranked detections, whole-video frame-set IoU, and the stroke
//! concentration/duration summary table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::video_io::{AnnotationSet, Segment};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid metrics input: {0}")]
    InvalidInput(String),
}

/// Intersection over union of two half-open frame intervals. Degenerate
/// empty-vs-empty input counts as a perfect match.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter_begin = a.begin.max(b.begin);
    let inter_end = a.end.min(b.end);
    let inter = inter_end.saturating_sub(inter_begin);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Detections in descending confidence, ties broken by earlier begin.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .expect("finite confidences")
            .then(dets[i].segment.begin.cmp(&dets[j].segment.begin))
    });
    order
}

/// Matches one detection against the unmatched ground truth with the
/// highest overlap; earlier-listed ground truth wins exact ties.
fn best_unmatched(det: Segment, gts: &[Segment], matched: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (gi, &gt) in gts.iter().enumerate() {
        if matched[gi] {
            continue;
        }
        let overlap = tiou(det, gt);
        let better = match best {
            None => true,
            Some((_, b)) => overlap > b,
        };
        if better {
            best = Some((gi, overlap));
        }
    }
    best
}

/// Interpolation-free average precision: the mean of the precision at
/// each true-positive rank, divided by the ground-truth count.
///
/// A detection is a true positive when its best-overlap unmatched ground
/// truth reaches `iou_threshold`; every detection consumes at most one
/// ground truth. With no ground truth the score is 1.0 for an empty
/// detection list and 0.0 otherwise.
pub fn average_precision(dets: &[Detection], gts: &[Segment], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &di) in ranked(dets).iter().enumerate() {
        if let Some((gi, overlap)) = best_unmatched(dets[di].segment, gts, &matched) {
            if overlap >= iou_threshold {
                matched[gi] = true;
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
    }
    ap / gts.len() as f64
}

/// Everything the evaluator needs to know about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEval {
    pub video_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Segment>,
    pub total_frames: usize,
}

/// One point of the pooled precision/recall curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGiou {
    pub video_id: String,
    pub giou: f64,
}

/// Evaluation summary over a collection of videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub map: f64,
    pub per_video_giou: Vec<VideoGiou>,
    pub mean_giou: f64,
    pub detection_count: usize,
    pub ground_truth_count: usize,
    /// Precision/recall trace at the first threshold, one point per rank.
    pub pr_curve: Vec<PrPoint>,
}

struct PooledOutcome {
    ap: f64,
    curve: Vec<PrPoint>,
}

/// Pooled average precision across videos. Detections from every video
/// compete in one ranking, but each can only match ground truth from its
/// own video.
fn pooled_ap(videos: &[VideoEval], iou_threshold: f64) -> PooledOutcome {
    let total_gt: usize = videos.iter().map(|v| v.ground_truth.len()).sum();
    let mut pool: Vec<(usize, Detection)> = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for &d in &v.detections {
            pool.push((vi, d));
        }
    }
    if total_gt == 0 {
        let ap = if pool.is_empty() { 1.0 } else { 0.0 };
        return PooledOutcome {
            ap,
            curve: Vec::new(),
        };
    }
    pool.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .expect("finite confidences")
            .then(a.1.segment.begin.cmp(&b.1.segment.begin))
    });
    let mut matched: Vec<Vec<bool>> = videos.iter().map(|v| vec![false; v.ground_truth.len()]).collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut curve = Vec::with_capacity(pool.len());
    for (rank, (vi, det)) in pool.iter().enumerate() {
        let gts = &videos[*vi].ground_truth;
        if let Some((gi, overlap)) = best_unmatched(det.segment, gts, &matched[*vi]) {
            if overlap >= iou_threshold {
                matched[*vi][gi] = true;
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        curve.push(PrPoint {
            confidence: det.confidence,
            precision: tp as f64 / (rank + 1) as f64,
            recall: tp as f64 / total_gt as f64,
        });
    }
    PooledOutcome {
        ap: ap / total_gt as f64,
        curve,
    }
}

/// Clamps segments to the video, merges overlaps, and returns the union
/// as disjoint sorted intervals.
fn merged_intervals(segments: &[Segment], total_frames: usize) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = segments
        .iter()
        .map(|s| (s.begin.min(total_frames), s.end.min(total_frames)))
        .filter(|(b, e)| b < e)
        .collect();
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (b, e) in spans {
        match merged.last_mut() {
            Some((_, le)) if b <= *le => *le = (*le).max(e),
            _ => merged.push((b, e)),
        }
    }
    merged
}

fn overlap_len(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let mut i = 0;
    let mut j = 0;
    let mut total = 0;
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo < hi {
            total += hi - lo;
        }
        if a[i].1 <= b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Frame-set IoU between the union of all detections and the union of
/// all ground-truth segments of one video. Both unions empty means the
/// detector was rightly silent: 1.0.
pub fn global_iou(dets: &[Detection], gts: &[Segment], total_frames: usize) -> f64 {
    let det_segs: Vec<Segment> = dets.iter().map(|d| d.segment).collect();
    let pred = merged_intervals(&det_segs, total_frames);
    let truth = merged_intervals(gts, total_frames);
    let pred_len: usize = pred.iter().map(|(b, e)| e - b).sum();
    let truth_len: usize = truth.iter().map(|(b, e)| e - b).sum();
    let inter = overlap_len(&pred, &truth);
    let union = pred_len + truth_len - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Full evaluation: pooled AP per threshold, their mean, and per-video
/// plus mean frame-set IoU.
pub fn evaluate(videos: &[VideoEval], thresholds: &[f64]) -> Result<EvalReport, MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::InvalidInput(
            "at least one IoU threshold is required".into(),
        ));
    }
    for &t in thresholds {
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(MetricsError::InvalidInput(format!(
                "IoU threshold {t} outside [0, 1]"
            )));
        }
    }
    if videos.is_empty() {
        return Err(MetricsError::InvalidInput("no videos to evaluate".into()));
    }
    let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
    let mut pr_curve = Vec::new();
    for (i, &t) in thresholds.iter().enumerate() {
        let outcome = pooled_ap(videos, t);
        if i == 0 {
            pr_curve = outcome.curve;
        }
        ap_per_threshold.push(outcome.ap);
    }
    let map = ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64;

    let per_video_giou: Vec<VideoGiou> = videos
        .iter()
        .map(|v| VideoGiou {
            video_id: v.video_id.clone(),
            giou: global_iou(&v.detections, &v.ground_truth, v.total_frames),
        })
        .collect();
    let mean_giou =
        per_video_giou.iter().map(|g| g.giou).sum::<f64>() / per_video_giou.len() as f64;

    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        ap_per_threshold,
        map,
        per_video_giou,
        mean_giou,
        detection_count: videos.iter().map(|v| v.detections.len()).sum(),
        ground_truth_count: videos.iter().map(|v| v.ground_truth.len()).sum(),
        pr_curve,
    })
}

/// Pooled duration summary; absent when there are no strokes at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean: f64,
    /// Population standard deviation of the stroke durations.
    pub stddev: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeStats {
    pub stroke_count: usize,
    pub total_frames: usize,
    pub strokes_per_1k_frames: f64,
    pub durations: Option<DurationStats>,
}

/// Stroke concentration and duration over one or more annotation sets.
pub fn stroke_stats(sets: &[AnnotationSet]) -> Result<StrokeStats, MetricsError> {
    let total_frames: usize = sets.iter().map(|s| s.total_frames()).sum();
    if total_frames == 0 {
        return Err(MetricsError::InvalidInput(
            "total frame count is zero".into(),
        ));
    }
    let durations: Vec<usize> = sets
        .iter()
        .flat_map(|s| s.strokes().iter().map(|seg| seg.len()))
        .collect();
    let stroke_count = durations.len();
    let strokes_per_1k_frames = 1000.0 * stroke_count as f64 / total_frames as f64;
    let duration_stats = if durations.is_empty() {
        None
    } else {
        let n = durations.len() as f64;
        let mean = durations.iter().map(|&d| d as f64).sum::<f64>() / n;
        let var = durations
            .iter()
            .map(|&d| {
                let diff = d as f64 - mean;
                diff * diff
            })
            .sum::<f64>()
            / n;
        Some(DurationStats {
            mean,
            stddev: var.sqrt(),
            min: *durations.iter().min().expect("non-empty"),
            max: *durations.iter().max().expect("non-empty"),
        })
    };
    Ok(StrokeStats {
        stroke_count,
        total_frames,
        strokes_per_1k_frames,
        durations: duration_stats,
    })
}

/// Rounds to four significant digits, e.g. 36.16, 770.7, 25.00, 0.5000.
pub fn format_sig4(v: f64) -> String {
    if v == 0.0 {
        return "0.000".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Renders labeled stroke statistics as an aligned four-column text table
/// (strokes per thousand frames, mean±stddev duration, min, max).
pub fn render_stats_table(rows: &[(String, StrokeStats)]) -> String {
    let header = [
        "Set".to_string(),
        "# Strokes/1K frames".to_string(),
        "Mean".to_string(),
        "Min".to_string(),
        "Max".to_string(),
    ];
    let mut cells: Vec<[String; 5]> = vec![header];
    for (name, stats) in rows {
        let (mean, min, max) = match &stats.durations {
            Some(d) => (
                format!("{:.1}\u{b1}{}", d.mean, format_sig4(d.stddev)),
                d.min.to_string(),
                d.max.to_string(),
            ),
            None => ("-".to_string(), "-".to_string(), "-".to_string()),
        };
        cells.push([
            name.clone(),
            format!("{:.2}", stats.strokes_per_1k_frames),
            mean,
            min,
            max,
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in &cells {
        for (col, cell) in row.iter().enumerate() {
            if col > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            if col + 1 < row.len() {
                for _ in cell.chars().count()..widths[col] {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    }
    out
}
