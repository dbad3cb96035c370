//! Frame-sequence, annotation, and checkpoint persistence, plus bilinear
//! resizing to the network's input resolution.
//!
//! Frames live as binary PPM (P6, maxval 255) files beside a meta.json;
//! annotations are a small JSON document; checkpoints are a length-prefixed
//! binary container. Every reader validates the full invariant set of the
//! value it returns and names the offending file or record on failure.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TSN1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VideoIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed PPM: {detail}")]
    MalformedPpm { path: PathBuf, detail: String },
    #[error("{path}: malformed metadata: {detail}")]
    MalformedMeta { path: PathBuf, detail: String },
    #[error("{path}: missing frame file")]
    MissingFrame { path: PathBuf },
    #[error("{path}: frame mismatch: {detail}")]
    FrameMismatch { path: PathBuf, detail: String },
    #[error("invalid frame sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid annotations: {0}")]
    InvalidAnnotations(String),
    #[error("{path}: malformed annotations: {detail}")]
    MalformedAnnotations { path: PathBuf, detail: String },
    #[error("{path}: corrupt checkpoint: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },
    #[error("resize source {0}x{1} too small (needs at least 2x2)")]
    TinyResizeSource(usize, usize),
    #[error("resize target {0}x{1} is empty")]
    EmptyResizeTarget(usize, usize),
}

impl VideoIoError {
    fn io(path: &Path, source: io::Error) -> Self {
        VideoIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Half-open frame interval `[begin, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub begin: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(begin: usize, end: usize) -> Self {
        Segment { begin, end }
    }

    /// Number of frames covered.
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.begin)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }
}

/// An ordered run of same-sized 8-bit RGB frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    width: usize,
    height: usize,
    fps: f64,
    frames: Vec<Vec<u8>>,
}

impl FrameSequence {
    pub fn new(
        width: usize,
        height: usize,
        fps: f64,
        frames: Vec<Vec<u8>>,
    ) -> Result<Self, VideoIoError> {
        if width == 0 || height == 0 {
            return Err(VideoIoError::InvalidSequence(format!(
                "frame extent {width}x{height} is empty"
            )));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(VideoIoError::InvalidSequence(format!(
                "fps {fps} must be positive and finite"
            )));
        }
        if frames.is_empty() {
            return Err(VideoIoError::InvalidSequence("no frames".into()));
        }
        let expect = width * height * 3;
        for (i, f) in frames.iter().enumerate() {
            if f.len() != expect {
                return Err(VideoIoError::InvalidSequence(format!(
                    "frame {i} holds {} bytes, expected {expect}",
                    f.len()
                )));
            }
        }
        Ok(FrameSequence {
            width,
            height,
            fps,
            frames,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Interleaved RGB bytes of one frame.
    pub fn frame(&self, index: usize) -> &[u8] {
        &self.frames[index]
    }
}

/// Stroke annotations for one video: sorted, pairwise-disjoint segments
/// inside `[0, total_frames)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    video_id: String,
    total_frames: usize,
    strokes: Vec<Segment>,
}

impl AnnotationSet {
    pub fn new(
        video_id: impl Into<String>,
        total_frames: usize,
        strokes: Vec<Segment>,
    ) -> Result<Self, VideoIoError> {
        for (i, s) in strokes.iter().enumerate() {
            if s.begin >= s.end {
                return Err(VideoIoError::InvalidAnnotations(format!(
                    "segment {i} has begin {} >= end {}",
                    s.begin, s.end
                )));
            }
            if s.end > total_frames {
                return Err(VideoIoError::InvalidAnnotations(format!(
                    "segment {i} [{}, {}) exceeds total_frames {total_frames}",
                    s.begin, s.end
                )));
            }
            if i > 0 {
                let prev = &strokes[i - 1];
                if s.begin < prev.begin {
                    return Err(VideoIoError::InvalidAnnotations(format!(
                        "segment {i} begins at {} before segment {} at {}",
                        s.begin,
                        i - 1,
                        prev.begin
                    )));
                }
                if s.begin < prev.end {
                    return Err(VideoIoError::InvalidAnnotations(format!(
                        "segment {i} [{}, {}) overlaps segment {} [{}, {})",
                        s.begin,
                        s.end,
                        i - 1,
                        prev.begin,
                        prev.end
                    )));
                }
            }
        }
        Ok(AnnotationSet {
            video_id: video_id.into(),
            total_frames,
            strokes,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn strokes(&self) -> &[Segment] {
        &self.strokes
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDoc {
    video_id: String,
    total_frames: usize,
    strokes: Vec<Segment>,
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<(), VideoIoError> {
    let doc = AnnotationDoc {
        video_id: set.video_id.clone(),
        total_frames: set.total_frames,
        strokes: set.strokes.clone(),
    };
    let file = File::create(path).map_err(|e| VideoIoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| VideoIoError::MalformedAnnotations {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    out.write_all(b"\n").map_err(|e| VideoIoError::io(path, e))?;
    out.flush().map_err(|e| VideoIoError::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet, VideoIoError> {
    let file = File::open(path).map_err(|e| VideoIoError::io(path, e))?;
    let doc: AnnotationDoc =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            VideoIoError::MalformedAnnotations {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        })?;
    AnnotationSet::new(doc.video_id, doc.total_frames, doc.strokes).map_err(|e| {
        VideoIoError::MalformedAnnotations {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    })
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), VideoIoError> {
    if rgb.len() != width * height * 3 {
        return Err(VideoIoError::MalformedPpm {
            path: path.to_path_buf(),
            detail: format!(
                "buffer holds {} bytes for a {width}x{height} frame",
                rgb.len()
            ),
        });
    }
    let file = File::create(path).map_err(|e| VideoIoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(format!("P6\n{width} {height}\n255\n").as_bytes())
        .map_err(|e| VideoIoError::io(path, e))?;
    out.write_all(rgb).map_err(|e| VideoIoError::io(path, e))?;
    out.flush().map_err(|e| VideoIoError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), VideoIoError> {
    let bytes = std::fs::read(path).map_err(|e| VideoIoError::io(path, e))?;
    let malformed = |detail: String| VideoIoError::MalformedPpm {
        path: path.to_path_buf(),
        detail,
    };

    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed("missing P6 signature".into()));
    }
    let mut pos = 2usize;
    let next_token = |bytes: &[u8], pos: &mut usize| -> Result<u64, VideoIoError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(malformed("expected a numeric header field".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("unreadable header field".into()))
    };

    let width = next_token(&bytes, &mut pos)? as usize;
    let height = next_token(&bytes, &mut pos)? as usize;
    let maxval = next_token(&bytes, &mut pos)?;
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty extent {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator before pixel data".into()));
    }
    pos += 1;
    let expect = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < expect {
        return Err(malformed(format!(
            "pixel data truncated: {} of {expect} bytes",
            raster.len()
        )));
    }
    if raster.len() > expect {
        return Err(malformed(format!(
            "{} trailing bytes after pixel data",
            raster.len() - expect
        )));
    }
    Ok((width, height, raster.to_vec()))
}

fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaDoc {
    width: usize,
    height: usize,
    fps: f64,
    frame_count: usize,
}

pub fn write_frame_dir(seq: &FrameSequence, dir: &Path) -> Result<(), VideoIoError> {
    std::fs::create_dir_all(dir).map_err(|e| VideoIoError::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta = MetaDoc {
        width: seq.width,
        height: seq.height,
        fps: seq.fps,
        frame_count: seq.frames.len(),
    };
    let file = File::create(&meta_path).map_err(|e| VideoIoError::io(&meta_path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &meta).map_err(|e| VideoIoError::MalformedMeta {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    out.write_all(b"\n").map_err(|e| VideoIoError::io(&meta_path, e))?;
    out.flush().map_err(|e| VideoIoError::io(&meta_path, e))?;

    for (i, frame) in seq.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        write_ppm(&path, seq.width, seq.height, frame)?;
    }
    Ok(())
}

pub fn read_frame_dir(dir: &Path) -> Result<FrameSequence, VideoIoError> {
    let meta_path = dir.join("meta.json");
    let file = File::open(&meta_path).map_err(|e| VideoIoError::io(&meta_path, e))?;
    let meta: MetaDoc =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| VideoIoError::MalformedMeta {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?;
    if meta.frame_count == 0 {
        return Err(VideoIoError::MalformedMeta {
            path: meta_path,
            detail: "frame_count is 0".into(),
        });
    }

    let mut frames = Vec::with_capacity(meta.frame_count);
    for i in 0..meta.frame_count {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            return Err(VideoIoError::MissingFrame { path });
        }
        let (w, h, rgb) = read_ppm(&path)?;
        if w != meta.width || h != meta.height {
            return Err(VideoIoError::FrameMismatch {
                path,
                detail: format!(
                    "frame is {w}x{h}, metadata says {}x{}",
                    meta.width, meta.height
                ),
            });
        }
        frames.push(rgb);
    }
    FrameSequence::new(meta.width, meta.height, meta.fps, frames)
}

/// Bilinear resize of an interleaved 8-bit RGB frame with edge clamping;
/// results round half-up to 8 bits. Resizing to the source size is the
/// identity.
pub fn resize_bilinear(
    width: usize,
    height: usize,
    rgb: &[u8],
    out_w: usize,
    out_h: usize,
) -> Result<Vec<u8>, VideoIoError> {
    if width < 2 || height < 2 {
        return Err(VideoIoError::TinyResizeSource(width, height));
    }
    if out_w == 0 || out_h == 0 {
        return Err(VideoIoError::EmptyResizeTarget(out_w, out_h));
    }
    assert_eq!(rgb.len(), width * height * 3, "frame buffer size");

    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for yo in 0..out_h {
        let y = ((yo as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = y - y0 as f64;
        for xo in 0..out_w {
            let x = ((xo as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = x - x0 as f64;
            for ch in 0..3 {
                let p00 = rgb[(y0 * width + x0) * 3 + ch] as f64;
                let p10 = rgb[(y0 * width + x1) * 3 + ch] as f64;
                let p01 = rgb[(y1 * width + x0) * 3 + ch] as f64;
                let p11 = rgb[(y1 * width + x1) * 3 + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p00 + fx * p10)
                    + fy * ((1.0 - fx) * p01 + fx * p11);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Everything a checkpoint file holds: named parameter tensors and,
/// optionally, the optimizer's step count and velocity buffers. Values are
/// stored as f32, so loaded tensors carry f32-rounded values.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub params: Vec<(String, Tensor)>,
    pub optim: Option<CheckpointOptim>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointOptim {
    pub step_count: u64,
    pub velocities: Vec<(String, Tensor)>,
}

fn write_record(
    out: &mut impl Write,
    name: &str,
    tensor: &Tensor,
    path: &Path,
) -> Result<(), VideoIoError> {
    let werr = |e| VideoIoError::io(path, e);
    out.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
    out.write_all(name.as_bytes()).map_err(werr)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(werr)?;
    for &e in tensor.shape() {
        out.write_all(&(e as u32).to_le_bytes()).map_err(werr)?;
    }
    for &v in tensor.data() {
        out.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
    }
    Ok(())
}

fn read_record(
    input: &mut impl Read,
    path: &Path,
) -> Result<(String, Tensor), VideoIoError> {
    let corrupt = |detail: String| VideoIoError::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut buf4 = [0u8; 4];
    input
        .read_exact(&mut buf4)
        .map_err(|_| corrupt("truncated record header".into()))?;
    let name_len = u32::from_le_bytes(buf4) as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(corrupt(format!("implausible name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    input
        .read_exact(&mut name_bytes)
        .map_err(|_| corrupt("truncated parameter name".into()))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| corrupt("parameter name is not UTF-8".into()))?;

    input
        .read_exact(&mut buf4)
        .map_err(|_| corrupt(format!("truncated rank for {name}")))?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank} for {name}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count = 1usize;
    for _ in 0..rank {
        input
            .read_exact(&mut buf4)
            .map_err(|_| corrupt(format!("truncated shape for {name}")))?;
        let e = u32::from_le_bytes(buf4) as usize;
        if e == 0 {
            return Err(corrupt(format!("zero extent in shape of {name}")));
        }
        count = count
            .checked_mul(e)
            .filter(|&c| c <= (1 << 31))
            .ok_or_else(|| corrupt(format!("oversized shape for {name}")))?;
        shape.push(e);
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        input
            .read_exact(&mut buf4)
            .map_err(|_| corrupt(format!("truncated data for {name}")))?;
        data.push(f32::from_le_bytes(buf4) as f64);
    }
    let tensor = Tensor::from_vec(shape, data)
        .map_err(|e| corrupt(format!("bad tensor for {name}: {e}")))?;
    Ok((name, tensor))
}

pub fn save_checkpoint(
    path: &Path,
    params: &[(&str, &Tensor)],
    optim: Option<(u64, &[(&str, &Tensor)])>,
) -> Result<(), VideoIoError> {
    let file = File::create(path).map_err(|e| VideoIoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| VideoIoError::io(path, e);

    out.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
    out.write_all(&(params.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, tensor) in params {
        write_record(&mut out, name, tensor, path)?;
    }
    match optim {
        None => out.write_all(&[0u8]).map_err(werr)?,
        Some((step_count, velocities)) => {
            out.write_all(&[1u8]).map_err(werr)?;
            out.write_all(&step_count.to_le_bytes()).map_err(werr)?;
            out.write_all(&(velocities.len() as u32).to_le_bytes())
                .map_err(werr)?;
            for (name, tensor) in velocities {
                write_record(&mut out, name, tensor, path)?;
            }
        }
    }
    out.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, VideoIoError> {
    let file = File::open(path).map_err(|e| VideoIoError::io(path, e))?;
    let mut input = BufReader::new(file);
    let corrupt = |detail: String| VideoIoError::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail,
    };

    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("magic mismatch".into()));
    }
    let mut buf4 = [0u8; 4];
    input
        .read_exact(&mut buf4)
        .map_err(|_| corrupt("truncated version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    input
        .read_exact(&mut buf4)
        .map_err(|_| corrupt("truncated parameter count".into()))?;
    let param_count = u32::from_le_bytes(buf4) as usize;
    if param_count > 10_000 {
        return Err(corrupt(format!("implausible parameter count {param_count}")));
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(read_record(&mut input, path)?);
    }

    let mut flag = [0u8; 1];
    input
        .read_exact(&mut flag)
        .map_err(|_| corrupt("truncated optimizer flag".into()))?;
    let optim = match flag[0] {
        0 => None,
        1 => {
            let mut buf8 = [0u8; 8];
            input
                .read_exact(&mut buf8)
                .map_err(|_| corrupt("truncated step count".into()))?;
            let step_count = u64::from_le_bytes(buf8);
            input
                .read_exact(&mut buf4)
                .map_err(|_| corrupt("truncated velocity count".into()))?;
            let vel_count = u32::from_le_bytes(buf4) as usize;
            if vel_count > 10_000 {
                return Err(corrupt(format!("implausible velocity count {vel_count}")));
            }
            let mut velocities = Vec::with_capacity(vel_count);
            for _ in 0..vel_count {
                velocities.push(read_record(&mut input, path)?);
            }
            Some(CheckpointOptim {
                step_count,
                velocities,
            })
        }
        other => return Err(corrupt(format!("bad optimizer flag {other}"))),
    };

    let mut extra = [0u8; 1];
    match input.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(corrupt("trailing bytes after checkpoint".into())),
        Err(e) => return Err(VideoIoError::io(path, e)),
    }
    Ok(CheckpointData { params, optim })
}
