//! Dense optical flow between grayscale frames and its conversion into the
//! network's motion stream.
//!
//! The estimator is a coarse-to-fine variational solver: image pyramids,
//! one warp per level, and a per-pixel exact 2x2 Gauss-Seidel relaxation of
//! the linearized brightness-constancy energy with a quadratic smoothness
//! term. Every pixel update minimizes the local energy exactly, so the
//! discretized energy never increases within a level.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Magic number opening a flow file: the float 202021.25 little-endian.
const FLO_MAGIC: f32 = 202021.25;

/// Displacements above this many pixels are clipped before entering the
/// network; surviving values are scaled into [-1, 1].
pub const FLOW_CLIP: f64 = 20.0;

/// Pixels below this extent stop pyramid construction.
const MIN_PYRAMID_EXTENT: usize = 8;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("bad image buffer: {0}")]
    BadImage(String),
    #[error("flow stack needs at least 2 frames, got {0}")]
    WindowTooShort(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a flow file (magic mismatch)")]
    BadMagic { path: PathBuf },
    #[error("{path}: corrupt flow file: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

impl FlowError {
    fn io(path: &Path, source: io::Error) -> Self {
        FlowError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Single-channel luminance raster, row-major, values on the 8-bit scale
/// (0..=255) but real-valued.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, FlowError> {
        if width == 0 || height == 0 {
            return Err(FlowError::BadImage(format!(
                "image extent {width}x{height} is empty"
            )));
        }
        if data.len() != width * height {
            return Err(FlowError::BadImage(format!(
                "buffer holds {} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Luminance from interleaved 8-bit RGB: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn to_grayscale(width: usize, height: usize, rgb: &[u8]) -> Result<GrayImage, FlowError> {
    if rgb.len() != width * height * 3 {
        return Err(FlowError::BadImage(format!(
            "RGB buffer holds {} bytes for a {width}x{height} frame",
            rgb.len()
        )));
    }
    let data = rgb
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
        .collect();
    GrayImage::new(width, height, data)
}

/// Per-pixel displacement field between two frames, in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self, FlowError> {
        if u.len() != width * height || v.len() != width * height {
            return Err(FlowError::BadImage(format!(
                "flow buffers hold {}/{} values for a {width}x{height} field",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(FlowError::BadImage(
                "flow field contains non-finite values".into(),
            ));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Horizontal displacements, row-major.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Vertical displacements, row-major.
    pub fn v(&self) -> &[f64] {
        &self.v
    }
}

/// Solver parameters. The defaults recover small integer translations on
/// textured frames at the pipeline resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub pyramid_levels: usize,
    pub scale_factor: f64,
    pub smoothness_alpha: f64,
    pub iterations_per_level: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            pyramid_levels: 3,
            scale_factor: 0.5,
            smoothness_alpha: 15.0,
            iterations_per_level: 100,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.pyramid_levels < 1 {
            return Err(FlowError::InvalidConfig(
                "pyramid_levels must be at least 1".into(),
            ));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(FlowError::InvalidConfig(format!(
                "scale_factor {} not in (0, 1)",
                self.scale_factor
            )));
        }
        if !(self.smoothness_alpha > 0.0) || !self.smoothness_alpha.is_finite() {
            return Err(FlowError::InvalidConfig(format!(
                "smoothness_alpha {} must be positive and finite",
                self.smoothness_alpha
            )));
        }
        if self.iterations_per_level < 1 {
            return Err(FlowError::InvalidConfig(
                "iterations_per_level must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable identifier folding every parameter's exact bit pattern, used
    /// to key on-disk flow caches.
    pub fn cache_tag(&self) -> String {
        format!(
            "l{}s{:016x}a{:016x}i{}",
            self.pyramid_levels,
            self.scale_factor.to_bits(),
            self.smoothness_alpha.to_bits(),
            self.iterations_per_level
        )
    }
}

fn bilinear_sample(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = data[y0 * width + x0];
    let p10 = data[y0 * width + x1];
    let p01 = data[y1 * width + x0];
    let p11 = data[y1 * width + x1];
    (1.0 - fy) * ((1.0 - fx) * p00 + fx * p10) + fy * ((1.0 - fx) * p01 + fx * p11)
}

/// Separable 5-tap binomial blur with replicated edges, applied before
/// downsampling to keep coarse levels alias-free.
fn binomial_blur(img: &GrayImage) -> GrayImage {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width, img.height);
    let mut horiz = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, coef) in K.iter().enumerate() {
                let xi = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += coef * img.at(xi, y);
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, coef) in K.iter().enumerate() {
                let yi = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += coef * horiz[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

fn downsample(img: &GrayImage, nw: usize, nh: usize) -> GrayImage {
    let blurred = binomial_blur(img);
    let sx = img.width as f64 / nw as f64;
    let sy = img.height as f64 / nh as f64;
    let mut data = Vec::with_capacity(nw * nh);
    for yo in 0..nh {
        for xo in 0..nw {
            let x = (xo as f64 + 0.5) * sx - 0.5;
            let y = (yo as f64 + 0.5) * sy - 0.5;
            data.push(bilinear_sample(
                &blurred.data,
                img.width,
                img.height,
                x,
                y,
            ));
        }
    }
    GrayImage {
        width: nw,
        height: nh,
        data,
    }
}

fn resize_plane(src: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = Vec::with_capacity(nw * nh);
    for yo in 0..nh {
        for xo in 0..nw {
            let x = (xo as f64 + 0.5) * sx - 0.5;
            let y = (yo as f64 + 0.5) * sy - 0.5;
            out.push(bilinear_sample(src, w, h, x, y));
        }
    }
    out
}

/// Coefficients of the linearized data term at one pyramid level:
/// residual(p) = ix(p) u(p) + iy(p) v(p) + c(p).
struct Linearization {
    width: usize,
    height: usize,
    ix: Vec<f64>,
    iy: Vec<f64>,
    c: Vec<f64>,
}

fn linearize(a: &GrayImage, b: &GrayImage, u0: &[f64], v0: &[f64]) -> Linearization {
    let (w, h) = (a.width, a.height);
    let mut warped = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            warped[p] = bilinear_sample(&b.data, w, h, x as f64 + u0[p], y as f64 + v0[p]);
        }
    }
    // derivatives taken on the average of both frames reduce the bias a
    // one-sided estimate would introduce
    let avg: Vec<f64> = a.data.iter().zip(&warped).map(|(x, y)| 0.5 * (x + y)).collect();
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    let mut c = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            ix[p] = 0.5 * (avg[y * w + xp] - avg[y * w + xm]);
            iy[p] = 0.5 * (avg[yp * w + x] - avg[ym * w + x]);
            let it0 = warped[p] - a.data[p];
            c[p] = it0 - ix[p] * u0[p] - iy[p] * v0[p];
        }
    }
    Linearization {
        width: w,
        height: h,
        ix,
        iy,
        c,
    }
}

/// One Gauss-Seidel sweep in row-major order. Each pixel's (u, v) is set to
/// the exact minimizer of the local quadratic given its current neighbors,
/// so the level energy cannot increase.
fn gs_sweep(u: &mut [f64], v: &mut [f64], lin: &Linearization, alpha: f64) {
    let (w, h) = (lin.width, lin.height);
    let a2 = alpha * alpha;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut n = 0.0;
            let mut su = 0.0;
            let mut sv = 0.0;
            if x > 0 {
                n += 1.0;
                su += u[p - 1];
                sv += v[p - 1];
            }
            if x + 1 < w {
                n += 1.0;
                su += u[p + 1];
                sv += v[p + 1];
            }
            if y > 0 {
                n += 1.0;
                su += u[p - w];
                sv += v[p - w];
            }
            if y + 1 < h {
                n += 1.0;
                su += u[p + w];
                sv += v[p + w];
            }
            let ix = lin.ix[p];
            let iy = lin.iy[p];
            let c = lin.c[p];
            let a11 = ix * ix + a2 * n;
            let a12 = ix * iy;
            let a22 = iy * iy + a2 * n;
            let b1 = a2 * su - ix * c;
            let b2 = a2 * sv - iy * c;
            let det = a11 * a22 - a12 * a12;
            if det > 0.0 && det.is_finite() {
                u[p] = (b1 * a22 - a12 * b2) / det;
                v[p] = (a11 * b2 - a12 * b1) / det;
            }
        }
    }
}

/// Discretized level energy: sum of squared linearized residuals plus
/// alpha^2 times squared flow differences over right/down neighbor pairs.
fn level_energy(u: &[f64], v: &[f64], lin: &Linearization, alpha: f64) -> f64 {
    let (w, h) = (lin.width, lin.height);
    let a2 = alpha * alpha;
    let mut e = 0.0;
    for p in 0..w * h {
        let r = lin.ix[p] * u[p] + lin.iy[p] * v[p] + lin.c[p];
        e += r * r;
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                let du = u[p] - u[p + 1];
                let dv = v[p] - v[p + 1];
                e += a2 * (du * du + dv * dv);
            }
            if y + 1 < h {
                let du = u[p] - u[p + w];
                let dv = v[p] - v[p + w];
                e += a2 * (du * du + dv * dv);
            }
        }
    }
    e
}

/// Runs the single-level solver on a frame pair from zero flow and reports
/// the objective value before any sweep and after each of `sweeps` sweeps.
/// Each pixel update is the exact local minimizer, so the returned sequence
/// never increases; the trace exists so callers can check that invariant.
pub fn solver_energy_trace(
    frame_a: &GrayImage,
    frame_b: &GrayImage,
    alpha: f64,
    sweeps: usize,
) -> Result<Vec<f64>, FlowError> {
    if frame_a.width != frame_b.width || frame_a.height != frame_b.height {
        return Err(FlowError::DimensionMismatch(
            frame_a.width,
            frame_a.height,
            frame_b.width,
            frame_b.height,
        ));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(FlowError::InvalidConfig(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let n = frame_a.width * frame_a.height;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let lin = linearize(frame_a, frame_b, &u, &v);
    let mut trace = Vec::with_capacity(sweeps + 1);
    trace.push(level_energy(&u, &v, &lin, alpha));
    for _ in 0..sweeps {
        gs_sweep(&mut u, &mut v, &lin, alpha);
        trace.push(level_energy(&u, &v, &lin, alpha));
    }
    Ok(trace)
}

/// Dense flow from `frame_a` to `frame_b`.
///
/// Identical frames return exactly zero flow; constant frames likewise
/// (the data term vanishes and zero initialization is the minimizer).
pub fn compute_flow(
    frame_a: &GrayImage,
    frame_b: &GrayImage,
    cfg: &FlowConfig,
) -> Result<FlowField, FlowError> {
    cfg.validate()?;
    if frame_a.width != frame_b.width || frame_a.height != frame_b.height {
        return Err(FlowError::DimensionMismatch(
            frame_a.width,
            frame_a.height,
            frame_b.width,
            frame_b.height,
        ));
    }

    let mut pyramid: Vec<(GrayImage, GrayImage)> = vec![(frame_a.clone(), frame_b.clone())];
    while pyramid.len() < cfg.pyramid_levels {
        let (prev_a, _) = pyramid.last().expect("pyramid is non-empty");
        let nw = ((prev_a.width as f64) * cfg.scale_factor).floor() as usize;
        let nh = ((prev_a.height as f64) * cfg.scale_factor).floor() as usize;
        if nw < MIN_PYRAMID_EXTENT || nh < MIN_PYRAMID_EXTENT {
            break;
        }
        if nw >= prev_a.width || nh >= prev_a.height {
            break;
        }
        let (pa, pb) = pyramid.last().expect("pyramid is non-empty");
        let a = downsample(pa, nw, nh);
        let b = downsample(pb, nw, nh);
        pyramid.push((a, b));
    }

    let coarsest = pyramid.last().expect("pyramid is non-empty");
    let mut cur_w = coarsest.0.width;
    let mut cur_h = coarsest.0.height;
    let mut u = vec![0.0; cur_w * cur_h];
    let mut v = vec![0.0; cur_w * cur_h];

    for (a, b) in pyramid.iter().rev() {
        if a.width != cur_w || a.height != cur_h {
            let mut nu = resize_plane(&u, cur_w, cur_h, a.width, a.height);
            let mut nv = resize_plane(&v, cur_w, cur_h, a.width, a.height);
            let ru = a.width as f64 / cur_w as f64;
            let rv = a.height as f64 / cur_h as f64;
            for c in &mut nu {
                *c *= ru;
            }
            for c in &mut nv {
                *c *= rv;
            }
            u = nu;
            v = nv;
            cur_w = a.width;
            cur_h = a.height;
        }
        let lin = linearize(a, b, &u, &v);
        for _ in 0..cfg.iterations_per_level {
            gs_sweep(&mut u, &mut v, &lin, cfg.smoothness_alpha);
        }
    }

    FlowField::new(frame_a.width, frame_a.height, u, v)
}

/// Flow fields for every consecutive pair of a frame window, stacked into
/// the network's motion tensor. Pairs are independent and computed in
/// parallel; results are position-indexed, so the output does not depend
/// on thread count.
pub fn flow_stack_for_window(frames: &[GrayImage], cfg: &FlowConfig) -> Result<Tensor, FlowError> {
    if frames.len() < 2 {
        return Err(FlowError::WindowTooShort(frames.len()));
    }
    cfg.validate()?;
    let (w, h) = (frames[0].width, frames[0].height);
    for f in frames {
        if f.width != w || f.height != h {
            return Err(FlowError::DimensionMismatch(w, h, f.width, f.height));
        }
    }
    let fields: Vec<FlowField> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|t| compute_flow(&frames[t], &frames[t + 1], cfg))
        .collect::<Result<_, _>>()?;
    stack_flow_fields(&fields)
}

/// Stacks per-pair flow fields into a `[2, n+1, H, W]` tensor for an
/// `n+1`-frame window: slice `t` holds the flow of pair `(t, t+1)` and the
/// final slice duplicates the last pair. Values are rounded to f32 (the
/// on-disk precision, so cached and fresh flow agree bitwise), clipped to
/// [-FLOW_CLIP, FLOW_CLIP], and scaled into [-1, 1].
pub fn stack_flow_fields(fields: &[FlowField]) -> Result<Tensor, FlowError> {
    if fields.is_empty() {
        return Err(FlowError::WindowTooShort(1));
    }
    let (w, h) = (fields[0].width, fields[0].height);
    for f in fields {
        if f.width != w || f.height != h {
            return Err(FlowError::DimensionMismatch(w, h, f.width, f.height));
        }
    }
    let t = fields.len() + 1;
    let mut out = Tensor::zeros(&[2, t, h, w]);
    {
        let data = out.data_mut();
        let plane = h * w;
        for ti in 0..t {
            let field = &fields[ti.min(fields.len() - 1)];
            for p in 0..plane {
                data[ti * plane + p] = normalize_component(field.u[p]);
                data[(t + ti) * plane + p] = normalize_component(field.v[p]);
            }
        }
    }
    Ok(out)
}

fn normalize_component(raw: f64) -> f64 {
    let quantized = raw as f32 as f64;
    quantized.clamp(-FLOW_CLIP, FLOW_CLIP) / FLOW_CLIP
}

/// Writes a flow field in the standard interchange layout: magic float,
/// i32 width and height, then row-major interleaved (u, v) f32 pairs, all
/// little-endian.
pub fn write_flo(field: &FlowField, path: &Path) -> Result<(), FlowError> {
    let file = File::create(path).map_err(|e| FlowError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| FlowError::io(path, e);
    out.write_all(&FLO_MAGIC.to_le_bytes()).map_err(werr)?;
    out.write_all(&(field.width as i32).to_le_bytes()).map_err(werr)?;
    out.write_all(&(field.height as i32).to_le_bytes()).map_err(werr)?;
    for p in 0..field.width * field.height {
        out.write_all(&(field.u[p] as f32).to_le_bytes()).map_err(werr)?;
        out.write_all(&(field.v[p] as f32).to_le_bytes()).map_err(werr)?;
    }
    out.flush().map_err(werr)
}

pub fn read_flo(path: &Path) -> Result<FlowField, FlowError> {
    let file = File::open(path).map_err(|e| FlowError::io(path, e))?;
    let mut input = BufReader::new(file);
    let rerr = |e| FlowError::io(path, e);

    let mut buf4 = [0u8; 4];
    input.read_exact(&mut buf4).map_err(rerr)?;
    if f32::from_le_bytes(buf4) != FLO_MAGIC {
        return Err(FlowError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    input.read_exact(&mut buf4).map_err(rerr)?;
    let width = i32::from_le_bytes(buf4);
    input.read_exact(&mut buf4).map_err(rerr)?;
    let height = i32::from_le_bytes(buf4);
    if width <= 0 || height <= 0 || (width as i64) * (height as i64) > (1 << 30) {
        return Err(FlowError::Corrupt {
            path: path.to_path_buf(),
            detail: format!("implausible dimensions {width}x{height}"),
        });
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut buf4).map_err(|_| FlowError::Corrupt {
            path: path.to_path_buf(),
            detail: "truncated flow data".into(),
        })?;
        u.push(f32::from_le_bytes(buf4) as f64);
        input.read_exact(&mut buf4).map_err(|_| FlowError::Corrupt {
            path: path.to_path_buf(),
            detail: "truncated flow data".into(),
        })?;
        v.push(f32::from_le_bytes(buf4) as f64);
    }
    let mut extra = [0u8; 1];
    match input.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(FlowError::Corrupt {
                path: path.to_path_buf(),
                detail: "trailing bytes after flow data".into(),
            })
        }
        Err(e) => return Err(FlowError::io(path, e)),
    }
    FlowField::new(width, height, u, v).map_err(|e| FlowError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn texture_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let data = reference::seeded_texture(h, w, seed)
            .into_iter()
            .map(|v| v * 255.0)
            .collect();
        GrayImage::new(w, h, data).expect("valid image")
    }

    fn median(mut values: Vec<f64>) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[values.len() / 2]
    }

    fn interior_medians(field: &FlowField, border: usize) -> (f64, f64) {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in border..field.height() - border {
            for x in border..field.width() - border {
                us.push(field.u()[y * field.width() + x]);
                vs.push(field.v()[y * field.width() + x]);
            }
        }
        (median(us), median(vs))
    }

    #[test]
    fn grayscale_coefficients() {
        let img = to_grayscale(3, 1, &[255, 255, 255, 0, 0, 0, 255, 0, 0]).expect("convert");
        assert_eq!(img.data()[0], 255.0);
        assert_eq!(img.data()[1], 0.0);
        assert!((img.data()[2] - 76.245).abs() < 1e-9);
    }

    #[test]
    fn grayscale_rejects_short_buffer() {
        assert!(to_grayscale(2, 2, &[0u8; 11]).is_err());
    }

    #[test]
    fn identical_frames_give_exactly_zero_flow() {
        let img = texture_image(32, 48, 9);
        let flow = compute_flow(&img, &img, &FlowConfig::default()).expect("flow");
        let sup = flow
            .u()
            .iter()
            .chain(flow.v())
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        assert!(sup <= 1e-6, "sup-norm {sup}");
    }

    #[test]
    fn constant_frames_give_zero_flow() {
        let img = GrayImage::new(16, 16, vec![128.0; 256]).expect("valid image");
        let flow = compute_flow(&img, &img, &FlowConfig::default()).expect("flow");
        assert!(flow.u().iter().chain(flow.v()).all(|&c| c == 0.0));
    }

    #[test]
    fn one_pixel_shift_is_recovered() {
        let (a, b) = reference::shifted_texture_pair(64, 64, 21, 1.0, 0.0);
        let a = GrayImage::new(64, 64, a.into_iter().map(|v| v * 255.0).collect()).unwrap();
        let b = GrayImage::new(64, 64, b.into_iter().map(|v| v * 255.0).collect()).unwrap();
        let flow = compute_flow(&a, &b, &FlowConfig::default()).expect("flow");
        let (mu, mv) = interior_medians(&flow, 4);
        assert!((0.5..=1.5).contains(&mu), "median u {mu}");
        assert!((-0.5..=0.5).contains(&mv), "median v {mv}");
    }

    #[test]
    fn diagonal_shift_is_recovered() {
        let (a, b) = reference::shifted_texture_pair(64, 64, 22, 2.0, -1.0);
        let a = GrayImage::new(64, 64, a.into_iter().map(|v| v * 255.0).collect()).unwrap();
        let b = GrayImage::new(64, 64, b.into_iter().map(|v| v * 255.0).collect()).unwrap();
        let flow = compute_flow(&a, &b, &FlowConfig::default()).expect("flow");
        let (mu, mv) = interior_medians(&flow, 4);
        assert!((mu - 2.0).abs() <= 0.75, "median u {mu}");
        assert!((mv + 1.0).abs() <= 0.75, "median v {mv}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = texture_image(16, 16, 1);
        let b = texture_image(16, 20, 1);
        assert!(matches!(
            compute_flow(&a, &b, &FlowConfig::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FlowConfig::default();
        cfg.scale_factor = 1.0;
        assert!(cfg.validate().is_err());
        cfg = FlowConfig::default();
        cfg.pyramid_levels = 0;
        assert!(cfg.validate().is_err());
        cfg = FlowConfig::default();
        cfg.smoothness_alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg = FlowConfig::default();
        cfg.iterations_per_level = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn energy_never_increases_within_a_level() {
        let a = texture_image(24, 24, 31);
        let (_, b_raw) = reference::shifted_texture_pair(24, 24, 31, 1.0, 1.0);
        let b = GrayImage::new(24, 24, b_raw.into_iter().map(|v| v * 255.0).collect()).unwrap();
        let mut u = vec![0.0; 24 * 24];
        let mut v = vec![0.0; 24 * 24];
        let lin = linearize(&a, &b, &u, &v);
        let alpha = 15.0;
        let mut prev = level_energy(&u, &v, &lin, alpha);
        for _ in 0..30 {
            gs_sweep(&mut u, &mut v, &lin, alpha);
            let e = level_energy(&u, &v, &lin, alpha);
            assert!(e <= prev + 1e-9 * prev.abs(), "energy rose: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn flow_is_deterministic() {
        let a = texture_image(32, 32, 5);
        let b = texture_image(32, 32, 6);
        let f1 = compute_flow(&a, &b, &FlowConfig::default()).expect("flow");
        let f2 = compute_flow(&a, &b, &FlowConfig::default()).expect("flow");
        assert_eq!(f1, f2);
    }

    #[test]
    fn stack_of_identical_frames_is_zero() {
        let img = texture_image(16, 16, 2);
        let frames = vec![img; 5];
        let stack = flow_stack_for_window(&frames, &FlowConfig::default()).expect("stack");
        assert_eq!(stack.shape(), &[2, 5, 16, 16]);
        assert!(stack.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn stack_duplicates_final_slice() {
        let frames = vec![
            texture_image(16, 16, 2),
            texture_image(16, 16, 3),
            texture_image(16, 16, 4),
        ];
        let stack = flow_stack_for_window(&frames, &FlowConfig::default()).expect("stack");
        assert_eq!(stack.shape(), &[2, 3, 16, 16]);
        let plane = 16 * 16;
        for ch in 0..2 {
            let base = ch * 3 * plane;
            let last = &stack.data()[base + 2 * plane..base + 3 * plane];
            let prev = &stack.data()[base + plane..base + 2 * plane];
            assert_eq!(last, prev);
        }
    }

    #[test]
    fn stack_values_are_bounded() {
        let frames = vec![texture_image(16, 16, 7), texture_image(16, 16, 8)];
        let stack = flow_stack_for_window(&frames, &FlowConfig::default()).expect("stack");
        assert!(stack.data().iter().all(|&c| (-1.0..=1.0).contains(&c)));
    }

    #[test]
    fn stack_rejects_single_frame() {
        let frames = vec![texture_image(16, 16, 7)];
        assert!(matches!(
            flow_stack_for_window(&frames, &FlowConfig::default()),
            Err(FlowError::WindowTooShort(1))
        ));
    }

    #[test]
    fn flo_round_trip_is_lossless_at_f32() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("field.flo");
        let a = texture_image(16, 24, 12);
        let b = texture_image(16, 24, 13);
        let field = compute_flow(&a, &b, &FlowConfig::default()).expect("flow");
        write_flo(&field, &path).expect("write");
        let back = read_flo(&path).expect("read");
        assert_eq!(back.width(), field.width());
        assert_eq!(back.height(), field.height());
        for p in 0..field.width() * field.height() {
            assert_eq!(back.u()[p], field.u()[p] as f32 as f64);
            assert_eq!(back.v()[p], field.v()[p] as f32 as f64);
        }
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"nope....").expect("write");
        assert!(matches!(read_flo(&path), Err(FlowError::BadMagic { .. })));
    }

    #[test]
    fn flo_rejects_truncation() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("short.flo");
        let field = FlowField::new(2, 2, vec![1.0; 4], vec![2.0; 4]).unwrap();
        write_flo(&field, &path).expect("write");
        let bytes = std::fs::read(&path).expect("read");
        std::fs::write(&path, &bytes[..bytes.len() - 3]).expect("truncate");
        assert!(matches!(read_flo(&path), Err(FlowError::Corrupt { .. })));
    }
}
