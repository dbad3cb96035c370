//! Deterministic synthetic annotated videos for end-to-end tests and
//! desk-scale training runs.
//!
//! Each video is a static sinusoidal texture with seeded per-frame pixel
//! noise, a small dark ball drifting at most one pixel per frame, and,
//! only inside annotated stroke segments, a bright paddle blob whipping up
//! and down five pixels per frame. Stroke windows therefore carry both an
//! appearance cue (the paddle exists) and a motion cue (large interframe
//! displacement), so both network branches can separate the classes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video_io::{AnnotationSet, FrameSequence, Segment, VideoIoError};

/// Minimum non-stroke frames before, between, and after strokes.
pub const STROKE_GAP: usize = 75;

const BALL_RADIUS: i64 = 3;
const PADDLE_RADIUS: i64 = 5;
const PADDLE_WAVE: [i64; 8] = [0, 5, 10, 5, 0, -5, -10, -5];
const PADDLE_SPAN: i64 = 10 + PADDLE_RADIUS;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(
        "strokes do not fit: {total_frames} total frames, at least {required} needed \
         for {stroke_count} strokes of up to {max_duration} frames with {gap}-frame gaps"
    )]
    Infeasible {
        total_frames: usize,
        required: usize,
        stroke_count: usize,
        max_duration: usize,
        gap: usize,
    },
    #[error(transparent)]
    VideoIo(#[from] VideoIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub total_frames: usize,
    pub stroke_count: usize,
    /// Inclusive `[min, max]` stroke duration in frames.
    pub stroke_duration: [usize; 2],
    /// Uniform per-pixel noise in `[-amplitude, amplitude]` 8-bit counts.
    pub noise_amplitude: u8,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 320,
            height: 128,
            total_frames: 3000,
            stroke_count: 5,
            stroke_duration: [52, 296],
            noise_amplitude: 2,
            fps: 120.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn required_frames(&self) -> usize {
        if self.stroke_count == 0 {
            1
        } else {
            self.stroke_count * self.stroke_duration[1] + (self.stroke_count + 1) * STROKE_GAP
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width < 32 || self.height < 36 {
            return Err(SynthError::InvalidConfig(format!(
                "frame size {}x{} too small, need at least 32x36",
                self.width, self.height
            )));
        }
        if self.total_frames == 0 {
            return Err(SynthError::InvalidConfig("total_frames must be positive".into()));
        }
        let [dmin, dmax] = self.stroke_duration;
        if dmin == 0 || dmin > dmax || dmax > self.total_frames {
            return Err(SynthError::InvalidConfig(format!(
                "stroke_duration [{dmin}, {dmax}] must satisfy 1 <= min <= max <= total_frames"
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "fps must be positive and finite, got {}",
                self.fps
            )));
        }
        let required = self.required_frames();
        if self.total_frames < required {
            return Err(SynthError::Infeasible {
                total_frames: self.total_frames,
                required,
                stroke_count: self.stroke_count,
                max_duration: dmax,
                gap: STROKE_GAP,
            });
        }
        Ok(())
    }
}

/// Static background luminance in [0,1], identical for every video.
fn texture_at(x: usize, y: usize) -> f64 {
    let xf = x as f64;
    let yf = y as f64;
    let tau = std::f64::consts::TAU;
    0.5 + 0.15 * (tau * xf / 23.0 + 1.3).sin()
        + 0.12 * (tau * (0.6 * xf + 0.8 * yf) / 31.0 + 4.0).sin()
        + 0.1 * (tau * yf / 17.0 + 2.2).sin()
}

fn paint_disc(frame: &mut [u8], w: usize, h: usize, cx: f64, cy: f64, r: i64, value: u8) {
    let xi = cx.round() as i64;
    let yi = cy.round() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let x = xi + dx;
            let y = yi + dy;
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let p = (y as usize * w + x as usize) * 3;
            frame[p] = value;
            frame[p + 1] = value;
            frame[p + 2] = value;
        }
    }
}

/// Places `stroke_count` disjoint segments with at least [`STROKE_GAP`]
/// frames before, between, and after them. Durations are drawn first,
/// then the leftover slack is cut at sorted uniform offsets.
fn place_strokes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let k = cfg.stroke_count;
    if k == 0 {
        return Vec::new();
    }
    let [dmin, dmax] = cfg.stroke_duration;
    let durations: Vec<usize> = (0..k).map(|_| rng.gen_range(dmin..=dmax)).collect();
    let used: usize = durations.iter().sum::<usize>() + (k + 1) * STROKE_GAP;
    let slack = cfg.total_frames - used;
    let mut offsets: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=slack)).collect();
    offsets.sort_unstable();
    let mut strokes = Vec::with_capacity(k);
    let mut preceding = 0usize;
    for (i, (&dur, &off)) in durations.iter().zip(&offsets).enumerate() {
        let begin = (i + 1) * STROKE_GAP + preceding + off;
        strokes.push(Segment::new(begin, begin + dur));
        preceding += dur;
    }
    strokes
}

/// Renders one annotated video. Bitwise deterministic in the config.
pub fn generate(cfg: &SynthConfig) -> Result<(FrameSequence, AnnotationSet), SynthError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let strokes = place_strokes(cfg, &mut rng);

    let ball_min_x = (BALL_RADIUS + 1) as f64;
    let ball_max_x = (w as i64 - BALL_RADIUS - 2) as f64;
    let ball_min_y = (BALL_RADIUS + 1) as f64;
    let ball_max_y = (h as i64 - BALL_RADIUS - 2) as f64;
    let mut ball_x = rng.gen_range(ball_min_x..=ball_max_x);
    let mut ball_y = rng.gen_range(ball_min_y..=ball_max_y);
    let mut ball_vx = rng.gen_range(-1.0..=1.0);
    let mut ball_vy = rng.gen_range(-1.0..=1.0);

    let paddle_x = rng.gen_range((PADDLE_RADIUS + 1)..=(w as i64 - PADDLE_RADIUS - 2)) as f64;
    let paddle_y = rng.gen_range((PADDLE_SPAN + 1)..=(h as i64 - PADDLE_SPAN - 2)) as f64;

    let mut background = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            background[y * w + x] = (texture_at(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }

    let amp = cfg.noise_amplitude as i32;
    let mut frames = Vec::with_capacity(cfg.total_frames);
    for f in 0..cfg.total_frames {
        let mut frame = vec![0u8; w * h * 3];
        for p in 0..w * h {
            let noise = rng.gen_range(-amp..=amp);
            let v = (background[p] as i32 + noise).clamp(0, 255) as u8;
            frame[p * 3] = v;
            frame[p * 3 + 1] = v;
            frame[p * 3 + 2] = v;
        }
        paint_disc(&mut frame, w, h, ball_x, ball_y, BALL_RADIUS, 25);
        if let Some(stroke) = strokes.iter().find(|s| f >= s.begin && f < s.end) {
            let phase = f - stroke.begin;
            let offset = PADDLE_WAVE[phase % PADDLE_WAVE.len()] as f64;
            paint_disc(&mut frame, w, h, paddle_x, paddle_y + offset, PADDLE_RADIUS, 250);
        }
        frames.push(frame);

        ball_x += ball_vx;
        ball_y += ball_vy;
        if ball_x < ball_min_x || ball_x > ball_max_x {
            ball_vx = -ball_vx;
            ball_x = ball_x.clamp(ball_min_x, ball_max_x);
        }
        if ball_y < ball_min_y || ball_y > ball_max_y {
            ball_vy = -ball_vy;
            ball_y = ball_y.clamp(ball_min_y, ball_max_y);
        }
    }

    let seq = FrameSequence::new(w, h, cfg.fps, frames)?;
    let ann = AnnotationSet::new(
        format!("synth_{:016x}", cfg.seed),
        cfg.total_frames,
        strokes,
    )?;
    Ok((seq, ann))
}

/// Standard seed scrambler; consecutive inputs map to well-spread outputs.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub type SynthVideo = (FrameSequence, AnnotationSet);

/// Generates `n_train + n_val + n_test` videos with per-video seeds
/// scrambled from `seed`, split in order.
pub fn generate_split(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<SynthVideo>, Vec<SynthVideo>, Vec<SynthVideo>), SynthError> {
    let total = n_train + n_val + n_test;
    let videos: Vec<SynthVideo> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut video_cfg = cfg.clone();
            video_cfg.seed = splitmix64(seed.wrapping_add(i as u64));
            generate(&video_cfg)
        })
        .collect::<Result<_, _>>()?;
    let mut iter = videos.into_iter();
    let train: Vec<SynthVideo> = iter.by_ref().take(n_train).collect();
    let val: Vec<SynthVideo> = iter.by_ref().take(n_val).collect();
    let test: Vec<SynthVideo> = iter.collect();
    Ok((train, val, test))
}
