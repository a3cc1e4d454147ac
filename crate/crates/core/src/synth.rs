//! Deterministic synthetic face bases and talking-head clips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::a2ep::SAMPLE_RATE;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::face3dmm::{CoeffSet, FaceBasis};
use crate::image::RasterImage;
use crate::pipeline::{render_frame, ClipBundle, FPS, SAMPLES_PER_FRAME};
use crate::raster::Camera;

/// Expression channel driven by the audio envelope.
pub const JAW_CHANNEL: usize = 0;
/// Mouth threshold (metres) suited to [`gen_basis`] faces.
pub const SYNTH_MOUTH_Y: f64 = -0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    /// Vertices per side of the face grid.
    pub grid: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub k_tex: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            k_id: 8,
            k_exp: 64,
            k_tex: 8,
        }
    }
}

/// A bulging square face patch, 0.2 m across, with a jaw-opening first
/// expression column and small random remaining columns.
pub fn gen_basis(config: &BasisConfig, seed: u64) -> Result<FaceBasis> {
    let g = config.grid;
    if g < 2 {
        return Err(Error::InvalidArgument(format!(
            "face grid must be at least 2x2, got {g}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g * g;
    let coord = |i: usize| -0.1 + 0.2 * i as f64 / (g - 1) as f64;
    let mut shape = Vec::with_capacity(3 * n);
    let mut texture = Vec::with_capacity(3 * n);
    for r in 0..g {
        for c in 0..g {
            let (x, y) = (coord(c), coord(g - 1 - r));
            shape.extend([x, y, 0.03 * (1.0 - (x * x + y * y) / 0.02)]);
            let lip = y < -0.03 && y > -0.08 && x.abs() < 0.05;
            texture.extend(if lip { [0.65, 0.3, 0.3] } else { [0.85, 0.65, 0.55] });
        }
    }
    let mut triangles = Vec::with_capacity(2 * (g - 1) * (g - 1));
    for r in 0..g - 1 {
        for c in 0..g - 1 {
            let i = (r * g + c) as u32;
            let (right, down) = (i + 1, i + g as u32);
            triangles.push([i, down, right]);
            triangles.push([right, down, down + 1]);
        }
    }
    let basis_id = Tensor::from_fn(&[3 * n, config.k_id], |_| rng.gen_range(-0.004..0.004));
    let basis_exp = Tensor::from_fn(&[3 * n, config.k_exp], |i| {
        let (row, col) = (i / config.k_exp, i % config.k_exp);
        if col == JAW_CHANNEL {
            let (v, axis) = (row / 3, row % 3);
            let y = shape[3 * v + 1];
            if axis == 1 {
                -0.02 * (-y / 0.1).max(0.0)
            } else {
                0.0
            }
        } else {
            rng.gen_range(-0.002..0.002)
        }
    });
    let basis_tex = Tensor::from_fn(&[3 * n, config.k_tex], |_| rng.gen_range(-0.05..0.05));
    FaceBasis::new(shape, texture, basis_id, basis_exp, basis_tex, triangles)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_ratio: f64,
    pub identity: usize,
    /// Jaw coefficient at full envelope.
    pub jaw_gain: f64,
    /// Amplitude of the remaining, audio-independent expression channels.
    pub other_amp: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            width: 64,
            height: 64,
            focal_ratio: 1.25,
            identity: 0,
            jaw_gain: 1.0,
            other_amp: 0.05,
        }
    }
}

/// Loudness envelope in `[0.2, 1]` at fractional video frame `u`.
fn envelope(u: f64, freq_hz: f64, phase: f64) -> f64 {
    0.6 + 0.4 * (2.0 * PI * freq_hz * u / FPS + phase).sin()
}

/// Fixed high-frequency skin pattern the renderer does not produce.
fn detail(x: usize, y: usize) -> f64 {
    0.06 * ((x as f64 * 1.7).sin() * (y as f64 * 1.3).cos())
}

/// Smooth vertical gradient with soft stripes.
fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let base: [f64; 3] = [
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.2..0.5),
        rng.gen_range(0.3..0.6),
    ];
    let stripe = rng.gen_range(0.2..0.5);
    RasterImage::from_fn(width, height, |x, y| {
        let t = y as f64 / height as f64;
        let s = 0.05 * (stripe * x as f64).sin();
        base.map(|b| (b + 0.3 * t + s).clamp(0.0, 1.0))
    })
}

/// A clip whose jaw channel follows the loudness envelope of a harmonic
/// tone, with smooth low-frequency motion on every other channel and
/// target frames rendered over a fixed background.
pub fn make_synthetic_clip(seed: u64, basis: &FaceBasis, config: &ClipConfig) -> Result<ClipBundle> {
    let t_len = config.frames;
    if t_len == 0 {
        return Err(Error::InvalidArgument("clip needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::centered(config.focal_ratio * config.width as f64, config.width, config.height)?;
    let env_freq = rng.gen_range(0.6..1.4);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let carrier = rng.gen_range(180.0..260.0);
    let alpha: Vec<f64> = (0..basis.k_id()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let delta: Vec<f64> = (0..basis.k_tex()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let channel_motion: Vec<(f64, f64)> = (0..basis.k_exp())
        .map(|_| (rng.gen_range(0.2..0.8), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let pose_phase: [f64; 3] = [
        rng.gen_range(0.0..2.0 * PI),
        rng.gen_range(0.0..2.0 * PI),
        rng.gen_range(0.0..2.0 * PI),
    ];
    let bg = background(config.width, config.height, &mut rng);

    let mut coeffs = Vec::with_capacity(t_len);
    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let u = t as f64 + 0.5;
        let beta = channel_motion
            .iter()
            .enumerate()
            .map(|(k, &(f, p))| {
                if k == JAW_CHANNEL {
                    config.jaw_gain * envelope(u, env_freq, env_phase)
                } else {
                    config.other_amp * (2.0 * PI * f * u / FPS + p).sin()
                }
            })
            .collect();
        let wobble = |i: usize, amp: f64| amp * (2.0 * PI * 0.3 * u / FPS + pose_phase[i]).sin();
        let c = CoeffSet {
            alpha: alpha.clone(),
            beta,
            delta: delta.clone(),
            rotation: [wobble(0, 0.05), PI + wobble(1, 0.08), wobble(2, 0.03)],
            translation: [wobble(0, 0.005), wobble(1, 0.005), 0.45],
        };
        let render = render_frame(basis, &c, &camera)?;
        let frame = RasterImage::from_fn(config.width, config.height, |x, y| {
            if render.face_mask.get(x, y) {
                render.color.pixel(x, y).map(|v| (v + detail(x, y)).clamp(0.0, 1.0))
            } else {
                bg.pixel(x, y)
            }
        });
        // stored frames are 8-bit, so keep the in-memory copy on that grid
        frames.push(RasterImage::from_u8(config.width, config.height, &frame.to_u8())?);
        coeffs.push(c);
    }

    let n_samples = t_len * SAMPLES_PER_FRAME;
    let waveform = (0..n_samples)
        .map(|n| {
            let tau = n as f64 / f64::from(SAMPLE_RATE);
            let env = envelope(tau * FPS, env_freq, env_phase);
            let tone = (2.0 * PI * carrier * tau).sin() + 0.5 * (4.0 * PI * carrier * tau).sin();
            (0.45 * env * tone * 32767.0).round() as i16
        })
        .collect();

    Ok(ClipBundle {
        coeffs,
        waveform,
        frames,
        reference_index: 0,
        identity: config.identity,
        camera,
    })
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Root-mean-square of the waveform over each video frame.
pub fn frame_rms(waveform: &[i16], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let end = ((t + 1) * SAMPLES_PER_FRAME).min(waveform.len());
            let chunk = &waveform[(t * SAMPLES_PER_FRAME).min(end)..end];
            let ss: f64 = chunk.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
            (ss / chunk.len().max(1) as f64).sqrt()
        })
        .collect()
}
