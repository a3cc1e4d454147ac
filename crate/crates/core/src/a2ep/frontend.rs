//! Log mel-filterbank audio features at 100 frames per second.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 80;
pub const MEL_LOW_HZ: f64 = 80.0;
pub const MEL_HIGH_HZ: f64 = 7_600.0;
/// Energy floor inside the logarithm.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    /// `[T_a, N_MELS]`.
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop: usize,
}

impl AudioFeatures {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of the triangular filters: channel `m` rises from
/// `edges[m]`, peaks at `edges[m + 1]` and falls to zero at `edges[m + 2]`.
pub fn mel_band_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `[N_MELS, FFT_SIZE / 2 + 1]` triangle weights evaluated at bin centres.
pub fn mel_filterbank() -> Tensor {
    let edges = mel_band_edges();
    let bins = FFT_SIZE / 2 + 1;
    Tensor::from_fn(&[N_MELS, bins], |i| {
        let (m, k) = (i / bins, i % bins);
        let f = k as f64 * f64::from(SAMPLE_RATE) / FFT_SIZE as f64;
        let (a, b, c) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > a && f <= b {
            (f - a) / (b - a)
        } else if f > b && f < c {
            (c - f) / (c - b)
        } else {
            0.0
        }
    })
}

/// Periodic Hann window of length [`WINDOW`].
pub fn hann_window() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
        .collect()
}

/// Number of frames for `len` samples; shorter inputs are zero-padded to
/// one full window.
pub fn frame_count(len: usize) -> usize {
    1 + (len.max(WINDOW) - WINDOW) / HOP
}

struct FrontEnd {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Tensor,
}

impl FrontEnd {
    fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window: hann_window(),
            bank: mel_filterbank(),
        }
    }

    fn power_spectrum(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        buf.clear();
        buf.extend(frame.iter().zip(&self.window).map(|(s, w)| Complex::new(s * w, 0.0)));
        buf.resize(FFT_SIZE, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// `log(LOG_EPS + mel energies)` for mono PCM normalised to `[-1, 1]`.
pub fn audio_frontend(samples: &[f64], sample_rate: u32) -> Result<AudioFeatures> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "audio must be {SAMPLE_RATE} Hz, got {sample_rate} Hz"
        )));
    }
    if samples.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let fe = FrontEnd::new();
    let n = frame_count(samples.len());
    let bins = FFT_SIZE / 2 + 1;
    let mut frames = Vec::with_capacity(n * N_MELS);
    let mut padded = vec![0.0; WINDOW];
    let mut buf = Vec::with_capacity(FFT_SIZE);
    for f in 0..n {
        let start = f * HOP;
        let end = (start + WINDOW).min(samples.len());
        padded.fill(0.0);
        padded[..end - start].copy_from_slice(&samples[start..end]);
        let power = fe.power_spectrum(&padded, &mut buf);
        for m in 0..N_MELS {
            let w = &fe.bank.data()[m * bins..(m + 1) * bins];
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            frames.push((LOG_EPS + e).ln());
        }
    }
    Ok(AudioFeatures {
        frames: Tensor::new(vec![n, N_MELS], frames)?,
        sample_rate,
        hop: HOP,
    })
}

/// Per-column linear interpolation over normalised time: output row `i`
/// samples the input at `i·(T_a − 1)/(T_target − 1)`. A single output row
/// takes input row 0.
pub fn resample_linear(features: &Tensor, t_target: usize) -> Result<Tensor> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::shape(
            "resample_linear",
            format!("expected [T, F] with T >= 1, got {:?}", features.shape()),
        ));
    }
    if t_target == 0 {
        return Err(Error::InvalidArgument("resample target length must be >= 1".into()));
    }
    let (t_a, f) = (features.rows(), features.cols());
    if t_a == t_target {
        return Ok(features.clone());
    }
    let mut out = Vec::with_capacity(t_target * f);
    for i in 0..t_target {
        let pos = if t_target == 1 {
            0.0
        } else {
            i as f64 * (t_a - 1) as f64 / (t_target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t_a - 1);
        let hi = (lo + 1).min(t_a - 1);
        let frac = pos - lo as f64;
        let (a, b) = (features.row(lo), features.row(hi));
        if frac == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y));
        }
    }
    Tensor::new(vec![t_target, f], out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn silence_gives_log_eps() {
        let feats = audio_frontend(&vec![0.0; 1600], SAMPLE_RATE).unwrap();
        assert_eq!(feats.n_frames(), frame_count(1600));
        assert!(feats.frames.data().iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn short_input_yields_one_frame() {
        assert_eq!(frame_count(1), 1);
        assert_eq!(frame_count(400), 1);
        assert_eq!(frame_count(560), 2);
        assert_eq!(audio_frontend(&[0.5; 10], SAMPLE_RATE).unwrap().n_frames(), 1);
    }

    #[test]
    fn impulse_excites_every_channel() {
        let mut x = vec![0.0; WINDOW];
        x[WINDOW / 2] = 1.0;
        let feats = audio_frontend(&x, SAMPLE_RATE).unwrap();
        assert!(feats.frames.row(0).iter().all(|&v| v > LOG_EPS.ln()));
    }

    #[test]
    fn rejects_other_sample_rates() {
        assert!(audio_frontend(&[0.0; 800], 44_100).is_err());
        assert!(audio_frontend(&[], SAMPLE_RATE).is_err());
    }

    fn dft_power(frame: &[f64]) -> Vec<f64> {
        let w = hann_window();
        (0..=FFT_SIZE / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&s, &wn)) in frame.iter().zip(&w).enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                    re += s * wn * ang.cos();
                    im += s * wn * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn sine_peaks_in_the_band_containing_it() {
        let x: Vec<f64> = (0..WINDOW)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / f64::from(SAMPLE_RATE)).sin())
            .collect();
        let feats = audio_frontend(&x, SAMPLE_RATE).unwrap();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let got = argmax(feats.frames.row(0));

        let power = dft_power(&x);
        let bank = mel_filterbank();
        let energies: Vec<f64> = (0..N_MELS)
            .map(|m| bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum())
            .collect();
        assert_eq!(got, argmax(&energies));
        let edges = mel_band_edges();
        assert!(edges[got] < 1000.0 && 1000.0 < edges[got + 2]);
        for (m, e) in energies.iter().enumerate() {
            assert!(((LOG_EPS + e).ln() - feats.frames.at(0, m)).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_same_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[7, 3], |_| rng.gen());
        assert_eq!(resample_linear(&x, 7).unwrap(), x);
    }

    #[test]
    fn resample_midpoint_is_average() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -3.0, 2.0, 5.0]).unwrap();
        let y = resample_linear(&x, 3).unwrap();
        assert_eq!(y.row(1), &[1.5, 1.0]);
        assert_eq!(y.row(0), x.row(0));
        assert_eq!(y.row(2), x.row(1));
    }

    #[test]
    fn resample_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let (ta, tt) = (rng.gen_range(1..20), rng.gen_range(1..40));
            let x = Tensor::from_fn(&[ta, 2], |_| rng.gen_range(-1.0..1.0));
            let y = resample_linear(&x, tt).unwrap();
            for i in 0..tt {
                let s = if tt == 1 {
                    0.0
                } else {
                    i as f64 / (tt - 1) as f64 * (ta - 1) as f64
                };
                for c in 0..2 {
                    let j = s.floor() as usize;
                    let want = if j + 1 >= ta {
                        x.at(ta - 1, c)
                    } else {
                        x.at(j, c) + (s - j as f64) * (x.at(j + 1, c) - x.at(j, c))
                    };
                    assert!((y.at(i, c) - want).abs() < 1e-12);
                }
            }
            if tt < 2 {
                continue;
            }
            let back = resample_linear(&y, ta).unwrap();
            assert_eq!(back.row(0), x.row(0));
            assert_eq!(back.row(ta - 1), x.row(ta - 1));
        }
    }
}
