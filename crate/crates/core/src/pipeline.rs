//! Clip bundles and the end-to-end inference pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::a2ep::{audio_frontend, A2epModel, A2epSample, HOP, SAMPLE_RATE};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::face3dmm::{apply_pose, CoeffSet, FaceBasis};
use crate::image::{BinaryMask, RasterImage};
use crate::io;
use crate::mafb::{augment_mask, blend, combine_params, morph_close, StructuringElement, AUGMENT_SIZES, CLOSE_SIZE};
use crate::metrics::{lmd_sequence, MetricReport};
use crate::raster::{project_perspective, rasterize, Camera, RenderOutput};
use crate::taft::{Generator, TaftTriple};

pub const FPS: f64 = 25.0;
/// Audio samples per video frame at 16 kHz and 25 FPS.
pub const SAMPLES_PER_FRAME: usize = 640;

/// One talking-head clip: per-frame coefficients, 16 kHz mono PCM audio and
/// the target video frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBundle {
    pub coeffs: Vec<CoeffSet>,
    pub waveform: Vec<i16>,
    pub frames: Vec<RasterImage>,
    /// Frame used as the generator's fixed reference image.
    pub reference_index: usize,
    pub identity: usize,
    pub camera: Camera,
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    frames: usize,
    fps: f64,
    sample_rate: u32,
    reference_index: usize,
    identity: usize,
    camera: Camera,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

pub fn mask_file_name(index: usize) -> String {
    format!("mask_{index:06}.pgm")
}

impl ClipBundle {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Waveform scaled to `[-1, 1)`.
    pub fn samples(&self) -> Vec<f64> {
        self.waveform.iter().map(|&s| f64::from(s) / 32768.0).collect()
    }

    /// Frame/coefficient counts agree, audio lasts `T/25` s within one hop
    /// and every frame matches the camera size.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::Empty("clip"));
        }
        if self.coeffs.len() != t {
            return Err(Error::Dimension {
                param: "coefficient frames",
                expected: t,
                actual: self.coeffs.len(),
            });
        }
        let want = t * SAMPLES_PER_FRAME;
        if self.waveform.len().abs_diff(want) > HOP {
            return Err(Error::InvalidArgument(format!(
                "audio has {} samples, expected {want} +/- {HOP} for {t} frames",
                self.waveform.len()
            )));
        }
        if self.reference_index >= t {
            return Err(Error::InvalidArgument(format!(
                "reference frame {} out of {t}",
                self.reference_index
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.width() != self.camera.width || f.height() != self.camera.height {
                return Err(Error::Frame {
                    frame: i,
                    msg: format!(
                        "{}x{} image, camera is {}x{}",
                        f.width(),
                        f.height(),
                        self.camera.width,
                        self.camera.height
                    ),
                });
            }
        }
        Ok(())
    }

    /// Writes `coeffs.jsonl`, `audio.wav`, `meta.json` and
    /// `frames/frame_%06d.ppm` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        io::write_coeffs(&dir.join("coeffs.jsonl"), &self.coeffs)?;
        io::write_wav(&dir.join("audio.wav"), &self.waveform)?;
        for (i, f) in self.frames.iter().enumerate() {
            io::write_ppm(&dir.join("frames").join(frame_file_name(i)), f)?;
        }
        let meta = ClipMeta {
            frames: self.frames.len(),
            fps: FPS,
            sample_rate: SAMPLE_RATE,
            reference_index: self.reference_index,
            identity: self.identity,
            camera: self.camera,
        };
        let path = dir.join("meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ClipMeta = serde_json::from_str(&text)?;
        if meta.fps != FPS || meta.sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidArgument(format!(
                "clip is {} FPS / {} Hz, expected {FPS} / {SAMPLE_RATE}",
                meta.fps, meta.sample_rate
            )));
        }
        let frames = (0..meta.frames)
            .map(|i| io::read_ppm(&dir.join("frames").join(frame_file_name(i))))
            .collect::<Result<Vec<_>>>()?;
        let clip = Self {
            coeffs: io::read_coeffs(&dir.join("coeffs.jsonl"), None)?,
            waveform: io::read_wav(&dir.join("audio.wav"))?,
            frames,
            reference_index: meta.reference_index,
            identity: meta.identity,
            camera: meta.camera,
        };
        clip.validate()?;
        Ok(clip)
    }
}

/// Shape from `(α, β)`, posed, textured from `δ` and rasterized.
pub fn render_frame(basis: &FaceBasis, coeffs: &CoeffSet, camera: &Camera) -> Result<RenderOutput> {
    coeffs.validate(basis)?;
    let shape = basis.evaluate_shape(&coeffs.alpha, &coeffs.beta)?;
    let posed = apply_pose(&shape, coeffs.rotation, coeffs.translation)?;
    let colors = basis.evaluate_texture(&coeffs.delta)?;
    rasterize(&posed, &colors, basis.triangles(), camera)
}

/// Image-plane positions of `indices` after shaping and posing.
pub fn project_landmarks(
    basis: &FaceBasis,
    coeffs: &CoeffSet,
    camera: &Camera,
    indices: &[usize],
) -> Result<Vec<[f64; 2]>> {
    let shape = basis.evaluate_shape(&coeffs.alpha, &coeffs.beta)?;
    let posed = apply_pose(&shape, coeffs.rotation, coeffs.translation)?;
    let projected = project_perspective(&posed, camera)?;
    indices
        .iter()
        .map(|&i| {
            projected
                .get(i)
                .map(|p| [p.u, p.v])
                .ok_or_else(|| Error::InvalidArgument(format!("landmark {i} out of range")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineFlags {
    /// Use the clip's own β instead of A2EP predictions.
    pub ground_truth_beta: bool,
    /// Emit the blended frame instead of the generator output.
    pub bypass_generator: bool,
    pub close_size: usize,
    /// Vertical threshold selecting the mouth vertices scored by LMD.
    pub mouth_y: f64,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            ground_truth_beta: false,
            bypass_generator: false,
            close_size: CLOSE_SIZE,
            mouth_y: crate::synth::SYNTH_MOUTH_Y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Output frames, quantised to 8 bits.
    pub frames: Vec<RasterImage>,
    /// Closed face masks used for blending.
    pub masks: Vec<BinaryMask>,
    pub predicted_betas: Vec<Vec<f64>>,
    pub report: MetricReport,
}

/// A2EP inference, expression swap, render, closed-mask blend, generator
/// and metrics against the clip's own frames. No randomness is involved,
/// so repeated runs are identical.
pub fn run_pipeline(
    clip: &ClipBundle,
    basis: &FaceBasis,
    a2ep: Option<&A2epModel>,
    generator: Option<&Generator>,
    flags: &PipelineFlags,
) -> Result<PipelineOutput> {
    clip.validate()?;
    let t_len = clip.n_frames();
    let predicted_betas: Vec<Vec<f64>> = if flags.ground_truth_beta {
        clip.coeffs.iter().map(|c| c.beta.clone()).collect()
    } else {
        let model = a2ep
            .ok_or_else(|| Error::InvalidArgument("A2EP weights are required unless ground-truth β is used".into()))?;
        let features = audio_frontend(&clip.samples(), SAMPLE_RATE)?;
        let betas = model.infer_autoregressive(&features, clip.identity, t_len)?;
        (0..t_len).map(|t| betas.row(t).to_vec()).collect()
    };
    let generator = if flags.bypass_generator {
        None
    } else {
        Some(generator.ok_or_else(|| {
            Error::InvalidArgument("generator weights are required unless the generator is bypassed".into())
        })?)
    };
    let kernel = StructuringElement::square(flags.close_size)?;
    let reference = &clip.frames[clip.reference_index];
    let mouth = basis.lower_mouth_indices(flags.mouth_y);

    let mut frames = Vec::with_capacity(t_len);
    let mut masks = Vec::with_capacity(t_len);
    let mut pred_marks = Vec::with_capacity(t_len);
    let mut gt_marks = Vec::with_capacity(t_len);
    for (t, target) in clip.frames.iter().enumerate() {
        let frame_err = |e: Error| Error::Frame {
            frame: t,
            msg: e.to_string(),
        };
        let coeffs = combine_params(&clip.coeffs[t], &predicted_betas[t]).map_err(frame_err)?;
        let render = render_frame(basis, &coeffs, &clip.camera).map_err(frame_err)?;
        let mask = morph_close(&render.face_mask, kernel);
        let blended = blend(&render.color, target, &mask)?;
        let out = match generator {
            Some(g) => g.forward(&blended, reference)?,
            None => blended,
        };
        frames.push(RasterImage::from_u8(out.width(), out.height(), &out.to_u8())?);
        masks.push(mask);
        if !mouth.indices.is_empty() {
            pred_marks.push(project_landmarks(basis, &coeffs, &clip.camera, &mouth.indices)?);
            gt_marks.push(project_landmarks(basis, &clip.coeffs[t], &clip.camera, &mouth.indices)?);
        }
    }
    let lmd = if pred_marks.is_empty() {
        0.0
    } else {
        lmd_sequence(&pred_marks, &gt_marks)?
    };
    let report = MetricReport::from_frames(&frames, &clip.frames, lmd)?;
    Ok(PipelineOutput {
        frames,
        masks,
        predicted_betas,
        report,
    })
}

/// Writes `frame_%06d.ppm`, `mask_%06d.pgm` and `report.json`; returns the
/// frame paths.
pub fn write_pipeline_output(dir: &Path, output: &PipelineOutput) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(output.frames.len());
    for (i, (f, m)) in output.frames.iter().zip(&output.masks).enumerate() {
        let p = dir.join(frame_file_name(i));
        io::write_ppm(&p, f)?;
        io::write_pgm(&dir.join(mask_file_name(i)), m)?;
        paths.push(p);
    }
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&output.report)?).map_err(|e| Error::io(path, e))?;
    Ok(paths)
}

pub fn load_a2ep(path: &Path) -> Result<A2epModel> {
    A2epModel::from_named(&io::read_checkpoint(path)?)
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    Generator::from_named(&io::read_checkpoint(path)?)
}

/// Audio features and ground-truth β of a clip, ready for A2EP training.
pub fn a2ep_sample(clip: &ClipBundle) -> Result<A2epSample> {
    clip.validate()?;
    let rows: Vec<Vec<f64>> = clip.coeffs.iter().map(|c| c.beta.clone()).collect();
    Ok(A2epSample {
        features: audio_frontend(&clip.samples(), SAMPLE_RATE)?,
        betas: Tensor::from_rows(&rows)?,
        identity: clip.identity,
    })
}

/// One triple per frame: the ground-truth render composited over the frame
/// with the closed face mask, the clip's reference frame, and the frame
/// itself. With `augment_seed` set, each mask is also randomly dilated or
/// eroded.
pub fn taft_triples(
    clip: &ClipBundle,
    basis: &FaceBasis,
    close_size: usize,
    augment_seed: Option<u64>,
) -> Result<Vec<TaftTriple>> {
    clip.validate()?;
    let kernel = StructuringElement::square(close_size)?;
    let mut rng = augment_seed.map(ChaCha8Rng::seed_from_u64);
    let reference = &clip.frames[clip.reference_index];
    clip.coeffs
        .iter()
        .zip(&clip.frames)
        .map(|(c, frame)| {
            let render = render_frame(basis, c, &clip.camera)?;
            let mask = match rng.as_mut() {
                Some(r) => augment_mask(&render.face_mask, r, &AUGMENT_SIZES, close_size)?.0,
                None => morph_close(&render.face_mask, kernel),
            };
            Ok(TaftTriple {
                blended: blend(&render.color, frame, &mask)?,
                reference: reference.clone(),
                target: frame.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a2ep::A2epConfig;
    use crate::synth::{gen_basis, make_synthetic_clip, BasisConfig, ClipConfig};

    fn small_clip(frames: usize) -> (FaceBasis, ClipBundle) {
        let basis = gen_basis(&BasisConfig::default(), 1).unwrap();
        let cfg = ClipConfig {
            frames,
            width: 32,
            height: 32,
            ..ClipConfig::default()
        };
        let clip = make_synthetic_clip(4, &basis, &cfg).unwrap();
        (basis, clip)
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let (_, clip) = small_clip(5);
        let dir = tempfile::tempdir().unwrap();
        clip.save(dir.path()).unwrap();
        assert!(dir.path().join("frames/frame_000004.ppm").exists());
        assert_eq!(ClipBundle::load(dir.path()).unwrap(), clip);
    }

    #[test]
    fn validate_catches_mismatches() {
        let (_, clip) = small_clip(3);
        let mut c = clip.clone();
        c.coeffs.pop();
        assert!(c.validate().is_err());
        let mut c = clip.clone();
        c.waveform.truncate(2 * SAMPLES_PER_FRAME);
        assert!(c.validate().is_err());
        let mut c = clip;
        c.waveform.truncate(3 * SAMPLES_PER_FRAME - HOP);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bypass_keeps_background_and_ground_truth_reproduces_targets_off_face() {
        let (basis, clip) = small_clip(4);
        let flags = PipelineFlags {
            ground_truth_beta: true,
            bypass_generator: true,
            ..PipelineFlags::default()
        };
        let out = run_pipeline(&clip, &basis, None, None, &flags).unwrap();
        assert_eq!(out.frames.len(), clip.n_frames());
        assert_eq!(out.report.lmd, 0.0);
        for ((f, m), target) in out.frames.iter().zip(&out.masks).zip(&clip.frames) {
            assert!(m.count() > 0);
            for y in 0..f.height() {
                for x in 0..f.width() {
                    if !m.get(x, y) {
                        assert_eq!(f.pixel(x, y), target.pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_builders() {
        let (basis, clip) = small_clip(3);
        let s = a2ep_sample(&clip).unwrap();
        assert_eq!(s.betas.shape(), &[3, basis.k_exp()]);
        let plain = taft_triples(&clip, &basis, CLOSE_SIZE, None).unwrap();
        assert_eq!(plain.len(), 3);
        assert_eq!(plain[1].reference, clip.frames[0]);
        let a = taft_triples(&clip, &basis, CLOSE_SIZE, Some(9)).unwrap();
        assert_eq!(a, taft_triples(&clip, &basis, CLOSE_SIZE, Some(9)).unwrap());
    }

    #[test]
    fn missing_weights_are_errors() {
        let (basis, clip) = small_clip(2);
        assert!(run_pipeline(&clip, &basis, None, None, &PipelineFlags::default()).is_err());
        let flags = PipelineFlags {
            ground_truth_beta: true,
            ..PipelineFlags::default()
        };
        assert!(run_pipeline(&clip, &basis, None, None, &flags)
            .unwrap_err()
            .to_string()
            .contains("generator"));
    }

    #[test]
    fn model_runs_are_byte_identical() {
        let (basis, clip) = small_clip(3);
        let model = A2epModel::new(
            A2epConfig {
                d_model: 16,
                ffn_width: 32,
                ..A2epConfig::default()
            },
            2,
        )
        .unwrap();
        let gen = Generator::new(crate::taft::GeneratorConfig::default(), 3).unwrap();
        let flags = PipelineFlags::default();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let out = run_pipeline(&clip, &basis, Some(&model), Some(&gen), &flags).unwrap();
            write_pipeline_output(d.path(), &out).unwrap();
        }
        for i in 0..3 {
            let a = std::fs::read(dirs[0].path().join(frame_file_name(i))).unwrap();
            let b = std::fs::read(dirs[1].path().join(frame_file_name(i))).unwrap();
            assert_eq!(a, b);
        }
    }
}
