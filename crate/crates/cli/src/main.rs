//! `gsface` command-line driver. Every command prints one JSON object on
//! stdout; failures print `{"status":"error",...}` on stderr and exit 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gsface::a2ep::{train_a2ep, A2epConfig, A2epTrainConfig};
use gsface::config::KvConfig;
use gsface::face3dmm::FaceBasis;
use gsface::io;
use gsface::mafb::{augment_mask, blend, morph_close, StructuringElement, AUGMENT_SIZES, CLOSE_SIZE};
use gsface::metrics::{lmd_sequence, MetricReport};
use gsface::pipeline::{
    a2ep_sample, frame_file_name, load_a2ep, load_generator, mask_file_name, project_landmarks, render_frame,
    run_pipeline, taft_triples, write_pipeline_output, ClipBundle, PipelineFlags,
};
use gsface::synth::{gen_basis, make_synthetic_clip, BasisConfig, ClipConfig, SYNTH_MOUTH_Y};
use gsface::taft::{train_taft, GeneratorConfig, TaftTrainConfig};

const SECTIONS: &[&str] = &[
    "basis",
    "clip",
    "a2ep",
    "a2ep_train",
    "generator",
    "taft_train",
    "pipeline",
];

#[derive(Parser)]
#[command(name = "gsface", version, about = "Audio-driven 3DMM talking-face toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `section.key = value` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face basis (FB3D).
    GenBasis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic clip directory for a basis.
    GenClip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every frame of a clip's coefficients (or of `--coeffs`).
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// JSON-lines coefficients replacing the clip's own.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite a rendered image over a target through a closed mask.
    Blend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Randomly dilate or erode the closed mask.
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = CLOSE_SIZE)]
        close_size: usize,
    },
    /// Train the audio-to-expression model on clip directories.
    TrainA2ep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        clips: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SYNTH_MOUTH_Y)]
        mouth_y: f64,
    },
    /// Predict β for a clip and write it as JSON-lines coefficients.
    InferA2ep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the face translation generator on clip directories.
    TrainTaft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        clips: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Randomly dilate or erode training masks.
        #[arg(long)]
        augment: bool,
    },
    /// Full pipeline on one clip; writes frames, masks and report.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        a2ep: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bypass_generator: bool,
        #[arg(long)]
        ground_truth_beta: bool,
    },
    /// Score a frame directory against a clip's frames.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Predicted coefficients for LMD; requires `--basis`.
        #[arg(long, requires = "basis")]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long, default_value_t = SYNTH_MOUTH_Y)]
        mouth_y: f64,
    },
}

fn load_config(common: &Common) -> Result<KvConfig> {
    let cfg = match &common.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    cfg.check_sections(SECTIONS)?;
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read_basis(p: &Path) -> Result<FaceBasis> {
    io::read_basis(p).with_context(|| format!("loading basis {}", p.display()))
}

fn read_clip(p: &Path) -> Result<ClipBundle> {
    ClipBundle::load(p).with_context(|| format!("loading clip {}", p.display()))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenBasis { common, out } => {
            let cfg = load_config(&common)?.apply("basis", BasisConfig::default())?;
            let basis = gen_basis(&cfg, common.seed)?;
            io::write_basis(&out, &basis)?;
            Ok(json!({
                "command": "gen-basis", "out": path_str(&out), "config": cfg,
                "vertices": basis.n_vertices(), "triangles": basis.triangles().len(),
            }))
        }
        Command::GenClip { common, basis, out } => {
            let cfg = load_config(&common)?.apply("clip", ClipConfig::default())?;
            let basis = read_basis(&basis)?;
            let clip = make_synthetic_clip(common.seed, &basis, &cfg)?;
            clip.save(&out)?;
            Ok(json!({
                "command": "gen-clip", "out": path_str(&out), "config": cfg,
                "frames": clip.n_frames(), "samples": clip.waveform.len(),
            }))
        }
        Command::Render {
            common,
            basis,
            clip,
            coeffs,
            out,
        } => {
            load_config(&common)?;
            let basis = read_basis(&basis)?;
            let clip = read_clip(&clip)?;
            let seq = match &coeffs {
                Some(p) => io::read_coeffs(p, Some(basis.k_exp()))?,
                None => clip.coeffs.clone(),
            };
            let mut covered = Vec::with_capacity(seq.len());
            for (i, c) in seq.iter().enumerate() {
                let r = render_frame(&basis, c, &clip.camera).with_context(|| format!("frame {i}"))?;
                io::write_ppm(&out.join(frame_file_name(i)), &r.color)?;
                io::write_pgm(&out.join(mask_file_name(i)), &r.face_mask)?;
                covered.push(r.face_mask.count());
            }
            Ok(json!({ "command": "render", "out": path_str(&out), "frames": seq.len(), "face_pixels": covered }))
        }
        Command::Blend {
            common,
            rendered,
            target,
            mask,
            out,
            augment,
            close_size,
        } => {
            load_config(&common)?;
            let rendered = io::read_ppm(&rendered)?;
            let target = io::read_ppm(&target)?;
            let mask = io::read_pgm(&mask)?;
            let (mask, aug) = if augment {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(common.seed);
                let (m, a) = augment_mask(&mask, &mut rng, &AUGMENT_SIZES, close_size)?;
                (m, Some(format!("{a:?}")))
            } else {
                (morph_close(&mask, StructuringElement::square(close_size)?), None)
            };
            io::write_ppm(&out, &blend(&rendered, &target, &mask)?)?;
            Ok(json!({ "command": "blend", "out": path_str(&out), "mask_pixels": mask.count(), "augmentation": aug }))
        }
        Command::TrainA2ep {
            common,
            basis,
            clips,
            out,
            mouth_y,
        } => {
            let cfg = load_config(&common)?;
            let model_cfg = cfg.apply("a2ep", A2epConfig::default())?;
            let train_cfg = cfg.apply(
                "a2ep_train",
                A2epTrainConfig {
                    seed: common.seed,
                    ..A2epTrainConfig::default()
                },
            )?;
            let basis = read_basis(&basis)?;
            let samples = clips
                .iter()
                .map(|p| a2ep_sample(&read_clip(p)?).map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            let mouth = basis.lower_mouth_indices(mouth_y);
            let (model, log) = train_a2ep(&samples, &basis, &mouth, &model_cfg, &train_cfg)?;
            io::write_checkpoint(&out, &model.to_named())?;
            Ok(json!({
                "command": "train-a2ep", "out": path_str(&out), "model": model_cfg, "train": train_cfg,
                "mouth_vertices": mouth.indices.len(), "initial_loss": log.initial(), "final_loss": log.last(),
                "losses": log.losses,
            }))
        }
        Command::InferA2ep {
            common,
            weights,
            clip,
            out,
        } => {
            load_config(&common)?;
            let model = load_a2ep(&weights)?;
            let clip = read_clip(&clip)?;
            let sample = a2ep_sample(&clip)?;
            let betas = model.infer_autoregressive(&sample.features, clip.identity, clip.n_frames())?;
            let seq = clip
                .coeffs
                .iter()
                .enumerate()
                .map(|(t, c)| gsface::mafb::combine_params(c, betas.row(t)))
                .collect::<gsface::Result<Vec<_>>>()?;
            io::write_coeffs(&out, &seq)?;
            Ok(json!({ "command": "infer-a2ep", "out": path_str(&out), "frames": seq.len() }))
        }
        Command::TrainTaft {
            common,
            basis,
            clips,
            out,
            augment,
        } => {
            let cfg = load_config(&common)?;
            let gen_cfg = cfg.apply("generator", GeneratorConfig::default())?;
            let train_cfg = cfg.apply(
                "taft_train",
                TaftTrainConfig {
                    seed: common.seed,
                    ..TaftTrainConfig::default()
                },
            )?;
            let flags = cfg.apply("pipeline", PipelineFlags::default())?;
            let basis = read_basis(&basis)?;
            let mut dataset = Vec::new();
            for (i, p) in clips.iter().enumerate() {
                let seed = augment.then(|| common.seed.wrapping_add(i as u64));
                dataset.extend(taft_triples(&read_clip(p)?, &basis, flags.close_size, seed)?);
            }
            let (generator, log) = train_taft(&dataset, &gen_cfg, &train_cfg)?;
            io::write_checkpoint(&out, &generator.to_named())?;
            Ok(json!({
                "command": "train-taft", "out": path_str(&out), "generator": gen_cfg, "train": train_cfg,
                "triples": dataset.len(), "initial_loss": log.initial(), "final_loss": log.last(), "losses": log.losses,
            }))
        }
        Command::Run {
            common,
            basis,
            clip,
            a2ep,
            generator,
            out,
            bypass_generator,
            ground_truth_beta,
        } => {
            let cfg = load_config(&common)?;
            let mut flags = cfg.apply("pipeline", PipelineFlags::default())?;
            flags.bypass_generator |= bypass_generator;
            flags.ground_truth_beta |= ground_truth_beta;
            let basis = read_basis(&basis)?;
            let clip = read_clip(&clip)?;
            let a2ep = a2ep.as_deref().map(load_a2ep).transpose()?;
            let generator = generator.as_deref().map(load_generator).transpose()?;
            let output = run_pipeline(&clip, &basis, a2ep.as_ref(), generator.as_ref(), &flags)?;
            let paths = write_pipeline_output(&out, &output)?;
            let seq = clip
                .coeffs
                .iter()
                .zip(&output.predicted_betas)
                .map(|(c, b)| gsface::mafb::combine_params(c, b))
                .collect::<gsface::Result<Vec<_>>>()?;
            io::write_coeffs(&out.join("coeffs.jsonl"), &seq)?;
            Ok(json!({
                "command": "run", "out": path_str(&out), "flags": flags, "frames": paths.len(), "report": output.report,
            }))
        }
        Command::Eval {
            common,
            clip,
            frames,
            coeffs,
            basis,
            mouth_y,
        } => {
            load_config(&common)?;
            let clip = read_clip(&clip)?;
            let outputs = (0..clip.n_frames())
                .map(|i| io::read_ppm(&frames.join(frame_file_name(i))).map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            let lmd = match (&coeffs, &basis) {
                (Some(c), Some(b)) => {
                    let basis = read_basis(b)?;
                    let seq = io::read_coeffs(c, Some(basis.k_exp()))?;
                    if seq.len() != clip.n_frames() {
                        bail!("{} has {} frames, clip has {}", c.display(), seq.len(), clip.n_frames());
                    }
                    let idx = basis.lower_mouth_indices(mouth_y).indices;
                    let mut pred = Vec::new();
                    let mut gt = Vec::new();
                    for (p, g) in seq.iter().zip(&clip.coeffs) {
                        pred.push(project_landmarks(&basis, p, &clip.camera, &idx)?);
                        gt.push(project_landmarks(&basis, g, &clip.camera, &idx)?);
                    }
                    lmd_sequence(&pred, &gt)?
                }
                _ => f64::NAN,
            };
            let report = MetricReport::from_frames(&outputs, &clip.frames, lmd)?;
            Ok(json!({ "command": "eval", "report": report }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(mut log) => {
            log["status"] = json!("ok");
            println!("{log}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "status": "error", "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
