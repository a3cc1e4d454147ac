//! PSNR, SSIM and a projected-vertex landmark distance.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::RasterImage;

pub const SSIM_WINDOW: usize = 8;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(())
}

/// `10·log10(max² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    })
}

/// Single-scale SSIM over `channels` interleaved planes of a
/// `width × height` image: every 8×8 window at stride 1, population
/// statistics, averaged over windows and channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize, data_range: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.len() != width * height * channels {
        return Err(Error::shape(
            "ssim",
            format!("{} values for {width}x{height}x{channels}", a.len()),
        ));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {width}x{height}"
        )));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let at = |img: &[f64], x: usize, y: usize| img[(y * width + x) * channels + ch];
        for y0 in 0..=height - SSIM_WINDOW {
            for x0 in 0..=width - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (at(a, x, y), at(b, x, y));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn psnr_images(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    size_match(a, b)?;
    psnr(a.data(), b.data(), 1.0)
}

pub fn ssim_images(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    size_match(a, b)?;
    ssim(a.data(), b.data(), a.width(), a.height(), 3, 1.0)
}

fn size_match(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(
            "metric",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding 2D points.
pub fn lmd(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("lmd", format!("{} vs {} points", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("landmark set"));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum::<f64>()
        / pred.len() as f64)
}

/// [`lmd`] averaged over frames.
pub fn lmd_sequence(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("lmd", format!("{} vs {} frames", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("landmark sequence"));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += lmd(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

/// Metrics averaged over a clip. An infinite PSNR is written as `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub lmd: f64,
    pub frames: usize,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value `{t}`"))),
    }
}

impl MetricReport {
    /// Per-frame PSNR/SSIM means against `targets`; `lmd` is supplied by
    /// the caller. PSNR averages finite values and stays `+∞` only when
    /// every frame is identical.
    pub fn from_frames(outputs: &[RasterImage], targets: &[RasterImage], lmd: f64) -> Result<Self> {
        if outputs.len() != targets.len() {
            return Err(Error::shape(
                "metric_report",
                format!("{} vs {} frames", outputs.len(), targets.len()),
            ));
        }
        if outputs.is_empty() {
            return Err(Error::Empty("frame sequence"));
        }
        let (mut psnr_sum, mut finite, mut ssim_sum) = (0.0, 0usize, 0.0);
        for (o, t) in outputs.iter().zip(targets) {
            let qo = RasterImage::from_u8(o.width(), o.height(), &o.to_u8())?;
            let qt = RasterImage::from_u8(t.width(), t.height(), &t.to_u8())?;
            let p = psnr_images(&qo, &qt)?;
            if p.is_finite() {
                psnr_sum += p;
                finite += 1;
            }
            ssim_sum += ssim_images(&qo, &qt)?;
        }
        Ok(Self {
            psnr: if finite == 0 {
                f64::INFINITY
            } else {
                psnr_sum / finite as f64
            },
            ssim: ssim_sum / outputs.len() as f64,
            lmd,
            frames: outputs.len(),
        })
    }
}
