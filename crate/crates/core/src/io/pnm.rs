use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, RasterImage};

fn format_error(format: &'static str, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        format,
        offset,
        msg: msg.into(),
    }
}

fn encode(format: &'static str, w: usize, h: usize, bytes: &[u8], gray: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (sub, color) = if gray {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(sub)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| format_error(format, 0, e.to_string()))?;
    Ok(out)
}

fn decode(format: &'static str, bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_error(
            format,
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| format_error(format, 0, e.to_string()))?;
    let (w, h) = dec.dimensions();
    let expected_color = if channels == 1 {
        image::ColorType::L8
    } else {
        image::ColorType::Rgb8
    };
    if dec.color_type() != expected_color {
        return Err(format_error(
            format,
            0,
            format!("unsupported sample type {:?}", dec.color_type()),
        ));
    }
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| {
        format_error(
            format,
            bytes.len() as u64,
            format!("{e} (pixel data needs {} bytes)", w as usize * h as usize * channels),
        )
    })?;
    Ok((w as usize, h as usize, buf))
}

/// Binary P6, maxval 255.
pub fn encode_ppm(img: &RasterImage) -> Result<Vec<u8>> {
    encode("PPM", img.width(), img.height(), &img.to_u8(), false)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RasterImage> {
    let (w, h, buf) = decode("PPM", bytes, b"P6", 3)?;
    RasterImage::from_u8(w, h, &buf)
}

/// Binary P5 with values 0 and 255.
pub fn encode_pgm(mask: &BinaryMask) -> Result<Vec<u8>> {
    encode("PGM", mask.width(), mask.height(), &mask.to_u8(), true)
}

/// Any nonzero sample reads as set.
pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, buf) = decode("PGM", bytes, b"P5", 1)?;
    BinaryMask::from_data(w, h, buf.iter().map(|&v| v != 0).collect())
}

pub fn read_ppm(path: &Path) -> Result<RasterImage> {
    decode_ppm(&read_bytes(path)?)
}

pub fn write_ppm(path: &Path, img: &RasterImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&read_bytes(path)?)
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask)?)
}
