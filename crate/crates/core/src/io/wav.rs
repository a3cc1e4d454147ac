use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};

pub const WAV_SAMPLE_RATE: u32 = 16_000;

const SPEC: WavSpec = WavSpec {
    channels: 1,
    sample_rate: WAV_SAMPLE_RATE,
    bits_per_sample: 16,
    sample_format: SampleFormat::Int,
};

fn wav_error(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "WAV",
        offset,
        msg: msg.into(),
    }
}

pub fn encode_wav(samples: &[i16]) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    let mut w = WavWriter::new(&mut buf, SPEC).map_err(|e| wav_error(0, e.to_string()))?;
    for &s in samples {
        w.write_sample(s).map_err(|e| wav_error(0, e.to_string()))?;
    }
    w.finalize().map_err(|e| wav_error(0, e.to_string()))?;
    Ok(buf.into_inner())
}

/// Accepts RIFF PCM16 mono at 16 kHz only.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<i16>> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_error(0, "not a RIFF/WAVE file"));
    }
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| wav_error(12, e.to_string()))?;
    let spec = reader.spec();
    if spec != SPEC {
        return Err(wav_error(
            20,
            format!(
                "need PCM16 mono {WAV_SAMPLE_RATE} Hz, got {} channel(s), {} Hz, {} bits {:?}",
                spec.channels, spec.sample_rate, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let expected = reader.len() as usize;
    let samples: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(bytes.len() as u64, format!("{e} (header declares {expected} samples)")))?;
    if samples.len() != expected {
        return Err(wav_error(
            bytes.len() as u64,
            format!("header declares {expected} samples, found {}", samples.len()),
        ));
    }
    Ok(samples)
}

pub fn read_wav(path: &Path) -> Result<Vec<i16>> {
    decode_wav(&read_bytes(path)?)
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    write_bytes(path, &encode_wav(samples)?)
}
