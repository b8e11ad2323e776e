//! Four-channel FoA WAV files. On disk the channels follow ACN order
//! (W, Y, Z, X); in memory they are `[W, X, Y, Z]`.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Result, SeldError};

pub const SAMPLE_RATE: u32 = 24_000;

/// ACN index of each in-memory channel `[W, X, Y, Z]`.
const ACN_OF: [usize; 4] = [0, 3, 1, 2];

pub fn read_foa(path: &Path) -> Result<[Vec<f32>; 4]> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(SeldError::Input(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 4 {
        return Err(SeldError::Input(format!(
            "{}: {} channels, expected 4 (FoA)",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(SeldError::Input(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / 4;
    let mut out: [Vec<f32>; 4] = Default::default();
    for (ch, dst) in out.iter_mut().enumerate() {
        let acn = ACN_OF[ch];
        *dst = (0..frames).map(|i| interleaved[i * 4 + acn]).collect();
    }
    Ok(out)
}

/// Writes 32-bit float samples in ACN channel order.
pub fn write_foa(path: &Path, wave: &[Vec<f32>; 4]) -> Result<()> {
    let spec = WavSpec {
        channels: 4,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    let mut by_acn: [&Vec<f32>; 4] = [&wave[0]; 4];
    for (ch, &acn) in ACN_OF.iter().enumerate() {
        by_acn[acn] = &wave[ch];
    }
    for i in 0..wave[0].len() {
        for c in by_acn {
            w.write_sample(c[i])?;
        }
    }
    w.finalize()?;
    Ok(())
}
