use std::io::{Cursor, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{Error, Result};

const PCM16_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono RIFF file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::NonMono {
            channels: spec.channels,
        });
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit, expected PCM16",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Like [`read_wav`], rejecting files at any rate other than `expected_rate`.
pub fn read_wav_at(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioBuffer> {
    let buf = read_wav(path)?;
    buf.require_rate(expected_rate)?;
    Ok(buf)
}

fn spec_for(buffer: &AudioBuffer) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn quantize(s: f64) -> i16 {
    (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn write_into<W: Write + Seek>(writer: W, buffer: &AudioBuffer) -> Result<()> {
    let mut w = WavWriter::new(writer, spec_for(buffer))?;
    let mut w16 = w.get_i16_writer(buffer.len() as u32);
    for &s in buffer.samples() {
        w16.write_sample(quantize(s));
    }
    w16.flush()?;
    w.finalize()?;
    Ok(())
}

/// Writes PCM16 mono; samples outside [-1, 1) saturate.
pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_into(file, buffer)
}

/// In-memory WAV encoding, byte-identical to what [`write_wav`] puts on disk.
pub fn wav_bytes(buffer: &AudioBuffer) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    write_into(&mut cursor, buffer)?;
    Ok(cursor.into_inner())
}
