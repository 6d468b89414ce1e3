use std::fs;
use std::path::Path;

use super::{AudioSignal, MelSpectrogram};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MEL_MAGIC: &[u8; 4] = b"MEL1";
/// Carried by the magic; MEL1 has no separate version field.
pub const MEL_VERSION: u32 = 1;

/// MEL1 layout: magic, u32 frames, u32 n_mels, u32 sample_rate, u32 hop, then
/// `frames * n_mels` f32 values row-major, all little-endian.
pub fn encode_mel<S: Scalar>(mel: &MelSpectrogram<S>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MEL_MAGIC);
    w.u32(mel.n_frames() as u32);
    w.u32(mel.n_mels() as u32);
    w.u32(mel.sample_rate);
    w.u32(mel.hop);
    for &v in mel.frames.data() {
        w.f32(v.as_f64() as f32);
    }
    w.buf
}

pub fn decode_mel<S: Scalar>(bytes: &[u8]) -> Result<MelSpectrogram<S>> {
    let mut r = Reader::new(bytes, "MEL1");
    r.expect_magic(MEL_MAGIC)?;
    let frames = r.u32()? as usize;
    let n_mels = r.u32()? as usize;
    let sample_rate = r.u32()?;
    let hop = r.u32()?;
    if frames == 0 || n_mels == 0 {
        return Err(r.error("empty mel matrix"));
    }
    let count = frames.saturating_mul(n_mels);
    if count.saturating_mul(4) != bytes.len() - r.offset() as usize {
        return Err(r.error(format!("expected {count} f32 values")));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(S::lit(r.f32()? as f64));
    }
    r.finish()?;
    MelSpectrogram::new(Tensor::new([frames, n_mels], data)?, hop, sample_rate)
}

pub fn write_mel<S: Scalar>(path: impl AsRef<Path>, mel: &MelSpectrogram<S>) -> Result<()> {
    fs::write(path, encode_mel(mel))?;
    Ok(())
}

pub fn read_mel<S: Scalar>(path: impl AsRef<Path>) -> Result<MelSpectrogram<S>> {
    decode_mel(&fs::read(path)?)
}

/// 16-bit PCM mono RIFF/WAVE bytes.
pub fn encode_wav<S: Scalar>(signal: &AudioSignal<S>) -> Vec<u8> {
    let data_len = (signal.samples.len() * 2) as u32;
    let mut w = Writer::default();
    w.bytes(b"RIFF");
    w.u32(36 + data_len);
    w.bytes(b"WAVE");
    w.bytes(b"fmt ");
    w.u32(16);
    w.buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    w.buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    w.u32(signal.sample_rate);
    w.u32(signal.sample_rate * 2);
    w.buf.extend_from_slice(&2u16.to_le_bytes());
    w.buf.extend_from_slice(&16u16.to_le_bytes());
    w.bytes(b"data");
    w.u32(data_len);
    for &x in &signal.samples {
        let v = (x.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.buf.extend_from_slice(&v.to_le_bytes());
    }
    w.buf
}

pub fn write_wav<S: Scalar>(path: impl AsRef<Path>, signal: &AudioSignal<S>) -> Result<()> {
    fs::write(path, encode_wav(signal))?;
    Ok(())
}

/// Reads a file produced by [`write_wav`]; returns raw samples and rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<i16>, u32)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "WAV");
    r.expect_magic(b"RIFF")?;
    r.u32()?;
    r.expect_magic(b"WAVE")?;
    r.expect_magic(b"fmt ")?;
    if r.u32()? != 16 {
        return Err(r.error("unsupported fmt chunk"));
    }
    let header = r.bytes(4)?;
    if header != [1, 0, 1, 0] {
        return Err(Error::format("WAV", 20, "only PCM mono is supported"));
    }
    let rate = r.u32()?;
    r.bytes(8)?;
    r.expect_magic(b"data")?;
    let n = r.u32()? as usize / 2;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(i16::from_le_bytes(r.bytes(2)?.try_into().unwrap()));
    }
    Ok((out, rate))
}
