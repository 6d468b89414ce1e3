//! CORP corpus file.
//!
//! ```text
//! "CORP" | u32 version=1 | u32 vocab | u32 n_speakers | u8 role per speaker
//! u32 sample_rate | u32 hop | u32 n_mels | u32 n_utterances
//! per utterance: u32 speaker, u8 split, u32 n_phonemes, u32 ids.., u32 durations..,
//!                f32 pitch.., f32 energy.., u32 n_frames, f32 mel (row-major)
//! ```

use std::fs;
use std::path::Path;

use super::corpus::{Corpus, SpeakerRole, Split, Utterance};
use crate::binio::{Reader, Writer};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::VarianceTargets;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"CORP";
pub const CORPUS_VERSION: u32 = 1;

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION);
    w.u32(corpus.vocab_size as u32);
    w.u32(corpus.speakers.len() as u32);
    for role in &corpus.speakers {
        w.u8(match role {
            SpeakerRole::Source => 0,
            SpeakerRole::Target => 1,
        });
    }
    let first = &corpus.utterances[0].mel;
    w.u32(first.sample_rate);
    w.u32(first.hop);
    w.u32(first.n_mels() as u32);
    w.u32(corpus.utterances.len() as u32);
    for (u, split) in corpus.utterances.iter().zip(&corpus.splits) {
        w.u32(u.speaker as u32);
        w.u8(match split {
            Split::Train => 0,
            Split::Test => 1,
        });
        w.u32(u.phonemes.len() as u32);
        u.phonemes.iter().for_each(|&p| w.u32(p as u32));
        u.variances.duration.iter().for_each(|&d| w.u32(d as u32));
        u.variances.pitch.iter().for_each(|&v| w.f32(v as f32));
        u.variances.energy.iter().for_each(|&v| w.f32(v as f32));
        w.u32(u.mel.n_frames() as u32);
        u.mel.frames.data().iter().for_each(|&v| w.f32(v as f32));
    }
    w.buf
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes, "CORP");
    r.expect_magic(CORPUS_MAGIC)?;
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let vocab_size = r.u32()? as usize;
    let n_speakers = r.len_prefix(1)?;
    let mut speakers = Vec::with_capacity(n_speakers);
    for _ in 0..n_speakers {
        speakers.push(match r.u8()? {
            0 => SpeakerRole::Source,
            1 => SpeakerRole::Target,
            other => return Err(r.error(format!("unknown speaker role {other}"))),
        });
    }
    let sample_rate = r.u32()?;
    let hop = r.u32()?;
    let n_mels = r.u32()? as usize;
    if n_mels == 0 {
        return Err(r.error("n_mels is zero"));
    }
    let n_utt = r.len_prefix(1)?;
    let mut utterances = Vec::with_capacity(n_utt);
    let mut splits = Vec::with_capacity(n_utt);
    for _ in 0..n_utt {
        let start = r.offset();
        let speaker = r.u32()? as usize;
        splits.push(match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(r.error(format!("unknown split tag {other}"))),
        });
        let n = r.len_prefix(16)?;
        let mut phonemes = Vec::with_capacity(n);
        for _ in 0..n {
            phonemes.push(r.u32()? as usize);
        }
        let mut duration = Vec::with_capacity(n);
        for _ in 0..n {
            duration.push(r.u32()? as usize);
        }
        let mut pitch = Vec::with_capacity(n);
        for _ in 0..n {
            pitch.push(r.f32()? as f64);
        }
        let mut energy = Vec::with_capacity(n);
        for _ in 0..n {
            energy.push(r.f32()? as f64);
        }
        let frames = r.len_prefix(4 * n_mels)?;
        let mut mel = Vec::with_capacity(frames * n_mels);
        for _ in 0..frames * n_mels {
            mel.push(r.f32()? as f64);
        }
        let bad = |e: Error| Error::format("CORP", start, e.to_string());
        let frames = Tensor::new([frames, n_mels], mel).map_err(bad)?;
        let u = Utterance {
            phonemes,
            speaker,
            mel: MelSpectrogram::new(frames, hop, sample_rate).map_err(bad)?,
            variances: VarianceTargets {
                duration,
                pitch,
                energy,
            },
        };
        u.validate(vocab_size).map_err(bad)?;
        utterances.push(u);
    }
    r.finish()?;
    let corpus = Corpus {
        vocab_size,
        speakers,
        utterances,
        splits,
    };
    corpus
        .validate()
        .map_err(|e| Error::format("CORP", bytes.len() as u64, e.to_string()))?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_corpus(corpus))?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    decode_corpus(&fs::read(path)?)
}
