use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::oracle_mel;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::VarianceTargets;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeakerRole {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub mel: MelSpectrogram<f64>,
    pub variances: VarianceTargets,
}

impl Utterance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.variances.validate(self.phonemes.len())?;
        if self.variances.total_frames() != self.mel.n_frames() {
            return Err(Error::Input(format!(
                "durations sum to {} but the mel has {} frames",
                self.variances.total_frames(),
                self.mel.n_frames()
            )));
        }
        if let Some(&p) = self.phonemes.iter().find(|&&p| p >= vocab_size) {
            return Err(Error::Input(format!("phoneme {p} outside vocab {vocab_size}")));
        }
        Ok(())
    }
}

/// Utterances with a speaker roster and a train/test tag per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    /// Role of speaker `i` at index `i`.
    pub speakers: Vec<SpeakerRole>,
    pub utterances: Vec<Utterance>,
    pub splits: Vec<Split>,
}

/// Settings for the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Speakers `0..n-1` are sources, the last one is the target.
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Target utterances held out for evaluation.
    pub test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_speakers: 3,
            utterances_per_speaker: 240,
            vocab_size: 32,
            min_len: 5,
            max_len: 15,
            test_size: 20,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        if self.n_speakers < 3 {
            return Err(Error::Config(format!(
                "need at least 3 speakers (two source, one target), got {}",
                self.n_speakers
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad utterance length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.utterances_per_speaker <= self.test_size {
            return Err(Error::Config(format!(
                "{} utterances per speaker leaves no target training data after holding out {}",
                self.utterances_per_speaker, self.test_size
            )));
        }
        Ok(())
    }
}

/// Seeded corpus whose targets come from [`oracle_mel`].
pub fn gen_synthetic_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = cfg.n_speakers - 1;
    let mut speakers = vec![SpeakerRole::Source; cfg.n_speakers];
    speakers[target] = SpeakerRole::Target;

    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for speaker in 0..cfg.n_speakers {
        for _ in 0..cfg.utterances_per_speaker {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let phonemes: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let (mel, variances) = oracle_mel(&phonemes, speaker)?;
            utterances.push(Utterance {
                phonemes,
                speaker,
                mel,
                variances,
            });
        }
    }

    let mut splits = vec![Split::Train; utterances.len()];
    let mut target_ids: Vec<usize> = (0..utterances.len())
        .filter(|&i| utterances[i].speaker == target)
        .collect();
    target_ids.shuffle(&mut rng);
    for &i in &target_ids[..cfg.test_size] {
        splits[i] = Split::Test;
    }
    let corpus = Corpus {
        vocab_size: cfg.vocab_size,
        speakers,
        utterances,
        splits,
    };
    corpus.validate()?;
    Ok(corpus)
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.utterances.len() {
            return Err(Error::Input("split tags do not cover every utterance".into()));
        }
        for u in &self.utterances {
            u.validate(self.vocab_size)?;
            if u.speaker >= self.speakers.len() {
                return Err(Error::Input(format!("speaker {} not in roster", u.speaker)));
            }
        }
        for s in 0..self.speakers.len() {
            if !self.utterances.iter().any(|u| u.speaker == s) {
                return Err(Error::Input(format!("speaker {s} has no utterances")));
            }
        }
        Ok(())
    }

    fn select(&self, role: SpeakerRole, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| {
                self.speakers[self.utterances[i].speaker] == role && self.splits[i] == split
            })
            .collect()
    }

    /// Training utterances of every source speaker.
    pub fn source_train(&self) -> Vec<usize> {
        self.select(SpeakerRole::Source, Split::Train)
    }

    pub fn target_train(&self) -> Vec<usize> {
        self.select(SpeakerRole::Target, Split::Train)
    }

    pub fn target_test(&self) -> Vec<usize> {
        self.select(SpeakerRole::Target, Split::Test)
    }

    pub fn source_speakers(&self) -> Vec<usize> {
        (0..self.speakers.len())
            .filter(|&s| self.speakers[s] == SpeakerRole::Source)
            .collect()
    }

    pub fn target_speaker(&self) -> Result<usize> {
        let targets: Vec<usize> = (0..self.speakers.len())
            .filter(|&s| self.speakers[s] == SpeakerRole::Target)
            .collect();
        match targets.as_slice() {
            [t] => Ok(*t),
            _ => Err(Error::Input(format!(
                "expected exactly one target speaker, found {}",
                targets.len()
            ))),
        }
    }

    /// First `size` utterances of a seeded permutation of the target training
    /// split, so smaller subsets are prefixes of larger ones.
    pub fn target_subset(&self, size: usize, seed: u64) -> Result<Vec<usize>> {
        let mut pool = self.target_train();
        if size == 0 || size > pool.len() {
            return Err(Error::Config(format!(
                "subset size {size} outside 1..={}",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5u64.rotate_left(40));
        pool.shuffle(&mut rng);
        pool.truncate(size);
        Ok(pool)
    }
}
