use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{ItemInput, VarianceTargets};
use crate::tensor::Tensor;

/// Padded group of utterances. Padded cells are zero and the masks mark the
/// true lengths exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Corpus indices of the items, in batch order.
    pub indices: Vec<usize>,
    pub speakers: Vec<usize>,
    /// `[B][max_phonemes]`.
    pub phonemes: Vec<Vec<usize>>,
    pub phoneme_mask: Vec<Vec<bool>>,
    /// Padded per-phoneme targets; padded positions have duration 0.
    pub variances: Vec<VarianceTargets>,
    /// `[B, max_frames, n_mels]`.
    pub mel: Tensor<f64>,
    /// `[B, max_frames, 1]` of 0/1.
    pub frame_mask: Tensor<f64>,
    pub frame_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_indices(corpus: &Corpus, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("batch with no utterances".into()));
        }
        let items: Vec<_> = indices.iter().map(|&i| &corpus.utterances[i]).collect();
        let max_ph = items.iter().map(|u| u.phonemes.len()).max().unwrap();
        let max_fr = items.iter().map(|u| u.mel.n_frames()).max().unwrap();
        let n_mels = items[0].mel.n_mels();
        let b = items.len();

        let mut phonemes = Vec::with_capacity(b);
        let mut phoneme_mask = Vec::with_capacity(b);
        let mut variances = Vec::with_capacity(b);
        let mut mel = vec![0.0; b * max_fr * n_mels];
        let mut frame_mask = vec![0.0; b * max_fr];
        let mut frame_lengths = Vec::with_capacity(b);
        for (k, u) in items.iter().enumerate() {
            let n = u.phonemes.len();
            let pad = max_ph - n;
            let mut ph = u.phonemes.clone();
            ph.resize(max_ph, 0);
            phonemes.push(ph);
            let mut m = vec![true; n];
            m.resize(max_ph, false);
            phoneme_mask.push(m);
            let v = &u.variances;
            variances.push(VarianceTargets {
                duration: v.duration.iter().copied().chain(std::iter::repeat_n(0, pad)).collect(),
                pitch: v.pitch.iter().copied().chain(std::iter::repeat_n(0.0, pad)).collect(),
                energy: v.energy.iter().copied().chain(std::iter::repeat_n(0.0, pad)).collect(),
            });
            let t = u.mel.n_frames();
            if u.mel.n_mels() != n_mels {
                return Err(Error::dim("batch", u.mel.frames.shape(), &[t, n_mels]));
            }
            let off = k * max_fr * n_mels;
            mel[off..off + t * n_mels].copy_from_slice(u.mel.frames.data());
            frame_mask[k * max_fr..k * max_fr + t].iter_mut().for_each(|x| *x = 1.0);
            frame_lengths.push(t);
        }
        Ok(Batch {
            indices: indices.to_vec(),
            speakers: items.iter().map(|u| u.speaker).collect(),
            phonemes,
            phoneme_mask,
            variances,
            mel: Tensor::new([b, max_fr, n_mels], mel)?,
            frame_mask: Tensor::new([b, max_fr, 1], frame_mask)?,
            frame_lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.mel.shape()[1]
    }

    pub fn max_phonemes(&self) -> usize {
        self.phonemes[0].len()
    }

    /// Padded inputs of item `k` with its validity mask and targets.
    pub fn item(&self, k: usize) -> ItemInput<'_> {
        ItemInput::new(&self.phonemes[k])
            .with_mask(&self.phoneme_mask[k])
            .with_targets(&self.variances[k])
    }

    /// `[B, max_phonemes]` 0/1 mask.
    pub fn phoneme_mask_tensor(&self) -> Tensor<f64> {
        let data = self
            .phoneme_mask
            .iter()
            .flatten()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        Tensor::new([self.len(), self.max_phonemes()], data).unwrap()
    }
}

/// Shuffles `indices` with a permutation determined by `(seed, epoch)` and
/// splits them into batches of at most `batch_size`.
pub fn make_batches(
    corpus: &Corpus,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_indices(corpus, chunk))
        .collect()
}
