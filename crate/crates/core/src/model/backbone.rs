use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    fft_block, linear, positional_encoding, variance_predictor, BlockSettings, SeqMask,
};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Graph, NodeId, ParamSet, Tensor};

pub const PREDICTORS: [&str; 3] = ["duration", "pitch", "energy"];

/// Per-phoneme ground truth for the variance adaptor (pitch and energy raw,
/// before normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub duration: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    pub fn total_frames(&self) -> usize {
        self.duration.iter().sum()
    }

    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        if self.duration.len() != n_phonemes
            || self.pitch.len() != n_phonemes
            || self.energy.len() != n_phonemes
        {
            return Err(Error::Input(format!(
                "variance targets of lengths {}/{}/{} for {n_phonemes} phonemes",
                self.duration.len(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        Ok(())
    }
}

/// Which speaker embedding conditions a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum SpeakerRef {
    Id(usize),
    /// Arithmetic mean of the listed table rows.
    Mean(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth durations, pitch and energy drive regulation and
    /// conditioning; predictions are still produced for their losses.
    TeacherForced,
    Inference,
}

/// Inputs of one utterance. `valid` marks real phoneme positions when the
/// sequence carries padding.
#[derive(Clone, Copy, Debug)]
pub struct ItemInput<'a> {
    pub phonemes: &'a [usize],
    pub valid: Option<&'a [bool]>,
    pub targets: Option<&'a VarianceTargets>,
}

impl<'a> ItemInput<'a> {
    pub fn new(phonemes: &'a [usize]) -> Self {
        ItemInput {
            phonemes,
            valid: None,
            targets: None,
        }
    }

    pub fn with_targets(mut self, targets: &'a VarianceTargets) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn with_mask(mut self, valid: &'a [bool]) -> Self {
        self.valid = Some(valid);
        self
    }
}

/// Graph nodes produced by [`Backbone::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[frames, n_mels]`.
    pub mel: NodeId,
    /// `[n_phonemes]` each.
    pub log_duration: NodeId,
    pub pitch: NodeId,
    pub energy: NodeId,
    /// Durations used for length regulation.
    pub durations: Vec<usize>,
    pub n_frames: usize,
    /// Encoder attention weights, one node per block and head.
    pub encoder_attention: Vec<NodeId>,
}

/// Parameters and configuration of the acoustic model.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

fn init_linear<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform([fan_in, fan_out], bound, rng))?;
    p.insert(format!("{name}.b"), Tensor::uniform([1, fan_out], bound, rng))
}

fn init_conv<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    let bound = 1.0 / ((k * c_in) as f64).sqrt();
    p.insert(format!("{name}.k"), Tensor::uniform([k, c_in, c_out], bound, rng))?;
    p.insert(format!("{name}.b"), Tensor::uniform([1, c_out], bound, rng))
}

fn init_norm<S: Scalar>(p: &mut ParamSet<S>, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}.gain"), Tensor::full([d], S::one()))?;
    p.insert(format!("{name}.bias"), Tensor::zeros([d]))
}

fn init_block<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.d_model;
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{prefix}.attn.{proj}"), d, d)?;
    }
    init_norm(p, &format!("{prefix}.ln1"), d)?;
    init_conv(p, rng, &format!("{prefix}.ffn.conv1"), cfg.conv_kernel, d, cfg.ffn_filter)?;
    init_conv(p, rng, &format!("{prefix}.ffn.conv2"), cfg.conv_kernel, cfg.ffn_filter, d)?;
    init_norm(p, &format!("{prefix}.ln2"), d)
}

/// Uniform bound used for embedding-table rows.
pub fn embedding_bound(d_model: usize) -> f64 {
    1.0 / (d_model as f64).sqrt()
}

impl<S: Scalar> Backbone<S> {
    /// Seeded initialization, uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.d_model;
        let eb = embedding_bound(d);
        p.insert("phoneme_embedding", Tensor::uniform([config.vocab_size, d], eb, &mut rng))?;
        p.insert("speaker_embedding", Tensor::uniform([config.n_speakers, d], eb, &mut rng))?;
        for i in 0..config.encoder_blocks {
            init_block(&mut p, &mut rng, &format!("encoder.{i}"), &config)?;
        }
        for name in PREDICTORS {
            let prefix = format!("variance.{name}");
            let (k, f) = (config.conv_kernel, config.predictor_filter);
            init_conv(&mut p, &mut rng, &format!("{prefix}.conv1"), k, d, f)?;
            init_norm(&mut p, &format!("{prefix}.ln1"), f)?;
            init_conv(&mut p, &mut rng, &format!("{prefix}.conv2"), k, f, f)?;
            init_norm(&mut p, &format!("{prefix}.ln2"), f)?;
            init_linear(&mut p, &mut rng, &format!("{prefix}.out"), f, 1)?;
        }
        init_linear(&mut p, &mut rng, "decoder.pitch_proj", 1, d)?;
        init_linear(&mut p, &mut rng, "decoder.energy_proj", 1, d)?;
        for i in 0..config.decoder_blocks {
            init_block(&mut p, &mut rng, &format!("decoder.{i}"), &config)?;
        }
        init_linear(&mut p, &mut rng, "mel_proj", d, config.n_mels)?;
        Ok(Backbone { config, params: p })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let expected = Backbone::<S>::init(config.clone(), 0)?;
        if expected.params.structural_hash() != params.structural_hash() {
            return Err(Error::Input(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Backbone { config, params })
    }

    /// `[1, d]` speaker conditioning vector.
    fn speaker_vector(&self, g: &mut Graph<S>, p: &Bound, speaker: &SpeakerRef) -> Result<NodeId> {
        let table = p.get("speaker_embedding");
        let n = self.config.n_speakers;
        match speaker {
            SpeakerRef::Id(id) => {
                if *id >= n {
                    return Err(Error::Input(format!("speaker {id} out of range for {n} speakers")));
                }
                g.gather_rows(table, &[*id])
            }
            SpeakerRef::Mean(ids) => {
                if ids.is_empty() || ids.iter().any(|&i| i >= n) {
                    return Err(Error::Input(format!("bad speaker set {ids:?} for {n} speakers")));
                }
                let mut w = vec![S::zero(); n];
                let share = S::one() / S::from_usize(ids.len());
                for &i in ids {
                    w[i] += share;
                }
                let w = g.constant(Tensor::new([1, n], w)?);
                g.matmul(w, table)
            }
        }
    }

    fn block_settings(&self, seed: u64) -> BlockSettings {
        BlockSettings {
            n_heads: self.config.n_heads,
            dropout: self.config.dropout,
            seed,
        }
    }

    /// Phoneme embedding scaled by `sqrt(d)`, plus positional encoding and the
    /// speaker vector, through the encoder stack. Returns the hidden sequence
    /// and the attention weights of every block.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        phonemes: &[usize],
        speaker: &SpeakerRef,
        mask: SeqMask,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let cfg = &self.config;
        if phonemes.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(&bad) = phonemes.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "phoneme id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        if let Some(m) = mask.0 {
            if m.len() != phonemes.len() {
                return Err(Error::dim("encode", &[phonemes.len()], &[m.len()]));
            }
        }
        let emb = g.gather_rows(p.get("phoneme_embedding"), phonemes)?;
        let emb = g.scale(emb, S::from_usize(cfg.d_model).sqrt());
        let pe = g.constant(positional_encoding(phonemes.len(), cfg.d_model)?);
        let x = g.add(emb, pe)?;
        let spk = self.speaker_vector(g, p, speaker)?;
        let mut x = g.add(x, spk)?;
        x = mask.apply(g, x)?;
        let mut attention = Vec::new();
        for i in 0..cfg.encoder_blocks {
            let (y, w) = fft_block(
                g,
                p,
                &format!("encoder.{i}"),
                x,
                mask,
                self.block_settings(i as u64),
            )?;
            x = y;
            attention.extend(w);
        }
        Ok((x, attention))
    }

    /// Log-duration, normalized pitch and normalized energy per phoneme.
    pub fn predict_variances(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        h: NodeId,
        mask: SeqMask,
    ) -> Result<[NodeId; 3]> {
        let mut out = [h; 3];
        for (slot, name) in out.iter_mut().zip(PREDICTORS) {
            *slot = variance_predictor(g, p, &format!("variance.{name}"), h, mask)?;
        }
        Ok(out)
    }

    /// Repeats hidden row `i` `durations[i]` times.
    pub fn length_regulate(g: &mut Graph<S>, h: NodeId, durations: &[usize]) -> Result<NodeId> {
        g.repeat_rows(h, durations)
    }

    /// Adds positional encoding, the speaker vector and projected frame-level
    /// pitch and energy (`[frames, 1]` each, normalized), runs the decoder
    /// stack and projects to mel channels.
    pub fn decode(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        regulated: NodeId,
        speaker: &SpeakerRef,
        pitch: NodeId,
        energy: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let frames = g.shape(regulated)[0];
        let pe = g.constant(positional_encoding(frames, cfg.d_model)?);
        let mut x = g.add(regulated, pe)?;
        let spk = self.speaker_vector(g, p, speaker)?;
        x = g.add(x, spk)?;
        let pp = linear(g, p, "decoder.pitch_proj", pitch)?;
        x = g.add(x, pp)?;
        let ep = linear(g, p, "decoder.energy_proj", energy)?;
        x = g.add(x, ep)?;
        for i in 0..cfg.decoder_blocks {
            let seed = (cfg.encoder_blocks + i) as u64;
            x = fft_block(
                g,
                p,
                &format!("decoder.{i}"),
                x,
                SeqMask::none(),
                self.block_settings(seed),
            )?
            .0;
        }
        linear(g, p, "mel_proj", x)
    }

    pub fn normalize_pitch(&self, raw: f64) -> f64 {
        (raw - self.config.pitch_mean) / self.config.pitch_std
    }

    pub fn normalize_energy(&self, raw: f64) -> f64 {
        (raw - self.config.energy_mean) / self.config.energy_std
    }

    /// Full pipeline: encode, predict variances, regulate, decode.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        input: &ItemInput,
        speaker: &SpeakerRef,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let mask = SeqMask(input.valid);
        let valid = |i: usize| input.valid.is_none_or(|m| m[i]);
        let (h, encoder_attention) = self.encode(g, p, input.phonemes, speaker, mask)?;
        let [log_duration, pitch, energy] = self.predict_variances(g, p, h, mask)?;
        let n = input.phonemes.len();

        let (durations, pitch_ph, energy_ph) = match mode {
            Mode::TeacherForced => {
                let t = input.targets.ok_or_else(|| {
                    Error::Input("teacher-forced forward needs variance targets".into())
                })?;
                t.validate(n)?;
                let durations: Vec<usize> =
                    (0..n).map(|i| if valid(i) { t.duration[i] } else { 0 }).collect();
                let col = |vals: Vec<S>| Tensor::new([n, 1], vals);
                let pn = col((0..n).map(|i| S::lit(self.normalize_pitch(t.pitch[i]))).collect())?;
                let en =
                    col((0..n).map(|i| S::lit(self.normalize_energy(t.energy[i]))).collect())?;
                (durations, g.constant(pn), g.constant(en))
            }
            Mode::Inference => {
                let cap = self.config.max_duration as f64;
                let durations: Vec<usize> = g
                    .value(log_duration)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &ld)| {
                        if !valid(i) {
                            return 0;
                        }
                        let d = ld.as_f64().exp().round();
                        if d.is_nan() {
                            1
                        } else {
                            d.clamp(1.0, cap) as usize
                        }
                    })
                    .collect();
                (durations, g.reshape(pitch, [n, 1])?, g.reshape(energy, [n, 1])?)
            }
        };

        let n_frames: usize = durations.iter().sum();
        if n_frames > self.config.max_frames {
            return Err(Error::RunawayDuration {
                frames: n_frames,
                cap: self.config.max_frames,
            });
        }
        let regulated = Self::length_regulate(g, h, &durations)?;
        let pitch_fr = Self::length_regulate(g, pitch_ph, &durations)?;
        let energy_fr = Self::length_regulate(g, energy_ph, &durations)?;
        let mel = self.decode(g, p, regulated, speaker, pitch_fr, energy_fr)?;
        Ok(ForwardOutput {
            mel,
            log_duration,
            pitch,
            energy,
            durations,
            n_frames,
            encoder_attention,
        })
    }

    /// Gradient-free forward returning the mel matrix and durations used.
    pub fn run(
        &self,
        input: &ItemInput,
        speaker: &SpeakerRef,
        mode: Mode,
    ) -> Result<(Tensor<S>, Vec<usize>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, input, speaker, mode)?;
        Ok((g.value(out.mel).clone(), out.durations))
    }

    /// Inference-mode synthesis to a log-mel spectrogram.
    pub fn synthesize(
        &self,
        phonemes: &[usize],
        speaker: usize,
        hop: u32,
        sample_rate: u32,
    ) -> Result<MelSpectrogram<S>> {
        let (mel, _) = self.run(&ItemInput::new(phonemes), &SpeakerRef::Id(speaker), Mode::Inference)?;
        MelSpectrogram::new(mel, hop, sample_rate)
    }

    /// Copy with one extra, freshly initialized speaker-table row; returns the
    /// new row's id.
    pub fn with_new_speaker(&self, seed: u64) -> Result<(Self, usize)> {
        let mut next = self.clone();
        let old = self.params.get("speaker_embedding").unwrap();
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: Tensor<S> = Tensor::uniform([1, d], embedding_bound(d), &mut rng);
        let mut data = old.data().to_vec();
        data.extend_from_slice(row.data());
        let id = self.config.n_speakers;
        next.config.n_speakers += 1;
        next.params
            .replace("speaker_embedding", Tensor::new([id + 1, d], data)?)?;
        Ok((next, id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(n: usize) -> VarianceTargets {
        VarianceTargets {
            duration: (0..n).map(|i| 1 + i % 3).collect(),
            pitch: (0..n).map(|i| i as f64 * 0.1).collect(),
            energy: (0..n).map(|i| 0.5 - i as f64 * 0.05).collect(),
        }
    }

    #[test]
    fn teacher_forced_frames_follow_targets() {
        let m = Backbone::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let ph = [1, 2, 3, 4];
        let t = targets(4);
        let (mel, dur) = m
            .run(&ItemInput::new(&ph).with_targets(&t), &SpeakerRef::Id(0), Mode::TeacherForced)
            .unwrap();
        assert_eq!(mel.shape(), &[t.total_frames(), 80]);
        assert_eq!(dur, t.duration);
    }

    #[test]
    fn inference_durations_are_clamped() {
        let m = Backbone::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let (_, dur) = m
            .run(&ItemInput::new(&[0, 5, 7]), &SpeakerRef::Id(1), Mode::Inference)
            .unwrap();
        assert!(dur.iter().all(|&d| (1..=50).contains(&d)));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let m = Backbone::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let t = targets(2);
        let bad_phone = m.run(
            &ItemInput::new(&[0, 99]).with_targets(&t),
            &SpeakerRef::Id(0),
            Mode::TeacherForced,
        );
        assert!(matches!(bad_phone, Err(Error::Input(_))));
        let bad_spk = m.run(
            &ItemInput::new(&[0, 1]).with_targets(&t),
            &SpeakerRef::Id(9),
            Mode::TeacherForced,
        );
        assert!(matches!(bad_spk, Err(Error::Input(_))));
    }

    #[test]
    fn runaway_duration_capped() {
        let mut cfg = ModelConfig::tiny();
        cfg.max_frames = 3;
        let m = Backbone::<f64>::init(cfg, 3).unwrap();
        let t = targets(4);
        let r = m.run(&ItemInput::new(&[1, 2, 3, 4]).with_targets(&t), &SpeakerRef::Id(0), Mode::TeacherForced);
        assert!(matches!(r, Err(Error::RunawayDuration { .. })));
    }

    #[test]
    fn new_speaker_row_keeps_existing_rows() {
        let m = Backbone::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let (next, id) = m.with_new_speaker(9).unwrap();
        assert_eq!(id, 2);
        let old = m.params.get("speaker_embedding").unwrap();
        let new = next.params.get("speaker_embedding").unwrap();
        assert_eq!(new.shape(), &[3, 4]);
        assert_eq!(&new.data()[..8], old.data());
        assert_eq!(next.config.n_speakers, 3);
    }
}
