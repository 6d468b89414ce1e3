use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{Backbone, Checkpoint, ItemInput, Mode, SpeakerRef};
use crate::train::pseudo_label_speaker;

/// Objective scores on held-out utterances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Teacher-forced mel MSE over every frame cell of every utterance.
    pub mel_mse: f64,
    /// Mean absolute error of inference-mode durations, in frames per phoneme.
    pub dur_mae: f64,
}

/// Speaker row a checkpoint should use for the corpus target speaker: the
/// fine-tuned row when recorded, else the reference's mean-speaker policy.
pub fn target_speaker_ref(checkpoint: &Checkpoint) -> Result<SpeakerRef> {
    match checkpoint.get("target_speaker") {
        Some(v) => v
            .parse()
            .map(SpeakerRef::Id)
            .map_err(|_| Error::Input(format!("bad target_speaker metadata `{v}`"))),
        None => Ok(pseudo_label_speaker(&checkpoint.model)),
    }
}

pub fn eval_model(
    model: &Backbone<f64>,
    speaker: &SpeakerRef,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("no evaluation utterances".into()));
    }
    let (mut sq, mut cells) = (0.0, 0usize);
    let (mut abs, mut phonemes) = (0.0, 0usize);
    for &i in indices {
        let u = &corpus.utterances[i];
        let input = ItemInput::new(&u.phonemes).with_targets(&u.variances);
        let (mel, _) = model.run(&input, speaker, Mode::TeacherForced)?;
        sq += mel
            .data()
            .iter()
            .zip(u.mel.frames.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        cells += mel.len();
        let durations = match model.run(&ItemInput::new(&u.phonemes), speaker, Mode::Inference) {
            Ok((_, d)) => d,
            // A runaway prediction counts as the largest allowed duration.
            Err(Error::RunawayDuration { .. }) => vec![model.config.max_duration; u.phonemes.len()],
            Err(e) => return Err(e),
        };
        abs += durations
            .iter()
            .zip(&u.variances.duration)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>();
        phonemes += durations.len();
    }
    Ok(Metrics {
        mel_mse: sq / cells as f64,
        dur_mae: abs / phonemes as f64,
    })
}

/// Scores a checkpoint on `indices` (normally the target test split).
pub fn eval_objective(checkpoint: &Checkpoint, corpus: &Corpus, indices: &[usize]) -> Result<Metrics> {
    eval_model(&checkpoint.model, &target_speaker_ref(checkpoint)?, corpus, indices)
}
