use std::collections::{HashMap, VecDeque};

use super::loss::{batch_loss, stack_mels};
use super::{LogRecord, TrainConfig};
use crate::data::{make_batches, Batch, Corpus, SpeakerRole};
use crate::error::{Error, Result};
use crate::model::{Backbone, Checkpoint, ItemInput, Mode, ModelConfig, SpeakerRef, Stage};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Graph, ParamSet, Tensor};

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Endless batch stream: epoch `e` is `make_batches(.., seed, e)`.
struct Schedule<'a> {
    corpus: &'a Corpus,
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: VecDeque<Batch>,
}

impl<'a> Schedule<'a> {
    fn new(corpus: &'a Corpus, indices: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("no training utterances".into()));
        }
        Ok(Schedule {
            corpus,
            indices: indices.to_vec(),
            batch_size,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            let batches =
                make_batches(self.corpus, &self.indices, self.batch_size, self.seed, self.epoch)?;
            self.queue.extend(batches);
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().unwrap())
    }
}

/// Model plus optimizer state; one call to [`Trainer::step`] is one update.
struct Trainer {
    model: Backbone<f64>,
    adam: AdamState<f64>,
    config: TrainConfig,
}

impl Trainer {
    fn new(model: Backbone<f64>, config: &TrainConfig) -> Self {
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Trainer {
            model,
            adam,
            config: config.clone(),
        }
    }

    fn step(
        &mut self,
        step: usize,
        batch: &Batch,
        speakers: &[SpeakerRef],
        pseudo: Option<&Tensor<f64>>,
    ) -> Result<LogRecord> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let loss = batch_loss(&self.model, &mut g, &p, batch, speakers, pseudo, self.config.omega)?;
        if !loss.breakdown.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = g.backward(loss.total)?;
        let mut grads = self.model.params.collect_grads(&p, &grads);
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(LogRecord {
            step,
            loss: loss.breakdown,
            grad_norm,
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// `[1, n_mels]` mean of every training frame; starts the output projection
/// at the data mean instead of zero.
fn channel_means(corpus: &Corpus, indices: &[usize]) -> Result<Tensor<f64>> {
    let n_mels = corpus.utterances[indices[0]].mel.n_mels();
    let mut sum = vec![0.0; n_mels];
    let mut frames = 0usize;
    for &i in indices {
        let mel = &corpus.utterances[i].mel.frames;
        for row in mel.data().chunks(n_mels) {
            sum.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        frames += mel.rows();
    }
    Tensor::new([1, n_mels], sum.into_iter().map(|s| s / frames as f64).collect())
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Supervised training of the reference model on the source speakers' training
/// split. Vocabulary, speaker count, mel channels and pitch/energy statistics
/// in `model` are taken from the corpus; the remaining fields are kept.
pub fn pretrain(corpus: &Corpus, model: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let indices = corpus.source_train();
    if indices.is_empty() {
        return Err(Error::EmptyDataset("no source-speaker training utterances".into()));
    }
    let sources = corpus.source_speakers();
    if sources.len() < 2 {
        return Err(Error::Input(format!(
            "pretraining needs at least 2 source speakers, found {}",
            sources.len()
        )));
    }
    let utts = || indices.iter().map(|&i| &corpus.utterances[i]);
    let (pitch_mean, pitch_std) = mean_std(utts().flat_map(|u| u.variances.pitch.iter().copied()));
    let (energy_mean, energy_std) =
        mean_std(utts().flat_map(|u| u.variances.energy.iter().copied()));
    let config = ModelConfig {
        vocab_size: corpus.vocab_size,
        n_speakers: sources.len(),
        n_mels: corpus.utterances[0].mel.n_mels(),
        pitch_mean,
        pitch_std,
        energy_mean,
        energy_std,
        ..model
    };
    let row = |s: usize| sources.iter().position(|&x| x == s).unwrap();

    let mut model = Backbone::init(config, cfg.seed)?;
    model
        .params
        .replace("mel_proj.b", channel_means(corpus, &indices)?)?;
    let mut trainer = Trainer::new(model, cfg);
    let mut schedule = Schedule::new(corpus, &indices, cfg.batch_size, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = schedule.next_batch()?;
        let speakers: Vec<SpeakerRef> =
            batch.speakers.iter().map(|&s| SpeakerRef::Id(row(s))).collect();
        log.push(trainer.step(step, &batch, &speakers, None)?);
    }

    let mut checkpoint = Checkpoint::new(trainer.model, Stage::Reference);
    checkpoint.set("seed", cfg.seed);
    checkpoint.set("steps", cfg.steps);
    checkpoint.set("batch_size", cfg.batch_size);
    checkpoint.set("learning_rate", cfg.learning_rate);
    checkpoint.set("source_speakers", join(&sources));
    Ok(TrainOutcome { checkpoint, log })
}

/// Speaker conditioning used by the frozen reference for unseen speakers: the
/// mean of all its trained speaker rows.
pub fn pseudo_label_speaker(reference: &Backbone<f64>) -> SpeakerRef {
    SpeakerRef::Mean((0..reference.config.n_speakers).collect())
}

/// Teacher-forced reference mels for every item of `batch`, `[T_k, n_mels]` each.
pub fn generate_pseudo_labels(reference: &Backbone<f64>, batch: &Batch) -> Result<Vec<Tensor<f64>>> {
    let speaker = pseudo_label_speaker(reference);
    (0..batch.len())
        .map(|k| Ok(reference.run(&batch.item(k), &speaker, Mode::TeacherForced)?.0))
        .collect()
}

/// Hash of the parameters a student shares with its reference: every array
/// except the speaker table, plus the reference's rows of that table.
pub fn shared_params_hash(params: &ParamSet<f64>, reference_speakers: usize) -> Result<String> {
    let mut shared = ParamSet::new();
    for (name, t) in params.iter() {
        if name == "speaker_embedding" {
            let d = t.cols();
            let rows = t.data()[..reference_speakers * d].to_vec();
            shared.insert(name, Tensor::new([reference_speakers, d], rows)?)?;
        } else {
            shared.insert(name, t.clone())?;
        }
    }
    Ok(shared.content_hash())
}

fn check_target_subset(corpus: &Corpus, subset: &[usize]) -> Result<usize> {
    if subset.is_empty() {
        return Err(Error::EmptyDataset("empty target subset".into()));
    }
    let speaker = corpus.utterances[subset[0]].speaker;
    if corpus.speakers[speaker] != SpeakerRole::Target
        || subset.iter().any(|&i| corpus.utterances[i].speaker != speaker)
    {
        return Err(Error::Input(
            "fine-tuning data must come from the single target speaker".into(),
        ));
    }
    Ok(speaker)
}

/// Student initialization shared by both fine-tuning loops: the reference with
/// one new speaker row seeded by `seed`.
fn init_student(reference: &Backbone<f64>, seed: u64) -> Result<(Backbone<f64>, usize)> {
    reference.with_new_speaker(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FinetuneOptions {
    /// Compute each utterance's pseudo label once instead of every step.
    pub cache_pseudo_labels: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            cache_pseudo_labels: true,
        }
    }
}

/// A frozen reference and a trainable student being fine-tuned on target data.
pub struct FinetuneSession<'a> {
    reference: &'a Backbone<f64>,
    reference_hash: String,
    trainer: Trainer,
    speaker_id: usize,
    schedule: Schedule<'a>,
    cache: Option<HashMap<usize, Tensor<f64>>>,
    step: usize,
    pub log: Vec<LogRecord>,
}

impl<'a> FinetuneSession<'a> {
    pub fn new(
        reference: &'a Checkpoint,
        corpus: &'a Corpus,
        subset: &[usize],
        cfg: &TrainConfig,
        options: FinetuneOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        if reference.stage() != Some(Stage::Reference.as_str()) {
            return Err(Error::Config(format!(
                "fine-tuning needs a reference checkpoint, got stage {:?}",
                reference.stage().unwrap_or("<none>")
            )));
        }
        check_target_subset(corpus, subset)?;
        let model = &reference.model;
        let reference_hash = model.params.content_hash();
        let (student, speaker_id) = init_student(model, cfg.seed)?;
        let n_ref = model.config.n_speakers;
        if shared_params_hash(&student.params, n_ref)? != shared_params_hash(&model.params, n_ref)? {
            return Err(Error::Contract("student does not start from the reference".into()));
        }
        Ok(FinetuneSession {
            reference: model,
            reference_hash,
            trainer: Trainer::new(student, cfg),
            speaker_id,
            schedule: Schedule::new(corpus, subset, cfg.batch_size, cfg.seed)?,
            cache: options.cache_pseudo_labels.then(HashMap::new),
            step: 0,
            log: Vec::with_capacity(cfg.steps),
        })
    }

    pub fn speaker_id(&self) -> usize {
        self.speaker_id
    }

    pub fn student(&self) -> &Backbone<f64> {
        &self.trainer.model
    }

    fn pseudo_labels(&mut self, batch: &Batch) -> Result<Tensor<f64>> {
        let items = match &mut self.cache {
            None => generate_pseudo_labels(self.reference, batch)?,
            Some(cache) => {
                let speaker = pseudo_label_speaker(self.reference);
                let corpus = self.schedule.corpus;
                let mut items = Vec::with_capacity(batch.len());
                for &i in &batch.indices {
                    if !cache.contains_key(&i) {
                        let u = &corpus.utterances[i];
                        let input = ItemInput::new(&u.phonemes).with_targets(&u.variances);
                        let mel = self.reference.run(&input, &speaker, Mode::TeacherForced)?.0;
                        cache.insert(i, mel);
                    }
                    items.push(cache[&i].clone());
                }
                items
            }
        };
        stack_mels(&items, batch.max_frames())
    }

    /// One fine-tuning update.
    pub fn step(&mut self) -> Result<LogRecord> {
        let batch = self.schedule.next_batch()?;
        let pseudo = self.pseudo_labels(&batch)?;
        let speakers = vec![SpeakerRef::Id(self.speaker_id); batch.len()];
        let record = self.trainer.step(self.step, &batch, &speakers, Some(&pseudo))?;
        self.step += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Verifies the reference is untouched and wraps the student.
    pub fn finish(self) -> Result<TrainOutcome> {
        if self.reference.params.content_hash() != self.reference_hash {
            return Err(Error::ReferenceMutated);
        }
        let cfg = &self.trainer.config;
        let size = self.schedule.indices.len();
        let mut checkpoint = Checkpoint::new(self.trainer.model, Stage::Finetuned);
        checkpoint.set("omega", cfg.omega);
        checkpoint.set("size", size);
        checkpoint.set("seed", cfg.seed);
        checkpoint.set("steps", self.step);
        checkpoint.set("batch_size", cfg.batch_size);
        checkpoint.set("learning_rate", cfg.learning_rate);
        checkpoint.set("target_speaker", self.speaker_id);
        checkpoint.set("reference_hash", &self.reference_hash);
        Ok(TrainOutcome {
            checkpoint,
            log: self.log,
        })
    }
}

/// Fine-tunes a copy of `reference` on `subset` of the target speaker with the
/// combined loss weighted by `cfg.omega`.
pub fn finetune(
    reference: &Checkpoint,
    corpus: &Corpus,
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    finetune_with(reference, corpus, subset, cfg, FinetuneOptions::default())
}

pub fn finetune_with(
    reference: &Checkpoint,
    corpus: &Corpus,
    subset: &[usize],
    cfg: &TrainConfig,
    options: FinetuneOptions,
) -> Result<TrainOutcome> {
    let mut session = FinetuneSession::new(reference, corpus, subset, cfg, options)?;
    for _ in 0..cfg.steps {
        session.step()?;
    }
    session.finish()
}

/// Plain supervised fine-tuning with no reference model involved; the
/// baseline that `omega == 0` must reproduce. Returns the trained student.
pub fn finetune_without_reference(
    initial: &Backbone<f64>,
    corpus: &Corpus,
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<Backbone<f64>> {
    cfg.validate()?;
    check_target_subset(corpus, subset)?;
    let (student, speaker_id) = init_student(initial, cfg.seed)?;
    let plain = TrainConfig {
        omega: 0.0,
        ..cfg.clone()
    };
    let mut trainer = Trainer::new(student, &plain);
    let mut schedule = Schedule::new(corpus, subset, cfg.batch_size, cfg.seed)?;
    for step in 0..cfg.steps {
        let batch = schedule.next_batch()?;
        let speakers = vec![SpeakerRef::Id(speaker_id); batch.len()];
        trainer.step(step, &batch, &speakers, None)?;
    }
    Ok(trainer.model)
}
