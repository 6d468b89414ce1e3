use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{batch_loss, stack_mels};
use crate::data::{Batch, Corpus, SpeakerRole, Split, Utterance};
use crate::error::Result;
use crate::model::{Backbone, ModelConfig, SpeakerRef};
use crate::tensor::{Bound, GradCheck, GradCheckReport, Graph, NodeId, ParamSet, Tensor};

/// Finite-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-6;
/// Step of the composite check, which uses the five-point stencil.
pub const COMPOSITE_EPS: f64 = 2e-5;
/// Gradients below this are compared absolutely in the composite check: the
/// attention key biases, for one, have an exact zero gradient.
/// Disagreement between the full- and half-step estimates that marks a relu
/// kink inside the stencil.
pub const COMPOSITE_KINK_TOL: f64 = 5e-5;
pub const COMPOSITE_FLOOR: f64 = 1e-5;

fn params(entries: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> Result<ParamSet<f64>> {
    let mut p = ParamSet::new();
    for (name, shape) in entries {
        p.insert(*name, Tensor::uniform(shape.to_vec(), 1.0, rng))?;
    }
    Ok(p)
}

/// Projects `y` onto fixed random weights so every output element affects the loss.
fn readout(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = g.constant(Tensor::uniform(g.shape(y).to_vec(), 1.0, &mut rng));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

type OpLoss = Box<dyn Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<(&'static str, &'static [usize])>, OpLoss)> {
    let r = move |g: &mut Graph<f64>, y: NodeId| readout(g, y, seed);
    vec![
        ("matmul", vec![("a", &[3, 4]), ("b", &[4, 2])], Box::new(move |g, p| {
            let y = g.matmul(p.get("a"), p.get("b"))?;
            r(g, y)
        })),
        ("add_broadcast", vec![("a", &[3, 4]), ("b", &[1, 4])], Box::new(move |g, p| {
            let y = g.add(p.get("a"), p.get("b"))?;
            r(g, y)
        })),
        ("sub_broadcast", vec![("a", &[3, 4]), ("b", &[3, 1])], Box::new(move |g, p| {
            let y = g.sub(p.get("a"), p.get("b"))?;
            r(g, y)
        })),
        ("mul_broadcast", vec![("a", &[2, 3, 4]), ("b", &[1, 3, 1])], Box::new(move |g, p| {
            let y = g.mul(p.get("a"), p.get("b"))?;
            r(g, y)
        })),
        ("relu", vec![("x", &[4, 5])], Box::new(move |g, p| {
            let y = g.relu(p.get("x"));
            r(g, y)
        })),
        ("exp", vec![("x", &[3, 3])], Box::new(move |g, p| {
            let y = g.exp(p.get("x"));
            r(g, y)
        })),
        ("scale_sum", vec![("x", &[6])], Box::new(move |g, p| {
            let y = g.scale(p.get("x"), -1.7);
            let w = r(g, y)?;
            let s = g.sum(y);
            g.add(w, s)
        })),
        ("softmax", vec![("x", &[3, 5])], Box::new(move |g, p| {
            let y = g.softmax(p.get("x"));
            r(g, y)
        })),
        ("layer_norm", vec![("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])], Box::new(move |g, p| {
            let y = g.layer_norm(p.get("x"), p.get("gain"), p.get("bias"))?;
            r(g, y)
        })),
        ("conv1d", vec![("x", &[5, 3]), ("k", &[3, 3, 4])], Box::new(move |g, p| {
            let y = g.conv1d(p.get("x"), p.get("k"))?;
            r(g, y)
        })),
        ("mse", vec![("a", &[3, 4]), ("b", &[3, 4])], Box::new(move |g, p| g.mse(p.get("a"), p.get("b")))),
        ("masked_mse", vec![("a", &[2, 3, 4]), ("b", &[2, 3, 4])], Box::new(move |g, p| {
            let mask = Tensor::from_f64([2, 3, 1], &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0])?;
            g.masked_mse(p.get("a"), p.get("b"), &mask)
        })),
        ("transpose_reshape", vec![("x", &[3, 4])], Box::new(move |g, p| {
            let t = g.transpose(p.get("x"))?;
            let y = g.reshape(t, [2, 6])?;
            r(g, y)
        })),
        ("slice_concat", vec![("x", &[3, 6])], Box::new(move |g, p| {
            let a = g.slice_cols(p.get("x"), 0, 2)?;
            let b = g.slice_cols(p.get("x"), 3, 3)?;
            let y = g.concat_cols(&[b, a])?;
            r(g, y)
        })),
        ("gather_rows", vec![("t", &[5, 3])], Box::new(move |g, p| {
            let y = g.gather_rows(p.get("t"), &[4, 0, 4, 2])?;
            r(g, y)
        })),
        ("repeat_rows", vec![("x", &[4, 3])], Box::new(move |g, p| {
            let y = g.repeat_rows(p.get("x"), &[2, 0, 3, 1])?;
            r(g, y)
        })),
        ("pad_stack", vec![("a", &[2, 3]), ("b", &[4, 3])], Box::new(move |g, p| {
            let y = g.pad_stack(&[p.get("a"), p.get("b")], 5)?;
            r(g, y)
        })),
        ("dropout", vec![("x", &[4, 4])], Box::new(move |g, p| {
            let y = g.dropout(p.get("x"), 0.3, seed);
            r(g, y)
        })),
    ]
}

fn checker(seed: u64) -> Result<GradCheck> {
    // The jitter keeps relu inputs away from their kink.
    Ok(GradCheck::new(SUITE_EPS)?.jitter(1e-3, seed))
}

/// Gradient checks of every differentiable op on random inputs.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, loss) in op_cases(seed) {
        let p = params(&shapes, &mut rng)?;
        out.push((name.to_string(), checker(seed)?.run(&p, loss)?));
    }
    Ok(out)
}

/// Two-utterance batch from the oracle, with unequal lengths so padding is
/// exercised.
fn composite_batch(vocab: usize) -> Result<(Corpus, Batch)> {
    let mk = |phonemes: Vec<usize>| -> Result<Utterance> {
        let (mel, variances) = crate::data::oracle_mel(&phonemes, 0)?;
        Ok(Utterance {
            phonemes,
            speaker: 0,
            mel,
            variances,
        })
    };
    let corpus = Corpus {
        vocab_size: vocab,
        speakers: vec![SpeakerRole::Source],
        utterances: vec![mk(vec![1, 5, 2])?, mk(vec![7, 3])?],
        splits: vec![Split::Train; 2],
    };
    let batch = Batch::from_indices(&corpus, &[0, 1])?;
    Ok((corpus, batch))
}

/// Gradient check of the full backbone under the combined loss
/// `hard + omega * ref + variance`, on a padded two-item batch.
///
/// `sample` bounds the coordinates checked per parameter array.
pub fn composite_gradient_check(
    config: ModelConfig,
    seed: u64,
    omega: f64,
    sample: usize,
) -> Result<GradCheckReport> {
    let config = ModelConfig {
        n_speakers: 2,
        pitch_mean: 110.0,
        pitch_std: 10.0,
        energy_mean: 0.5,
        energy_std: 0.05,
        ..config
    };
    let mut model = Backbone::<f64>::init(config.clone(), seed)?;
    let (corpus, batch) = composite_batch(config.vocab_size)?;
    // Centre the output on the data, as pretraining does, so the loss sits at
    // a realistic scale instead of amplifying round-off in the differences.
    let n_mels = config.n_mels;
    let mut mean = vec![0.0; n_mels];
    let mut frames = 0.0;
    for u in &corpus.utterances {
        for row in u.mel.frames.data().chunks(n_mels) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            frames += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames);
    model.params.replace("mel_proj.b", Tensor::new([1, n_mels], mean)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let pseudo: Vec<Tensor<f64>> = corpus
        .utterances
        .iter()
        .map(|u| {
            let noise = Tensor::<f64>::uniform(u.mel.frames.shape().to_vec(), 0.5, &mut rng);
            let data = u.mel.frames.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(u.mel.frames.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let pseudo = stack_mels(&pseudo, batch.max_frames())?;
    let speakers = [SpeakerRef::Id(0), SpeakerRef::Id(1)];
    let check = GradCheck::new(COMPOSITE_EPS)?
        .five_point()
        .floor(COMPOSITE_FLOOR)
        .kink_guard(COMPOSITE_KINK_TOL)
        .jitter(1e-3, seed)
        .sample(sample);
    check.run(&model.params, |g, p| {
        Ok(batch_loss(&model, g, p, &batch, &speakers, Some(&pseudo), omega)?.total)
    })
}
