use refmel::data::{gen_synthetic_corpus, Batch, Corpus, CorpusConfig};
use refmel::model::{Checkpoint, Dtype, ModelConfig, SpeakerRef};
use refmel::tensor::Graph;
use refmel::train::{
    batch_loss, finetune, finetune_with, finetune_without_reference, generate_pseudo_labels,
    pretrain, stack_mels, FinetuneOptions, FinetuneSession, LogRecord, TrainConfig,
};
use refmel::Error;

fn corpus() -> Corpus {
    gen_synthetic_corpus(&CorpusConfig {
        utterances_per_speaker: 40,
        vocab_size: 16,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        ..ModelConfig::desk()
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        ..TrainConfig::desk_pretrain()
    }
}

fn reference(corpus: &Corpus) -> Checkpoint {
    pretrain(corpus, small_model(), &quick(6)).unwrap().checkpoint
}

fn check_log(log: &[LogRecord], omega: f64) {
    for r in log {
        assert!(r.loss.identity_error() <= 1e-12, "{r:?}");
        assert!(r.grad_norm <= 1.0 + 1e-12, "{r:?}");
        assert_eq!(r.loss.omega, omega);
        assert_eq!(LogRecord::parse(&r.line()).unwrap().loss.total, r.loss.total);
    }
}

#[test]
fn pretraining_is_deterministic_and_logs_the_identity() {
    let c = corpus();
    let a = pretrain(&c, small_model(), &quick(6)).unwrap();
    let b = pretrain(&c, small_model(), &quick(6)).unwrap();
    assert_eq!(a.checkpoint.encode(Dtype::F64), b.checkpoint.encode(Dtype::F64));
    assert_eq!(a.log.len(), 6);
    assert_eq!(a.checkpoint.stage(), Some("reference"));
    assert_eq!(a.checkpoint.get("source_speakers"), Some("0,1"));
    assert_eq!(a.checkpoint.model.config.n_speakers, 2);
    check_log(&a.log, 0.0);
    assert!(a.log.iter().all(|r| r.loss.reference == 0.0));
}

#[test]
fn omega_zero_matches_reference_free_loop_bitwise() {
    let c = corpus();
    let r = reference(&c);
    let subset = c.target_subset(8, 3).unwrap();
    let cfg = TrainConfig {
        omega: 0.0,
        seed: 3,
        ..quick(5)
    };
    let tuned = finetune(&r, &c, &subset, &cfg).unwrap();
    let plain = finetune_without_reference(&r.model, &c, &subset, &cfg).unwrap();
    assert_eq!(tuned.checkpoint.model.params, plain.params);
    check_log(&tuned.log, 0.0);
    // The reference term is still reported.
    assert!(tuned.log.iter().all(|l| l.loss.reference > 0.0));
}

#[test]
fn reference_stays_frozen_and_pseudo_labels_are_stable() {
    let c = corpus();
    let r = reference(&c);
    let before = r.model.params.content_hash();
    let subset = c.target_subset(8, 1).unwrap();
    let cfg = TrainConfig {
        omega: 1.0,
        ..quick(4)
    };
    let out = finetune(&r, &c, &subset, &cfg).unwrap();
    assert_eq!(r.model.params.content_hash(), before);
    assert_eq!(out.checkpoint.get("reference_hash"), Some(before.as_str()));
    assert_ne!(out.checkpoint.model.params.content_hash(), before);
    check_log(&out.log, 1.0);

    let batch = Batch::from_indices(&c, &subset).unwrap();
    let first = generate_pseudo_labels(&r.model, &batch).unwrap();
    let second = generate_pseudo_labels(&r.model, &batch).unwrap();
    assert_eq!(first, second);
}

#[test]
fn cached_and_recomputed_pseudo_labels_train_identically() {
    let c = corpus();
    let r = reference(&c);
    let subset = c.target_subset(10, 2).unwrap();
    let cfg = TrainConfig {
        omega: 0.5,
        ..quick(4)
    };
    let run = |cache| {
        finetune_with(&r, &c, &subset, &cfg, FinetuneOptions { cache_pseudo_labels: cache })
            .unwrap()
            .checkpoint
            .encode(Dtype::F64)
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn loss_difference_between_omegas_is_the_reference_term() {
    let c = corpus();
    let r = reference(&c);
    let subset = c.target_subset(5, 0).unwrap();
    let batch = Batch::from_indices(&c, &subset).unwrap();
    let pseudo = stack_mels(&generate_pseudo_labels(&r.model, &batch).unwrap(), batch.max_frames())
        .unwrap();
    let speakers = vec![SpeakerRef::Id(1); batch.len()];
    let total = |omega| {
        let mut g = Graph::new();
        let p = r.model.params.bind(&mut g, false);
        let l = batch_loss(&r.model, &mut g, &p, &batch, &speakers, Some(&pseudo), omega).unwrap();
        (g.value(l.total).item(), l.breakdown.reference)
    };
    let (t0, ref0) = total(0.0);
    let (t1, ref1) = total(1.0);
    assert_eq!(ref0, ref1);
    assert!(((t1 - t0) - ref1).abs() <= 1e-12 * t1.abs());
}

#[test]
fn session_rejects_bad_inputs() {
    let c = corpus();
    let r = reference(&c);
    let subset = c.target_subset(4, 0).unwrap();
    let tuned = finetune(&r, &c, &subset, &quick(1)).unwrap().checkpoint;
    let err = FinetuneSession::new(&tuned, &c, &subset, &quick(1), FinetuneOptions::default());
    assert!(matches!(err, Err(Error::Config(_))));

    let source = c.source_train()[..4].to_vec();
    assert!(finetune(&r, &c, &source, &quick(1)).is_err());
    let bad_omega = TrainConfig {
        omega: 11.0,
        ..quick(1)
    };
    assert!(matches!(finetune(&r, &c, &subset, &bad_omega), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_is_divergence() {
    let c = corpus();
    let mut r = reference(&c);
    r.model.params.get_mut("mel_proj.w").unwrap().data_mut()[0] = f64::NAN;
    let subset = c.target_subset(4, 0).unwrap();
    let err = finetune(&r, &c, &subset, &quick(2)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0 }), "{err:?}");
}

#[test]
fn finetuned_metadata_records_the_run() {
    let c = corpus();
    let r = reference(&c);
    let subset = c.target_subset(6, 4).unwrap();
    let cfg = TrainConfig {
        omega: 0.1,
        seed: 4,
        ..quick(2)
    };
    let ck = finetune(&r, &c, &subset, &cfg).unwrap().checkpoint;
    assert_eq!(ck.stage(), Some("finetuned"));
    assert_eq!(ck.get("omega"), Some("0.1"));
    assert_eq!(ck.get("size"), Some("6"));
    assert_eq!(ck.get("seed"), Some("4"));
    assert_eq!(ck.get("target_speaker"), Some("2"));
    assert_eq!(ck.model.config.n_speakers, 3);
}
