use proptest::prelude::*;
use refmel::data::{
    decode_corpus, encode_corpus, gen_synthetic_corpus, load_corpus, make_batches, oracle_mel,
    save_corpus, Batch, CorpusConfig, SpeakerRole, Split,
};
use refmel::tensor::{Graph, Tensor};
use refmel::train::stack_mels;
use refmel::Error;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        utterances_per_speaker: 40,
        ..CorpusConfig::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = encode_corpus(&gen_synthetic_corpus(&small(3)).unwrap());
    let b = encode_corpus(&gen_synthetic_corpus(&small(3)).unwrap());
    let c = encode_corpus(&gen_synthetic_corpus(&small(4)).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn roles_and_held_out_split() {
    let corpus = gen_synthetic_corpus(&small(0)).unwrap();
    assert_eq!(
        corpus.speakers,
        vec![SpeakerRole::Source, SpeakerRole::Source, SpeakerRole::Target]
    );
    let test = corpus.target_test();
    assert_eq!(test.len(), 20);
    assert!(test.iter().all(|&i| corpus.splits[i] == Split::Test));
    assert!(corpus.target_train().iter().all(|i| !test.contains(i)));
    assert!(corpus
        .source_train()
        .iter()
        .all(|&i| corpus.utterances[i].speaker != 2));
}

#[test]
fn subsets_are_nested_across_sizes() {
    let corpus = gen_synthetic_corpus(&small(0)).unwrap();
    for seed in 0..5 {
        let s10 = corpus.target_subset(10, seed).unwrap();
        let s20 = corpus.target_subset(20, seed).unwrap();
        assert!(s10.iter().all(|i| s20.contains(i)));
    }
    assert!(matches!(corpus.target_subset(0, 0), Err(Error::Config(_))));
    assert!(matches!(corpus.target_subset(21, 0), Err(Error::Config(_))));
}

#[test]
fn file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.corp");
    let corpus = gen_synthetic_corpus(&small(1)).unwrap();
    save_corpus(&corpus, &path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(encode_corpus(&back), encode_corpus(&corpus));

    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            decode_corpus(&bytes[..cut]),
            Err(Error::Format { .. })
        ));
    }
}

#[test]
fn corpus_file_is_small() {
    let corpus = gen_synthetic_corpus(&CorpusConfig {
        utterances_per_speaker: 67,
        ..CorpusConfig::default()
    })
    .unwrap();
    assert!(corpus.utterances.len() >= 200);
    assert!(encode_corpus(&corpus).len() < 50 << 20);
}

#[test]
fn oracle_speakers_differ() {
    let (a, _) = oracle_mel(&[3, 7, 11], 0).unwrap();
    let (b, _) = oracle_mel(&[3, 7, 11], 1).unwrap();
    assert!(a.frames.max_abs_diff(&b.frames) > 0.1);
}

#[test]
fn epochs_cover_every_item_once() {
    let corpus = gen_synthetic_corpus(&small(0)).unwrap();
    let idx = corpus.source_train();
    for epoch in 0..3 {
        let batches = make_batches(&corpus, &idx, 7, 9, epoch).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, idx);
    }
    let again = make_batches(&corpus, &idx, 7, 9, 1).unwrap();
    let first = make_batches(&corpus, &idx, 7, 9, 1).unwrap();
    assert!(again.iter().zip(&first).all(|(a, b)| a.indices == b.indices));
}

#[test]
fn padded_cells_are_zero_and_masks_exact() {
    let corpus = gen_synthetic_corpus(&small(2)).unwrap();
    let batch = Batch::from_indices(&corpus, &corpus.source_train()[..6]).unwrap();
    let (t, m) = (batch.max_frames(), batch.mel.shape()[2]);
    for k in 0..batch.len() {
        let len = batch.frame_lengths[k];
        for f in 0..t {
            let valid = batch.frame_mask.data()[k * t + f] == 1.0;
            assert_eq!(valid, f < len);
            if !valid {
                let row = &batch.mel.data()[(k * t + f) * m..(k * t + f + 1) * m];
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
        let n_ph = corpus.utterances[batch.indices[k]].phonemes.len();
        for (i, &valid) in batch.phoneme_mask[k].iter().enumerate() {
            assert_eq!(valid, i < n_ph);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_batch_loss_equals_unbatched(seed in 0u64..1000, n in 1usize..6) {
        let corpus = gen_synthetic_corpus(&CorpusConfig {
            seed,
            utterances_per_speaker: 25,
            ..CorpusConfig::default()
        })
        .unwrap();
        let idx: Vec<usize> = corpus.source_train().into_iter().take(n).collect();
        let batch = Batch::from_indices(&corpus, &idx).unwrap();
        // Predictions: every target shifted by a per-item constant.
        let preds: Vec<Tensor<f64>> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| corpus.utterances[i].mel.frames.map(|v| v + 0.1 * (k + 1) as f64))
            .collect();
        let stacked = stack_mels(&preds, batch.max_frames()).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(stacked);
        let b = g.leaf(batch.mel.clone());
        let loss = g.masked_mse(a, b, &batch.frame_mask).unwrap();
        let batched = g.value(loss).item();

        let (mut sq, mut cells) = (0.0, 0usize);
        for (k, p) in preds.iter().enumerate() {
            let t = &corpus.utterances[idx[k]].mel.frames;
            sq += p.data().iter().zip(t.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            cells += p.len();
        }
        prop_assert!((batched - sq / cells as f64).abs() < 1e-10);
    }

    #[test]
    fn oracle_durations_sum_to_frames(phonemes in prop::collection::vec(0usize..72, 1..20), speaker in 0usize..5) {
        let (mel, v) = oracle_mel(&phonemes, speaker).unwrap();
        prop_assert_eq!(v.duration.iter().sum::<usize>(), mel.n_frames());
        for (&p, &d) in phonemes.iter().zip(&v.duration) {
            prop_assert_eq!(d, 2 + p % 4);
        }
    }
}
