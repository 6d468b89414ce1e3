//! Synthetic speech corpus, padded batching and the CORP file format.

mod batch;
mod corpus;
mod io;
mod oracle;

pub use batch::{make_batches, Batch};
pub use corpus::{gen_synthetic_corpus, Corpus, CorpusConfig, SpeakerRole, Split, Utterance};
pub use io::{decode_corpus, encode_corpus, load_corpus, save_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use oracle::{
    oracle_frame, oracle_mel, phoneme_duration, phoneme_energy, phoneme_pitch, ORACLE_HOP,
    ORACLE_N_MELS, ORACLE_SAMPLE_RATE,
};
