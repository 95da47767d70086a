//! Synthetic corpora encoded for the desk configuration.

use eex::data::{EncodedSet, SyntheticSpec, Vocab};
use eex::ModelConfig;

pub struct Desk {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub train: EncodedSet,
    pub dev: EncodedSet,
    pub test: EncodedSet,
}

pub fn desk(size: usize, easy_frac: f64) -> Desk {
    let splits = SyntheticSpec { seed: 0, size, easy_frac }.splits().unwrap();
    let vocab = Vocab::build(&splits.train, 64).unwrap();
    let config = ModelConfig::desk(2, vocab.len());
    let n = config.max_len;
    Desk {
        train: splits.train.encode(&vocab, n),
        dev: splits.dev.encode(&vocab, n),
        test: splits.test.encode(&vocab, n),
        config,
        vocab,
    }
}
