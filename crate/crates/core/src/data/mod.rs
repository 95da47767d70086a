//! Corpora, vocabulary, the synthetic task and checkpoint files.

mod checkpoint;
mod dataset;
pub mod synthetic;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use dataset::{Dataset, Difficulty, EncodedSet, Example, Split, TaskMeta};
pub use synthetic::{SyntheticSpec, SyntheticSplits};
pub use vocab::{tokenize, Vocab, CLS, PAD, SEP, UNK};
