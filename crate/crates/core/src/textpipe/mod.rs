//! Tokenization, datasets and pretraining batches.

mod bpe;
mod dataset;
mod mlm;
pub mod special;

pub use bpe::{pre_split, train_bpe, BpeVocab};
pub use dataset::{label_set, load_tsv, parse_tsv, split_dataset, to_tsv, OfficialSplits, Record, Splits};
pub use mlm::{make_mlm_nsp_batch, MaskingRule, MlmNspBatch};
