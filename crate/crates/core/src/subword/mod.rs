//! Byte-pair encoding and the shared token vocabulary.

mod bpe;
mod vocab;

pub use bpe::{detokenize, learn_bpe, BpeModel, CONTINUATION, END_OF_WORD};
pub use vocab::{build_vocab, is_tag_token, Special, Vocab, NUM_SPECIALS};
