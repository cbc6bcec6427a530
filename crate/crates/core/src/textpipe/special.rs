//! Reserved token ids, fixed at the bottom of every vocabulary.

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const NAMES: [&str; 5] = ["<PAD>", "<UNK>", "<CLS>", "<SEP>", "<MASK>"];
pub const COUNT: usize = NAMES.len();

pub fn is_special(id: usize) -> bool {
    id < COUNT
}
