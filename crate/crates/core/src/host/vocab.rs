//! Byte-level vocabulary: ids `0..256` are raw bytes, then two specials.

use alloc::vec::Vec;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Drops specials and anything outside the byte range.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}
