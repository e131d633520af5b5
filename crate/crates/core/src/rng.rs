//! Keyed random streams.
//!
//! Every random draw in a run descends from a [`StreamKey`]. Child keys are
//! derived by mixing a tag and an index into the parent, so the stream a piece
//! of work sees depends only on its coordinates and never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a; tags are short literals.
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mix an ordered list of words into one well-distributed 64-bit value.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5EED_u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(mix(&[seed]))
    }

    pub fn child(self, tag: &str, index: u64) -> Self {
        StreamKey(mix(&[self.0, tag_hash(tag), index]))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_differ_by_tag_and_index() {
        let root = StreamKey::root(3);
        assert_ne!(root.child("a", 0), root.child("b", 0));
        assert_ne!(root.child("a", 0), root.child("a", 1));
        assert_eq!(root.child("a", 7), StreamKey::root(3).child("a", 7));
    }
}
