//! Weakly-supervised dense action anticipation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod dataset;
pub mod backbone;
pub mod refinement;
pub mod losses;
pub mod evaluation;
pub mod model;
pub mod training;
pub mod experiment;

/// Independent stream seed for `tag`, derived from a run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
