//! Counter-based seed derivation.
//!
//! Every workflow takes a single master seed. Sub-components get their own
//! seed through [`derive_seed`]`(master, stream, index)`: the triple is mixed
//! with SplitMix64, so changing one sub-seed never perturbs another and any
//! component can be re-run in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams. The discriminant is part of the derivation and must not
/// be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Schedule = 1,
    Subject = 2,
    Folds = 3,
    FoldTraining = 4,
    Permutation = 5,
    CohortSubject = 6,
    Calibration = 7,
    Repetition = 8,
    InnerSplit = 9,
    NetInit = 10,
    Shuffle = 11,
    Dropout = 12,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(stream as u64));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = HashSet::new();
        for stream in [Stream::Schedule, Stream::Subject, Stream::Folds, Stream::CohortSubject] {
            for i in 0..1000 {
                assert!(seen.insert(derive_seed(7, stream, i)));
            }
        }
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(1, Stream::Folds, 3), derive_seed(1, Stream::Folds, 3));
        assert_ne!(derive_seed(1, Stream::Folds, 3), derive_seed(2, Stream::Folds, 3));
    }
}
