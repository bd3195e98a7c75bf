//! Deterministic seed derivation.
//!
//! Every random stream in the lab is a ChaCha8 generator seeded from a root
//! seed plus a label path, e.g. `derive(root, &["ide"], 0)` or
//! `derive(root, &["metrics", "test"], example_index)`. The mixing function
//! is SplitMix64 finalisation applied over the root, the FNV-1a hash of each
//! label, and the index, in that order. Changing the order in which stages
//! run, or running examples in parallel, therefore cannot change any stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Derives a 64-bit seed for the stream `labels[..]/index` under `root`.
pub fn derive(root: u64, labels: &[&str], index: u64) -> u64 {
    let mut s = splitmix(root);
    for l in labels {
        s = splitmix(s ^ fnv1a(l));
    }
    splitmix(s ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, labels: &[&str], index: u64) -> Rng {
    rng(derive(root, labels, index))
}
