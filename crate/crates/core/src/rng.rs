//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by
//! `derive_seed(master, tag, index)`: the master seed, a fixed per-component
//! tag and an index (epoch, batch, restart, ...) are folded together with
//! SplitMix64. Re-running any component with the same triple reproduces its
//! stream without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(master);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ splitmix(index))
}

pub fn rng(master: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag, index))
}
