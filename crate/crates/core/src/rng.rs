//! Counter-style random streams.
//!
//! Every consumer derives its generator from `(master seed, domain, key)`, so
//! results never depend on the order in which other consumers drew numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Sample = 1,
    Split = 2,
    Batch = 3,
    Augment = 4,
    Init = 5,
    WarmupSplit = 6,
    WarmupBatch = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, domain, key)`; the key selects the ChaCha stream.
pub fn keyed(seed: u64, domain: Domain, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain as u64)));
    rng.set_stream(key);
    rng
}

/// Packs two counters into one stream key.
pub fn pair_key(a: u64, b: u64) -> u64 {
    (a << 32) ^ (b & 0xffff_ffff)
}
