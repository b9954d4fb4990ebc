//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream derived from the master
//! seed, a purpose tag and an index, so results do not depend on scheduling or
//! worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that keep independent consumers of one seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Collect = 1,
    Bench = 2,
    Ablate = 3,
    Train = 4,
    Split = 5,
    Init = 6,
    Plan = 7,
    Misc = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let key = splitmix(seed ^ splitmix(purpose as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Stream for a two-level index such as `(episode, trial)`.
pub fn stream2(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    stream(splitmix(seed ^ splitmix(a.wrapping_add(0x5151))), purpose, b)
}
