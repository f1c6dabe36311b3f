//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! `(seed, domain, index)`, so results never depend on worker count or the
//! order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Domain {
    Bath = 1,
    Spectrum = 2,
    Trajectory = 3,
    FitStart = 4,
    Bootstrap = 5,
    Synthetic = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
