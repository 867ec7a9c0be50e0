//! Counter-based random substreams.
//!
//! Each stream is keyed by `(seed, replication, lane)` and seeded through a
//! splitmix64 mix, so a particle's draws never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Vector;

/// Lane reserved for the common-noise path of a replication.
pub const COMMON_LANE: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit seed of the substream `(seed, replication, lane)`.
pub fn substream_seed(seed: u64, replication: u64, lane: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ replication.rotate_left(17));
    splitmix64(b ^ lane.rotate_left(41))
}

pub fn substream(seed: u64, replication: u64, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, replication, lane))
}

/// Vector of `dim` standard normals scaled by `scale`.
pub fn normal_vector<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vector {
    Vector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}
