//! Seed derivation. Every random stream in a run is derived from the master
//! seed and a path of integer labels, so no two components share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Labels for the independent stream families.
pub mod tag {
    pub const SCENARIO: u64 = 1;
    pub const CLIENT_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const LOCAL_TRAIN: u64 = 4;
    pub const GLOBAL_TRACK: u64 = 5;
    pub const FINE_TUNE: u64 = 6;
    pub const META: u64 = 7;
    pub const EVAL_ADAPT: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const SAMPLE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// The stream a client uses for one round of one activity.
pub fn client_round_stream(master: u64, activity: u64, client: u32, round: u32) -> Stream {
    stream(master, &[activity, client as u64, round as u64])
}
