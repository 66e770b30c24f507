//! Seed derivation. Every random draw in the pipeline comes from a ChaCha8
//! stream keyed by the run seed plus a tuple of stream coordinates, so the
//! draws of a given (epoch, step, video, purpose) never depend on what ran
//! before them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purposes for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Shift = 3,
    Sampler = 4,
    Augment = 5,
    DropPath = 6,
    Dropout = 7,
    Synth = 8,
    Profile = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ (stream as u64).rotate_left(48));
    for &c in coords {
        h = splitmix(h ^ c);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, coords))
}

/// Hash a string identifier into a stream coordinate.
pub fn key_of(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
