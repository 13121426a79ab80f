//! Keyed deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root
//! seed plus a tuple of integer keys (window index, position, epoch, ...).
//! ChaCha is counter based, so a stream depends only on its key and never
//! on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags that keep unrelated streams apart even when their numeric
/// keys coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    SelectPositions = 1,
    Strategy = 2,
    Shuffle = 3,
    Insert = 4,
    Contradiction = 5,
    TokenEmbedding = 6,
    BigramEmbedding = 7,
    Init = 8,
    Dropout = 9,
    BatchShuffle = 10,
    Synth = 11,
    Certify = 12,
    Prop2 = 13,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a root seed, a stream tag and any number of keys into a 64-bit
/// stream identifier.
pub fn derive_key(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Generator for the stream identified by `(seed, stream, keys)`.
pub fn keyed(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    let base = derive_key(seed, stream, keys);
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform index in `0..n` drawn through a 64-bit range so results do not
/// depend on the platform's pointer width.
pub fn index(rng: &mut impl rand::Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    rng.random_range(0..n as u64) as usize
}
