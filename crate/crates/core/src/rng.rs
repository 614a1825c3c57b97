//! Deterministic RNG stream derivation.
//!
//! Every random decision in the library draws from a `ChaCha8Rng` whose seed
//! is derived from the run seed plus a domain tag and integer coordinates
//! (sample index, epoch, view index, ...). Streams are therefore independent
//! of iteration order: augmenting sample 17 of epoch 3 produces the same
//! pixels whether the batch is built serially or by several workers, and
//! adding a new parameter to the model does not shift the init draws of the
//! existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of splitmix64; the standard seed-expansion permutation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a byte string and a list of integer coordinates into a 64-bit value.
fn mix(seed: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for chunk in domain.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(word);
        acc ^= splitmix64(&mut state);
    }
    for &ix in indices {
        state ^= ix;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive an independent RNG stream for (`domain`, `indices`) under `seed`.
pub fn derive_rng(seed: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = mix(seed, domain, indices);
    for word in key.chunks_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream for augmenting one view of one sample in one epoch.
pub fn view_rng(seed: u64, sample: u64, epoch: u64, view: u64) -> ChaCha8Rng {
    derive_rng(seed, "augment", &[sample, epoch, view])
}

/// Stream for initialising the named parameter tensor.
pub fn init_rng(seed: u64, param_name: &str) -> ChaCha8Rng {
    derive_rng(seed, &format!("init:{param_name}"), &[])
}
