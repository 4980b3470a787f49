//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(key, counter)`, so a trajectory sampled
//! on one worker is bit-identical to the same trajectory sampled anywhere else.
//! The mixer is the SplitMix64 finalizer applied twice.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw 64-bit output for `(key, counter)`.
#[inline]
pub fn counter_u64(key: u64, counter: u64) -> u64 {
    let k = mix64(key.wrapping_add(GOLDEN_GAMMA));
    mix64(k ^ counter.wrapping_mul(GOLDEN_GAMMA).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Uniform double in `[0, 1)` with 53 random bits.
#[inline]
pub fn counter_uniform(key: u64, counter: u64) -> f64 {
    (counter_u64(key, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derive an independent child key, e.g. one key per rollout.
#[inline]
pub fn derive_key(parent: u64, stream: u64) -> u64 {
    counter_u64(parent ^ 0xD1B5_4A32_D192_ED03, stream)
}

/// Derive a stage seed from the master seed and a stage name (FNV-1a of the name).
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in stage.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive_key(master, h)
}

/// Inverse-CDF draw from a discrete distribution given in list order.
/// Falls back to the last index when rounding leaves `u` above the total mass.
pub fn pick_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
