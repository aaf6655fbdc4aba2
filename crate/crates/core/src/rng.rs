//! Seeded random streams.
//!
//! Every stochastic draw in a run comes from a ChaCha stream keyed by
//! `(run seed, agent id, step, purpose)`, so results do not depend on the
//! order in which agents are evaluated or on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags separating independent streams for the same agent and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Population = 1,
    Mobility = 2,
    Decision = 3,
    Jitter = 4,
    Split = 5,
}

/// FNV-1a, stable across platforms and toolchains.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stream for one agent at one step.
pub fn agent_stream(seed: u64, agent_id: &str, step: u32, purpose: Stream) -> SimRng {
    SimRng::seed_from_u64(mix(&[seed, stable_hash(agent_id), u64::from(step), purpose as u64]))
}

pub fn purpose_stream(seed: u64, purpose: Stream) -> SimRng {
    SimRng::seed_from_u64(mix(&[seed, purpose as u64]))
}
