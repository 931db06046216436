//! Counter-based random streams.
//!
//! Every stochastic draw in a run is addressed by a [`StreamKey`] made of the
//! root seed, a [`Purpose`] tag and three counters (round, agent, step). The key
//! is hashed into a ChaCha seed, so two code paths that ask for the same key see
//! the same numbers regardless of evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Streams with different purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Mini-batch drawn during initialization (round 0).
    InitBatch,
    /// Mini-batch drawn at local step `t` of a round.
    LocalBatch,
    /// Mini-batch drawn at the communication step of a round.
    CommBatch,
    /// Global Bernoulli draw deciding server vs gossip.
    ServerDraw,
    /// Model parameter initialization.
    ModelInit,
    /// Synthetic data generation.
    Synthetic,
    /// Random graph generation.
    Topology,
    /// Anything else (tests, sampling utilities).
    Auxiliary,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::InitBatch => 0x01,
            Purpose::LocalBatch => 0x02,
            Purpose::CommBatch => 0x03,
            Purpose::ServerDraw => 0x04,
            Purpose::ModelInit => 0x05,
            Purpose::Synthetic => 0x06,
            Purpose::Topology => 0x07,
            Purpose::Auxiliary => 0x08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    pub agent: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self { seed, purpose, round: 0, agent: 0, step: 0 }
    }

    pub fn round(mut self, round: u64) -> Self {
        self.round = round;
        self
    }

    pub fn agent(mut self, agent: u64) -> Self {
        self.agent = agent;
        self
    }

    pub fn step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    /// 256-bit seed derived from the key by chaining SplitMix64.
    pub fn seed_bytes(&self) -> [u8; 32] {
        let mut state = splitmix64(self.seed ^ 0x5049_5343_4f00_0000);
        for word in [self.purpose.tag(), self.round, self.agent, self.step] {
            state = splitmix64(state ^ splitmix64(word.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        let mut out = [0u8; 32];
        for chunk in out.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed_bytes())
    }
}

/// Keys for all draws made while producing round `round` of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundKey {
    pub seed: u64,
    pub round: u64,
}

impl RoundKey {
    pub fn new(seed: u64, round: u64) -> Self {
        Self { seed, round }
    }

    pub fn init_batch(&self, agent: usize) -> StreamKey {
        StreamKey::new(self.seed, Purpose::InitBatch).round(self.round).agent(agent as u64)
    }

    pub fn local_batch(&self, agent: usize, t: usize) -> StreamKey {
        StreamKey::new(self.seed, Purpose::LocalBatch)
            .round(self.round)
            .agent(agent as u64)
            .step(t as u64)
    }

    pub fn comm_batch(&self, agent: usize) -> StreamKey {
        StreamKey::new(self.seed, Purpose::CommBatch).round(self.round).agent(agent as u64)
    }

    pub fn server_draw(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::ServerDraw).round(self.round)
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform double in [0, 1) from the top 53 bits of a hashed index.
pub fn hashed_unit(seed: u64, index: u64) -> f64 {
    (splitmix64(seed ^ splitmix64(index)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
