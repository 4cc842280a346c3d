//! Minimal MDP abstractions shared by the learners and oracles.
//!
//! The environments implement these traits, and so do the tiny hand-built
//! MDPs in the unit tests, which keeps Q-learning and value iteration
//! testable against closed-form answers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub type SimRng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a named purpose (evaluation, training, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for episode `episode` of a batch seeded with `seed`. Each episode gets
/// its own ChaCha stream, so batches can be rolled out in any order.
pub fn episode_rng(seed: u64, episode: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Continue,
    Terminal,
    /// Episode cut off by the horizon; learners bootstrap through it.
    Truncated,
}

#[derive(Clone, Debug)]
pub struct Sampled<S> {
    pub next: S,
    pub reward: f64,
    pub kind: StepKind,
}

/// One branch of a stochastic transition. `next` is `None` for terminal
/// branches, which carry no continuation value.
#[derive(Clone, Debug)]
pub struct Branch<S> {
    pub prob: f64,
    pub reward: f64,
    pub next: Option<S>,
}

pub trait Mdp {
    type State: Clone;

    fn action_count(&self) -> usize;
    fn state_key(&self, state: &Self::State) -> u64;
    fn initial_state(&self, rng: &mut SimRng) -> Self::State;
    fn sample(
        &self,
        state: &Self::State,
        action: usize,
        rng: &mut SimRng,
    ) -> Result<Sampled<Self::State>>;
}

pub trait EnumerableMdp: Mdp {
    /// All reachable non-terminal states, without duplicates.
    fn states(&self) -> Result<Vec<Self::State>>;

    /// Horizon-free transition distribution.
    fn branches(&self, state: &Self::State, action: usize) -> Vec<Branch<Self::State>>;
}
