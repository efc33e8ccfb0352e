//! Seeded, per-stream random number generators.
//!
//! Every consumer (environment, trial, shaper, optimizer minibatching) gets
//! its own ChaCha stream derived from the run seed, so results never depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod streams {
    pub const ENV_BASE: u64 = 1 << 20;
    pub const EVAL_BASE: u64 = 2 << 20;
    pub const PPO: u64 = 1;
    pub const SHAPER: u64 = 2;
    pub const SAC: u64 = 3;
    pub const INIT: u64 = 4;
    pub const ACTION: u64 = 5;
    pub const ROUND_EVAL_BASE: u64 = 1 << 40;

    /// Start-noise stream for the per-round evaluation of one environment.
    pub fn round_eval(round: usize, env: usize) -> u64 {
        ROUND_EVAL_BASE + ((round as u64) << 20) + env as u64
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of worker threads requested through `GATESHAPER_THREADS`;
/// `1` selects the strict single-threaded reference mode.
pub fn env_thread_override() -> Option<usize> {
    std::env::var("GATESHAPER_THREADS").ok().and_then(|v| v.parse().ok())
}
