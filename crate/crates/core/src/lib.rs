//! Uncertainty-guided control of multi-turn agent rollouts.
//!
//! The crate is organized bottom-up:
//!
//! * [`signal`] computes per-token entropy, top-j confidence and the fused
//!   uncertainty signal.
//! * [`tti`] and [`tds`] are the token-level and turn-level controllers.
//! * [`env`] holds the synthetic shop and chain environments plus format
//!   validation.
//! * [`policy`], [`optimizer`] and [`rollout`] implement a toy softmax
//!   policy, group-relative credit assignment and trajectory collection.
//! * [`config`], [`train`] and [`report`] drive runs and analyze their logs.

pub mod config;
pub mod demo;
pub mod env;
pub mod optimizer;
pub mod par;
pub mod policy;
pub mod report;
pub mod rollout;
pub mod signal;
pub mod tds;
pub mod train;
pub mod tti;
pub mod vocab;

/// Mix `parts` into `base` with splitmix64 steps.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
