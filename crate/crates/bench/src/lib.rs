//! Shared fixtures for the benchmarks.

use kgclip_core::config::TrainConfig;
use kgclip_core::features::{synth_dataset, SynthConfig, SynthDataset};

/// The default synthetic recognition set (8 actions, 400 videos, d = 32).
pub fn dataset(seed: u64) -> SynthDataset {
    synth_dataset(&SynthConfig { seed, ..SynthConfig::default() }).expect("synthetic dataset")
}

pub fn config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 30, tau: 0.1, seed, ..TrainConfig::default() }
}
