//! Fixtures shared by the benchmarks.

use tsconv::config::RunConfig;
use tsconv::data::Scene;
use tsconv::train::synth_dataset;

pub fn scenes(n: usize, seed: u64) -> (RunConfig, Vec<Scene>) {
    let cfg = RunConfig { scenes: n, seed, ..RunConfig::default() };
    let scenes = synth_dataset(&cfg);
    (cfg, scenes)
}
