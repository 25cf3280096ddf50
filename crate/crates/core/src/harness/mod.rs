//! Experiment runner: drives the full stack inside the simulator and
//! turns the outcome into per-packet records and summary statistics.

mod experiment;
mod report;

pub use experiment::{run_experiment, ExperimentResult, HarnessError, RunCounters, RunOptions};
pub use report::{
    aggregate, report_stats, wilson_interval, write_breakdown_csv, write_csv, Aggregate, PacketBreakdown, PacketRecord,
    RunReport, StatsError, Status,
};

use crate::sim::ScenarioConfig;

/// Runs the scenario once per seed, each on its own thread. Results come
/// back in seed order.
pub fn run_seeds(
    cfg: &ScenarioConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Vec<Result<ExperimentResult, HarnessError>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let mut results: Vec<Option<Result<ExperimentResult, HarnessError>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = results.chunks_mut(seeds.len().div_ceil(workers).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let mine = &seeds[start..start + chunk.len()];
            start += chunk.len();
            s.spawn(move || {
                for (slot, &seed) in chunk.iter_mut().zip(mine) {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    *slot = Some(run_experiment(&c, opts));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every seed ran")).collect()
}
