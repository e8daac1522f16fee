//! Experiment harness: run configuration, training loop, evaluation
//! protocols, metric export and the tabular critic oracle.

mod config;
mod evaluate;
pub mod oracle;
mod train;

pub use config::RunConfig;
pub use evaluate::{
    ablation_target, controller_config, default_sampling, episode_setups, evaluate, export_metrics,
    open_loop_actions, read_metrics, run_open_loop, run_planner, summarize, AblationCondition, EpisodeStats,
    MetricsRow, Protocol,
};
pub use train::{build_models, train_from, train_unified, write_loss_log, LossRow, TrainOutput, LOG_EVERY};

use crate::controller::stream_rng;
use crate::dataset::OfflineDataset;
use crate::error::Result;
use crate::maze::{collect_dataset, CollectConfig, GoalSampler, MazeSpec, StartSampler, StochasticityConfig};

const COLLECT_STREAM: u64 = 7;

/// Waypoint-controller data over uniformly random free starts and goals.
pub fn collect(cfg: &RunConfig, maze: &MazeSpec) -> Result<OfflineDataset> {
    let mut c = CollectConfig::new(cfg.episodes);
    c.starts = StartSampler::AnyFree;
    c.goals = GoalSampler::AnyFree;
    c.max_detours = cfg.collect_detours;
    c.stoch = StochasticityConfig::with_prob(cfg.collect_p)?;
    collect_dataset(maze, &c, &mut stream_rng(cfg.seed, COLLECT_STREAM))
}
