use rand::Rng;

use super::{
    distance, is_goal_reached, reset, step, Cell, MazeSpec, MazeState, StochasticityConfig,
    WaypointPolicy,
};
use crate::dataset::{OfflineDataset, Trajectory};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum StartSampler {
    /// `reset`: uniform over the layout's start region.
    StartRegion,
    /// Uniform over free space.
    AnyFree,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GoalSampler {
    /// Uniform over the layout's goal positions.
    LayoutGoals,
    /// A free cell chosen uniformly, position uniform inside it.
    AnyFree,
    Fixed([f64; 2]),
}

#[derive(Clone, Debug)]
pub struct CollectConfig {
    pub episodes: usize,
    pub starts: StartSampler,
    pub goals: GoalSampler,
    /// Up to this many random intermediate waypoints are visited before the
    /// episode goal. Makes the data deliberately roundabout.
    pub max_detours: usize,
    pub stoch: StochasticityConfig,
    pub policy: WaypointPolicy,
}

impl CollectConfig {
    pub fn new(episodes: usize) -> Self {
        Self {
            episodes,
            starts: StartSampler::AnyFree,
            goals: GoalSampler::AnyFree,
            max_detours: 0,
            stoch: StochasticityConfig::deterministic(),
            policy: WaypointPolicy::default(),
        }
    }
}

/// Uniform point inside a free cell, kept a quarter cell from its edges.
pub fn sample_free_position<R: Rng + ?Sized>(spec: &MazeSpec, rng: &mut R) -> [f64; 2] {
    let cells = spec.free_cells();
    let cell: Cell = cells[rng.random_range(0..cells.len())];
    let c = spec.cell_center(cell);
    let j = 0.25 * spec.cell_size;
    [
        c[0] + rng.random_range(-j..j),
        c[1] + rng.random_range(-j..j),
    ]
}

/// Runs the waypoint controller for `cfg.episodes` episodes. Each episode
/// stops when its goal is reached or after `max_episode_steps` steps.
pub fn collect_dataset<R: Rng + ?Sized>(
    spec: &MazeSpec,
    cfg: &CollectConfig,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if cfg.episodes == 0 {
        return config_err("need at least one episode");
    }
    spec.validate()?;
    let mut trajectories = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let start = match cfg.starts {
            StartSampler::StartRegion => reset(spec, rng)?,
            StartSampler::AnyFree => MazeState {
                position: sample_free_position(spec, rng),
            },
        };
        let goal = match &cfg.goals {
            GoalSampler::LayoutGoals => {
                if spec.goal_positions.is_empty() {
                    return config_err("layout has no goal positions");
                }
                spec.goal_positions[rng.random_range(0..spec.goal_positions.len())]
            }
            GoalSampler::AnyFree => sample_free_position(spec, rng),
            GoalSampler::Fixed(g) => *g,
        };
        let detours = if cfg.max_detours > 0 {
            rng.random_range(0..=cfg.max_detours)
        } else {
            0
        };
        let mut targets: Vec<[f64; 2]> = (0..detours).map(|_| sample_free_position(spec, rng)).collect();
        targets.push(goal);
        trajectories.push(run_waypoint_episode(spec, start, &targets, cfg, rng)?);
    }
    Ok(OfflineDataset::new(trajectories))
}

fn run_waypoint_episode<R: Rng + ?Sized>(
    spec: &MazeSpec,
    start: MazeState,
    targets: &[[f64; 2]],
    cfg: &CollectConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let goal = *targets.last().expect("goal is always a target");
    let mut states = vec![start];
    let mut actions = Vec::new();
    let mut s = start;
    let mut next = 0;
    for _ in 0..spec.max_episode_steps {
        if is_goal_reached(spec, s, goal) {
            break;
        }
        while next + 1 < targets.len() && distance(s.position, targets[next]) <= spec.success_radius {
            next += 1;
        }
        let a = cfg.policy.act(spec, s, targets[next], rng)?;
        s = step(spec, s, a, cfg.stoch, rng);
        actions.push(a);
        states.push(s);
    }
    Trajectory::new(states, actions, goal)
}
