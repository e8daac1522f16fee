use std::fmt;
use std::path::Path;

use rand::Rng;

use super::RunConfig;
use crate::controller::{csv_err, run_episode, stream_rng, ControllerConfig, EpisodeSetup, Models, ENV_STREAM};
use crate::diffusion::{Guidance, SamplingConfig};
use crate::error::{config_err, Error, Result};
use crate::maze::{
    is_goal_reached, reset, step, MazeAction, MazeSpec, MazeState, StochasticityConfig, WaypointPolicy,
};
use crate::scalar::Scalar;

const START_STREAM: u64 = 100;
const GOAL_STREAM: u64 = 101;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationCondition {
    /// Guided toward `max(1, round(ratio * interval_max))`.
    Ratio(f64),
    Unconditional,
}

impl fmt::Display for AblationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ratio(r) => write!(f, "ratio={r}"),
            Self::Unconditional => f.write_str("unconditional"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    SingleGoal,
    /// Goal drawn uniformly from the layout's goal set each episode.
    MultiGoal,
    /// Planner and the open-loop baseline at random-action probability `p`.
    Stochastic(f64),
    GuidanceAblation(Vec<AblationCondition>),
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SingleGoal => "single_goal",
            Self::MultiGoal => "multi_goal",
            Self::Stochastic(_) => "stochastic",
            Self::GuidanceAblation(_) => "guidance_ablation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub protocol: String,
    pub condition: String,
    /// `None` marks a summary row aggregated over seeds.
    pub seed: Option<u64>,
    pub rollouts: usize,
    pub success_rate: f64,
    /// Within a seed: Bernoulli std over episodes. Summary: std over seeds.
    pub success_std: f64,
    /// Mean over successful episodes; NaN if none succeeded.
    pub mean_timesteps: f64,
    pub timesteps_std: f64,
    pub denoiser_calls: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub successes: Vec<bool>,
    pub timesteps: Vec<usize>,
    pub denoiser_calls: Vec<usize>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EpisodeStats {
    fn push(&mut self, success: bool, timesteps: usize, calls: usize) {
        self.successes.push(success);
        self.timesteps.push(timesteps);
        self.denoiser_calls.push(calls);
    }

    pub fn success_rate(&self) -> f64 {
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len().max(1) as f64
    }

    pub fn row(&self, protocol: &str, condition: &str, seed: u64) -> MetricsRow {
        let p = self.success_rate();
        let ok: Vec<f64> = self
            .successes
            .iter()
            .zip(&self.timesteps)
            .filter(|(s, _)| **s)
            .map(|(_, &t)| t as f64)
            .collect();
        let (mt, st) = mean_std(&ok);
        let calls: Vec<f64> = self.denoiser_calls.iter().map(|&c| c as f64).collect();
        MetricsRow {
            protocol: protocol.into(),
            condition: condition.into(),
            seed: Some(seed),
            rollouts: self.successes.len(),
            success_rate: p,
            success_std: (p * (1.0 - p)).sqrt(),
            mean_timesteps: mt,
            timesteps_std: st,
            denoiser_calls: mean_std(&calls).0,
        }
    }
}

fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64
}

/// Starts from the start stream, goals from an independent stream so
/// switching between single/multi goal leaves the starts unchanged.
pub fn episode_setups(maze: &MazeSpec, seed: u64, rollouts: usize, multi_goal: bool) -> Result<Vec<(MazeState, [f64; 2], u64)>> {
    if maze.goal_positions.is_empty() {
        return config_err(format!("layout {} has no goal", maze.name));
    }
    let mut srng = stream_rng(seed, START_STREAM);
    let mut grng = stream_rng(seed, GOAL_STREAM);
    (0..rollouts)
        .map(|i| {
            let start = reset(maze, &mut srng)?;
            let goal = if multi_goal {
                maze.goal_positions[grng.random_range(0..maze.goal_positions.len())]
            } else {
                maze.goal_positions[0]
            };
            Ok((start, goal, episode_seed(seed, i)))
        })
        .collect()
}

pub fn run_planner<S: Scalar>(
    maze: &MazeSpec,
    models: &Models<S>,
    ctrl: &ControllerConfig,
    sampling: SamplingConfig,
    setups: &[(MazeState, [f64; 2], u64)],
    stoch: StochasticityConfig,
) -> Result<EpisodeStats> {
    let mut stats = EpisodeStats::default();
    for &(start, goal, seed) in setups {
        let r = run_episode(maze, models, ctrl, sampling, EpisodeSetup { start, goal, stoch, seed })?;
        stats.push(r.success, r.timesteps, r.calls.denoiser);
    }
    Ok(stats)
}

/// Actions of the noiseless waypoint controller in the deterministic
/// environment, recorded until it reaches the goal or the step cap.
pub fn open_loop_actions(maze: &MazeSpec, start: MazeState, goal: [f64; 2]) -> Result<Vec<MazeAction>> {
    let policy = WaypointPolicy::noiseless();
    let det = StochasticityConfig::deterministic();
    let mut rng = stream_rng(0, 0);
    let mut s = start;
    let mut out = Vec::new();
    for _ in 0..maze.max_episode_steps {
        if is_goal_reached(maze, s, goal) {
            break;
        }
        let a = policy.act(maze, s, goal, &mut rng)?;
        out.push(a);
        s = step(maze, s, a, det, &mut rng);
    }
    Ok(out)
}

/// Replays the recorded action sequence, then zero actions, without feedback.
pub fn run_open_loop(
    maze: &MazeSpec,
    setups: &[(MazeState, [f64; 2], u64)],
    stoch: StochasticityConfig,
) -> Result<EpisodeStats> {
    let mut stats = EpisodeStats::default();
    for &(start, goal, seed) in setups {
        let plan = open_loop_actions(maze, start, goal)?;
        let mut env_rng = stream_rng(seed, ENV_STREAM);
        let mut s = start;
        let mut done = None;
        for t in 0..maze.max_episode_steps {
            if is_goal_reached(maze, s, goal) {
                done = Some(t);
                break;
            }
            let a = plan.get(t).copied().unwrap_or(MazeAction::new(0.0, 0.0));
            s = step(maze, s, a, stoch, &mut env_rng);
        }
        let done = done.or_else(|| is_goal_reached(maze, s, goal).then_some(maze.max_episode_steps));
        stats.push(done.is_some(), done.unwrap_or(maze.max_episode_steps), 0);
    }
    Ok(stats)
}

pub fn controller_config(cfg: &RunConfig) -> ControllerConfig {
    ControllerConfig {
        delta: cfg.delta,
        tau_lim: cfg.tau_lim(),
        replanning: cfg.replanning,
    }
}

pub fn default_sampling(cfg: &RunConfig) -> SamplingConfig {
    SamplingConfig {
        guidance: Guidance::Guided {
            target: cfg.interval_target,
            weight: cfg.guidance_weight,
        },
        sampler: cfg.sampler,
        clip: cfg.clip_denoised,
    }
}

pub fn ablation_target(ratio: f64, interval_max: usize) -> usize {
    ((ratio * interval_max as f64).round() as usize).clamp(1, interval_max)
}

/// Per-seed metric rows of one protocol.
pub fn evaluate<S: Scalar>(
    maze: &MazeSpec,
    models: &Models<S>,
    cfg: &RunConfig,
    protocol: &Protocol,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let name = protocol.name();
    let ctrl = controller_config(cfg);
    let sampling = default_sampling(cfg);
    let det = StochasticityConfig::deterministic();
    let mut rows = Vec::new();
    for &seed in &cfg.eval_seeds {
        let multi = matches!(protocol, Protocol::MultiGoal);
        let setups = episode_setups(maze, seed, cfg.rollouts, multi)?;
        match protocol {
            Protocol::SingleGoal | Protocol::MultiGoal => {
                let st = run_planner(maze, models, &ctrl, sampling, &setups, det)?;
                rows.push(st.row(name, "planner", seed));
            }
            Protocol::Stochastic(p) => {
                let stoch = StochasticityConfig::with_prob(*p)?;
                let st = run_planner(maze, models, &ctrl, sampling, &setups, stoch)?;
                rows.push(st.row(name, &format!("planner_p={p}"), seed));
                let ol = run_open_loop(maze, &setups, stoch)?;
                rows.push(ol.row(name, &format!("open_loop_p={p}"), seed));
            }
            Protocol::GuidanceAblation(conds) => {
                for c in conds {
                    let (guidance, tau_lim) = match *c {
                        AblationCondition::Ratio(r) => {
                            if !(r > 0.0 && r <= 1.0) {
                                return config_err(format!("ablation ratio {r} outside (0, 1]"));
                            }
                            let target = ablation_target(r, cfg.interval_max);
                            (
                                Guidance::Guided {
                                    target,
                                    weight: cfg.guidance_weight,
                                },
                                2 * target,
                            )
                        }
                        AblationCondition::Unconditional => (Guidance::Unconditional, cfg.tau_lim()),
                    };
                    let ctrl = ControllerConfig { tau_lim, ..ctrl };
                    let s = SamplingConfig { guidance, ..sampling };
                    let st = run_planner(maze, models, &ctrl, s, &setups, det)?;
                    rows.push(st.row(name, &c.to_string(), seed));
                }
            }
        }
    }
    Ok(rows)
}

/// Mean and std over seeds for every `(protocol, condition)` group, in first
/// appearance order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let k = (r.protocol.clone(), r.condition.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(p, c)| {
            let g: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.seed.is_some() && r.protocol == p && r.condition == c)
                .collect();
            let col = |f: fn(&MetricsRow) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (sr, ss) = col(|r| r.success_rate);
            let (mt, ts) = col(|r| r.mean_timesteps);
            MetricsRow {
                protocol: p,
                condition: c,
                seed: None,
                rollouts: g.iter().map(|r| r.rollouts).sum(),
                success_rate: sr,
                success_std: ss,
                mean_timesteps: mt,
                timesteps_std: ts,
                denoiser_calls: col(|r| r.denoiser_calls).0,
            }
        })
        .collect()
}

const HEADER: [&str; 9] = [
    "protocol",
    "condition",
    "seed",
    "rollouts",
    "success_rate",
    "success_std",
    "mean_timesteps",
    "timesteps_std",
    "denoiser_calls",
];

/// Per-seed rows followed by one summary row per group. An empty slice gives
/// a header-only file.
pub fn export_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    let per_seed = rows.iter().filter(|r| r.seed.is_some());
    for r in per_seed.chain(summarize(rows).iter()) {
        w.write_record([
            r.protocol.clone(),
            r.condition.clone(),
            r.seed.map_or("summary".into(), |s| s.to_string()),
            r.rollouts.to_string(),
            r.success_rate.to_string(),
            r.success_std.to_string(),
            r.mean_timesteps.to_string(),
            r.timesteps_std.to_string(),
            r.denoiser_calls.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().ne(HEADER) {
        return Err(Error::Parse {
            offset: 0,
            msg: "unexpected metrics header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |msg: String| Error::Parse { offset: i as u64 + 1, msg };
        let f = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|e| bad(format!("{}: {e}", HEADER[j])))
        };
        out.push(MetricsRow {
            protocol: rec[0].to_string(),
            condition: rec[1].to_string(),
            seed: match &rec[2] {
                "summary" => None,
                s => Some(s.parse().map_err(|e| bad(format!("seed: {e}")))?),
            },
            rollouts: rec[3].parse().map_err(|e| bad(format!("rollouts: {e}")))?,
            success_rate: f(4)?,
            success_std: f(5)?,
            mean_timesteps: f(6)?,
            timesteps_std: f(7)?,
            denoiser_calls: f(8)?,
        });
    }
    Ok(out)
}
