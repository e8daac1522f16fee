//! Milestone-following feedback controller.
//!
//! The controller targets one milestone at a time, acts with the
//! goal-conditioned actor, and moves to the next milestone once the encoded
//! observation is within `delta` (squared distance, critic half) or after
//! more than `tau_lim` steps on the same target.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calls::CallCounts;
use crate::diffusion::{plan_milestones, Denoiser, DiffusionSchedule, MilestonePlan, SamplingConfig};
use crate::error::{config_err, Result};
use crate::gcil::GcilModel;
use crate::maze::{is_goal_reached, step, MazeAction, MazeSpec, MazeState, StochasticityConfig};
use crate::nn::Checkpoint;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerConfig {
    pub delta: f64,
    pub tau_lim: usize,
    pub replanning: bool,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return config_err("delta must be positive");
        }
        if self.tau_lim == 0 {
            return config_err("tau_lim must be >= 1");
        }
        Ok(())
    }
}

/// Frozen networks and schedule used at run time.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<S> {
    pub gcil: GcilModel<S>,
    pub denoiser: Denoiser<S>,
    pub schedule: DiffusionSchedule,
}

impl<S: Scalar> Models<S> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.gcil.write_checkpoint(&mut ck);
        self.denoiser.write_checkpoint(&mut ck);
        ck.set_meta("diffusion.beta", self.schedule.betas().to_vec());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let gcil = GcilModel::from_checkpoint(ck)?;
        let denoiser = Denoiser::from_checkpoint(ck)?;
        if denoiser.goal_dim != gcil.goal_dim() {
            return config_err("denoiser and encoder disagree on the goal width");
        }
        let schedule = DiffusionSchedule::from_betas(ck.meta("diffusion.beta")?.to_vec())?;
        Ok(Self {
            gcil,
            denoiser,
            schedule,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState<S> {
    /// Global milestone index, `1..=K+1`.
    pub k: usize,
    pub tau: usize,
    pub plan: MilestonePlan<S>,
    /// Global index of `plan` row 0; nonzero only after replanning.
    pub base: usize,
    /// `K` of the first plan.
    pub k_total: usize,
    pub goal: MazeState,
    /// An action was taken toward the current target and its outcome has
    /// not been checked yet.
    pending: bool,
}

impl<S: Scalar> ControllerState<S> {
    fn row(&self) -> usize {
        self.k - self.base
    }

    pub fn target(&self) -> Array1<S> {
        self.plan.row(self.row()).to_owned()
    }

    pub fn at_final(&self) -> bool {
        self.k == self.k_total + 1
    }
}

/// What one controller call did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub action: MazeAction,
    /// Squared critic-half distance from the observation to the target
    /// checked on this call (before any switch).
    pub latent_distance: f64,
    pub switched: bool,
    pub replanned: bool,
}

/// Plans once and targets the first interior milestone.
pub fn start_episode<S: Scalar, R: Rng + ?Sized>(
    models: &Models<S>,
    s0: MazeState,
    s_goal: MazeState,
    sampling: SamplingConfig,
    rng: &mut R,
    calls: &mut CallCounts,
) -> Result<ControllerState<S>> {
    let plan = plan_milestones(
        &models.gcil,
        &models.denoiser,
        &models.schedule,
        s0,
        s_goal,
        sampling,
        rng,
        calls,
        None,
    )?;
    let k_total = plan.k();
    Ok(ControllerState {
        k: 1,
        tau: 0,
        plan,
        base: 0,
        k_total,
        goal: s_goal,
        pending: false,
    })
}

fn sq_dist<S: Scalar>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (*x - *y).widen();
            d * d
        })
        .sum()
}

/// Evenly spaced subset of `count` rows out of `1..=k` (1-based interior).
pub fn subselect(k: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, k);
    (1..=count)
        .map(|j| ((j * (k + 1)) as f64 / (count + 1) as f64).round().clamp(1.0, k as f64) as usize)
        .collect()
}

/// One controller step: checks the switch condition on `obs` (the outcome of
/// the previous action), then acts toward the current target. Uses one
/// encoder pass and one actor pass unless a replan is triggered.
pub fn controller_step<S: Scalar, R: Rng + ?Sized>(
    state: &mut ControllerState<S>,
    obs: MazeState,
    models: &Models<S>,
    cfg: &ControllerConfig,
    sampling: SamplingConfig,
    rng: &mut R,
    calls: &mut CallCounts,
) -> Result<StepInfo> {
    let gcil = &models.gcil;
    let d = gcil.latent_dim();
    let z = gcil.encode_critic(&[obs])?;
    calls.encoder += 1;
    let target = state.target();
    let dist = sq_dist(z.row(0), target.slice(s![d..]));
    let mut switched = false;
    let mut replanned = false;
    if state.pending && !state.at_final() && (dist < cfg.delta || state.tau > cfg.tau_lim) {
        state.k += 1;
        state.tau = 0;
        switched = true;
        if cfg.replanning && !state.at_final() {
            replan(state, obs, models, sampling, rng, calls)?;
            replanned = true;
        }
    }
    let target = state.target();
    let action = gcil.act(obs, target.slice(s![..d]).as_slice().expect("contiguous row"))?;
    calls.actor += 1;
    state.tau = (state.tau + 1).min(cfg.tau_lim + 1);
    state.pending = true;
    Ok(StepInfo {
        action,
        latent_distance: dist,
        switched,
        replanned,
    })
}

/// Fresh plan from `obs` to the goal, keeping the remaining milestone count.
fn replan<S: Scalar, R: Rng + ?Sized>(
    state: &mut ControllerState<S>,
    obs: MazeState,
    models: &Models<S>,
    sampling: SamplingConfig,
    rng: &mut R,
    calls: &mut CallCounts,
) -> Result<()> {
    let remaining = (state.k_total + 1 - state.k).max(1);
    let full = plan_milestones(
        &models.gcil,
        &models.denoiser,
        &models.schedule,
        obs,
        state.goal,
        sampling,
        rng,
        calls,
        None,
    )?;
    let k = full.k();
    let mut picked = vec![0];
    picked.extend(subselect(k, remaining));
    picked.push(k + 1);
    let rows: Array2<S> = full.rows.select(Axis(0), &picked);
    state.plan = MilestonePlan { rows };
    state.base = state.k - 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub timestep: usize,
    pub position: [f64; 2],
    pub milestone: usize,
    pub latent_distance: f64,
    pub switched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Steps taken until success, or the step cap.
    pub timesteps: usize,
    pub log: Vec<StepLog>,
    pub calls: CallCounts,
    pub final_position: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSetup {
    pub start: MazeState,
    pub goal: [f64; 2],
    pub stoch: StochasticityConfig,
    /// Seeds the planner stream and, separately, the environment stream.
    pub seed: u64,
}

/// Independent, reproducible RNG stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const PLAN_STREAM: u64 = 1;
pub const ENV_STREAM: u64 = 2;

/// Runs the planner and controller until the environment reports success or the step cap.
pub fn run_episode<S: Scalar>(
    maze: &MazeSpec,
    models: &Models<S>,
    cfg: &ControllerConfig,
    sampling: SamplingConfig,
    setup: EpisodeSetup,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let mut plan_rng = stream_rng(setup.seed, PLAN_STREAM);
    let mut env_rng = stream_rng(setup.seed, ENV_STREAM);
    let mut calls = CallCounts::default();
    let goal_state = MazeState { position: setup.goal };
    let mut state = start_episode(models, setup.start, goal_state, sampling, &mut plan_rng, &mut calls)?;
    let mut s = setup.start;
    let mut log = Vec::new();
    for t in 0..maze.max_episode_steps {
        if is_goal_reached(maze, s, setup.goal) {
            return Ok(EpisodeResult {
                success: true,
                timesteps: t,
                log,
                calls,
                final_position: s.position,
            });
        }
        let info = controller_step(&mut state, s, models, cfg, sampling, &mut plan_rng, &mut calls)?;
        log.push(StepLog {
            timestep: t,
            position: s.position,
            milestone: state.k,
            latent_distance: info.latent_distance,
            switched: info.switched,
        });
        s = step(maze, s, info.action, setup.stoch, &mut env_rng);
    }
    Ok(EpisodeResult {
        success: is_goal_reached(maze, s, setup.goal),
        timesteps: maze.max_episode_steps,
        log,
        calls,
        final_position: s.position,
    })
}

pub fn write_step_log(log: &[StepLog], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["timestep", "x", "y", "milestone", "latent_distance", "switched"])
        .map_err(csv_err)?;
    for l in log {
        w.write_record([
            l.timestep.to_string(),
            l.position[0].to_string(),
            l.position[1].to_string(),
            l.milestone.to_string(),
            l.latent_distance.to_string(),
            (l.switched as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::Error::Io(io),
        other => crate::Error::Config(format!("csv: {other:?}")),
    }
}
