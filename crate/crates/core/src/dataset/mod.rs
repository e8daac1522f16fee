//! Episodic trajectory store and the two training samplers.

mod io;

pub use io::{load, save, FILE_MAGIC, FILE_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{MazeAction, MazeState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<MazeState>,
    /// `actions[t]` moves `states[t]` to `states[t + 1]`.
    pub actions: Vec<MazeAction>,
    /// The goal the episode was collected for.
    pub goal: [f64; 2],
}

impl Trajectory {
    pub fn new(states: Vec<MazeState>, actions: Vec<MazeAction>, goal: [f64; 2]) -> Result<Self> {
        if states.is_empty() || actions.len() + 1 != states.len() {
            return Err(Error::Dataset(format!(
                "trajectory with {} states needs {} actions, got {}",
                states.len(),
                states.len().saturating_sub(1),
                actions.len()
            )));
        }
        Ok(Self {
            states,
            actions,
            goal,
        })
    }

    pub fn num_transitions(&self) -> usize {
        self.actions.len()
    }
}

/// Immutable once built; samplers only read it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OfflineDataset {
    trajectories: Vec<Trajectory>,
    /// Global transition index -> (trajectory, timestep).
    transitions: Vec<(u32, u32)>,
    /// Global state index -> (trajectory, timestep).
    states: Vec<(u32, u32)>,
}

impl OfflineDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        let mut transitions = Vec::new();
        let mut states = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            transitions.extend((0..traj.num_transitions()).map(|t| (i as u32, t as u32)));
            states.extend((0..traj.states.len()).map(|t| (i as u32, t as u32)));
        }
        Self {
            trajectories,
            transitions,
            states,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// `(trajectory, timestep)` of global transition `index`.
    pub fn transition(&self, index: usize) -> (usize, usize) {
        let (i, t) = self.transitions[index];
        (i as usize, t as usize)
    }

    pub fn state_at(&self, index: usize) -> MazeState {
        let (i, t) = self.states[index];
        self.trajectories[i as usize].states[t as usize]
    }

    pub fn all_states(&self) -> impl Iterator<Item = MazeState> + '_ {
        self.trajectories.iter().flat_map(|t| t.states.iter().copied())
    }
}

/// `(s, a, s+, s-)` quadruples for the critic and actor losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GcilBatch {
    pub states: Vec<MazeState>,
    pub actions: Vec<MazeAction>,
    pub positives: Vec<MazeState>,
    pub negatives: Vec<MazeState>,
    /// Timesteps between each `s` and its positive.
    pub positive_offsets: Vec<usize>,
}

impl GcilBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `(s0, s_D, ..., s_KD, s_goal)` with `s_goal = s_(K+1)D`.
#[derive(Clone, Debug, PartialEq)]
pub struct MilestoneTrainSample {
    pub anchors: Vec<MazeState>,
    pub interval: usize,
    pub trajectory: usize,
    pub start: usize,
}

/// `(s, a)` uniform over transitions, `s+` uniform over the next
/// `min(horizon, remaining)` states of the same trajectory, `s-` uniform over
/// every stored state.
pub fn sample_gcil_batch<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    batch_size: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<GcilBatch> {
    if dataset.num_transitions() == 0 {
        return Err(Error::Dataset("dataset has no transitions".into()));
    }
    if horizon == 0 {
        return Err(Error::Dataset("positive horizon must be >= 1".into()));
    }
    let mut batch = GcilBatch::default();
    while batch.len() < batch_size {
        let (i, t) = dataset.transition(rng.random_range(0..dataset.num_transitions()));
        let traj = &dataset.trajectories[i];
        let future = (traj.states.len() - 1 - t).min(horizon);
        if future == 0 {
            continue;
        }
        let offset = rng.random_range(1..=future);
        batch.states.push(traj.states[t]);
        batch.actions.push(traj.actions[t]);
        batch.positives.push(traj.states[t + offset]);
        batch.positive_offsets.push(offset);
        batch
            .negatives
            .push(dataset.state_at(rng.random_range(0..dataset.num_states())));
    }
    Ok(batch)
}

/// Largest interval whose span `(K+1) * interval` fits in a trajectory of
/// `num_states` states.
pub fn max_feasible_interval(num_states: usize, k: usize, interval_max: usize) -> usize {
    ((num_states.saturating_sub(1)) / (k + 1)).min(interval_max)
}

/// Trajectory drawn with probability proportional to its state count among
/// those that admit at least interval 1; interval uniform over the feasible
/// `1..=min(interval_max, (len-1)/(K+1))`; start uniform over positions where
/// the span fits.
pub fn sample_milestone_batch<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    batch_size: usize,
    k: usize,
    interval_max: usize,
    rng: &mut R,
) -> Result<Vec<MilestoneTrainSample>> {
    if k == 0 || interval_max == 0 {
        return Err(Error::Dataset("K and the maximum interval must be >= 1".into()));
    }
    let eligible = milestone_eligible(dataset, k, interval_max);
    let total: usize = eligible.iter().map(|&(_, w)| w).sum();
    if total == 0 {
        return Err(Error::Dataset(format!(
            "no trajectory has the {} states needed for K = {k}",
            k + 2
        )));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut pick = rng.random_range(0..total);
        let &(i, _) = eligible
            .iter()
            .find(|&&(_, w)| {
                if pick < w {
                    true
                } else {
                    pick -= w;
                    false
                }
            })
            .expect("pick < total");
        let traj = &dataset.trajectories[i];
        let max_iv = max_feasible_interval(traj.states.len(), k, interval_max);
        let interval = rng.random_range(1..=max_iv);
        let span = (k + 1) * interval;
        let start = rng.random_range(0..=traj.states.len() - 1 - span);
        let anchors = (0..=k + 1)
            .map(|j| traj.states[start + j * interval])
            .collect();
        out.push(MilestoneTrainSample {
            anchors,
            interval,
            trajectory: i,
            start,
        });
    }
    Ok(out)
}

/// `(trajectory, selection weight)` for trajectories long enough for interval 1.
pub fn milestone_eligible(dataset: &OfflineDataset, k: usize, interval_max: usize) -> Vec<(usize, usize)> {
    dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| max_feasible_interval(t.states.len(), k, interval_max) >= 1)
        .map(|(i, t)| (i, t.states.len()))
        .collect()
}
