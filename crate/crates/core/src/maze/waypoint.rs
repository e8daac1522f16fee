use std::collections::VecDeque;

use rand::Rng;

use super::{Cell, MazeAction, MazeSpec, MazeState};
use crate::error::{Error, Result};

/// Scripted controller: head for the goal on a straight line when nothing
/// blocks it, otherwise for the center of the next cell on a BFS path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaypointPolicy {
    /// Exploration noise half-width as a fraction of `action_max`.
    pub noise_frac: f64,
}

impl Default for WaypointPolicy {
    fn default() -> Self {
        Self { noise_frac: 0.1 }
    }
}

impl WaypointPolicy {
    pub fn noiseless() -> Self {
        Self { noise_frac: 0.0 }
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        spec: &MazeSpec,
        state: MazeState,
        goal: [f64; 2],
        rng: &mut R,
    ) -> Result<MazeAction> {
        let target = next_waypoint(spec, state.position, goal)?;
        let p = state.position;
        let raw = MazeAction::new(target[0] - p[0], target[1] - p[1]).clipped(spec.action_max);
        if self.noise_frac <= 0.0 {
            return Ok(raw);
        }
        let n = self.noise_frac * spec.action_max;
        Ok(MazeAction::new(
            raw.displacement[0] + rng.random_range(-n..=n),
            raw.displacement[1] + rng.random_range(-n..=n),
        )
        .clipped(spec.action_max))
    }
}

/// The point the waypoint controller steers toward from `from`.
pub fn next_waypoint(spec: &MazeSpec, from: [f64; 2], goal: [f64; 2]) -> Result<[f64; 2]> {
    let d = [goal[0] - from[0], goal[1] - from[1]];
    if super::distance(spec.cast(from, d), goal) < 1e-9 {
        return Ok(goal);
    }
    let path = bfs_path(spec, cell(spec, from)?, cell(spec, goal)?).ok_or_else(|| {
        Error::Planning(format!("no free path from {from:?} to goal {goal:?}"))
    })?;
    Ok(match path.get(1) {
        Some(&next) => spec.cell_center(next),
        None => goal,
    })
}

fn cell(spec: &MazeSpec, p: [f64; 2]) -> Result<Cell> {
    let (r, c) = spec.cell_of(p);
    if spec.is_wall_cell(r, c) {
        return Err(Error::Planning(format!("{p:?} is inside a wall")));
    }
    Ok((r as usize, c as usize))
}

/// Shortest 4-connected path over free cells, endpoints included.
pub fn bfs_path(spec: &MazeSpec, from: Cell, to: Cell) -> Option<Vec<Cell>> {
    let idx = |(r, c): Cell| r * spec.cols + c;
    let mut parent = vec![usize::MAX; spec.rows * spec.cols];
    let mut queue = VecDeque::from([from]);
    parent[idx(from)] = idx(from);
    while let Some(cur) = queue.pop_front() {
        if cur == to {
            let mut path = vec![cur];
            let mut at = idx(cur);
            while at != idx(from) {
                at = parent[at];
                path.push((at / spec.cols, at % spec.cols));
            }
            path.reverse();
            return Some(path);
        }
        let (r, c) = (cur.0 as isize, cur.1 as isize);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r + dr, c + dc);
            if spec.is_wall_cell(nr, nc) {
                continue;
            }
            let next = (nr as usize, nc as usize);
            if parent[idx(next)] == usize::MAX {
                parent[idx(next)] = idx(cur);
                queue.push_back(next);
            }
        }
    }
    None
}
