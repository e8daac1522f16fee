//! Point-mass maze on a square-cell grid.
//!
//! Positions are `(x, y)` in meters; `x` runs along grid columns, `y` along
//! rows, and cell `(row, col)` covers `[col*c, (col+1)*c) x [row*c, (row+1)*c)`
//! for cell size `c`. Anything outside the grid counts as wall.

mod collect;
mod layout;
mod waypoint;

pub use collect::{collect_dataset, CollectConfig, GoalSampler, StartSampler};
pub use layout::{builtin_layout, load_layout, parse_layout, BUILTIN_LAYOUTS};
pub use waypoint::WaypointPolicy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Distance kept between a stopped point and the wall face it hit.
pub const WALL_MARGIN: f64 = 1e-9;

pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeState {
    pub position: [f64; 2],
}

impl MazeState {
    pub fn at(x: f64, y: f64) -> Self {
        Self { position: [x, y] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeAction {
    pub displacement: [f64; 2],
}

impl MazeAction {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self {
            displacement: [dx, dy],
        }
    }

    pub fn clipped(self, action_max: f64) -> Self {
        let c = |v: f64| v.clamp(-action_max, action_max);
        Self::new(c(self.displacement[0]), c(self.displacement[1]))
    }
}

/// Random-action corruption: with probability `random_action_prob` the
/// environment ignores the agent and executes a uniform random action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StochasticityConfig {
    pub random_action_prob: f64,
}

impl StochasticityConfig {
    pub fn deterministic() -> Self {
        Self::default()
    }

    pub fn with_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return config_err(format!("random-action probability {p} outside [0, 1]"));
        }
        Ok(Self {
            random_action_prob: p,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major occupancy, `true` = wall.
    pub walls: Vec<bool>,
    pub cell_size: f64,
    pub start_region: Aabb,
    pub goal_positions: Vec<[f64; 2]>,
    pub success_radius: f64,
    pub action_max: f64,
    pub max_episode_steps: usize,
    /// Each executed action is applied this many times per step.
    pub action_repeat: usize,
}

impl MazeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.walls.len() != self.rows * self.cols || self.rows == 0 || self.cols == 0 {
            return config_err("wall grid size does not match rows x cols");
        }
        if !(self.cell_size > 0.0) {
            return config_err("cell size must be positive");
        }
        if !(self.success_radius > 0.0) || !(self.action_max > 0.0) {
            return config_err("success radius and action_max must be positive");
        }
        if self.max_episode_steps == 0 || self.action_repeat == 0 {
            return config_err("max_episode_steps and action_repeat must be >= 1");
        }
        let r = &self.start_region;
        if r.max[0] < r.min[0] || r.max[1] < r.min[1] {
            return config_err("start region is empty");
        }
        if !self.box_is_free(r) {
            return config_err("start region overlaps a wall");
        }
        if let Some(g) = self.goal_positions.iter().find(|g| !self.is_free(**g)) {
            return config_err(format!("goal {g:?} is not in free space"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }

    pub fn is_wall_cell(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return true;
        }
        self.walls[row as usize * self.cols + col as usize]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> (isize, isize) {
        (
            (p[1] / self.cell_size).floor() as isize,
            (p[0] / self.cell_size).floor() as isize,
        )
    }

    pub fn is_free(&self, p: [f64; 2]) -> bool {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return false;
        }
        let (r, c) = self.cell_of(p);
        !self.is_wall_cell(r, c)
    }

    pub fn cell_center(&self, (row, col): Cell) -> [f64; 2] {
        [
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.walls[r * self.cols + c])
            .collect()
    }

    fn box_is_free(&self, b: &Aabb) -> bool {
        let (r0, c0) = self.cell_of(b.min);
        let (r1, c1) = self.cell_of(b.max);
        (r0..=r1).all(|r| (c0..=c1).all(|c| !self.is_wall_cell(r, c)))
    }

    /// Moves `from` by `d`, stopping at the first wall face the segment meets.
    pub fn cast(&self, from: [f64; 2], d: [f64; 2]) -> [f64; 2] {
        let cs = self.cell_size;
        let (mut row, mut col) = self.cell_of(from);
        let axis = |p: f64, v: f64, cell: isize| -> (f64, f64) {
            if v > 0.0 {
                (((cell + 1) as f64 * cs - p) / v, cs / v)
            } else if v < 0.0 {
                ((cell as f64 * cs - p) / v, -cs / v)
            } else {
                (f64::INFINITY, f64::INFINITY)
            }
        };
        let (mut tx, dtx) = axis(from[0], d[0], col);
        let (mut ty, dty) = axis(from[1], d[1], row);
        let sx = d[0].signum() as isize;
        let sy = d[1].signum() as isize;

        loop {
            let t = tx.min(ty);
            if t > 1.0 {
                return [from[0] + d[0], from[1] + d[1]];
            }
            let cross_x = tx <= ty;
            let cross_y = ty <= tx;
            let blocked = match (cross_x, cross_y) {
                (true, true) => {
                    self.is_wall_cell(row, col + sx)
                        || self.is_wall_cell(row + sy, col)
                        || self.is_wall_cell(row + sy, col + sx)
                }
                (true, false) => self.is_wall_cell(row, col + sx),
                _ => self.is_wall_cell(row + sy, col),
            };
            if blocked {
                let stop = [from[0] + t * d[0], from[1] + t * d[1]];
                return self.clamp_into_cell(stop, row, col);
            }
            if cross_x {
                col += sx;
                tx += dtx;
            }
            if cross_y {
                row += sy;
                ty += dty;
            }
        }
    }

    fn clamp_into_cell(&self, p: [f64; 2], row: isize, col: isize) -> [f64; 2] {
        let cs = self.cell_size;
        let lo_x = col as f64 * cs + WALL_MARGIN;
        let lo_y = row as f64 * cs + WALL_MARGIN;
        [
            p[0].clamp(lo_x, lo_x + cs - 2.0 * WALL_MARGIN),
            p[1].clamp(lo_y, lo_y + cs - 2.0 * WALL_MARGIN),
        ]
    }
}

/// Uniform sample from the start region.
pub fn reset<R: Rng + ?Sized>(spec: &MazeSpec, rng: &mut R) -> Result<MazeState> {
    let r = &spec.start_region;
    if r.max[0] < r.min[0] || r.max[1] < r.min[1] {
        return config_err("start region is empty");
    }
    let mut coord = |i: usize| {
        if r.max[i] > r.min[i] {
            rng.random_range(r.min[i]..r.max[i])
        } else {
            r.min[i]
        }
    };
    let x = coord(0);
    let y = coord(1);
    Ok(MazeState::at(x, y))
}

pub fn reset_seeded(spec: &MazeSpec, seed: u64) -> Result<MazeState> {
    reset(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniform action from the action box.
pub fn random_action<R: Rng + ?Sized>(spec: &MazeSpec, rng: &mut R) -> MazeAction {
    let m = spec.action_max;
    MazeAction::new(rng.random_range(-m..=m), rng.random_range(-m..=m))
}

/// The displacement the environment actually applies. Draws from `rng` only
/// when the random-action probability is positive.
pub fn executed_action<R: Rng + ?Sized>(
    spec: &MazeSpec,
    action: MazeAction,
    stoch: StochasticityConfig,
    rng: &mut R,
) -> MazeAction {
    let p = stoch.random_action_prob;
    if p > 0.0 && rng.random::<f64>() < p {
        random_action(spec, rng)
    } else {
        action.clipped(spec.action_max)
    }
}

pub fn step<R: Rng + ?Sized>(
    spec: &MazeSpec,
    state: MazeState,
    action: MazeAction,
    stoch: StochasticityConfig,
    rng: &mut R,
) -> MazeState {
    let exec = executed_action(spec, action, stoch, rng);
    let mut p = state.position;
    for _ in 0..spec.action_repeat {
        p = spec.cast(p, exec.displacement);
    }
    MazeState { position: p }
}

pub fn step_seeded(
    spec: &MazeSpec,
    state: MazeState,
    action: MazeAction,
    stoch: StochasticityConfig,
    seed: u64,
) -> MazeState {
    step(spec, state, action, stoch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Closed-ball success test.
pub fn is_goal_reached(spec: &MazeSpec, state: MazeState, goal: [f64; 2]) -> bool {
    distance(state.position, goal) <= spec.success_radius
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
