//! Exact optimal critic of a small gridworld, and a sampled-batch critic
//! trained against it.

use ndarray::Array2;
use rand::Rng;

use crate::controller::stream_rng;
use crate::error::{config_err, Result};
use crate::gcil::bce_term;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Mlp, NetSpec, OutputTransform};

/// Up, down, left, right as `(d_row, d_col)`.
pub const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub const MAX_TABULAR_STATES: usize = 100;

/// Gridworld where a move into a wall or off the grid leaves the state unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub rows: usize,
    pub cols: usize,
    pub walls: Vec<bool>,
    /// Behavior policy, one distribution over `MOVES` per cell.
    pub policy: Vec<[f64; 4]>,
    pub horizon: usize,
}

/// `d_star[(s * 4 + a) * n + g]` and the two densities it is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub num_cells: usize,
    pub occupancy: Vec<f64>,
    pub marginal: Vec<f64>,
    pub d_star: Vec<f64>,
}

impl OracleTable {
    pub fn index(&self, s: usize, a: usize, g: usize) -> usize {
        (s * 4 + a) * self.num_cells + g
    }
}

impl TabularMdp {
    pub fn uniform(rows: usize, cols: usize, horizon: usize) -> Self {
        Self {
            rows,
            cols,
            walls: vec![false; rows * cols],
            policy: vec![[0.25; 4]; rows * cols],
            horizon,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if n == 0 || n > MAX_TABULAR_STATES {
            return config_err(format!("tabular grid must have 1..={MAX_TABULAR_STATES} cells"));
        }
        if self.walls.len() != n || self.policy.len() != n {
            return config_err("walls and policy need one entry per cell");
        }
        if self.horizon == 0 {
            return config_err("horizon must be >= 1");
        }
        for row in &self.policy {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return config_err("behavior policy rows must be distributions");
            }
        }
        if self.free_cells().is_empty() {
            return config_err("grid has no free cell");
        }
        Ok(())
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..self.num_cells()).filter(|&c| !self.walls[c]).collect()
    }

    pub fn next(&self, s: usize, a: usize) -> usize {
        let (r, c) = ((s / self.cols) as isize, (s % self.cols) as isize);
        let (nr, nc) = (r + MOVES[a].0, c + MOVES[a].1);
        if nr < 0 || nc < 0 || nr >= self.rows as isize || nc >= self.cols as isize {
            return s;
        }
        let t = nr as usize * self.cols + nc as usize;
        if self.walls[t] {
            s
        } else {
            t
        }
    }

    fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; dist.len()];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for a in 0..4 {
                out[self.next(s, a)] += p * self.policy[s][a];
            }
        }
        out
    }

    /// `p(g | s, a) = (1/T) sum_{t=1..T} P(s_t = g | s_0 = s, a_0 = a)` by
    /// forward enumeration, `p(g)` uniform over free cells (the negative
    /// sampler), and `D* = p / (p + q)`.
    pub fn optimal_critic(&self) -> Result<OracleTable> {
        self.validate()?;
        let n = self.num_cells();
        let free = self.free_cells();
        let mut marginal = vec![0.0; n];
        for &c in &free {
            marginal[c] = 1.0 / free.len() as f64;
        }
        let mut occupancy = vec![0.0; n * 4 * n];
        let inv_t = 1.0 / self.horizon as f64;
        for &s in &free {
            for a in 0..4 {
                let mut dist = vec![0.0; n];
                dist[self.next(s, a)] = 1.0;
                let base = (s * 4 + a) * n;
                for t in 1..=self.horizon {
                    for g in 0..n {
                        occupancy[base + g] += dist[g] * inv_t;
                    }
                    if t < self.horizon {
                        dist = self.propagate(&dist);
                    }
                }
            }
        }
        let d_star = (0..n * 4 * n)
            .map(|i| {
                let (p, q) = (occupancy[i], marginal[i % n]);
                if p + q > 0.0 {
                    p / (p + q)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(OracleTable {
            num_cells: n,
            occupancy,
            marginal,
            d_star,
        })
    }

    fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for a in 0..4 {
            acc += self.policy[s][a];
            if u < acc {
                return a;
            }
        }
        3
    }

    /// `(s, a, s+, s-)` with `s` uniform over free cells, `a` from the
    /// policy, `s+` after a uniform `1..=T` steps, `s-` uniform over free cells.
    pub fn sample<R: Rng + ?Sized>(&self, free: &[usize], rng: &mut R) -> (usize, usize, usize, usize) {
        let s = free[rng.random_range(0..free.len())];
        let a = self.sample_action(s, rng);
        let t = rng.random_range(1..=self.horizon);
        let mut cur = self.next(s, a);
        for _ in 1..t {
            let b = self.sample_action(cur, rng);
            cur = self.next(cur, b);
        }
        let neg = free[rng.random_range(0..free.len())];
        (s, a, cur, neg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Learning rate is divided by 10 for the last `anneal_frac` of the steps.
    pub anneal_frac: f64,
    pub seed: u64,
}

impl Default for TabularTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 512,
            hidden: vec![256, 256],
            learning_rate: 1e-3,
            anneal_frac: 0.25,
            seed: 0,
        }
    }
}

fn one_hot_rows(mdp: &TabularMdp, rows: &[(usize, usize, usize)]) -> Array2<f64> {
    let n = mdp.num_cells();
    let mut x = Array2::zeros((rows.len(), 2 * n + 4));
    for (i, &(s, a, g)) in rows.iter().enumerate() {
        x[[i, s]] = 1.0;
        x[[i, n + a]] = 1.0;
        x[[i, n + 4 + g]] = 1.0;
    }
    x
}

pub struct TabularCritic {
    pub net: Mlp<f64>,
    /// Predictions in [`OracleTable`] layout; zero for wall cells.
    pub table: Vec<f64>,
}

/// Cross-entropy training of a one-hot critic on sampled batches.
pub fn train_tabular_critic(mdp: &TabularMdp, cfg: &TabularTrainConfig) -> Result<TabularCritic> {
    mdp.validate()?;
    let n = mdp.num_cells();
    let mut rng = stream_rng(cfg.seed, 0);
    let spec = NetSpec::new(2 * n + 4, &cfg.hidden, 1)
        .with_activation(Activation::Relu)
        .with_output(OutputTransform::Sigmoid);
    let mut net: Mlp<f64> = Mlp::init(spec, &mut rng)?;
    let mut adam = AdamState::new(&net.params, AdamConfig::with_lr(cfg.learning_rate));
    let anneal_at = ((1.0 - cfg.anneal_frac) * cfg.steps as f64) as usize;
    let free = mdp.free_cells();
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        if step == anneal_at {
            adam.config.learning_rate = cfg.learning_rate / 10.0;
        }
        let mut rows = Vec::with_capacity(2 * b);
        let mut negs = Vec::with_capacity(b);
        for _ in 0..b {
            let (s, a, pos, neg) = mdp.sample(&free, &mut rng);
            rows.push((s, a, pos));
            negs.push((s, a, neg));
        }
        rows.extend(negs);
        let x = one_hot_rows(mdp, &rows);
        let cache = net.forward_cached(x.view())?;
        let mut dp = Array2::zeros((2 * b, 1));
        let inv = 1.0 / b as f64;
        for r in 0..2 * b {
            let (_, g, _) = bce_term(cache.output()[[r, 0]], r < b);
            dp[[r, 0]] = g * inv;
        }
        let (grads, _) = net.backward(&cache, dp.view())?;
        adam_step(&mut net.params, &grads, &mut adam)?;
    }
    let mut queries = Vec::new();
    for s in 0..n {
        for a in 0..4 {
            for g in 0..n {
                queries.push((s, a, g));
            }
        }
    }
    let pred = net.forward(one_hot_rows(mdp, &queries).view())?;
    let table = queries
        .iter()
        .enumerate()
        .map(|(i, &(s, _, g))| if mdp.walls[s] || mdp.walls[g] { 0.0 } else { pred[[i, 0]] })
        .collect();
    Ok(TabularCritic { net, table })
}

/// Mean absolute error over all `(s, a, g)` with free `s` and `g`.
pub fn critic_mae(mdp: &TabularMdp, oracle: &OracleTable, table: &[f64]) -> f64 {
    let free = mdp.free_cells();
    let mut sum = 0.0;
    let mut count = 0;
    for &s in &free {
        for a in 0..4 {
            for &g in &free {
                let i = oracle.index(s, a, g);
                sum += (oracle.d_star[i] - table[i]).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}
