use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative schedule with offset `0.008`.
    Cosine,
    /// Linearly spaced betas scaled as for a 1000-step reference chain.
    Linear,
    Constant(f64),
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(b)) => Ok(Self::Constant(b)),
                _ => config_err(format!("unknown schedule {other:?}")),
            },
        }
    }
}

/// Betas `beta_0..=beta_N` and `alpha_bar_n = prod_{m <= n} (1 - beta_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return config_err("diffusion needs at least one step");
        }
        let beta = match kind {
            ScheduleKind::Cosine => {
                let f = |n: usize| {
                    let t = (n as f64 / (steps + 1) as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (0..=steps).map(|n| (1.0 - f(n + 1) / f(n)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / (steps + 1) as f64;
                let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
                (0..=steps)
                    .map(|n| lo + (hi - lo) * n as f64 / steps as f64)
                    .collect()
            }
            ScheduleKind::Constant(b) => vec![b; steps + 1],
        };
        Self::from_betas(beta)
    }

    /// `betas` holds `N + 1` values, `beta_0` first.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return config_err("schedule needs beta_0 and at least one step");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return config_err(format!("beta {b} outside (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0)) {
            return config_err("alpha_bar underflowed to zero");
        }
        Ok(Self { beta, alpha_bar })
    }

    /// `N`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}
