use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{SamplerKind, ScheduleKind};
use crate::error::{config_err, Error, Result};

/// Every knob of a collect/train/evaluate run.
///
/// Text form: one `key = value` per line, `#` starts a comment. Unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layout: String,
    pub dataset: Option<String>,
    pub checkpoint: Option<String>,

    pub episodes: usize,
    /// Random intermediate waypoints per collected episode, upper bound.
    pub collect_detours: usize,
    pub collect_p: f64,

    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub denoiser_width: usize,
    pub denoiser_layers: usize,
    /// Add `sqrt(1 - ab_n) * x` to the noise prediction.
    pub denoiser_skip: bool,

    pub k: usize,
    pub interval_max: usize,
    pub interval_target: usize,
    pub guidance_weight: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub sampler: SamplerKind,
    /// Bound on the clean estimate during sampling; `none` disables it.
    pub clip_denoised: Option<f64>,
    pub condition_dropout: f64,

    pub lambda_tilde: f64,
    pub delta: f64,
    /// Defaults to `2 * interval_target` when unset.
    pub tau_lim: Option<usize>,
    pub replanning: bool,

    pub alpha: f64,
    pub batch_size: usize,
    pub milestone_batch_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    /// Exponential moving average of all weights; the averaged copy is the
    /// training result.
    pub ema_decay: Option<f64>,
    /// Future window of positive samples; defaults to `2 * interval_max`.
    pub positive_horizon: Option<usize>,

    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub rollouts: usize,
    pub stochastic_p: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layout: "umaze".into(),
            dataset: None,
            checkpoint: None,
            episodes: 400,
            collect_detours: 24,
            collect_p: 0.0,
            latent_dim: 8,
            hidden_width: 128,
            hidden_layers: 2,
            denoiser_width: 256,
            denoiser_layers: 3,
            denoiser_skip: true,
            k: 8,
            interval_max: 8,
            interval_target: 4,
            guidance_weight: 0.5,
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
            sampler: SamplerKind::Ancestral,
            clip_denoised: None,
            condition_dropout: 0.25,
            lambda_tilde: 0.5,
            delta: 0.1,
            tau_lim: None,
            replanning: false,
            alpha: 0.001,
            batch_size: 128,
            milestone_batch_size: 256,
            train_steps: 16_000,
            learning_rate: 3e-4,
            ema_decay: None,
            positive_horizon: None,
            seed: 0,
            eval_seeds: vec![0],
            rollouts: 100,
            stochastic_p: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => config_err(format!("{key}: expected a boolean, got {v:?}")),
    }
}

fn opt_string(v: &str) -> Option<String> {
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

impl RunConfig {
    pub fn tau_lim(&self) -> usize {
        self.tau_lim.unwrap_or(2 * self.interval_target)
    }

    pub fn positive_horizon(&self) -> usize {
        self.positive_horizon
            .unwrap_or(2 * self.interval_max)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "layout" => self.layout = v.to_string(),
            "dataset" => self.dataset = opt_string(v),
            "checkpoint" => self.checkpoint = opt_string(v),
            "episodes" => self.episodes = parse_num(key, v)?,
            "collect_detours" => self.collect_detours = parse_num(key, v)?,
            "collect_p" => self.collect_p = parse_num(key, v)?,
            "latent_dim" => self.latent_dim = parse_num(key, v)?,
            "hidden_width" => self.hidden_width = parse_num(key, v)?,
            "hidden_layers" => self.hidden_layers = parse_num(key, v)?,
            "denoiser_width" => self.denoiser_width = parse_num(key, v)?,
            "denoiser_layers" => self.denoiser_layers = parse_num(key, v)?,
            "denoiser_skip" => self.denoiser_skip = parse_bool(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "interval_max" => self.interval_max = parse_num(key, v)?,
            "interval_target" => self.interval_target = parse_num(key, v)?,
            "guidance_weight" => self.guidance_weight = parse_num(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse_num(key, v)?,
            "schedule" => self.schedule = ScheduleKind::parse(v)?,
            "sampler" => self.sampler = SamplerKind::parse(v)?,
            "clip_denoised" => {
                self.clip_denoised = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "condition_dropout" => self.condition_dropout = parse_num(key, v)?,
            "lambda_tilde" => self.lambda_tilde = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "tau_lim" => {
                self.tau_lim = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "replanning" => self.replanning = parse_bool(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "milestone_batch_size" => self.milestone_batch_size = parse_num(key, v)?,
            "train_steps" => self.train_steps = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "ema_decay" => self.ema_decay = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "positive_horizon" => {
                self.positive_horizon = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "eval_seeds" => {
                self.eval_seeds = v
                    .split(',')
                    .map(|t| parse_num(key, t.trim()))
                    .collect::<Result<_>>()?
            }
            "rollouts" => self.rollouts = parse_num(key, v)?,
            "stochastic_p" => self.stochastic_p = parse_num(key, v)?,
            other => return config_err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "none".into());
        let auto = |o: Option<usize>| o.map(|v| v.to_string()).unwrap_or_else(|| "auto".into());
        let schedule = match self.schedule {
            ScheduleKind::Cosine => "cosine".to_string(),
            ScheduleKind::Linear => "linear".to_string(),
            ScheduleKind::Constant(b) => format!("constant:{b}"),
        };
        let sampler = match self.sampler {
            SamplerKind::Renoise => "renoise",
            SamplerKind::Ancestral => "ancestral",
        };
        let seeds: Vec<String> = self.eval_seeds.iter().map(u64::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("layout", self.layout.clone()),
            ("dataset", opt(&self.dataset)),
            ("checkpoint", opt(&self.checkpoint)),
            ("episodes", self.episodes.to_string()),
            ("collect_detours", self.collect_detours.to_string()),
            ("collect_p", self.collect_p.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("denoiser_width", self.denoiser_width.to_string()),
            ("denoiser_layers", self.denoiser_layers.to_string()),
            ("denoiser_skip", self.denoiser_skip.to_string()),
            ("k", self.k.to_string()),
            ("interval_max", self.interval_max.to_string()),
            ("interval_target", self.interval_target.to_string()),
            ("guidance_weight", self.guidance_weight.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("schedule", schedule),
            ("sampler", sampler.to_string()),
            (
                "clip_denoised",
                self.clip_denoised.map_or("none".into(), |c| c.to_string()),
            ),
            ("condition_dropout", self.condition_dropout.to_string()),
            ("lambda_tilde", self.lambda_tilde.to_string()),
            ("delta", self.delta.to_string()),
            ("tau_lim", auto(self.tau_lim)),
            ("replanning", self.replanning.to_string()),
            ("alpha", self.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("milestone_batch_size", self.milestone_batch_size.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("ema_decay", self.ema_decay.map_or("none".into(), |c| c.to_string())),
            ("positive_horizon", auto(self.positive_horizon)),
            ("seed", self.seed.to_string()),
            ("eval_seeds", seeds.join(",")),
            ("rollouts", self.rollouts.to_string()),
            ("stochastic_p", self.stochastic_p.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("latent_dim", self.latent_dim),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
            ("denoiser_width", self.denoiser_width),
            ("denoiser_layers", self.denoiser_layers),
            ("k", self.k),
            ("interval_max", self.interval_max),
            ("interval_target", self.interval_target),
            ("diffusion_steps", self.diffusion_steps),
            ("batch_size", self.batch_size),
            ("milestone_batch_size", self.milestone_batch_size),
            ("rollouts", self.rollouts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be >= 1"));
        }
        if self.interval_target > self.interval_max {
            return config_err("interval_target must not exceed interval_max");
        }
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return config_err("guidance_weight must be finite and >= 0");
        }
        for (name, p) in [
            ("collect_p", self.collect_p),
            ("condition_dropout", self.condition_dropout),
            ("stochastic_p", self.stochastic_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.lambda_tilde >= 0.0 && self.lambda_tilde.is_finite()) {
            return config_err("lambda_tilde must be finite and >= 0");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return config_err("delta must be positive");
        }
        if self.tau_lim == Some(0) || self.positive_horizon == Some(0) {
            return config_err("tau_lim and positive_horizon must be >= 1");
        }
        if self.clip_denoised.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return config_err("clip_denoised must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return config_err("alpha must be finite and >= 0");
        }
        if self.ema_decay.is_some_and(|c| !(0.0..1.0).contains(&c)) {
            return config_err("ema_decay must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err("learning_rate must be positive");
        }
        if self.eval_seeds.is_empty() {
            return config_err("eval_seeds must list at least one seed");
        }
        if let ScheduleKind::Constant(b) = self.schedule {
            if !(b > 0.0 && b < 1.0) {
                return config_err("constant schedule beta must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.tau_lim(), 8);
        assert_eq!(cfg.positive_horizon(), 16);
        assert_eq!(cfg.alpha, 0.001);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# desk run\nk = 4 # fewer\n\ntau_lim = 3\neval_seeds = 1, 2\nschedule = linear\n").unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.tau_lim(), 3);
        assert_eq!(cfg.eval_seeds, vec![1, 2]);
        assert_eq!(cfg.schedule, ScheduleKind::Linear);
    }

    #[test]
    fn unknown_and_invalid_rejected() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("k = -1").is_err());
        assert!(RunConfig::parse("interval_target = 9").is_err());
        assert!(RunConfig::parse("delta = 0").is_err());
        assert!(RunConfig::parse("just a line").is_err());
    }
}
