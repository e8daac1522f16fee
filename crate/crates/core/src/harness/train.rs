use std::path::Path;

use log::info;
use rand::Rng;

use super::RunConfig;
use crate::controller::{csv_err, stream_rng, Models};
use crate::dataset::{sample_gcil_batch, sample_milestone_batch, OfflineDataset};
use crate::diffusion::{draw_noise, milestone_loss, Denoiser, DenoiserConfig, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gcil::{ActorLossConfig, GcilConfig, GcilModel};
use crate::maze::MazeSpec;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState};
use crate::scalar::Scalar;

/// Loss curves are written at this step cadence.
pub const LOG_EVERY: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub critic: f64,
    pub actor: f64,
    pub diffusion: f64,
    /// `critic + actor + alpha * diffusion`.
    pub total: f64,
    pub saturated: usize,
    pub lambda: f64,
}

pub struct TrainOutput<S> {
    pub models: Models<S>,
    pub log: Vec<LossRow>,
}

pub fn build_models<S: Scalar, R: Rng + ?Sized>(
    cfg: &RunConfig,
    maze: &MazeSpec,
    rng: &mut R,
) -> Result<Models<S>> {
    cfg.validate()?;
    let gcfg = GcilConfig {
        latent_dim: cfg.latent_dim,
        hidden: vec![cfg.hidden_width; cfg.hidden_layers],
        activation: Activation::Relu,
    };
    let gcil = GcilModel::new(&gcfg, maze, rng)?;
    let mut dcfg = DenoiserConfig::new(cfg.k, gcil.goal_dim(), cfg.interval_max);
    dcfg.hidden = vec![cfg.denoiser_width; cfg.denoiser_layers];
    let schedule = DiffusionSchedule::new(cfg.diffusion_steps, cfg.schedule)?;
    let mut denoiser = Denoiser::new(&dcfg, rng)?;
    if cfg.denoiser_skip {
        denoiser = denoiser.with_skip(&schedule);
    }
    Ok(Models {
        gcil,
        denoiser,
        schedule,
    })
}

/// `J_actor + J_critic + alpha * J_diffusion`, one Adam step per network per
/// training step. Deterministic given `cfg.seed`.
pub fn train_unified<S: Scalar>(
    cfg: &RunConfig,
    maze: &MazeSpec,
    dataset: &OfflineDataset,
) -> Result<TrainOutput<S>> {
    let mut init_rng = stream_rng(cfg.seed, 0);
    let models = build_models(cfg, maze, &mut init_rng)?;
    train_from(cfg, dataset, models)
}

pub fn train_from<S: Scalar>(
    cfg: &RunConfig,
    dataset: &OfflineDataset,
    mut models: Models<S>,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 1);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut gcil_states: Vec<AdamState<S>> = models
        .gcil
        .networks()
        .iter()
        .map(|(_, n)| AdamState::new(&n.params, adam))
        .collect();
    let mut den_state = AdamState::new(&models.denoiser.net.params, adam);
    let actor_cfg = ActorLossConfig {
        lambda_tilde: cfg.lambda_tilde,
        adaptive: true,
    };
    let alpha = S::of(cfg.alpha);
    let width = models.denoiser.interior_width();
    let mut log = Vec::new();
    let mut ema = cfg.ema_decay.map(|d| (S::of(d), models.clone()));

    for step in 0..cfg.train_steps {
        let batch = sample_gcil_batch(dataset, cfg.batch_size, cfg.positive_horizon(), &mut rng)?;
        let (critic, mut grads) = models.gcil.critic_loss(&batch)?;
        let (actor, actor_grads) = models.gcil.actor_loss(&batch, actor_cfg)?;
        grads.add_scaled(&actor_grads, S::one());

        let samples = sample_milestone_batch(dataset, cfg.milestone_batch_size, cfg.k, cfg.interval_max, &mut rng)?;
        let intervals: Vec<usize> = samples.iter().map(|s| s.interval).collect();
        let draw = draw_noise(&models.schedule, &intervals, width, cfg.condition_dropout, &mut rng);
        let (diffusion, dgrads) = milestone_loss(&models.gcil, &models.denoiser, &models.schedule, &samples, &draw)?;
        grads.encoder_actor.add_scaled(&dgrads.encoder_actor, alpha);
        grads.encoder_critic.add_scaled(&dgrads.encoder_critic, alpha);
        let mut den_grad = dgrads.denoiser;
        den_grad.scale(alpha);

        let total = critic.loss + actor.loss + alpha * diffusion;
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!(
                    "non-finite loss: critic {} actor {} diffusion {}",
                    critic.loss, actor.loss, diffusion
                ),
            });
        }
        if step % LOG_EVERY == 0 {
            let row = LossRow {
                step,
                critic: critic.loss.widen(),
                actor: actor.loss.widen(),
                diffusion: diffusion.widen(),
                total: total.widen(),
                saturated: critic.saturated + actor.saturated,
                lambda: actor.lambda.widen(),
            };
            info!(
                "step {step}: critic {:.4} actor {:.4} diffusion {:.4}",
                row.critic, row.actor, row.diffusion
            );
            log.push(row);
        }

        let parts = grads.parts();
        for ((net, g), st) in models.gcil.networks_mut().into_iter().zip(parts).zip(gcil_states.iter_mut()) {
            adam_step(&mut net.params, g, st).map_err(|e| Error::Training {
                step,
                msg: e.to_string(),
            })?;
        }
        adam_step(&mut models.denoiser.net.params, &den_grad, &mut den_state).map_err(|e| Error::Training {
            step,
            msg: e.to_string(),
        })?;
        if let Some((decay, avg)) = ema.as_mut() {
            let keep = S::one() - *decay;
            for (a, n) in avg.gcil.networks_mut().into_iter().zip(models.gcil.networks()) {
                a.params.scale(*decay);
                a.params.add_scaled(&n.1.params, keep);
            }
            avg.denoiser.net.params.scale(*decay);
            avg.denoiser.net.params.add_scaled(&models.denoiser.net.params, keep);
        }
    }
    let models = ema.map_or(models, |(_, avg)| avg);
    Ok(TrainOutput { models, log })
}

pub fn write_loss_log(rows: &[LossRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "critic", "actor", "diffusion", "total", "saturated", "lambda"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.critic.to_string(),
            r.actor.to_string(),
            r.diffusion.to_string(),
            r.total.to_string(),
            r.saturated.to_string(),
            r.lambda.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{builtin_layout, collect_dataset, CollectConfig, GoalSampler, StartSampler};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            latent_dim: 2,
            hidden_width: 8,
            denoiser_width: 8,
            denoiser_layers: 2,
            k: 2,
            interval_max: 3,
            interval_target: 2,
            diffusion_steps: 6,
            batch_size: 8,
            milestone_batch_size: 4,
            train_steps: 201,
            ..RunConfig::default()
        }
    }

    fn data(maze: &MazeSpec) -> OfflineDataset {
        let mut c = CollectConfig::new(20);
        c.starts = StartSampler::AnyFree;
        c.goals = GoalSampler::AnyFree;
        collect_dataset(maze, &c, &mut stream_rng(0, 0)).unwrap()
    }

    #[test]
    fn logged_total_is_sum_of_components() {
        let maze = builtin_layout("umaze").unwrap();
        let ds = data(&maze);
        let out = train_unified::<f64>(&tiny_cfg(), &maze, &ds).unwrap();
        assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 100, 200]);
        let r = &out.log[0];
        assert!(r.total.is_finite());
        assert_eq!(r.total, r.critic + r.actor + 0.001 * r.diffusion);
    }

    #[test]
    fn zero_alpha_leaves_denoiser_untouched() {
        let maze = builtin_layout("umaze").unwrap();
        let ds = data(&maze);
        let cfg = RunConfig {
            alpha: 0.0,
            train_steps: 20,
            ..tiny_cfg()
        };
        let init = build_models::<f64, _>(&cfg, &maze, &mut stream_rng(cfg.seed, 0)).unwrap();
        let out = train_unified::<f64>(&cfg, &maze, &ds).unwrap();
        assert_eq!(out.models.denoiser, init.denoiser);
        assert_ne!(out.models.gcil, init.gcil);
    }

    #[test]
    fn zero_ema_decay_keeps_the_last_weights() {
        let maze = builtin_layout("umaze").unwrap();
        let ds = data(&maze);
        let cfg = RunConfig {
            train_steps: 10,
            ..tiny_cfg()
        };
        let raw = train_unified::<f64>(&cfg, &maze, &ds).unwrap();
        let zero = train_unified::<f64>(&RunConfig { ema_decay: Some(0.0), ..cfg.clone() }, &maze, &ds).unwrap();
        assert_eq!(raw.models, zero.models);
        let avg = train_unified::<f64>(&RunConfig { ema_decay: Some(0.9), ..cfg }, &maze, &ds).unwrap();
        assert_ne!(avg.models, raw.models);
        assert_eq!(avg.log, raw.log);
    }

    #[test]
    fn training_is_reproducible() {
        let maze = builtin_layout("umaze").unwrap();
        let ds = data(&maze);
        let cfg = RunConfig {
            train_steps: 30,
            ..tiny_cfg()
        };
        let a = train_unified::<f64>(&cfg, &maze, &ds).unwrap();
        let b = train_unified::<f64>(&cfg, &maze, &ds).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.log, b.log);
    }
}
