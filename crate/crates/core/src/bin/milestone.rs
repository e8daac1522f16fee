use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use milestone::harness::oracle::{critic_mae, train_tabular_critic, TabularMdp, TabularTrainConfig};
use milestone::harness::{
    collect, evaluate, export_metrics, train_unified, write_loss_log, AblationCondition, Protocol,
    RunConfig,
};
use milestone::error::{Error, Result};
use milestone::maze::load_layout;
use milestone::nn::Checkpoint;
use milestone::{dataset, Models};

#[derive(Parser, Debug)]
#[command(name = "milestone", about = "Latent milestone planning on a 2-D point maze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record waypoint-controller trajectories.
    Collect {
        /// Built-in layout name or layout file path.
        #[arg(long, default_value = "umaze")]
        layout: String,
        #[arg(long, default_value_t = 400)]
        episodes: usize,
        #[arg(long, default_value_t = 0.0)]
        stochastic_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Upper bound on random intermediate waypoints per episode.
        #[arg(long, default_value_t = 24)]
        detours: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the unified training loop.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory: checkpoint.json, config.txt, losses.csv.
        #[arg(long)]
        out: PathBuf,
    },
    Evaluate {
        /// Checkpoint file; a config.txt beside it is used unless --config is given.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// single_goal, multi_goal or stochastic
        #[arg(long, default_value = "single_goal")]
        protocol: String,
        /// Random-action probability for the stochastic protocol.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        layout: Option<String>,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Evaluation seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the requested milestone spacing.
    AblateGuidance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Spacing ratios; `unconditional` disables guidance.
        #[arg(long, value_delimiter = ',', default_value = "0.1,1.0,unconditional")]
        ratios: Vec<String>,
        #[arg(long)]
        layout: Option<String>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a sampled-batch critic with the exact optimal critic of a gridworld.
    OracleCritic {
        /// Grid size as ROWSxCOLS.
        #[arg(long, default_value = "5x5")]
        grid: String,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of s, a, g, optimal, learned.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(config: Option<&Path>, checkpoint: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = config {
        return RunConfig::load(p);
    }
    if let Some(beside) = checkpoint.and_then(|c| c.parent()).map(|d| d.join("config.txt")) {
        if beside.exists() {
            return RunConfig::load(beside);
        }
    }
    Ok(RunConfig::default())
}

fn load_models(path: &Path) -> Result<Models> {
    Models::from_checkpoint(&Checkpoint::load(path)?)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("grid {s:?}: {e}")));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok((parse(r)?, parse(c)?)),
        None => Err(Error::Config(format!("grid {s:?}: expected ROWSxCOLS"))),
    }
}

fn apply_eval_overrides(cfg: &mut RunConfig, layout: Option<String>, rollouts: Option<usize>, seeds: Vec<u64>) {
    if let Some(l) = layout {
        cfg.layout = l;
    }
    if let Some(r) = rollouts {
        cfg.rollouts = r;
    }
    if !seeds.is_empty() {
        cfg.eval_seeds = seeds;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect {
            layout,
            episodes,
            stochastic_p,
            seed,
            detours,
            out,
        } => {
            let cfg = RunConfig {
                layout,
                episodes,
                collect_p: stochastic_p,
                collect_detours: detours,
                seed,
                ..RunConfig::default()
            };
            let maze = load_layout(&cfg.layout)?;
            let ds = collect(&cfg, &maze)?;
            dataset::save(&ds, &out)?;
            println!(
                "{} trajectories, {} transitions -> {}",
                ds.trajectories().len(),
                ds.num_transitions(),
                out.display()
            );
        }
        Command::Train { dataset: dpath, config, out } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            cfg.dataset = Some(dpath.display().to_string());
            cfg.validate()?;
            let maze = load_layout(&cfg.layout)?;
            let ds = dataset::load(&dpath)?;
            let t0 = Instant::now();
            let trained = train_unified::<f64>(&cfg, &maze, &ds)?;
            info!("trained {} steps in {:.1?}", cfg.train_steps, t0.elapsed());
            std::fs::create_dir_all(&out)?;
            let ck = out.join("checkpoint.json");
            trained.models.to_checkpoint().save(&ck)?;
            cfg.checkpoint = Some(ck.display().to_string());
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            write_loss_log(&trained.log, out.join("losses.csv"))?;
            if let Some(last) = trained.log.last() {
                println!(
                    "step {}: critic {:.4} actor {:.4} diffusion {:.4}",
                    last.step, last.critic, last.actor, last.diffusion
                );
            }
            println!("checkpoint -> {}", ck.display());
        }
        Command::Evaluate {
            checkpoint,
            config,
            protocol,
            p,
            layout,
            rollouts,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), Some(&checkpoint))?;
            apply_eval_overrides(&mut cfg, layout, rollouts, seed);
            let protocol = match protocol.as_str() {
                "single_goal" => Protocol::SingleGoal,
                "multi_goal" => Protocol::MultiGoal,
                "stochastic" => Protocol::Stochastic(p.unwrap_or(cfg.stochastic_p)),
                other => return Err(Error::Config(format!("unknown protocol {other:?}"))),
            };
            let models = load_models(&checkpoint)?;
            let maze = load_layout(&cfg.layout)?;
            let rows = evaluate(&maze, &models, &cfg, &protocol)?;
            for r in &rows {
                println!(
                    "{} {} seed {:?}: success {:.3} timesteps {:.1} denoiser calls {:.1}",
                    r.protocol, r.condition, r.seed, r.success_rate, r.mean_timesteps, r.denoiser_calls
                );
            }
            export_metrics(&rows, &out)?;
        }
        Command::AblateGuidance {
            checkpoint,
            config,
            ratios,
            layout,
            rollouts,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), Some(&checkpoint))?;
            apply_eval_overrides(&mut cfg, layout, rollouts, seed);
            let conds = ratios
                .iter()
                .map(|r| match r.as_str() {
                    "unconditional" => Ok(AblationCondition::Unconditional),
                    v => v
                        .parse()
                        .map(AblationCondition::Ratio)
                        .map_err(|e| Error::Config(format!("ratio {v:?}: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let models = load_models(&checkpoint)?;
            let maze = load_layout(&cfg.layout)?;
            let rows = evaluate(&maze, &models, &cfg, &Protocol::GuidanceAblation(conds))?;
            for r in &rows {
                println!(
                    "{} seed {:?}: success {:.3} timesteps {:.1}",
                    r.condition, r.seed, r.success_rate, r.mean_timesteps
                );
            }
            export_metrics(&rows, &out)?;
        }
        Command::OracleCritic {
            grid,
            horizon,
            steps,
            seed,
            out,
        } => {
            let (rows, cols) = parse_grid(&grid)?;
            let mdp = TabularMdp::uniform(rows, cols, horizon);
            let oracle = mdp.optimal_critic()?;
            let cfg = TabularTrainConfig {
                steps,
                seed,
                ..TabularTrainConfig::default()
            };
            let learned = train_tabular_critic(&mdp, &cfg)?;
            let mae = critic_mae(&mdp, &oracle, &learned.table);
            let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Io(e.into()))?;
            let io = |e: csv::Error| Error::Io(e.into());
            w.write_record(["s", "a", "g", "optimal", "learned"]).map_err(io)?;
            for s in mdp.free_cells() {
                for a in 0..4 {
                    for g in mdp.free_cells() {
                        let i = oracle.index(s, a, g);
                        w.write_record([
                            s.to_string(),
                            a.to_string(),
                            g.to_string(),
                            oracle.d_star[i].to_string(),
                            learned.table[i].to_string(),
                        ])
                        .map_err(io)?;
                    }
                }
            }
            w.flush()?;
            println!("critic MAE vs optimal: {mae:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
