//! Acceptance gate. Runs the criteria in sequence (all of them, or the
//! numbers given as arguments), prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use milestone::controller::{
    controller_step, run_episode, start_episode, stream_rng, ControllerConfig, EpisodeSetup, Models,
};
use milestone::dataset::{GcilBatch, MilestoneTrainSample, OfflineDataset};
use milestone::diffusion::{
    denoiser_loss, draw_noise, milestone_loss, plan_milestones, sample_plan, standard_normal, Denoiser,
    DenoiserConfig, DiffusionSchedule, Guidance, SamplerKind, SamplingConfig, ScheduleKind,
};
use milestone::gcil::{ActorLossConfig, GcilConfig, GcilGrads, GcilModel};
use milestone::harness::oracle::{critic_mae, train_tabular_critic, TabularMdp, TabularTrainConfig};
use milestone::harness::{
    collect, controller_config, default_sampling, episode_setups, evaluate, export_metrics, run_open_loop,
    run_planner, train_unified, AblationCondition, MetricsRow, Protocol, RunConfig,
};
use milestone::maze::{builtin_layout, MazeAction, MazeSpec, MazeState, StochasticityConfig};
use milestone::nn::gradcheck::{central_difference, relative_error};
use milestone::nn::{adam_step, Activation, AdamConfig, AdamState, NetParams};
use milestone::CallCounts;

// Tolerances and sizes pinned by the acceptance criteria.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_CONFIGS: usize = 100;
const ORACLE_GRID: usize = 5;
const ORACLE_HORIZON: usize = 20;
const ORACLE_MAE_TOL: f64 = 0.05;
const MIXTURE_STEPS: usize = 100;
const MIXTURE_SAMPLES: usize = 5000;
const MIXTURE_MEAN_TOL: f64 = 0.1;
const MIXTURE_WEIGHT_TOL: f64 = 0.1;
const INPAINT_PLANS: usize = 100;
const UMAZE_SUCCESS_MIN: f64 = 0.9;
const EVAL_ROLLOUTS: usize = 100;
const ABLATION_SUCCESS_SPREAD: f64 = 0.05;
/// Training steps for the open-layout model, sized for the 15 min budget.
const ABLATION_TRAIN_STEPS: usize = 5000;
const STOCHASTIC_P: f64 = 0.5;
const ROBUSTNESS_MARGIN: f64 = 0.30;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn random_state(rng: &mut ChaCha8Rng) -> MazeState {
    MazeState::at(rng.random_range(1.0..4.0), rng.random_range(1.0..4.0))
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize) -> GcilBatch {
    let mut batch = GcilBatch::default();
    for _ in 0..b {
        batch.states.push(random_state(rng));
        batch.positives.push(random_state(rng));
        batch.negatives.push(random_state(rng));
        batch
            .actions
            .push(MazeAction::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)));
        batch.positive_offsets.push(1);
    }
    batch
}

/// Worst relative error over the networks in `trained`; the others must
/// receive exactly zero gradient.
fn gcil_grad_error(
    model: &GcilModel<f64>,
    grads: &GcilGrads<f64>,
    trained: &[usize],
    loss: impl Fn(&GcilModel<f64>) -> f64,
) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (idx, g) in grads.parts().into_iter().enumerate() {
        if !trained.contains(&idx) {
            check(g.sq_norm() == 0.0, format!("network {idx} should be held fixed"))?;
            continue;
        }
        let spec = model.networks()[idx].1.spec.clone();
        let flat = model.networks()[idx].1.params.to_flat();
        let fd = central_difference(
            |x| {
                let mut m = model.clone();
                m.networks_mut()[idx].params = NetParams::from_flat(&spec, x).unwrap();
                loss(&m)
            },
            &flat,
            1e-5,
        );
        worst = worst.max(relative_error(&g.to_flat(), &fd));
    }
    Ok(worst)
}

fn criterion_gradients() -> Outcome {
    let maze = builtin_layout("umaze").unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for cfg_seed in 0..GRAD_CONFIGS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg_seed);
        let d = rng.random_range(1..=3);
        let gcfg = GcilConfig {
            latent_dim: d,
            hidden: vec![rng.random_range(3..=6), rng.random_range(3..=6)],
            activation: Activation::Tanh,
        };
        let model: GcilModel<f64> = ok(GcilModel::new(&gcfg, &maze, &mut rng))?;
        let b = rng.random_range(2..=5);
        let batch = random_batch(&mut rng, b);

        let (_, g) = ok(model.critic_loss(&batch))?;
        let critic_nets: Vec<usize> = std::iter::once(1).chain(3..3 + model.critics.len()).collect();
        worst = worst.max(gcil_grad_error(&model, &g, &critic_nets, |m| {
            m.critic_loss(&batch).unwrap().0.loss
        })?);

        let acfg = ActorLossConfig {
            lambda_tilde: rng.random_range(0.5..3.0),
            adaptive: false,
        };
        let (_, g) = ok(model.actor_loss(&batch, acfg))?;
        worst = worst.max(gcil_grad_error(&model, &g, &[0, 2], |m| m.actor_loss(&batch, acfg).unwrap().0.loss)?);

        let k = rng.random_range(1..=3);
        let interval_max = 3;
        let mut dcfg = DenoiserConfig::new(k, model.goal_dim(), interval_max);
        dcfg.hidden = vec![rng.random_range(4..=8); 2];
        dcfg.time_dim = 4;
        // Smooth activations keep central differences away from kinks.
        dcfg.activation = Activation::Tanh;
        let sch = ok(DiffusionSchedule::new(10, ScheduleKind::Cosine))?;
        let mut den: Denoiser<f64> = ok(Denoiser::new(&dcfg, &mut rng))?;
        if cfg_seed % 2 == 0 {
            den = den.with_skip(&sch);
        }
        let samples: Vec<MilestoneTrainSample> = (0..b)
            .map(|_| MilestoneTrainSample {
                anchors: (0..k + 2).map(|_| random_state(&mut rng)).collect(),
                interval: rng.random_range(1..=interval_max),
                trajectory: 0,
                start: 0,
            })
            .collect();
        let intervals: Vec<usize> = samples.iter().map(|s| s.interval).collect();
        let draw = draw_noise(&sch, &intervals, den.interior_width(), 0.25, &mut rng);
        let (_, mg) = ok(milestone_loss(&model, &den, &sch, &samples, &draw))?;
        let fd = central_difference(
            |x| {
                let mut d2 = den.clone();
                d2.net.params = NetParams::from_flat(&d2.net.spec, x).unwrap();
                milestone_loss(&model, &d2, &sch, &samples, &draw).unwrap().0
            },
            &den.net.params.to_flat(),
            1e-5,
        );
        worst = worst.max(relative_error(&mg.denoiser.to_flat(), &fd));
        for (idx, grad) in [(0usize, &mg.encoder_actor), (1, &mg.encoder_critic)] {
            let spec = model.networks()[idx].1.spec.clone();
            let fd = central_difference(
                |x| {
                    let mut m = model.clone();
                    m.networks_mut()[idx].params = NetParams::from_flat(&spec, x).unwrap();
                    milestone_loss(&m, &den, &sch, &samples, &draw).unwrap().0
                },
                &model.networks()[idx].1.params.to_flat(),
                1e-5,
            );
            worst = worst.max(relative_error(&grad.to_flat(), &fd));
        }
        checked += 1;
    }
    check(worst <= GRAD_REL_TOL, format!("worst relative error {worst:.3e}"))?;
    Ok(format!("{checked} configurations, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn criterion_oracle() -> Outcome {
    let mdp = TabularMdp::uniform(ORACLE_GRID, ORACLE_GRID, ORACLE_HORIZON);
    let oracle = ok(mdp.optimal_critic())?;
    let n = mdp.num_cells();
    for s in 0..n {
        for a in 0..4 {
            for g in 0..n {
                let i = oracle.index(s, a, g);
                let (p, q, d) = (oracle.occupancy[i], oracle.marginal[g], oracle.d_star[i]);
                check(d == p / (p + q), format!("D* differs from p/(p+q) at {s},{a},{g}"))?;
            }
        }
    }
    let learned = ok(train_tabular_critic(&mdp, &TabularTrainConfig::default()))?;
    let mae = critic_mae(&mdp, &oracle, &learned.table);
    check(mae <= ORACLE_MAE_TOL, format!("critic MAE {mae:.4}"))?;
    Ok(format!("MAE {mae:.4}"))
}

// ---------------------------------------------------------------- 3

const MIX_WEIGHTS: [f64; 2] = [0.3, 0.7];
const MIX_MEANS: [[f64; 2]; 2] = [[-1.0, 0.5], [1.0, -0.5]];
const MIX_STD: f64 = 0.15;

fn mixture_draw(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let z = standard_normal::<f64, _>(n, 2, rng);
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let c = if (i as f64 + 0.5) / n as f64 > MIX_WEIGHTS[0] { 1 } else { 0 };
        MIX_MEANS[c][j] + MIX_STD * z[[i, j]]
    })
}

fn train_mixture_denoiser() -> Result<(Denoiser<f64>, DiffusionSchedule), String> {
    let sch = ok(DiffusionSchedule::new(MIXTURE_STEPS, ScheduleKind::Cosine))?;
    let mut cfg = DenoiserConfig::new(1, 2, 1);
    cfg.hidden = vec![128, 128, 128];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut den: Denoiser<f64> = ok(Denoiser::new(&cfg, &mut rng))?;
    let mut adam = AdamState::new(&den.net.params, AdamConfig::with_lr(1e-3));
    let b = 256;
    let ctx = Array2::zeros((b, 4));
    for step in 0..6000 {
        if step == 4500 {
            adam.config.learning_rate = 1e-4;
        }
        let clean = mixture_draw(&mut rng, b);
        let draw = draw_noise(&sch, &vec![1; b], 2, 1.0, &mut rng);
        let (_, g) = ok(denoiser_loss(&den, &sch, clean.view(), ctx.view(), &draw))?;
        ok(adam_step(&mut den.net.params, &g.denoiser, &mut adam))?;
    }
    Ok((den, sch))
}

/// Mode weights and means of `MIXTURE_SAMPLES` samples, by nearest true mean.
fn mixture_stats(den: &Denoiser<f64>, sch: &DiffusionSchedule, sampler: SamplerKind) -> ([f64; 2], [[f64; 2]; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let zero = Array1::zeros(2);
    let cfg = SamplingConfig {
        guidance: Guidance::Unconditional,
        sampler,
        clip: None,
    };
    let mut count = [0usize; 2];
    let mut sum = [[0.0; 2]; 2];
    let mut calls = CallCounts::default();
    for _ in 0..MIXTURE_SAMPLES {
        let plan = sample_plan(den, sch, zero.view(), zero.view(), cfg, &mut rng, &mut calls, None).unwrap();
        let x = plan.row(1);
        let dist = |m: [f64; 2]| (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
        let c = if dist(MIX_MEANS[0]) <= dist(MIX_MEANS[1]) { 0 } else { 1 };
        count[c] += 1;
        sum[c][0] += x[0];
        sum[c][1] += x[1];
    }
    let weights = count.map(|c| c as f64 / MIXTURE_SAMPLES as f64);
    let means = [0, 1].map(|c| sum[c].map(|v| v / count[c].max(1) as f64));
    (weights, means)
}

fn criterion_mixture() -> Outcome {
    let (den, sch) = train_mixture_denoiser()?;
    let mut report = Vec::new();
    let mut failures = Vec::new();
    for sampler in [SamplerKind::Ancestral, SamplerKind::Renoise] {
        let (w, m) = mixture_stats(&den, &sch, sampler);
        let werr = (0..2).map(|c| (w[c] - MIX_WEIGHTS[c]).abs()).fold(0.0, f64::max);
        let merr = (0..2)
            .map(|c| ((m[c][0] - MIX_MEANS[c][0]).powi(2) + (m[c][1] - MIX_MEANS[c][1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        let line = format!("{sampler:?}: weights {:.3}/{:.3}, weight err {werr:.3}, mean err {merr:.3}", w[0], w[1]);
        if werr > MIXTURE_WEIGHT_TOL || merr > MIXTURE_MEAN_TOL {
            failures.push(line.clone());
        }
        report.push(line);
    }
    check(failures.is_empty(), failures.join("; "))?;
    Ok(report.join("; "))
}

// ---------------------------------------------------------------- 4, 5, 9

fn small_models(seed: u64, steps: usize) -> Models<f64> {
    let maze = builtin_layout("umaze").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gcfg = GcilConfig {
        latent_dim: 3,
        hidden: vec![16, 16],
        activation: Activation::Relu,
    };
    let gcil = GcilModel::new(&gcfg, &maze, &mut rng).unwrap();
    let mut dcfg = DenoiserConfig::new(4, gcil.goal_dim(), 4);
    dcfg.hidden = vec![32, 32];
    let denoiser = Denoiser::new(&dcfg, &mut rng).unwrap();
    Models {
        gcil,
        denoiser,
        schedule: DiffusionSchedule::new(steps, ScheduleKind::Cosine).unwrap(),
    }
}

fn criterion_inpainting() -> Outcome {
    let m = small_models(5, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut observed = 0usize;
    for plan_idx in 0..INPAINT_PLANS {
        let (s0, sg) = (random_state(&mut rng), random_state(&mut rng));
        let ends = ok(m.gcil.encode(&[s0, sg]))?;
        let sampler = if plan_idx % 2 == 0 { SamplerKind::Ancestral } else { SamplerKind::Renoise };
        let cfg = SamplingConfig {
            guidance: Guidance::Guided {
                target: 1 + plan_idx % 4,
                weight: rng.random_range(0.0..1.0),
            },
            sampler,
            clip: None,
        };
        let k = m.denoiser.k;
        let mut bad = None;
        let mut steps = 0;
        let mut obs = |n: usize, rows: &Array2<f64>| {
            steps += 1;
            if rows.row(0) != ends.row(0) || rows.row(k + 1) != ends.row(1) {
                bad.get_or_insert(n);
            }
        };
        let mut calls = CallCounts::default();
        ok(plan_milestones(
            &m.gcil,
            &m.denoiser,
            &m.schedule,
            s0,
            sg,
            cfg,
            &mut stream_rng(plan_idx as u64, 1),
            &mut calls,
            Some(&mut obs),
        ))?;
        check(bad.is_none(), format!("plan {plan_idx}: endpoint drift after step {bad:?}"))?;
        check(steps == m.schedule.steps(), format!("plan {plan_idx}: observed {steps} steps"))?;
        observed += steps;
    }
    Ok(format!("{INPAINT_PLANS} plans, {observed} denoise steps, endpoints bit-exact"))
}

fn chain(m: &Models<f64>, g: Guidance, seed: u64) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    let mut obs = |_: usize, rows: &Array2<f64>| out.push(rows.clone());
    let cfg = SamplingConfig {
        guidance: g,
        sampler: SamplerKind::Ancestral,
        clip: None,
    };
    plan_milestones(
        &m.gcil,
        &m.denoiser,
        &m.schedule,
        MazeState::at(1.5, 1.5),
        MazeState::at(1.5, 3.5),
        cfg,
        &mut stream_rng(seed, 1),
        &mut CallCounts::default(),
        Some(&mut obs),
    )
    .unwrap();
    out
}

fn criterion_guidance_degeneracy() -> Outcome {
    let m = small_models(8, 50);
    for seed in 0..5 {
        for target in 1..=m.denoiser.interval_max {
            let uncond = chain(&m, Guidance::Unconditional, seed);
            let cond = chain(&m, Guidance::Conditional(target), seed);
            check(uncond != cond, "conditional and unconditional chains coincide")?;
            check(
                chain(&m, Guidance::Guided { target, weight: 0.0 }, seed) == uncond,
                format!("beta = 0 differs from unconditional (seed {seed}, target {target})"),
            )?;
            check(
                chain(&m, Guidance::Guided { target, weight: 1.0 }, seed) == cond,
                format!("beta = 1 differs from conditional (seed {seed}, target {target})"),
            )?;
        }
    }
    Ok("beta = 0 and beta = 1 chains bit-identical over 5 seeds x 4 targets".into())
}

fn criterion_inference_cost() -> Outcome {
    let m = small_models(9, 100);
    let maze = builtin_layout("umaze").unwrap();
    let ctrl = ControllerConfig {
        delta: 0.1,
        tau_lim: 8,
        replanning: false,
    };
    let sampling = SamplingConfig {
        guidance: Guidance::Guided { target: 2, weight: 0.5 },
        sampler: SamplerKind::Ancestral,
        clip: None,
    };
    // Episode lengths range from immediate success to the step cap.
    let goal = maze.goal_positions[0];
    let starts = [MazeState { position: goal }, MazeState::at(1.4, 1.4), MazeState::at(3.5, 2.5)];
    let mut lengths = Vec::new();
    for (i, &start) in starts.iter().enumerate() {
        let r = ok(run_episode(
            &maze,
            &m,
            &ctrl,
            sampling,
            EpisodeSetup {
                start,
                goal,
                stoch: StochasticityConfig::deterministic(),
                seed: i as u64,
            },
        ))?;
        check(
            r.calls.denoiser == m.schedule.steps(),
            format!("episode of {} steps used {} denoiser calls", r.timesteps, r.calls.denoiser),
        )?;
        check(r.calls.critic == 0, "critic evaluated during an episode")?;
        lengths.push(r.timesteps);
    }
    check(lengths.iter().any(|&t| t == 0) && lengths.iter().any(|&t| t > 50), format!("lengths {lengths:?}"))?;

    let mut rng = stream_rng(3, 1);
    let mut calls = CallCounts::default();
    let goal_state = MazeState { position: goal };
    let mut st = ok(start_episode(&m, starts[1], goal_state, sampling, &mut rng, &mut calls))?;
    let mut s = starts[1];
    for _ in 0..40 {
        let before = calls;
        ok(controller_step(&mut st, s, &m, &ctrl, sampling, &mut rng, &mut calls))
            .map(|info| s = milestone::maze::step(&maze, s, info.action, StochasticityConfig::deterministic(), &mut rng))?;
        check(
            calls.denoiser == before.denoiser && calls.critic == before.critic,
            "controller step invoked the denoiser or critic",
        )?;
        check(
            calls.encoder == before.encoder + 1 && calls.actor == before.actor + 1,
            "controller step is not one encoder and one actor pass",
        )?;
    }
    Ok(format!(
        "episode lengths {lengths:?}, each {} denoiser calls; controller step = 1 encoder + 1 actor pass",
        m.schedule.steps()
    ))
}

// ---------------------------------------------------------------- 6, 7, 8

fn train_for(layout: &str, train_steps: Option<usize>) -> Result<(MazeSpec, RunConfig, Models<f64>, Duration), String> {
    let defaults = RunConfig::default();
    let cfg = RunConfig {
        layout: layout.into(),
        rollouts: EVAL_ROLLOUTS,
        train_steps: train_steps.unwrap_or(defaults.train_steps),
        ..defaults
    };
    let maze = ok(builtin_layout(layout))?;
    let t0 = Instant::now();
    let ds: OfflineDataset = ok(collect(&cfg, &maze))?;
    let out = ok(train_unified::<f64>(&cfg, &maze, &ds))?;
    Ok((maze, cfg, out.models, t0.elapsed()))
}

fn criterion_umaze(trained: &(MazeSpec, RunConfig, Models<f64>, Duration)) -> Outcome {
    let (maze, cfg, models, took) = trained;
    let t0 = Instant::now();
    let rows = ok(evaluate(maze, models, cfg, &Protocol::SingleGoal))?;
    let sr = rows[0].success_rate;
    let desc = format!(
        "success {sr:.2} over {} rollouts (train {:.0?}, eval {:.0?})",
        rows[0].rollouts,
        took,
        t0.elapsed()
    );
    check(sr >= UMAZE_SUCCESS_MIN, desc.clone())?;
    Ok(desc)
}

fn criterion_ablation() -> Outcome {
    let (maze, cfg, models, took) = train_for("open", Some(ABLATION_TRAIN_STEPS))?;
    let conds = vec![
        AblationCondition::Ratio(0.1),
        AblationCondition::Ratio(1.0),
        AblationCondition::Unconditional,
    ];
    let rows = ok(evaluate(&maze, &models, &cfg, &Protocol::GuidanceAblation(conds)))?;
    let [short, long, uncond] = [&rows[0], &rows[1], &rows[2]];
    let desc = format!(
        "timesteps 0.1: {:.1}, 1.0: {:.1}, unconditional: {:.1}; success {:.2}/{:.2}/{:.2} (train {took:.0?})",
        short.mean_timesteps,
        long.mean_timesteps,
        uncond.mean_timesteps,
        short.success_rate,
        long.success_rate,
        uncond.success_rate
    );
    let srs = [short.success_rate, long.success_rate, uncond.success_rate];
    let spread = srs.iter().cloned().fold(f64::MIN, f64::max) - srs.iter().cloned().fold(f64::MAX, f64::min);
    check(short.mean_timesteps < long.mean_timesteps, format!("0.1 not faster than 1.0: {desc}"))?;
    check(
        short.mean_timesteps <= uncond.mean_timesteps,
        format!("0.1 slower than unconditional: {desc}"),
    )?;
    check(spread <= ABLATION_SUCCESS_SPREAD + 1e-12, format!("success spread {spread:.2}: {desc}"))?;
    Ok(desc)
}

fn criterion_robustness(trained: &(MazeSpec, RunConfig, Models<f64>, Duration)) -> Outcome {
    let (maze, cfg, models, _) = trained;
    let setups = ok(episode_setups(maze, cfg.eval_seeds[0], EVAL_ROLLOUTS, false))?;
    let ctrl = controller_config(cfg);
    let sampling = default_sampling(cfg);
    let det = StochasticityConfig::deterministic();
    let noisy = ok(StochasticityConfig::with_prob(STOCHASTIC_P))?;
    let p0 = ok(run_planner(maze, models, &ctrl, sampling, &setups, det))?.success_rate();
    let p5 = ok(run_planner(maze, models, &ctrl, sampling, &setups, noisy))?.success_rate();
    let o0 = ok(run_open_loop(maze, &setups, det))?.success_rate();
    let o5 = ok(run_open_loop(maze, &setups, noisy))?.success_rate();
    let (dp, dop) = (p0 - p5, o0 - o5);
    let desc = format!("planner {p0:.2} -> {p5:.2} (drop {dp:.2}); open loop {o0:.2} -> {o5:.2} (drop {dop:.2})");
    check(dop - dp >= ROBUSTNESS_MARGIN, desc.clone())?;
    Ok(desc)
}

// ---------------------------------------------------------------- 10

fn metrics_text(rows: &[MetricsRow]) -> Result<String, String> {
    let dir = ok(tempfile::tempdir())?;
    let p = dir.path().join("m.csv");
    ok(export_metrics(rows, &p))?;
    ok(std::fs::read_to_string(&p))
}

fn criterion_reproducibility() -> Outcome {
    let cfg = RunConfig {
        episodes: 60,
        train_steps: 300,
        rollouts: 10,
        eval_seeds: vec![0, 1],
        ..RunConfig::default()
    };
    let maze = ok(builtin_layout("umaze"))?;
    let run = || -> Result<(String, String), String> {
        let ds = ok(collect(&cfg, &maze))?;
        let out = ok(train_unified::<f64>(&cfg, &maze, &ds))?;
        let rows = ok(evaluate(&maze, &out.models, &cfg, &Protocol::Stochastic(0.25)))?;
        Ok((out.models.to_checkpoint().to_json(), metrics_text(&rows)?))
    };
    let (ck1, m1) = run()?;
    let (ck2, m2) = run()?;
    check(ck1 == ck2, "checkpoints differ")?;
    check(m1 == m2, "metrics differ")?;
    Ok(format!("checkpoint ({} bytes) and metrics bit-identical", ck1.len()))
}

// ----------------------------------------------------------------

fn run(name: &str, f: &mut dyn FnMut() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    match res {
        Ok(msg) => {
            println!("PASS {name} [{secs:.1}s] {msg}");
            true
        }
        Err(msg) => {
            println!("FAIL {name} [{secs:.1}s] {msg}");
            false
        }
    }
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| only.is_empty() || only.contains(&i);
    let mut passed = Vec::new();
    let mut gate = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(i) {
            passed.push(run(&format!("{i} {name}"), f));
        }
    };
    gate(1, "gradient correctness", &mut criterion_gradients);
    gate(2, "optimal critic oracle", &mut criterion_oracle);
    gate(3, "mixture sampler sanity", &mut criterion_mixture);
    gate(4, "inpainting invariant", &mut criterion_inpainting);
    gate(5, "guidance degeneracy", &mut criterion_guidance_degeneracy);
    let umaze = if wanted(6) || wanted(8) {
        train_for("umaze", None)
    } else {
        Err("not trained".into())
    };
    gate(6, "end-to-end U-maze", &mut || criterion_umaze(umaze.as_ref().map_err(|e| e.clone())?));
    gate(7, "guidance ablation direction", &mut criterion_ablation);
    gate(8, "stochastic robustness", &mut || {
        criterion_robustness(umaze.as_ref().map_err(|e| e.clone())?)
    });
    gate(9, "inference cost", &mut criterion_inference_cost);
    gate(10, "reproducibility", &mut criterion_reproducibility);
    let n = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n}/{} criteria passed", passed.len());
    if n == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
