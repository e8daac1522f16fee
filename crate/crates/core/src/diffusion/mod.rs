//! Denoising diffusion over latent milestone sequences.
//!
//! The diffusion variable is the `K x D` interior of a milestone matrix whose
//! first and last rows are the encoded start and goal. Those endpoint rows
//! are held fixed while sampling and are also fed to the denoiser as context.

mod denoiser;
mod schedule;

pub use denoiser::{step_embedding, Condition, Denoiser, DenoiserBackward, DenoiserConfig, DENOISER};
pub use schedule::{DiffusionSchedule, ScheduleKind};

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calls::CallCounts;
use crate::dataset::MilestoneTrainSample;
use crate::error::{config_err, Error, Result};
use crate::gcil::GcilModel;
use crate::maze::MazeState;
use crate::nn::NetParams;
use crate::scalar::Scalar;

/// `sqrt(alpha_bar_n) * clean + sqrt(1 - alpha_bar_n) * noise`.
pub fn forward_diffuse<S: Scalar>(
    schedule: &DiffusionSchedule,
    clean: ArrayView1<S>,
    n: usize,
    noise: ArrayView1<S>,
) -> Array1<S> {
    let ab = schedule.alpha_bar(n);
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    &clean * a + &noise * b
}

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || S::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Random quantities of one training batch, drawn up front so the loss
/// itself is a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<S> {
    pub steps: Vec<usize>,
    pub noise: Array2<S>,
    pub conds: Vec<Condition>,
}

/// Steps uniform on `1..=N`, standard normal noise, each interval condition
/// replaced by the null token with probability `dropout`.
pub fn draw_noise<S: Scalar, R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    intervals: &[usize],
    width: usize,
    dropout: f64,
    rng: &mut R,
) -> NoiseDraw<S> {
    let b = intervals.len();
    let steps = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let noise = standard_normal(b, width, rng);
    let conds = intervals
        .iter()
        .map(|&iv| {
            if rng.random::<f64>() < dropout {
                Condition::Null
            } else {
                Condition::Interval(iv)
            }
        })
        .collect();
    NoiseDraw { steps, noise, conds }
}

pub struct DiffusionGrads<S> {
    pub denoiser: NetParams<S>,
    /// With respect to the clean interior rows.
    pub clean: Array2<S>,
    pub context: Array2<S>,
}

/// Batch mean of `|eps - eps_theta(x_n, n, c, context)|^2`.
pub fn denoiser_loss<S: Scalar>(
    denoiser: &Denoiser<S>,
    schedule: &DiffusionSchedule,
    clean: ArrayView2<S>,
    context: ArrayView2<S>,
    draw: &NoiseDraw<S>,
) -> Result<(S, DiffusionGrads<S>)> {
    let b = clean.nrows();
    if b == 0 || draw.steps.len() != b || draw.noise.dim() != clean.dim() {
        return config_err("noise draw does not match the clean batch");
    }
    let mut noisy = Array2::zeros(clean.dim());
    let mut scale = Vec::with_capacity(b);
    for r in 0..b {
        noisy
            .row_mut(r)
            .assign(&forward_diffuse(schedule, clean.row(r), draw.steps[r], draw.noise.row(r)));
        scale.push(S::of(schedule.alpha_bar(draw.steps[r]).sqrt()));
    }
    let cache = denoiser.predict_cached(noisy.view(), &draw.steps, &draw.conds, context)?;
    let diff = cache.output() - &draw.noise;
    let inv_b = S::one() / S::of(b as f64);
    let loss = diff.iter().map(|&v| v * v).sum::<S>() * inv_b;
    let grad_out = diff.mapv(|v| S::of(2.0) * v * inv_b);
    let back = denoiser.backward(&cache, grad_out.view())?;
    let mut d_clean = back.noisy;
    for (mut row, &a) in d_clean.rows_mut().into_iter().zip(&scale) {
        row.mapv_inplace(|v| v * a);
    }
    Ok((
        loss,
        DiffusionGrads {
            denoiser: back.params,
            clean: d_clean,
            context: back.context,
        },
    ))
}

pub struct MilestoneLossGrads<S> {
    pub denoiser: NetParams<S>,
    pub encoder_actor: NetParams<S>,
    pub encoder_critic: NetParams<S>,
}

/// Encodes every anchor, splits each sample into interior and endpoint
/// context, and backpropagates the denoiser loss into both encoders.
pub fn milestone_loss<S: Scalar>(
    gcil: &GcilModel<S>,
    denoiser: &Denoiser<S>,
    schedule: &DiffusionSchedule,
    samples: &[MilestoneTrainSample],
    draw: &NoiseDraw<S>,
) -> Result<(S, MilestoneLossGrads<S>)> {
    let k = denoiser.k;
    let d = denoiser.goal_dim;
    if d != gcil.goal_dim() {
        return config_err("denoiser goal width differs from the encoder output");
    }
    if samples.iter().any(|s| s.anchors.len() != k + 2) {
        return config_err(format!("milestone samples need {} anchors", k + 2));
    }
    let states: Vec<MazeState> = samples.iter().flat_map(|s| s.anchors.iter().copied()).collect();
    let cache = gcil.encode_cached(&states)?;
    let latents = cache.latents();
    let b = samples.len();
    let per = k + 2;
    let mut clean = Array2::zeros((b, k * d));
    let mut context = Array2::zeros((b, 2 * d));
    for i in 0..b {
        let rows = latents.slice(s![i * per..(i + 1) * per, ..]);
        let interior = rows.slice(s![1..=k, ..]);
        clean
            .row_mut(i)
            .assign(&Array1::from_iter(interior.iter().copied()));
        context.slice_mut(s![i, ..d]).assign(&rows.row(0));
        context.slice_mut(s![i, d..]).assign(&rows.row(k + 1));
    }
    let (loss, grads) = denoiser_loss(denoiser, schedule, clean.view(), context.view(), draw)?;
    let mut d_latent = Array2::zeros(latents.dim());
    for i in 0..b {
        let mut rows = d_latent.slice_mut(s![i * per..(i + 1) * per, ..]);
        for j in 0..k {
            rows.row_mut(j + 1)
                .assign(&grads.clean.slice(s![i, j * d..(j + 1) * d]));
        }
        rows.row_mut(0).assign(&grads.context.slice(s![i, ..d]));
        rows.row_mut(k + 1).assign(&grads.context.slice(s![i, d..]));
    }
    let (ga, gc) = gcil.encode_backward(&cache, d_latent.view())?;
    Ok((
        loss,
        MilestoneLossGrads {
            denoiser: grads.denoiser,
            encoder_actor: ga,
            encoder_critic: gc,
        },
    ))
}

/// Which noise prediction drives sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    Unconditional,
    Conditional(usize),
    /// `(1 - weight) * eps_null + weight * eps_target`.
    Guided { target: usize, weight: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    /// Re-noise the clean estimate to level `n - 1`: mean
    /// `sqrt(ab_(n-1) / ab_n) (x - sqrt(1 - ab_n) eps)`, std `sqrt(1 - ab_(n-1))`.
    #[default]
    Renoise,
    /// Gaussian posterior `q(x_(n-1) | x_n, x_0)` of the forward chain.
    Ancestral,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "renoise" => Ok(Self::Renoise),
            "ancestral" => Ok(Self::Ancestral),
            other => config_err(format!("unknown sampler {other:?}")),
        }
    }
}

/// Noise estimate at step `n` for one noisy interior row. Every mode runs one
/// two-row batch `[null, second]` so that shared rows are computed identically
/// across modes.
pub fn guided_epsilon<S: Scalar>(
    denoiser: &Denoiser<S>,
    noisy: ArrayView1<S>,
    n: usize,
    guidance: Guidance,
    context: ArrayView1<S>,
) -> Result<Array1<S>> {
    let second = match guidance {
        Guidance::Unconditional => Condition::Null,
        Guidance::Conditional(t) | Guidance::Guided { target: t, .. } => Condition::Interval(t),
    };
    let x = ndarray::stack(Axis(0), &[noisy, noisy]).expect("same shape");
    let c = ndarray::stack(Axis(0), &[context, context]).expect("same shape");
    let eps = denoiser.predict(x.view(), &[n, n], &[Condition::Null, second], c.view())?;
    Ok(match guidance {
        Guidance::Unconditional => eps.row(0).to_owned(),
        Guidance::Conditional(_) => eps.row(1).to_owned(),
        Guidance::Guided { weight, .. } => {
            let (wu, wc) = (S::of(1.0 - weight), S::of(weight));
            &eps.row(0) * wu + &eps.row(1) * wc
        }
    })
}

/// One reverse step from level `n` to `n - 1` with standard normal `z`.
pub fn denoise_step<S: Scalar>(
    schedule: &DiffusionSchedule,
    kind: SamplerKind,
    noisy: ArrayView1<S>,
    eps: ArrayView1<S>,
    n: usize,
    z: ArrayView1<S>,
) -> Array1<S> {
    let ab = schedule.alpha_bar(n);
    let ab_prev = schedule.alpha_bar(n - 1);
    match kind {
        SamplerKind::Renoise => {
            let a = S::of((ab_prev / ab).sqrt());
            let b = S::of((1.0 - ab).sqrt());
            let sigma = S::of((1.0 - ab_prev).sqrt());
            (&noisy - &(&eps * b)) * a + &z * sigma
        }
        SamplerKind::Ancestral => {
            let beta = schedule.beta(n);
            let a = S::of(1.0 / (1.0 - beta).sqrt());
            let b = S::of(beta / (1.0 - ab).sqrt());
            let sigma = S::of((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt());
            (&noisy - &(&eps * b)) * a + &z * sigma
        }
    }
}

/// [`denoise_step`] written through the clean estimate
/// `x0 = (x - sqrt(1 - ab_n) eps) / sqrt(ab_n)`, clamped to `[-clip, clip]`.
pub fn denoise_step_clipped<S: Scalar>(
    schedule: &DiffusionSchedule,
    kind: SamplerKind,
    noisy: ArrayView1<S>,
    eps: ArrayView1<S>,
    n: usize,
    z: ArrayView1<S>,
    clip: f64,
) -> Array1<S> {
    let ab = schedule.alpha_bar(n);
    let ab_prev = schedule.alpha_bar(n - 1);
    let c = S::of(clip);
    let x0 = ((&noisy - &(&eps * S::of((1.0 - ab).sqrt()))) * S::of(1.0 / ab.sqrt())).mapv(|v| v.max(-c).min(c));
    match kind {
        SamplerKind::Renoise => &x0 * S::of(ab_prev.sqrt()) + &z * S::of((1.0 - ab_prev).sqrt()),
        SamplerKind::Ancestral => {
            let beta = schedule.beta(n);
            let c0 = S::of(ab_prev.sqrt() * beta / (1.0 - ab));
            let c1 = S::of((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
            let sigma = S::of((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt());
            &x0 * c0 + &noisy * c1 + &z * sigma
        }
    }
}

/// `(K + 2) x D` milestone matrix: start row, `K` interior rows, goal row.
#[derive(Clone, Debug, PartialEq)]
pub struct MilestonePlan<S> {
    pub rows: Array2<S>,
}

impl<S: Scalar> MilestonePlan<S> {
    /// Interior milestone count `K`.
    pub fn k(&self) -> usize {
        self.rows.nrows() - 2
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, S> {
        self.rows.row(i)
    }

    pub fn to_text(&self) -> String {
        format_matrix(self.rows.view())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub guidance: Guidance,
    pub sampler: SamplerKind,
    /// Clamp the clean estimate to `[-c, c]` before each step.
    pub clip: Option<f64>,
}

/// Reverse chain `n = N..1` over the interior between fixed endpoint rows.
/// `observer` sees the full matrix after every step.
pub fn sample_plan<S: Scalar, R: Rng + ?Sized>(
    denoiser: &Denoiser<S>,
    schedule: &DiffusionSchedule,
    start: ArrayView1<S>,
    goal: ArrayView1<S>,
    cfg: SamplingConfig,
    rng: &mut R,
    calls: &mut CallCounts,
    mut observer: Option<&mut dyn FnMut(usize, &Array2<S>)>,
) -> Result<MilestonePlan<S>> {
    let (k, d) = (denoiser.k, denoiser.goal_dim);
    if start.len() != d || goal.len() != d {
        return config_err(format!("endpoints must have width {d}"));
    }
    let context = ndarray::concatenate(Axis(0), &[start, goal]).expect("1-D");
    let mut rows = Array2::zeros((k + 2, d));
    let mut x: Array1<S> = standard_normal(1, k * d, rng).row(0).to_owned();
    for n in (1..=schedule.steps()).rev() {
        let eps = guided_epsilon(denoiser, x.view(), n, cfg.guidance, context.view())?;
        calls.denoiser += 1;
        let z: Array1<S> = standard_normal(1, k * d, rng).row(0).to_owned();
        x = match cfg.clip {
            None => denoise_step(schedule, cfg.sampler, x.view(), eps.view(), n, z.view()),
            Some(c) => denoise_step_clipped(schedule, cfg.sampler, x.view(), eps.view(), n, z.view(), c),
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling {
                step: n,
                msg: "non-finite milestone values".into(),
            });
        }
        rows.slice_mut(s![1..=k, ..])
            .assign(&x.view().into_shape_with_order((k, d)).expect("K*D"));
        rows.row_mut(0).assign(&start);
        rows.row_mut(k + 1).assign(&goal);
        if let Some(obs) = observer.as_mut() {
            obs(n, &rows);
        }
    }
    Ok(MilestonePlan { rows })
}

/// Encodes `s0` and `s_goal` and samples the milestones between them.
pub fn plan_milestones<S: Scalar, R: Rng + ?Sized>(
    gcil: &GcilModel<S>,
    denoiser: &Denoiser<S>,
    schedule: &DiffusionSchedule,
    s0: MazeState,
    s_goal: MazeState,
    cfg: SamplingConfig,
    rng: &mut R,
    calls: &mut CallCounts,
    observer: Option<&mut dyn FnMut(usize, &Array2<S>)>,
) -> Result<MilestonePlan<S>> {
    let ends = gcil.encode(&[s0, s_goal])?;
    calls.encoder += 1;
    sample_plan(denoiser, schedule, ends.row(0), ends.row(1), cfg, rng, calls, observer)
}

/// One row per line, values separated by single spaces, shortest round-trip form.
pub fn format_matrix<S: Scalar>(m: ArrayView2<S>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{}", v.widen()).expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let vals = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    offset,
                    msg: e.to_string(),
                })?;
            if *cols.get_or_insert(vals.len()) != vals.len() {
                return Err(Error::Parse {
                    offset,
                    msg: "ragged matrix".into(),
                });
            }
            data.extend(vals);
            rows += 1;
        }
        offset += line.len() as u64;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| Error::Parse {
        offset: 0,
        msg: e.to_string(),
    })
}

pub fn save_plan<S: Scalar>(plan: &MilestonePlan<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, plan.to_text())?;
    Ok(())
}
