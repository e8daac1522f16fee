use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::DiffusionSchedule;
use crate::error::{config_err, Result};
use crate::nn::{Activation, Checkpoint, ForwardCache, Mlp, NetParams, NetSpec};
use crate::scalar::Scalar;

pub const DENOISER: &str = "denoiser";

/// Interval condition of the noise predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// The null token; one-hot slot 0.
    Null,
    /// Interval `1..=interval_max`; one-hot slot `interval`.
    Interval(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Interior milestones `K`.
    pub k: usize,
    /// Width of one milestone row.
    pub goal_dim: usize,
    pub interval_max: usize,
    /// Even width of the sinusoidal step embedding.
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl DenoiserConfig {
    pub fn new(k: usize, goal_dim: usize, interval_max: usize) -> Self {
        Self {
            k,
            goal_dim,
            interval_max,
            time_dim: 16,
            hidden: vec![256, 256, 256],
            activation: Activation::Relu,
        }
    }
}

/// Fully-connected residual noise predictor over the flattened interior.
///
/// Input layout per row: `[x (K*D) | step embedding | condition one-hot | g_0 | g_(K+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S> {
    pub net: Mlp<S>,
    pub k: usize,
    pub goal_dim: usize,
    pub interval_max: usize,
    pub time_dim: usize,
    /// Per-step input skip `c_n`, indexed by `n`: the prediction is
    /// `c_n * x + net(..)`. Empty disables it.
    pub skip: Vec<f64>,
}

pub struct DenoiserCache<S> {
    net: ForwardCache<S>,
    output: Array2<S>,
    skip: Vec<S>,
}

/// Gradients of a scalar loss through the denoiser.
pub struct DenoiserBackward<S> {
    pub params: NetParams<S>,
    pub noisy: Array2<S>,
    pub context: Array2<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 || cfg.goal_dim == 0 || cfg.interval_max == 0 {
            return config_err("denoiser needs K, goal_dim and interval_max >= 1");
        }
        if cfg.time_dim == 0 || cfg.time_dim % 2 != 0 {
            return config_err("step embedding width must be even and positive");
        }
        let input = Self::input_width(cfg.k, cfg.goal_dim, cfg.interval_max, cfg.time_dim);
        let spec = NetSpec::new(input, &cfg.hidden, cfg.k * cfg.goal_dim)
            .with_activation(cfg.activation)
            .with_residual(true);
        let mut net = Mlp::init(spec, rng)?;
        // Small output weights keep early predictions near zero.
        net.params.layers.last_mut().expect("output layer").weight *= S::of(0.1);
        Ok(Self {
            net,
            k: cfg.k,
            goal_dim: cfg.goal_dim,
            interval_max: cfg.interval_max,
            time_dim: cfg.time_dim,
            skip: Vec::new(),
        })
    }

    /// Adds `c_n = sqrt(1 - ab_n)` times the noisy input to the prediction,
    /// the exact noise estimate for unit-variance data. Near `n = N` the net
    /// then only learns a small correction instead of the identity.
    pub fn with_skip(mut self, schedule: &DiffusionSchedule) -> Self {
        self.skip = (0..=schedule.steps()).map(|n| (1.0 - schedule.alpha_bar(n)).sqrt()).collect();
        self
    }

    fn input_width(k: usize, d: usize, interval_max: usize, time_dim: usize) -> usize {
        k * d + time_dim + interval_max + 1 + 2 * d
    }

    /// `K * D`.
    pub fn interior_width(&self) -> usize {
        self.k * self.goal_dim
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.insert(DENOISER, &self.net);
        ckpt.set_meta(
            "diffusion.shape",
            vec![
                self.k as f64,
                self.goal_dim as f64,
                self.interval_max as f64,
                self.time_dim as f64,
            ],
        );
        if !self.skip.is_empty() {
            ckpt.set_meta("diffusion.skip", self.skip.clone());
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let shape = ckpt.meta("diffusion.shape")?;
        if shape.len() != 4 {
            return config_err("malformed denoiser metadata");
        }
        let [k, d, im, td] = [0, 1, 2, 3].map(|i| shape[i] as usize);
        let net: Mlp<S> = ckpt.network(DENOISER)?;
        if net.input_dim() != Self::input_width(k, d, im, td) || net.output_dim() != k * d {
            return config_err("denoiser shape does not match its metadata");
        }
        let skip = ckpt.meta("diffusion.skip").map(<[f64]>::to_vec).unwrap_or_default();
        Ok(Self {
            net,
            k,
            goal_dim: d,
            interval_max: im,
            time_dim: td,
            skip,
        })
    }

    fn assemble(
        &self,
        noisy: ArrayView2<S>,
        steps: &[usize],
        conds: &[Condition],
        context: ArrayView2<S>,
    ) -> Result<Array2<S>> {
        let b = noisy.nrows();
        let kd = self.interior_width();
        let d = self.goal_dim;
        if noisy.ncols() != kd || context.ncols() != 2 * d || context.nrows() != b {
            return config_err(format!(
                "denoiser input shapes {:?} / {:?} do not match K*D = {kd}",
                noisy.dim(),
                context.dim()
            ));
        }
        if steps.len() != b || conds.len() != b {
            return config_err("one step and one condition per row are required");
        }
        if let Some(&n) = steps.iter().find(|&&n| !self.skip.is_empty() && n >= self.skip.len()) {
            return config_err(format!("step {n} beyond the skip table"));
        }
        let width = self.net.input_dim();
        let mut x = Array2::zeros((b, width));
        x.slice_mut(s![.., ..kd]).assign(&noisy);
        let t0 = kd;
        let c0 = t0 + self.time_dim;
        let g0 = c0 + self.interval_max + 1;
        x.slice_mut(s![.., g0..]).assign(&context);
        for r in 0..b {
            let emb = step_embedding(steps[r], self.time_dim);
            for (j, v) in emb.into_iter().enumerate() {
                x[[r, t0 + j]] = S::of(v);
            }
            let slot = match conds[r] {
                Condition::Null => 0,
                Condition::Interval(iv) if (1..=self.interval_max).contains(&iv) => iv,
                Condition::Interval(iv) => {
                    return config_err(format!("interval {iv} outside 1..={}", self.interval_max))
                }
            };
            x[[r, c0 + slot]] = S::one();
        }
        Ok(x)
    }

    /// Predicted noise, one row per input row.
    pub fn predict(
        &self,
        noisy: ArrayView2<S>,
        steps: &[usize],
        conds: &[Condition],
        context: ArrayView2<S>,
    ) -> Result<Array2<S>> {
        let x = self.assemble(noisy, steps, conds, context)?;
        let mut out = self.net.forward(x.view())?;
        self.add_skip(&mut out, noisy, &self.row_skip(steps));
        Ok(out)
    }

    fn row_skip(&self, steps: &[usize]) -> Vec<S> {
        if self.skip.is_empty() {
            return Vec::new();
        }
        steps.iter().map(|&n| S::of(self.skip[n])).collect()
    }

    fn add_skip(&self, out: &mut Array2<S>, noisy: ArrayView2<S>, skip: &[S]) {
        for (r, &c) in skip.iter().enumerate() {
            out.row_mut(r).scaled_add(c, &noisy.row(r));
        }
    }

    pub fn predict_cached(
        &self,
        noisy: ArrayView2<S>,
        steps: &[usize],
        conds: &[Condition],
        context: ArrayView2<S>,
    ) -> Result<DenoiserCache<S>> {
        let x = self.assemble(noisy, steps, conds, context)?;
        let net = self.net.forward_cached(x.view())?;
        let skip = self.row_skip(steps);
        let mut output = net.output().clone();
        self.add_skip(&mut output, noisy, &skip);
        Ok(DenoiserCache { net, output, skip })
    }

    pub fn backward(&self, cache: &DenoiserCache<S>, output_grad: ArrayView2<S>) -> Result<DenoiserBackward<S>> {
        let (params, dx) = self.net.backward(&cache.net, output_grad)?;
        let kd = self.interior_width();
        let g0 = kd + self.time_dim + self.interval_max + 1;
        let mut noisy = dx.slice(s![.., ..kd]).to_owned();
        for (r, &c) in cache.skip.iter().enumerate() {
            noisy.row_mut(r).scaled_add(c, &output_grad.row(r));
        }
        Ok(DenoiserBackward {
            params,
            noisy,
            context: dx.slice(s![.., g0..]).to_owned(),
        })
    }
}

impl<S> DenoiserCache<S> {
    pub fn output(&self) -> &Array2<S> {
        &self.output
    }
}

/// `[sin(n w_i), cos(n w_i)]` with geometrically spaced `w_i` from 1 down to 1/1000.
pub fn step_embedding(n: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let w = (-(1000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out.push((n as f64 * w).sin());
    }
    for i in 0..half {
        let w = (-(1000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out.push((n as f64 * w).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Denoiser<f64> {
        let mut cfg = DenoiserConfig::new(2, 3, 4);
        cfg.hidden = vec![7, 7];
        cfg.time_dim = 4;
        Denoiser::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn null_and_interval_slots_differ() {
        let d = tiny();
        let x = Array2::zeros((2, 6));
        let c = Array2::zeros((2, 6));
        let inp = d
            .assemble(x.view(), &[1, 1], &[Condition::Null, Condition::Interval(1)], c.view())
            .unwrap();
        let c0 = 6 + 4;
        assert_eq!(inp[[0, c0]], 1.0);
        assert_eq!(inp[[1, c0]], 0.0);
        assert_eq!(inp[[1, c0 + 1]], 1.0);
        assert!(d
            .assemble(x.view(), &[1, 1], &[Condition::Null, Condition::Interval(5)], c.view())
            .is_err());
    }

    #[test]
    fn skip_adds_scaled_input() {
        let sch = DiffusionSchedule::new(5, crate::diffusion::ScheduleKind::Cosine).unwrap();
        let plain = tiny();
        let d = tiny().with_skip(&sch);
        let x = Array2::from_shape_fn((2, 6), |(r, c)| (r * 6 + c) as f64 * 0.1 - 0.3);
        let c = Array2::from_elem((2, 6), 0.2);
        let conds = [Condition::Null, Condition::Interval(2)];
        let base = plain.predict(x.view(), &[1, 5], &conds, c.view()).unwrap();
        let out = d.predict(x.view(), &[1, 5], &conds, c.view()).unwrap();
        for (r, n) in [1, 5].into_iter().enumerate() {
            let want = &base.row(r) + &(&x.row(r) * (1.0 - sch.alpha_bar(n)).sqrt());
            assert_eq!(out.row(r), want);
        }
        assert!(d.predict(x.view(), &[1, 6], &conds, c.view()).is_err());
    }

    #[test]
    fn skip_survives_checkpoint() {
        let sch = DiffusionSchedule::new(5, crate::diffusion::ScheduleKind::Cosine).unwrap();
        let d = tiny().with_skip(&sch);
        let mut ck = Checkpoint::new();
        d.write_checkpoint(&mut ck);
        let back: Denoiser<f64> = Denoiser::from_checkpoint(&Checkpoint::from_json(&ck.to_json()).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = tiny();
        let mut ck = Checkpoint::new();
        d.write_checkpoint(&mut ck);
        let back: Denoiser<f64> = Denoiser::from_checkpoint(&Checkpoint::from_json(&ck.to_json()).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = step_embedding(3, 16);
        let b = step_embedding(4, 16);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
