//! Goal-conditioned imitation learning: two state encoders, a goal-conditioned
//! actor and a five-member discriminative critic ensemble.
//!
//! A latent goal is the concatenation `[actor branch ; critic branch]`, each
//! branch a unit vector of dimension `d`. The actor reads the actor half, the
//! critics and every distance test read the critic half.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::dataset::GcilBatch;
use crate::error::{config_err, Error, Result};
use crate::maze::{MazeAction, MazeSpec, MazeState};
use crate::nn::{hcat, Activation, Checkpoint, ForwardCache, Mlp, NetParams, NetSpec, OutputTransform};
use crate::scalar::Scalar;

pub const ENSEMBLE_SIZE: usize = 5;
/// Clamp applied to critic probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub const ENCODER_ACTOR: &str = "encoder_actor";
pub const ENCODER_CRITIC: &str = "encoder_critic";
pub const ACTOR: &str = "actor";

pub fn critic_name(i: usize) -> String {
    format!("critic_{i}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcilConfig {
    /// Dimension `d` of each encoder branch.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for GcilConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }
}

/// Affine map of maze coordinates onto `[-1, 1]^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateNormalizer {
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
}

impl StateNormalizer {
    pub fn for_maze(spec: &MazeSpec) -> Self {
        let (w, h) = (spec.width(), spec.height());
        Self {
            center: [0.5 * w, 0.5 * h],
            half_extent: [0.5 * w, 0.5 * h],
        }
    }

    pub fn identity() -> Self {
        Self {
            center: [0.0, 0.0],
            half_extent: [1.0, 1.0],
        }
    }

    pub fn apply<S: Scalar>(&self, states: &[MazeState]) -> Array2<S> {
        Array2::from_shape_fn((states.len(), 2), |(i, j)| {
            S::of((states[i].position[j] - self.center[j]) / self.half_extent[j])
        })
    }
}

/// Component-wise sum of the gradients of every GCIL network.
#[derive(Clone, Debug, PartialEq)]
pub struct GcilGrads<S> {
    pub encoder_actor: NetParams<S>,
    pub encoder_critic: NetParams<S>,
    pub actor: NetParams<S>,
    pub critics: Vec<NetParams<S>>,
}

impl<S: Scalar> GcilGrads<S> {
    pub fn zeros(model: &GcilModel<S>) -> Self {
        Self {
            encoder_actor: model.encoder_actor.params.zeros_like(),
            encoder_critic: model.encoder_critic.params.zeros_like(),
            actor: model.actor.params.zeros_like(),
            critics: model.critics.iter().map(|c| c.params.zeros_like()).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        self.encoder_actor.add_scaled(&other.encoder_actor, scale);
        self.encoder_critic.add_scaled(&other.encoder_critic, scale);
        self.actor.add_scaled(&other.actor, scale);
        for (a, b) in self.critics.iter_mut().zip(&other.critics) {
            a.add_scaled(b, scale);
        }
    }

    /// In the order of [`GcilModel::networks`].
    pub fn parts(&self) -> Vec<&NetParams<S>> {
        let mut v = vec![&self.encoder_actor, &self.encoder_critic, &self.actor];
        v.extend(self.critics.iter());
        v
    }
}

/// Forward state of both encoder branches on a batch.
pub struct EncodeCache<S> {
    actor: ForwardCache<S>,
    critic: ForwardCache<S>,
}

impl<S: Scalar> EncodeCache<S> {
    /// `n x 2d` latents.
    pub fn latents(&self) -> Array2<S> {
        hcat(&[self.actor.output().view(), self.critic.output().view()])
    }

    pub fn actor_half(&self) -> &Array2<S> {
        self.actor.output()
    }

    pub fn critic_half(&self) -> &Array2<S> {
        self.critic.output()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcilModel<S> {
    pub normalizer: StateNormalizer,
    pub action_max: f64,
    pub encoder_actor: Mlp<S>,
    pub encoder_critic: Mlp<S>,
    pub actor: Mlp<S>,
    pub critics: Vec<Mlp<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorLossConfig {
    pub lambda_tilde: f64,
    /// Divide `lambda_tilde` by the batch-mean absolute logit. The divisor is
    /// treated as a constant when differentiating.
    pub adaptive: bool,
}

impl Default for ActorLossConfig {
    fn default() -> Self {
        Self {
            lambda_tilde: 2.5,
            adaptive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<S> {
    pub loss: S,
    /// Probabilities that hit the `PROB_EPS` clamp.
    pub saturated: usize,
    /// Effective logit weight (actor loss only).
    pub lambda: S,
    /// Set when the adaptive rule fell back to `lambda_tilde`.
    pub lambda_fallback: bool,
}

impl<S: Scalar> GcilModel<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &GcilConfig, maze: &MazeSpec, rng: &mut R) -> Result<Self> {
        Self::with_normalizer(cfg, StateNormalizer::for_maze(maze), maze.action_max, rng)
    }

    pub fn with_normalizer<R: Rng + ?Sized>(
        cfg: &GcilConfig,
        normalizer: StateNormalizer,
        action_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.latent_dim;
        if d == 0 {
            return config_err("latent dimension must be >= 1");
        }
        if !(action_max > 0.0) {
            return config_err("action_max must be positive");
        }
        let base = |i: usize, o: usize| NetSpec::new(i, &cfg.hidden, o).with_activation(cfg.activation);
        let encoder = base(2, d).with_output(OutputTransform::UnitNormalize);
        let encoder_actor = Mlp::init(encoder.clone(), rng)?;
        let encoder_critic = Mlp::init(encoder, rng)?;
        let actor = Mlp::init(
            base(2 + d, 2).with_output(OutputTransform::BoundedTanh { scale: action_max }),
            rng,
        )?;
        let critics = (0..ENSEMBLE_SIZE)
            .map(|_| Mlp::init(base(4 + d, 1).with_output(OutputTransform::Sigmoid), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            normalizer,
            action_max,
            encoder_actor,
            encoder_critic,
            actor,
            critics,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_critic.output_dim()
    }

    /// Width of a full latent goal, `2d`.
    pub fn goal_dim(&self) -> usize {
        2 * self.latent_dim()
    }

    /// Named networks in checkpoint order.
    pub fn networks(&self) -> Vec<(String, &Mlp<S>)> {
        let mut v = vec![
            (ENCODER_ACTOR.to_string(), &self.encoder_actor),
            (ENCODER_CRITIC.to_string(), &self.encoder_critic),
            (ACTOR.to_string(), &self.actor),
        ];
        v.extend(self.critics.iter().enumerate().map(|(i, c)| (critic_name(i), c)));
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Mlp<S>> {
        let mut v = vec![&mut self.encoder_actor, &mut self.encoder_critic, &mut self.actor];
        v.extend(self.critics.iter_mut());
        v
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        for (name, net) in self.networks() {
            ckpt.insert(name.as_str(), net);
        }
        let n = &self.normalizer;
        ckpt.set_meta(
            "gcil.normalizer",
            vec![n.center[0], n.center[1], n.half_extent[0], n.half_extent[1]],
        );
        ckpt.set_meta("gcil.action_max", vec![self.action_max]);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let n = ckpt.meta("gcil.normalizer")?;
        let am = ckpt.meta("gcil.action_max")?;
        if n.len() != 4 || am.len() != 1 {
            return config_err("malformed GCIL metadata");
        }
        let critics = (0..ENSEMBLE_SIZE)
            .map(|i| ckpt.network(&critic_name(i)))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            normalizer: StateNormalizer {
                center: [n[0], n[1]],
                half_extent: [n[2], n[3]],
            },
            action_max: am[0],
            encoder_actor: ckpt.network(ENCODER_ACTOR)?,
            encoder_critic: ckpt.network(ENCODER_CRITIC)?,
            actor: ckpt.network(ACTOR)?,
            critics,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.latent_dim();
        let ok = self.encoder_actor.output_dim() == d
            && self.encoder_actor.input_dim() == 2
            && self.encoder_critic.input_dim() == 2
            && self.actor.input_dim() == 2 + d
            && self.actor.output_dim() == 2
            && self.critics.len() == ENSEMBLE_SIZE
            && self.critics.iter().all(|c| c.input_dim() == 4 + d && c.output_dim() == 1);
        if ok {
            Ok(())
        } else {
            config_err("GCIL network shapes are inconsistent")
        }
    }

    pub fn normalize(&self, states: &[MazeState]) -> Array2<S> {
        self.normalizer.apply(states)
    }

    fn scaled_actions(&self, actions: &[MazeAction]) -> Array2<S> {
        Array2::from_shape_fn((actions.len(), 2), |(i, j)| {
            S::of(actions[i].displacement[j] / self.action_max)
        })
    }

    /// `n x 2d` latent goals.
    pub fn encode(&self, states: &[MazeState]) -> Result<Array2<S>> {
        let x = self.normalize(states);
        Ok(hcat(&[
            self.encoder_actor.forward(x.view())?.view(),
            self.encoder_critic.forward(x.view())?.view(),
        ]))
    }

    pub fn encode_one(&self, state: MazeState) -> Result<Vec<S>> {
        Ok(self.encode(&[state])?.into_raw_vec_and_offset().0)
    }

    /// Critic branch only, `n x d`.
    pub fn encode_critic(&self, states: &[MazeState]) -> Result<Array2<S>> {
        self.encoder_critic.forward(self.normalize(states).view())
    }

    pub fn encode_cached(&self, states: &[MazeState]) -> Result<EncodeCache<S>> {
        let x = self.normalize(states);
        Ok(EncodeCache {
            actor: self.encoder_actor.forward_cached(x.view())?,
            critic: self.encoder_critic.forward_cached(x.view())?,
        })
    }

    /// Parameter gradients of both branches for an upstream `n x 2d` gradient.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache<S>,
        latent_grad: ArrayView2<S>,
    ) -> Result<(NetParams<S>, NetParams<S>)> {
        let d = self.latent_dim();
        let (ga, _) = self.encoder_actor.backward(&cache.actor, latent_grad.slice(s![.., ..d]))?;
        let (gc, _) = self.encoder_critic.backward(&cache.critic, latent_grad.slice(s![.., d..]))?;
        Ok((ga, gc))
    }

    fn critic_input(&self, s_norm: ArrayView2<S>, a_scaled: ArrayView2<S>, g: ArrayView2<S>) -> Array2<S> {
        hcat(&[s_norm, a_scaled, g])
    }

    /// Per-member probabilities, `n x 5`. `goals_critic` is the critic half.
    pub fn critic_members(
        &self,
        states: &[MazeState],
        actions: &[MazeAction],
        goals_critic: ArrayView2<S>,
    ) -> Result<Array2<S>> {
        let input = self.critic_input(
            self.normalize(states).view(),
            self.scaled_actions(actions).view(),
            goals_critic,
        );
        let mut out = Array2::zeros((states.len(), ENSEMBLE_SIZE));
        for (m, c) in self.critics.iter().enumerate() {
            out.column_mut(m).assign(&c.forward(input.view())?.column(0));
        }
        Ok(out)
    }

    /// `min_m D_m(s, a, g)`.
    pub fn critic_score(&self, state: MazeState, action: MazeAction, goal_critic: &[S]) -> Result<S> {
        let g = ArrayView2::from_shape((1, goal_critic.len()), goal_critic)
            .map_err(|e| Error::Config(e.to_string()))?;
        let m = self.critic_members(&[state], &[action], g)?;
        Ok(aggregate_min(m.row(0).iter().copied()))
    }

    /// `ln(D / (1 - D))` of the aggregate score, clamped.
    pub fn estimate_log_ratio(&self, state: MazeState, action: MazeAction, goal_critic: &[S]) -> Result<S> {
        Ok(logit(self.critic_score(state, action, goal_critic)?))
    }

    /// Deterministic action toward the actor half `goal_actor`.
    pub fn act(&self, state: MazeState, goal_actor: &[S]) -> Result<MazeAction> {
        if goal_actor.len() != self.latent_dim() {
            return config_err("goal has the wrong dimension for the actor");
        }
        let mut input = self.normalize(&[state]).into_raw_vec_and_offset().0;
        input.extend_from_slice(goal_actor);
        let a = self.actor.forward_one(&input)?;
        Ok(MazeAction::new(a[0].widen(), a[1].widen()).clipped(self.action_max))
    }

    /// Binary cross-entropy averaged over the batch and all members. Gradients
    /// reach the critics and the critic encoder.
    pub fn critic_loss(&self, batch: &GcilBatch) -> Result<(LossReport<S>, GcilGrads<S>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Dataset("empty GCIL batch".into()));
        }
        let d = self.latent_dim();
        let mut goals = batch.positives.clone();
        goals.extend_from_slice(&batch.negatives);
        let enc_cache = self.encoder_critic.forward_cached(self.normalize(&goals).view())?;
        let s_norm = self.normalize(&batch.states);
        let a_scaled = self.scaled_actions(&batch.actions);
        let s2 = ndarray::concatenate(Axis(0), &[s_norm.view(), s_norm.view()]).expect("same width");
        let a2 = ndarray::concatenate(Axis(0), &[a_scaled.view(), a_scaled.view()]).expect("same width");
        let input = self.critic_input(s2.view(), a2.view(), enc_cache.output().view());

        let mut grads = GcilGrads::zeros(self);
        let mut g_latent: Array2<S> = Array2::zeros((2 * b, d));
        let mut loss = S::zero();
        let mut saturated = 0;
        let norm = S::one() / S::of((b * ENSEMBLE_SIZE) as f64);
        for (m, critic) in self.critics.iter().enumerate() {
            let cache = critic.forward_cached(input.view())?;
            let p = cache.output();
            let mut dp = Array2::zeros((2 * b, 1));
            for r in 0..2 * b {
                let positive = r < b;
                let (l, g, sat) = bce_term(p[[r, 0]], positive);
                loss += l * norm;
                dp[[r, 0]] = g * norm;
                saturated += sat as usize;
            }
            let (gp, dx) = critic.backward(&cache, dp.view())?;
            grads.critics[m] = gp;
            g_latent += &dx.slice(s![.., 4..]);
        }
        let (ge, _) = self.encoder_critic.backward(&enc_cache, g_latent.view())?;
        grads.encoder_critic = ge;
        Ok((
            LossReport {
                loss,
                saturated,
                lambda: S::zero(),
                lambda_fallback: false,
            },
            grads,
        ))
    }

    /// `mean(-lambda * logit D(s, a~, g+) + |a~ - a|^2)` with
    /// `a~ = actor(s, f_actor(s+))` and `g+ = f_critic(s+)`. Critic weights and
    /// the critic encoder are held fixed.
    pub fn actor_loss(&self, batch: &GcilBatch, cfg: ActorLossConfig) -> Result<(LossReport<S>, GcilGrads<S>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Dataset("empty GCIL batch".into()));
        }
        if !(cfg.lambda_tilde >= 0.0 && cfg.lambda_tilde.is_finite()) {
            return config_err("lambda_tilde must be finite and non-negative");
        }
        let d = self.latent_dim();
        let s_norm = self.normalize(&batch.states);
        let pos_norm = self.normalize(&batch.positives);
        let ea_cache = self.encoder_actor.forward_cached(pos_norm.view())?;
        let g_critic = self.encoder_critic.forward(pos_norm.view())?;
        let actor_in = hcat(&[s_norm.view(), ea_cache.output().view()]);
        let actor_cache = self.actor.forward_cached(actor_in.view())?;
        let a_tilde = actor_cache.output();
        let inv_am = S::of(1.0 / self.action_max);
        let a_scaled = a_tilde.mapv(|v| v * inv_am);
        let critic_in = self.critic_input(s_norm.view(), a_scaled.view(), g_critic.view());

        let caches = self
            .critics
            .iter()
            .map(|c| c.forward_cached(critic_in.view()))
            .collect::<Result<Vec<_>>>()?;
        let mut argmin = vec![0usize; b];
        let mut logits = vec![S::zero(); b];
        let mut dlogit_dp = vec![S::zero(); b];
        let mut saturated = 0;
        for r in 0..b {
            let (mut best, mut p) = (0, caches[0].output()[[r, 0]]);
            for (m, c) in caches.iter().enumerate().skip(1) {
                let v = c.output()[[r, 0]];
                if v < p {
                    best = m;
                    p = v;
                }
            }
            argmin[r] = best;
            let (l, g, sat) = logit_term(p);
            logits[r] = l;
            dlogit_dp[r] = g;
            saturated += sat as usize;
        }

        let lambda_tilde = S::of(cfg.lambda_tilde);
        let mut lambda_fallback = false;
        let lambda = if cfg.adaptive {
            let mean_abs = logits.iter().map(|l| l.abs()).sum::<S>() / S::of(b as f64);
            if mean_abs > S::zero() && mean_abs.is_finite() {
                lambda_tilde / mean_abs
            } else {
                lambda_fallback = true;
                lambda_tilde
            }
        } else {
            lambda_tilde
        };

        let inv_b = S::one() / S::of(b as f64);
        let mut loss = S::zero();
        let mut d_a: Array2<S> = Array2::zeros((b, 2));
        for r in 0..b {
            loss -= lambda * logits[r] * inv_b;
            // Behavior cloning in action-box units.
            for j in 0..2 {
                let diff = a_scaled[[r, j]] - S::of(batch.actions[r].displacement[j] / self.action_max);
                loss += diff * diff * inv_b;
                d_a[[r, j]] = S::of(2.0) * diff * inv_b * inv_am;
            }
        }
        if lambda != S::zero() {
            for (m, critic) in self.critics.iter().enumerate() {
                let mut dp = Array2::zeros((b, 1));
                let mut any = false;
                for r in 0..b {
                    if argmin[r] == m {
                        dp[[r, 0]] = -lambda * inv_b * dlogit_dp[r];
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let dx = critic.backward_input(&caches[m], dp.view())?;
                d_a.scaled_add(inv_am, &dx.slice(s![.., 2..4]));
            }
        }
        let (g_actor, dx_actor) = self.actor.backward(&actor_cache, d_a.view())?;
        let (g_enc, _) = self.encoder_actor.backward(&ea_cache, dx_actor.slice(s![.., 2..2 + d]))?;
        let mut grads = GcilGrads::zeros(self);
        grads.actor = g_actor;
        grads.encoder_actor = g_enc;
        Ok((
            LossReport {
                loss,
                saturated,
                lambda,
                lambda_fallback,
            },
            grads,
        ))
    }
}

pub fn aggregate_min<S: Scalar>(members: impl IntoIterator<Item = S>) -> S {
    members.into_iter().fold(S::infinity(), |a, b| a.min(b))
}

fn clamp_prob<S: Scalar>(p: S) -> (S, bool) {
    let eps = S::of(PROB_EPS);
    if p < eps {
        (eps, true)
    } else if p > S::one() - eps {
        (S::one() - eps, true)
    } else {
        (p, false)
    }
}

/// `ln(p / (1 - p))` after clamping.
pub fn logit<S: Scalar>(p: S) -> S {
    logit_term(p).0
}

/// `(logit, d logit / dp, clamped)`.
fn logit_term<S: Scalar>(p: S) -> (S, S, bool) {
    let (q, sat) = clamp_prob(p);
    let l = q.ln() - (S::one() - q).ln();
    let g = if sat { S::zero() } else { S::one() / (q * (S::one() - q)) };
    (l, g, sat)
}

/// One cross-entropy term: `-ln p` for positives, `-ln(1 - p)` for
/// negatives, with its derivative in `p` and whether the clamp was active.
pub fn bce_term<S: Scalar>(p: S, positive: bool) -> (S, S, bool) {
    let (q, sat) = clamp_prob(p);
    if positive {
        (-q.ln(), if sat { S::zero() } else { -S::one() / q }, sat)
    } else {
        let r = S::one() - q;
        (-r.ln(), if sat { S::zero() } else { S::one() / r }, sat)
    }
}
