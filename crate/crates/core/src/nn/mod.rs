//! Fully-connected networks with hand-written reverse-mode gradients.
//!
//! A network is a [`NetSpec`] (shape and nonlinearities) plus [`NetParams`]
//! (weights and biases). Forward passes run on row-major batches, one sample
//! per row, so a single matrix multiply covers the whole batch.

mod adam;
mod checkpoint;
pub mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, StoredNet};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                S::one() - t * t
            }
        }
    }
}

/// Transform applied to the last layer's pre-activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputTransform {
    Identity,
    /// Row-wise division by the Euclidean norm.
    UnitNormalize,
    Sigmoid,
    /// `scale * tanh(z)`, used for box-bounded actions.
    BoundedTanh { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_transform: OutputTransform,
    /// Skip connections `h + act(W h + b)` around every hidden layer after
    /// the first. Requires equal hidden widths.
    #[serde(default)]
    pub residual: bool,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Relu,
            output_transform: OutputTransform::Identity,
            residual: false,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_output(mut self, transform: OutputTransform) -> Self {
        self.output_transform = transform;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0)
        {
            return config_err(format!("all network dimensions must be >= 1: {self:?}"));
        }
        if self.residual && self.hidden_dims.windows(2).any(|w| w[0] != w[1]) {
            return config_err("residual networks need equal hidden widths");
        }
        if let OutputTransform::BoundedTanh { scale } = self.output_transform {
            if !(scale > 0.0 && scale.is_finite()) {
                return config_err(format!("bounded_tanh scale must be positive, got {scale}"));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Weight is stored `out x in`, so a layer computes `x W^T + b` on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> NetParams<S> {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        Self { layers }
    }

    /// He-style uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = (6.0 / layer.weight.ncols() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| S::of(rng.random_range(-bound..bound)));
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(spec: &NetSpec, flat: &[S]) -> Result<Self> {
        if flat.len() != spec.num_params() {
            return config_err(format!(
                "flat parameter length {} does not match spec ({})",
                flat.len(),
                spec.num_params()
            ));
        }
        let mut params = Self::zeros(spec);
        let mut it = flat.iter().copied();
        for l in &mut params.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(params)
    }

    pub fn matches(&self, spec: &NetSpec) -> bool {
        let dims = spec.layer_dims();
        dims.len() == self.layers.len()
            && dims.iter().zip(&self.layers).all(|(&(i, o), l)| {
                l.weight.dim() == (o, i) && l.bias.len() == o
            })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * factor);
            l.bias.mapv_inplace(|v| v * factor);
        }
    }

    pub fn sq_norm(&self) -> S {
        self.layers
            .iter()
            .map(|l| {
                l.weight.iter().map(|&v| v * v).sum::<S>() + l.bias.iter().map(|&v| v * v).sum()
            })
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> NetParams<T> {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| T::of(v.widen())),
                    bias: l.bias.mapv(|v| T::of(v.widen())),
                })
                .collect(),
        }
    }
}

/// Intermediate values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
    output: Array2<S>,
}

impl<S> ForwardCache<S> {
    pub fn output(&self) -> &Array2<S> {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    pub spec: NetSpec,
    pub params: NetParams<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(spec: NetSpec, params: NetParams<S>) -> Result<Self> {
        spec.validate()?;
        if !params.matches(&spec) {
            return config_err("parameter shapes do not match the network spec");
        }
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = NetParams::init(&spec, rng);
        Ok(Self { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn forward_one(&self, input: &[S]) -> Result<Vec<S>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward(&self, x: ArrayView2<S>) -> Result<Array2<S>> {
        self.check_input(&x)?;
        let last = self.params.layers.len() - 1;
        let mut h: Array2<S> = x.to_owned();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let z = affine(&h, layer);
            if l == last {
                return self.apply_output(z, l);
            }
            let a = z.mapv(|v| self.spec.activation.apply(v));
            h = if self.spec.residual && l > 0 { h + a } else { a };
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward_cached(&self, x: ArrayView2<S>) -> Result<ForwardCache<S>> {
        self.check_input(&x)?;
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut h: Array2<S> = x.to_owned();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let z = affine(&h, layer);
            if l == n_layers - 1 {
                let output = self.apply_output(z.clone(), l)?;
                inputs.push(h);
                pre.push(z);
                return Ok(ForwardCache { inputs, pre, output });
            }
            let a = z.mapv(|v| self.spec.activation.apply(v));
            let next = if self.spec.residual && l > 0 { &h + &a } else { a };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients of `sum(output * output_grad)` with respect to the parameters
    /// and the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        output_grad: ArrayView2<S>,
    ) -> Result<(NetParams<S>, Array2<S>)> {
        let (grads, dx) = self.backward_impl(cache, output_grad, true)?;
        Ok((grads.expect("requested"), dx))
    }

    /// Input gradient only; parameter gradients are not formed.
    pub fn backward_input(
        &self,
        cache: &ForwardCache<S>,
        output_grad: ArrayView2<S>,
    ) -> Result<Array2<S>> {
        Ok(self.backward_impl(cache, output_grad, false)?.1)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<S>,
        output_grad: ArrayView2<S>,
        want_params: bool,
    ) -> Result<(Option<NetParams<S>>, Array2<S>)> {
        if output_grad.dim() != cache.output.dim() {
            return config_err(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_grad.dim(),
                cache.output.dim()
            ));
        }
        let n_layers = self.params.layers.len();
        let mut grads = want_params.then(|| self.params.zeros_like());
        let mut dz = self.output_backward(&cache.pre[n_layers - 1], &cache.output, output_grad);
        let mut skip: Option<Array2<S>> = None;
        for l in (0..n_layers).rev() {
            let layer = &self.params.layers[l];
            if let Some(g) = grads.as_mut() {
                g.layers[l].weight = dz.t().dot(&cache.inputs[l]);
                g.layers[l].bias = dz.sum_axis(Axis(0));
            }
            let mut dh = dz.dot(&layer.weight);
            if let Some(s) = skip.take() {
                dh += &s;
            }
            if dh.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    what: "non-finite gradient".into(),
                });
            }
            if l == 0 {
                return Ok((grads, dh));
            }
            if self.spec.residual && l > 1 {
                skip = Some(dh.clone());
            }
            let act = self.spec.activation;
            Zip::from(&mut dh)
                .and(&cache.pre[l - 1])
                .for_each(|d, &z| *d = *d * act.derivative(z));
            dz = dh;
        }
        unreachable!("network has at least one layer")
    }

    fn check_input(&self, x: &ArrayView2<S>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return config_err(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim
            ));
        }
        Ok(())
    }

    fn apply_output(&self, mut z: Array2<S>, layer: usize) -> Result<Array2<S>> {
        match self.spec.output_transform {
            OutputTransform::Identity => {}
            OutputTransform::Sigmoid => z.mapv_inplace(sigmoid),
            OutputTransform::BoundedTanh { scale } => {
                let s = S::of(scale);
                z.mapv_inplace(|v| s * v.tanh());
            }
            OutputTransform::UnitNormalize => {
                for mut row in z.rows_mut() {
                    let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if !(norm > S::zero() && norm.is_finite()) {
                        return Err(Error::Numeric {
                            layer,
                            what: format!("cannot normalize pre-activation of norm {norm}"),
                        });
                    }
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(z)
    }

    fn output_backward(&self, z: &Array2<S>, y: &Array2<S>, dy: ArrayView2<S>) -> Array2<S> {
        match self.spec.output_transform {
            OutputTransform::Identity => dy.to_owned(),
            OutputTransform::Sigmoid => {
                let mut dz = dy.to_owned();
                Zip::from(&mut dz)
                    .and(y)
                    .for_each(|d, &p| *d = *d * p * (S::one() - p));
                dz
            }
            OutputTransform::BoundedTanh { scale } => {
                let s = S::of(scale);
                let mut dz = dy.to_owned();
                Zip::from(&mut dz).and(y).for_each(|d, &v| {
                    let t = v / s;
                    *d = *d * s * (S::one() - t * t)
                });
                dz
            }
            OutputTransform::UnitNormalize => {
                let mut dz = dy.to_owned();
                for ((mut drow, yrow), zrow) in dz.rows_mut().into_iter().zip(y.rows()).zip(z.rows())
                {
                    let norm = zrow.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let proj = drow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &u| *d = (*d - u * proj) / norm);
                }
                dz
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}

fn affine<S: Scalar>(h: &Array2<S>, layer: &Layer<S>) -> Array2<S> {
    let mut z = h.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// Logistic function kept strictly inside `(0, 1)`.
#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    let p = if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    };
    p.max(S::min_positive_value())
        .min(S::one() - S::epsilon())
}

/// Horizontal concatenation of equally tall blocks.
pub fn hcat<S: Scalar>(blocks: &[ArrayView2<S>]) -> Array2<S> {
    ndarray::concatenate(Axis(1), blocks).expect("blocks share the row count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_layer(out: usize, inp: usize, t: OutputTransform) -> NetSpec {
        NetSpec::new(inp, &[], out).with_output(t)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = NetSpec::new(3, &[4, 4], 2);
        let net = Mlp::<f64>::new(spec.clone(), NetParams::zeros(&spec)).unwrap();
        let y = net.forward_one(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn unit_normalize_three_four_five() {
        let spec = one_layer(2, 2, OutputTransform::UnitNormalize);
        let mut params = NetParams::<f64>::zeros(&spec);
        params.layers[0].bias = array![3.0, 4.0];
        let net = Mlp::new(spec, params).unwrap();
        let y = net.forward_one(&[0.0, 0.0]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_normalize_rejects_zero() {
        let spec = one_layer(2, 2, OutputTransform::UnitNormalize);
        let net = Mlp::<f64>::new(spec.clone(), NetParams::zeros(&spec)).unwrap();
        assert!(matches!(
            net.forward_one(&[1.0, 1.0]),
            Err(Error::Numeric { layer: 0, .. })
        ));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let spec = one_layer(1, 1, OutputTransform::Sigmoid);
        let net = Mlp::<f64>::new(spec.clone(), NetParams::zeros(&spec)).unwrap();
        assert_eq!(net.forward_one(&[7.0]).unwrap(), vec![0.5]);
        assert!(sigmoid(800.0f64) < 1.0 && sigmoid(-800.0f64) > 0.0);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = NetSpec::new(3, &[4], 2);
        let net = Mlp::<f64>::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.forward_one(&[1.0]), Err(Error::Config(_))));
        assert!(NetSpec::new(0, &[4], 2).validate().is_err());
        assert!(NetSpec::new(2, &[4, 5], 2).with_residual(true).validate().is_err());
    }

    #[test]
    fn linear_weight_gradient_row_is_input() {
        let spec = one_layer(3, 2, OutputTransform::Identity);
        let net = Mlp::<f64>::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = array![[0.7, -1.3]];
        let cache = net.forward_cached(x.view()).unwrap();
        let dy = array![[0.0, 1.0, 0.0]];
        let (g, _) = net.backward(&cache, dy.view()).unwrap();
        assert_eq!(g.layers[0].weight.row(1).to_vec(), vec![0.7, -1.3]);
        assert_eq!(g.layers[0].weight.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.layers[0].bias.to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let spec = NetSpec::new(1, &[1], 1);
        let mut params = NetParams::<f64>::zeros(&spec);
        params.layers[0].weight[[0, 0]] = 1.0;
        params.layers[0].bias[0] = -5.0;
        params.layers[1].weight[[0, 0]] = 1.0;
        let net = Mlp::new(spec, params).unwrap();
        let cache = net.forward_cached(array![[1.0]].view()).unwrap();
        let (g, dx) = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(dx[[0, 0]], 0.0);
        assert_eq!(g.layers[0].weight[[0, 0]], 0.0);
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let spec = NetSpec::new(4, &[8, 8, 8], 3)
            .with_residual(true)
            .with_output(OutputTransform::BoundedTanh { scale: 0.2 });
        let net = Mlp::<f64>::init(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward_cached(x.view()).unwrap();
        assert_eq!(&a, b.output());
        assert!(a.iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn flat_round_trip_and_f32_cast() {
        let spec = NetSpec::new(3, &[5], 2).with_activation(Activation::Tanh);
        let net = Mlp::<f64>::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let flat = net.params.to_flat();
        assert_eq!(flat.len(), spec.num_params());
        assert_eq!(NetParams::from_flat(&spec, &flat).unwrap(), net.params);
        let small: Mlp<f32> = net.cast();
        let y64 = net.forward_one(&[0.1, 0.2, 0.3]).unwrap();
        let y32 = small.forward_one(&[0.1, 0.2, 0.3]).unwrap();
        for (a, b) in y64.iter().zip(&y32) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}
