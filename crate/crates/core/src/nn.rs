//! Fully connected networks with explicit forward/backward passes and Adam.
//!
//! Batches are row-major: a batch of `b` inputs is a `b × d_in` matrix and a
//! layer computes `X · Wᵀ + b`. A network may carry a conditioning block of
//! width `cond_dim` that is concatenated to the input of every layer.

use ndarray::{concatenate, s, Array, Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Malformed(format!("activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_out × d_in`, where `d_in` includes the conditioning block.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub train_weight: bool,
    pub train_bias: bool,
}

impl DenseLayer {
    /// Uniform init in `±sqrt(6 / (d_in + d_out))`, zero bias.
    pub fn new(d_in: usize, d_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((d_out, d_in), |_| rng.random_range(-limit..limit)),
            bias: Array1::zeros(d_out),
            activation,
            train_weight: true,
            train_bias: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    cond_dim: usize,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per-layer input, conditioning included (`b × d_in`).
    pub inputs: Vec<Array2<f64>>,
    /// Per-layer pre-activation (`b × d_out`).
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
    conditioned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the network input (`b × input_dim`).
    pub input: Array2<f64>,
    /// Gradient with respect to the conditioning block, summed over layers.
    pub cond: Option<Array2<f64>>,
}

impl MlpGrads {
    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

impl Mlp {
    /// Hidden layers use ReLU, the output layer is linear.
    pub fn new(sizes: &[usize], cond_dim: usize, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least one layer");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::new(sizes[l] + cond_dim, sizes[l + 1], act, rng)
            })
            .collect();
        Self { layers, cond_dim }
    }

    pub fn from_layers(layers: Vec<DenseLayer>, cond_dim: usize) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::invalid("mlp without layers"))?;
        if last.activation != Activation::Identity {
            return Err(Error::invalid("output layer must be linear"));
        }
        for pair in layers.windows(2) {
            check_dim("mlp layer chain", pair[0].out_dim() + cond_dim, pair[1].in_dim())?;
        }
        for l in &layers {
            check_dim("mlp bias", l.out_dim(), l.bias.len())?;
            if l.in_dim() <= cond_dim {
                return Err(Error::invalid("layer narrower than its conditioning block"));
            }
        }
        Ok(Self { layers, cond_dim })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim() - self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    fn check_cond(&self, batch: usize, cond: Option<ArrayView2<f64>>) -> Result<()> {
        match (self.cond_dim, cond) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::invalid("conditioning given to an unconditioned network")),
            (_, None) => Err(Error::invalid("conditioned network needs a conditioning block")),
            (k, Some(c)) => {
                check_dim("conditioning width", k, c.ncols())?;
                check_dim("conditioning rows", batch, c.nrows())
            }
        }
    }

    fn layer_input(h: Array2<f64>, cond: Option<ArrayView2<f64>>) -> Array2<f64> {
        match cond {
            Some(c) => concatenate![Axis(1), h, c],
            None => h,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<ForwardTrace> {
        check_dim("mlp input", self.input_dim(), x.ncols())?;
        self.check_cond(x.nrows(), cond)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let input = Self::layer_input(h, cond);
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            h = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(input);
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: h,
            conditioned: cond.is_some(),
        })
    }

    /// Forward pass without keeping intermediates. Same arithmetic as
    /// [`Mlp::forward`], so outputs are bitwise equal.
    pub fn predict(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        check_dim("mlp input", self.input_dim(), x.ncols())?;
        self.check_cond(x.nrows(), cond)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let input = Self::layer_input(h, cond);
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            h = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_output: ArrayView2<f64>) -> Result<MlpGrads> {
        if trace.inputs.len() != self.layers.len() || trace.pre.len() != self.layers.len() {
            return Err(Error::invalid("trace does not belong to this network"));
        }
        if trace.conditioned != (self.cond_dim > 0) {
            return Err(Error::invalid("trace conditioning does not match network"));
        }
        for (layer, (input, pre)) in self.layers.iter().zip(trace.inputs.iter().zip(&trace.pre)) {
            check_dim("trace layer input", layer.in_dim(), input.ncols())?;
            check_dim("trace layer output", layer.out_dim(), pre.ncols())?;
        }
        check_dim("grad output width", self.output_dim(), grad_output.ncols())?;
        check_dim("grad output rows", trace.output.nrows(), grad_output.nrows())?;

        let batch = grad_output.nrows();
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut cond_grad = (self.cond_dim > 0).then(|| Array2::<f64>::zeros((batch, self.cond_dim)));
        let mut upstream = grad_output.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut delta = upstream;
            if layer.activation == Activation::Relu {
                Zip::from(&mut delta).and(&trace.pre[l]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(LayerGrad {
                weight: delta.t().dot(&trace.inputs[l]),
                bias: delta.sum_axis(Axis(0)),
            });
            let full = delta.dot(&layer.weight);
            let h_width = layer.in_dim() - self.cond_dim;
            if let Some(cg) = cond_grad.as_mut() {
                *cg += &full.slice(s![.., h_width..]);
            }
            upstream = full.slice(s![.., ..h_width]).to_owned();
        }
        grads.reverse();
        Ok(MlpGrads {
            layers: grads,
            input: upstream,
            cond: cond_grad,
        })
    }

    pub fn encode(&self, w: &mut Writer) {
        w.len_prefixed(self.layers.len());
        w.len_prefixed(self.cond_dim);
        for l in &self.layers {
            w.u8(l.activation.tag());
            w.u8(u8::from(l.train_weight) | (u8::from(l.train_bias) << 1));
            w.matrix(&l.weight);
            w.vector(&l.bias);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.len_prefixed()?;
        let cond_dim = r.len_prefixed()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let activation = Activation::from_tag(r.u8()?)?;
            let flags = r.u8()?;
            layers.push(DenseLayer {
                activation,
                train_weight: flags & 1 != 0,
                train_bias: flags & 2 != 0,
                weight: r.matrix()?,
                bias: r.vector()?,
            });
        }
        Mlp::from_layers(layers, cond_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<D: Dimension> {
    m: Array<f64, D>,
    v: Array<f64, D>,
}

impl<D: Dimension> Moments<D> {
    pub fn zeros_like(p: &Array<f64, D>) -> Self {
        Self {
            m: Array::zeros(p.raw_dim()),
            v: Array::zeros(p.raw_dim()),
        }
    }

    /// One bias-corrected Adam update at (1-based) `step`.
    pub fn update(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>, step: u64, cfg: &AdamConfig) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::invalid(format!(
                "adam shape mismatch: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        Zip::from(param)
            .and(grad)
            .and(&mut self.m)
            .and(&mut self.v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
        Ok(())
    }
}

/// Adam state for every parameter of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Moments<ndarray::Ix2>, Moments<ndarray::Ix1>)>,
}

impl AdamState {
    pub fn for_mlp(mlp: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: mlp
                .layers
                .iter()
                .map(|l| (Moments::zeros_like(&l.weight), Moments::zeros_like(&l.bias)))
                .collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update; groups whose trainable flag is off are skipped.
pub fn adam_step(mlp: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<()> {
    check_dim("adam layers", mlp.layers.len(), grads.layers.len())?;
    check_dim("adam state layers", mlp.layers.len(), state.moments.len())?;
    for (layer, g) in mlp.layers.iter().zip(&grads.layers) {
        if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
            return Err(Error::invalid("adam gradient shape mismatch"));
        }
    }
    state.step += 1;
    let cfg = state.config;
    for ((layer, g), (mw, mb)) in mlp.layers.iter_mut().zip(&grads.layers).zip(&mut state.moments) {
        if layer.train_weight {
            mw.update(&mut layer.weight, &g.weight, state.step, &cfg)?;
        }
        if layer.train_bias {
            mb.update(&mut layer.bias, &g.bias, state.step, &cfg)?;
        }
    }
    Ok(())
}
