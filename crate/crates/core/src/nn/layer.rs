//! Dense layers and analytic reverse-mode gradients.
//!
//! A layer computes `activation(x · Wᵀ + b)` for a batch `x` of shape
//! `[batch × in]`, with `W` stored row-major as `[out × in]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer")]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Deserialize)]
struct RawLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl TryFrom<RawLayer> for DenseLayer {
    type Error = Error;

    fn try_from(raw: RawLayer) -> Result<Self> {
        DenseLayer::new(raw.weights, raw.bias, raw.activation)
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(
                None,
                format!(
                    "bias has {} entries but weights have {} rows",
                    bias.len(),
                    weights.rows()
                ),
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Input("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive (got {in_dim} -> {out_dim})"
            )));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Ok(Self {
            weights: Matrix::from_vec(out_dim, in_dim, data)?,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// Weights then bias, as flat mutable slices.
    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.as_mut_slice(), &mut self.bias]
    }

    /// Pre-activation `x · Wᵀ + b`.
    fn affine(&self, input: &Matrix) -> Matrix {
        let (batch, out) = (input.rows(), self.out_dim());
        let mut pre = Matrix::zeros(batch, out);
        for b in 0..batch {
            let x = input.row(b);
            let row = pre.row_mut(b);
            for (o, dst) in row.iter_mut().enumerate() {
                let w = self.weights.row(o);
                let mut acc = self.bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *dst = acc;
            }
        }
        pre
    }

    fn check_input(&self, index: usize, input: &Matrix) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape(
                index,
                format!(
                    "expects {} inputs, received {}",
                    self.in_dim(),
                    input.cols()
                ),
            ));
        }
        Ok(())
    }
}

/// Activations retained by [`forward_cached`] for a later [`backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Gradients of one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [self.weights.as_slice(), &self.bias]
    }
}

/// Per-parameter gradient buffers mirroring a stack of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientTape {
    pub layers: Vec<LayerGrad>,
}

impl GradientTape {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        Self {
            layers: layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.layers {
            g.weights.as_mut_slice().fill(0.0);
            g.bias.fill(0.0);
        }
    }

    /// Flat gradient slices in the same order as [`params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(LayerGrad::slices).collect()
    }

    pub fn is_congruent(&self, layers: &[DenseLayer]) -> bool {
        self.layers.len() == layers.len()
            && self.layers.iter().zip(layers).all(|(g, l)| {
                g.weights.rows() == l.out_dim()
                    && g.weights.cols() == l.in_dim()
                    && g.bias.len() == l.out_dim()
            })
    }
}

/// Flat parameter slices of a layer stack: `w0, b0, w1, b1, ...`.
pub fn params_mut(layers: &mut [DenseLayer]) -> Vec<&mut [f64]> {
    layers.iter_mut().flat_map(DenseLayer::params_mut).collect()
}

/// Evaluates the stack. An empty stack is the identity map.
pub fn forward(layers: &[DenseLayer], input: &Matrix) -> Result<Matrix> {
    check_finite_input(input)?;
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        layer.check_input(i, &x)?;
        let mut pre = layer.affine(&x);
        let act = layer.activation;
        pre.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = act.apply(*v));
        x = pre;
    }
    Ok(x)
}

/// Like [`forward`], retaining what [`backward`] needs.
pub fn forward_cached(layers: &[DenseLayer], input: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_finite_input(input)?;
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
    };
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        layer.check_input(i, &x)?;
        let pre = layer.affine(&x);
        let act = layer.activation;
        let out = Matrix::from_vec(
            pre.rows(),
            pre.cols(),
            pre.as_slice().iter().map(|&v| act.apply(v)).collect(),
        )?;
        cache.inputs.push(x);
        cache.pre.push(pre);
        x = out;
    }
    if layers.is_empty() {
        // Remember the batch so an identity stack can still back-propagate.
        cache.inputs.push(x.clone());
    }
    Ok((x, cache))
}

/// Back-propagates `upstream = ∂L/∂output` through the stack.
///
/// Returns parameter gradients summed over the batch and `∂L/∂input`.
pub fn backward(
    layers: &[DenseLayer],
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(GradientTape, Matrix)> {
    if cache.is_empty() {
        return Err(Error::Usage(
            "backward called without a cached forward pass".into(),
        ));
    }
    if layers.is_empty() {
        if cache.pre.is_empty()
            && cache.inputs[0].rows() == upstream.rows()
            && cache.inputs[0].cols() == upstream.cols()
        {
            return Ok((GradientTape::default(), upstream.clone()));
        }
        return Err(Error::Usage(
            "forward cache does not match this network".into(),
        ));
    }
    if cache.pre.len() != layers.len() {
        return Err(Error::Usage(format!(
            "forward cache holds {} layers, network has {}",
            cache.pre.len(),
            layers.len()
        )));
    }
    let last = layers.len() - 1;
    if upstream.rows() != cache.pre[last].rows() || upstream.cols() != layers[last].out_dim() {
        return Err(Error::shape(
            last,
            format!(
                "upstream gradient is {}x{}, output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.pre[last].rows(),
                layers[last].out_dim()
            ),
        ));
    }

    let mut tape = GradientTape::zeros_like(layers);
    let mut grad = upstream.clone();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let pre = &cache.pre[i];
        let input = &cache.inputs[i];
        if pre.cols() != layer.out_dim() || input.cols() != layer.in_dim() {
            return Err(Error::Usage(format!(
                "forward cache does not match layer {i}"
            )));
        }
        let act = layer.activation;
        for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *g *= act.derivative(p);
        }
        let lg = &mut tape.layers[i];
        let in_dim = layer.in_dim();
        let mut next = Matrix::zeros(grad.rows(), in_dim);
        for b in 0..grad.rows() {
            let x = input.row(b);
            let gb = grad.row(b);
            let dx = next.row_mut(b);
            for (o, &go) in gb.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                lg.bias[o] += go;
                let w = layer.weights.row(o);
                let gw = lg.weights.row_mut(o);
                for k in 0..in_dim {
                    gw[k] += go * x[k];
                    dx[k] += go * w[k];
                }
            }
        }
        grad = next;
    }
    Ok((tape, grad))
}

fn check_finite_input(input: &Matrix) -> Result<()> {
    if input.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(
            "network input contains non-finite values".into(),
        ))
    }
}
