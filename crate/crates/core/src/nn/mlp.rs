//! Fully connected tanh networks over a flat parameter vector, with exact
//! reverse-mode gradients.
//!
//! Parameter layout, layer by layer: the `fan_in x fan_out` weight matrix in
//! row-major order followed by the `fan_out` biases. A batch of inputs is a
//! `batch x input_dim` matrix, so each layer computes `H W + b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Shape and offset of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

impl MlpSpec {
    /// Tanh hidden layers and a linear output head.
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dims must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidSpec("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output, e.g. `[3, 64, 64, 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let dims = self.dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }

    fn activation(&self, layer: usize, num_layers: usize) -> Activation {
        if layer + 1 == num_layers {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Flat weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Derivative of a scalar with respect to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Cached layer outputs from a batched forward pass, consumed by
/// [`Mlp::backward_batch`]. Entry 0 is the input batch, the last entry the
/// network output.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("tape always holds the input")
    }
}

/// A network spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerShape>,
    pub params: ParamVector,
}

impl Mlp {
    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        check_len("mlp parameters", spec.parameter_count(), params.len())?;
        if !params.is_finite() {
            return Err(Error::NonFinite("mlp parameters".into()));
        }
        let layers = spec.layers();
        Ok(Self {
            spec,
            layers,
            params,
        })
    }

    /// Orthogonal initialization: gain `sqrt(2)` on hidden layers, `head_gain`
    /// on the output layer, zero biases. Deterministic in `(spec, seed)`.
    pub fn init(spec: MlpSpec, seed: u64, head_gain: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec.layers();
        let mut params = ParamVector::zeros(spec.parameter_count());
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let gain = if i == last {
                head_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(layer.fan_in, layer.fan_out, &mut rng);
            for (dst, src) in params.0[layer.weight_range()].iter_mut().zip(w.iter()) {
                *dst = gain * src;
            }
        }
        Ok(Self {
            spec,
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn weight(&self, layer: &LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.fan_in, layer.fan_out),
            &self.params.0[layer.weight_range()],
        )
        .expect("layer shape matches parameter layout")
    }

    fn bias(&self, layer: &LayerShape) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.0[layer.bias_range()])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.spec.input_dim, input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Output and the exact gradient of `<output, upstream>` with respect to
    /// the parameters.
    pub fn forward_backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Gradient)> {
        check_len("mlp input", self.spec.input_dim, input.len())?;
        check_len("mlp upstream gradient", self.spec.output_dim, upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let tape = self.forward_tape(x)?;
        let mut grad = Gradient::zeros(self.parameter_count());
        self.backward_batch(&tape, up, &mut grad.0)?;
        Ok((tape.into_output().into_raw_vec_and_offset().0, grad))
    }

    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(inputs)?.into_output())
    }

    pub fn forward_tape(&self, inputs: ArrayView2<'_, f64>) -> Result<Tape> {
        check_len("mlp batch input width", self.spec.input_dim, inputs.ncols())?;
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        activations.push(inputs.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("non-empty");
            let mut z = Array2::zeros((prev.nrows(), layer.fan_out));
            z.assign(&self.bias(layer).broadcast((prev.nrows(), layer.fan_out)).expect("bias row"));
            general_mat_mul(1.0, prev, &self.weight(layer), 1.0, &mut z);
            if self.spec.activation(i, n) == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(Tape { activations })
    }

    /// Writes into `grad` the derivative of `sum_b <output_b, upstream_b>`
    /// with respect to the parameters. `grad` is overwritten, not accumulated.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("mlp gradient buffer", self.parameter_count(), grad.len())?;
        let out = tape.output();
        check_len("mlp upstream rows", out.nrows(), upstream.nrows())?;
        check_len("mlp upstream width", out.ncols(), upstream.ncols())?;

        let n = self.layers.len();
        let mut delta = upstream.to_owned();
        for i in (0..n).rev() {
            let layer = self.layers[i];
            if self.spec.activation(i, n) == Activation::Tanh {
                let h = &tape.activations[i + 1];
                ndarray::Zip::from(&mut delta)
                    .and(h)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
            }
            let input = &tape.activations[i];
            {
                let (w_grad, b_grad) = grad[layer.offset..layer.offset + layer.len()]
                    .split_at_mut(layer.fan_in * layer.fan_out);
                let mut w_grad = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), w_grad)
                    .expect("layer shape matches parameter layout");
                general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut w_grad);
                for (b, col) in b_grad.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *b = col.sum();
                }
            }
            if i > 0 {
                let mut next = Array2::zeros((delta.nrows(), layer.fan_in));
                general_mat_mul(1.0, &delta, &self.weight(&layer).t(), 0.0, &mut next);
                delta = next;
            }
        }
        Ok(())
    }
}

/// `rows x cols` matrix with orthonormal columns (if `rows >= cols`) or
/// orthonormal rows (otherwise), from Gram-Schmidt on a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::zeros((tall, short));
    q.mapv_inplace(|_| StandardNormal.sample(rng));
    for j in 0..short {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let basis = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &basis);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}
