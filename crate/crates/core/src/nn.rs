//! Fully-connected ReLU classifier over a flat parameter vector.
//!
//! Parameters are stored layer by layer. Each layer contributes its weight
//! matrix (`fan_in x fan_out`, row-major) followed by its bias vector, so a
//! forward pass is `relu(x . W + b)` per hidden layer and a softmax on top.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for NetworkShape {
    /// 784-200-200-200-10: three hidden ReLU layers for 28x28 inputs.
    fn default() -> Self {
        Self {
            input_dim: 784,
            hidden_dims: vec![200, 200, 200],
            output_dim: 10,
        }
    }
}

/// Offsets of one affine layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSpan {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_dims,
            output_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Shape("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {self}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpan> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);

        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let span = LayerSpan {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = span.end();
                span
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, LayerSpan::end)
    }
}

impl std::fmt::Display for NetworkShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_dims {
            write!(f, "-{h}")?;
        }
        write!(f, "-{}", self.output_dim)
    }
}

/// Flat storage for every weight and bias of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: self.len(),
            });
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// A labelled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::LengthMismatch {
                expected: inputs.nrows(),
                got: labels.len(),
            });
        }
        check_finite(inputs.view())?;
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    /// Gradient of the minibatch-rescaled log posterior.
    pub grad: ParamVector,
    pub mean_nll: f64,
    pub accuracy: f64,
}

/// Multiplicative masks applied to hidden activations (inverted dropout).
///
/// One matrix per hidden layer with either one row (shared by every input)
/// or one row per input. Entries are `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMasks(pub Vec<Array2<f64>>);

impl HiddenMasks {
    /// Draw masks for `rows` rows; `rows == 1` gives one thinned network.
    pub fn sample<R: Rng + ?Sized>(shape: &NetworkShape, rows: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        Self(
            shape
                .hidden_dims
                .iter()
                .map(|&h| Array2::from_shape_fn((rows, h), |_| if rng.random::<f64>() < rate { 0.0 } else { keep }))
                .collect(),
        )
    }

    fn check(&self, shape: &NetworkShape, rows: usize) -> Result<()> {
        if self.0.len() != shape.hidden_dims.len() {
            return Err(Error::Shape(format!(
                "{} dropout masks for {} hidden layers",
                self.0.len(),
                shape.hidden_dims.len()
            )));
        }
        for (mask, &h) in self.0.iter().zip(&shape.hidden_dims) {
            if mask.ncols() != h || (mask.nrows() != 1 && mask.nrows() != rows) {
                return Err(Error::Shape(format!(
                    "dropout mask {:?} does not fit {rows}x{h}",
                    mask.dim()
                )));
            }
        }
        Ok(())
    }
}

/// A network shape bound to a parameter vector of matching length.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    shape: &'a NetworkShape,
    params: &'a [f64],
}

impl<'a> Mlp<'a> {
    pub fn new(shape: &'a NetworkShape, params: &'a ParamVector) -> Result<Self> {
        shape.validate()?;
        params.check_len(shape.param_count())?;
        Ok(Self {
            shape,
            params: params.as_slice(),
        })
    }

    fn weights(&self, span: &LayerSpan) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (span.fan_in, span.fan_out),
            &self.params[span.weight_offset..span.bias_offset],
        )
        .expect("layer span matches shape")
    }

    fn bias(&self, span: &LayerSpan) -> ArrayView1<'a, f64> {
        ArrayView1::from(&self.params[span.bias_offset..span.end()])
    }

    fn check_inputs(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.shape.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                inputs.ncols(),
                self.shape.input_dim
            )));
        }
        check_finite(inputs)
    }

    /// Class probabilities, one row per input.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_masked(inputs, None)
    }

    pub fn forward_masked(&self, inputs: ArrayView2<f64>, masks: Option<&HiddenMasks>) -> Result<Array2<f64>> {
        self.check_inputs(inputs)?;
        if let Some(m) = masks {
            m.check(self.shape, inputs.nrows())?;
        }
        let logits = self.run(inputs, masks, None);
        Ok(log_softmax(logits).mapv_into(f64::exp))
    }

    /// Affine/ReLU chain. When `cache` is given, every layer's post-activation
    /// output (after masking) is stored for backpropagation.
    fn run(
        &self,
        inputs: ArrayView2<f64>,
        masks: Option<&HiddenMasks>,
        mut cache: Option<&mut Vec<Array2<f64>>>,
    ) -> Array2<f64> {
        let layers = self.shape.layers();
        let last = layers.len() - 1;
        let mut act = inputs.to_owned();
        for (l, span) in layers.iter().enumerate() {
            let mut z = Array2::<f64>::zeros((act.nrows(), span.fan_out));
            general_mat_mul(1.0, &act, &self.weights(span), 0.0, &mut z);
            z += &self.bias(span);
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
                if let Some(m) = masks {
                    z *= &m.0[l];
                }
            }
            let prev = std::mem::replace(&mut act, z);
            if let Some(c) = cache.as_deref_mut() {
                c.push(prev);
            }
        }
        act
    }

    /// Gradient of `(M / n) * sum_i log p(y_i | x_i, w) - (prior_precision / 2) * |w|^2`.
    pub fn log_posterior_grad(
        &self,
        batch: &Batch,
        total_train_size: usize,
        prior_precision: f64,
        masks: Option<&HiddenMasks>,
    ) -> Result<GradOutput> {
        let n = batch.len();
        if total_train_size < n {
            return Err(Error::Validation(format!(
                "total_train_size {total_train_size} smaller than batch size {n}"
            )));
        }
        if !(prior_precision > 0.0 && prior_precision.is_finite()) {
            return Err(Error::Validation(format!("prior precision must be positive, got {prior_precision}")));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.shape.output_dim) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                self.shape.output_dim
            )));
        }
        self.check_inputs(batch.inputs.view())?;
        if let Some(m) = masks {
            m.check(self.shape, n)?;
        }

        let mut acts = Vec::with_capacity(self.shape.hidden_dims.len() + 1);
        let logits = self.run(batch.inputs.view(), masks, Some(&mut acts));
        let log_probs = log_softmax(logits);

        let mut nll = 0.0;
        let mut correct = 0usize;
        for (row, &y) in log_probs.axis_iter(Axis(0)).zip(&batch.labels) {
            nll -= row[y];
            if argmax(row) == y {
                correct += 1;
            }
        }

        // d/dlogits of the scaled log-likelihood: (M/n) * (onehot - p).
        let scale = total_train_size as f64 / n as f64;
        let mut delta = log_probs.mapv_into(|lp| -scale * lp.exp());
        for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(&batch.labels) {
            row[y] += scale;
        }

        let mut grad: Vec<f64> = self.params.iter().map(|w| -prior_precision * w).collect();
        let layers = self.shape.layers();
        for l in (0..layers.len()).rev() {
            let span = &layers[l];
            let input = &acts[l];
            {
                let (w_grad, b_grad) = grad[span.weight_offset..span.end()].split_at_mut(span.fan_in * span.fan_out);
                let mut w_grad = ArrayViewMut2::from_shape((span.fan_in, span.fan_out), w_grad)
                    .expect("layer span matches shape");
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut w_grad);
                for (b, s) in b_grad.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *b += s;
                }
            }
            if l == 0 {
                break;
            }
            // `input` is the masked ReLU output of layer l-1; zero entries
            // (inactive or dropped units) block the gradient, survivors carry
            // the dropout scale.
            let mut back = Array2::<f64>::zeros((n, span.fan_in));
            general_mat_mul(1.0, &delta, &self.weights(span).t(), 0.0, &mut back);
            back.zip_mut_with(input, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            if let Some(m) = masks {
                back *= &m.0[l - 1];
            }
            delta = back;
        }

        Ok(GradOutput {
            grad: ParamVector(grad),
            mean_nll: nll / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }
}

pub fn forward(shape: &NetworkShape, params: &ParamVector, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    Mlp::new(shape, params)?.forward(inputs)
}

pub fn log_posterior_grad(
    shape: &NetworkShape,
    params: &ParamVector,
    batch: &Batch,
    total_train_size: usize,
    prior_precision: f64,
) -> Result<GradOutput> {
    Mlp::new(shape, params)?.log_posterior_grad(batch, total_train_size, prior_precision, None)
}

/// `(M / n) * sum_i log p(y_i | x_i, w) - (prior_precision / 2) * |w|^2`.
pub fn log_posterior(
    shape: &NetworkShape,
    params: &ParamVector,
    batch: &Batch,
    total_train_size: usize,
    prior_precision: f64,
) -> Result<f64> {
    let probs = forward(shape, params, batch.inputs.view())?;
    let mut ll = 0.0;
    for (row, &y) in probs.axis_iter(Axis(0)).zip(&batch.labels) {
        if y >= shape.output_dim {
            return Err(Error::Validation(format!("label {y} out of range")));
        }
        ll += row[y].ln();
    }
    let sq: f64 = params.as_slice().iter().map(|w| w * w).sum();
    Ok(total_train_size as f64 / batch.len() as f64 * ll - 0.5 * prior_precision * sq)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(shape: &NetworkShape, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; shape.param_count()];
    for span in shape.layers() {
        let limit = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
        for w in &mut values[span.weight_offset..span.bias_offset] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    ParamVector(values)
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn log_softmax(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - log_norm);
    }
    logits
}

fn check_finite(inputs: ArrayView2<f64>) -> Result<()> {
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite input value".into()));
    }
    Ok(())
}
