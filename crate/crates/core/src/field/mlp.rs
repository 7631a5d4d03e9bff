//! Dense layers with manual reverse-mode differentiation.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Dimension};
use rand::Rng;

/// Affine map `y = W x + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights and, unless
    /// `zero_bias`, for the bias too.
    pub fn uniform(inputs: usize, outputs: usize, zero_bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..=bound));
        let bias = if zero_bias {
            Array1::zeros(outputs)
        } else {
            Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..=bound))
        };
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-batched forward pass: `x` is `batch × in`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .rows()
            .into_iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable parameters of the identity field: the MLP layers followed
/// by the per-pixel decoder. Gradients and optimizer moments reuse the type.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub layers: Vec<Layer>,
    pub decoder: Layer,
}

impl FieldParams {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect(),
            decoder: Layer::zeros(other.decoder.inputs(), other.decoder.outputs()),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Layer::len).sum::<usize>() + self.decoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.decoder)) {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.decoder)) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut rest = values;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pool of row-major buffers reused across training iterations, so large
/// temporaries are not handed back to the allocator (and the OS) each step.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    free: Vec<Vec<f64>>,
}

impl Scratch {
    pub(crate) fn zeros(&mut self, shape: (usize, usize)) -> Array2<f64> {
        let mut v = self.free.pop().unwrap_or_default();
        v.clear();
        v.resize(shape.0 * shape.1, 0.0);
        Array2::from_shape_vec(shape, v).expect("length matches shape")
    }

    pub(crate) fn recycle(&mut self, a: Array2<f64>) {
        let (v, _) = a.into_raw_vec_and_offset();
        self.free.push(v);
    }
}

/// Activations kept from a forward pass for the backward pass.
pub(crate) struct ForwardCache {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

/// ReLU MLP with a linear output layer.
pub(crate) fn mlp_forward(layers: &[Layer], x: Array2<f64>, scratch: &mut Scratch) -> (Array2<f64>, ForwardCache) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut a = x;
    for (i, layer) in layers.iter().enumerate() {
        let mut z = scratch.zeros((a.nrows(), layer.outputs()));
        general_mat_mul(1.0, &a, &layer.weight.t(), 0.0, &mut z);
        z += &layer.bias;
        if i + 1 < layers.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(a);
        a = z;
    }
    (a, ForwardCache { inputs })
}

pub(crate) fn mlp_forward_one(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        a = layer.forward_one(&a);
        if i + 1 < layers.len() {
            a.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    a
}

/// Accumulates parameter gradients given `d_out = dL/d(output)`. Consumes
/// the cache and returns its buffers to `scratch`.
pub(crate) fn mlp_backward(
    layers: &[Layer],
    cache: ForwardCache,
    d_out: Array2<f64>,
    grads: &mut [Layer],
    scratch: &mut Scratch,
) {
    let mut dz = d_out;
    for (l, input) in cache.inputs.into_iter().enumerate().rev() {
        general_mat_mul(1.0, &dz.t(), &input, 1.0, &mut grads[l].weight);
        grads[l].bias += &dz.sum_axis(Axis(0));
        if l > 0 {
            let mut da = scratch.zeros(input.raw_dim().into_pattern());
            general_mat_mul(1.0, &dz, &layers[l].weight, 0.0, &mut da);
            // `input` is the ReLU output of layer l-1; its positivity is the
            // activation's derivative
            ndarray::Zip::from(&mut da).and(&input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            scratch.recycle(std::mem::replace(&mut dz, da));
        }
        scratch.recycle(input);
    }
    scratch.recycle(dz);
}
