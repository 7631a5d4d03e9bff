//! Temporal identity feature field.
//!
//! A ReLU MLP maps the positional encoding of a Gaussian's normalized center
//! and the frame time to an identity embedding. Embeddings are splatted with
//! the same front-to-back rule as colors and a per-pixel affine decoder plus
//! softmax turns the splatted feature into a class distribution (class 0 is
//! background, class 1 the queried object).

mod loss;
mod mlp;
mod train;

pub use loss::{
    kl_divergence, knn, loss_2d, loss_3d, total_loss_and_grad, KnnGraph, L3dPlan, LossBreakdown, SupervisionImage,
};
pub use mlp::{FieldParams, Layer};
pub use train::{train, Adam, LossTrace, Supervision, TrainConfig, TraceRow};

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraModel, Point3};
use crate::scene::{blend_coefficients, rasterize, DynamicPointScene, Normalizer};

/// Foreground class index in the binary query setting.
pub const FOREGROUND: usize = 1;

/// Clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Frequencies of the spatial encoding.
    pub spatial_freqs: usize,
    /// Frequencies of the temporal encoding.
    pub temporal_freqs: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classes: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spatial_freqs: 10,
            temporal_freqs: 6,
            hidden: vec![64, 64],
            embedding_dim: 16,
            classes: 2,
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        3 * (2 * self.spatial_freqs + 1) + (2 * self.temporal_freqs + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Appends `[x, sin(2^l π x), cos(2^l π x) for l in 0..freqs]` for every
/// component of `x` to `out`.
pub fn positional_encode_into(x: &[f64], freqs: usize, out: &mut Vec<f64>) {
    for &v in x {
        out.push(v);
        let mut scale = std::f64::consts::PI;
        for _ in 0..freqs {
            let (s, c) = (scale * v).sin_cos();
            out.push(s);
            out.push(c);
            scale *= 2.0;
        }
    }
}

pub fn positional_encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * freqs + 1));
    positional_encode_into(x, freqs, &mut out);
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `batch × classes` matrix, in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

/// MLP embedding network plus decoder, bound to a scene's bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityField {
    config: FieldConfig,
    normalizer: Normalizer,
    params: FieldParams,
}

impl IdentityField {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)`, zero bias on the last
    /// MLP layer.
    pub fn init(config: FieldConfig, normalizer: Normalizer, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_dim()];
        widths.extend(&config.hidden);
        widths.push(config.embedding_dim);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Layer::uniform(widths[i], widths[i + 1], i + 1 == n, rng))
            .collect();
        let decoder = Layer::uniform(config.embedding_dim, config.classes, false, rng);
        Ok(Self {
            config,
            normalizer,
            params: FieldParams { layers, decoder },
        })
    }

    pub fn from_parts(config: FieldConfig, normalizer: Normalizer, params: FieldParams) -> Result<Self> {
        config.validate()?;
        let mut expected = vec![config.input_dim()];
        expected.extend(&config.hidden);
        expected.push(config.embedding_dim);
        let shapes_ok = params.layers.len() + 1 == expected.len()
            && params
                .layers
                .iter()
                .enumerate()
                .all(|(i, l)| l.inputs() == expected[i] && l.outputs() == expected[i + 1] && l.bias.len() == l.outputs())
            && params.decoder.inputs() == config.embedding_dim
            && params.decoder.outputs() == config.classes
            && params.decoder.bias.len() == config.classes;
        if !shapes_ok {
            return Err(Error::InvalidConfig("parameter shapes do not match the field configuration".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("field parameters"));
        }
        Ok(Self {
            config,
            normalizer,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }
    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }
    pub fn params(&self) -> &FieldParams {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut FieldParams {
        &mut self.params
    }
    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Encoded network input for a world position at time `t`.
    pub fn encode_input(&self, x: &Point3, t: f64) -> Vec<f64> {
        let p = self.normalizer.apply(x);
        let mut out = Vec::with_capacity(self.config.input_dim());
        positional_encode_into(p.as_slice(), self.config.spatial_freqs, &mut out);
        positional_encode_into(&[t], self.config.temporal_freqs, &mut out);
        out
    }

    /// Encoded inputs of many positions at a shared time, `n × input_dim`.
    pub fn encode_batch(&self, positions: &[Point3], t: f64) -> Array2<f64> {
        let d = self.config.input_dim();
        let mut flat = Vec::with_capacity(positions.len() * d);
        for p in positions {
            let q = self.normalizer.apply(p);
            positional_encode_into(q.as_slice(), self.config.spatial_freqs, &mut flat);
            positional_encode_into(&[t], self.config.temporal_freqs, &mut flat);
        }
        Array2::from_shape_vec((positions.len(), d), flat).expect("encoding width")
    }

    /// Identity embedding `e` of a Gaussian centered at `x` at time `t`.
    pub fn forward(&self, x: &Point3, t: f64) -> Result<Vec<f64>> {
        if !(x.iter().all(|v| v.is_finite()) && t.is_finite()) {
            return Err(Error::NonFinite("field input"));
        }
        Ok(mlp::mlp_forward_one(&self.params.layers, &self.encode_input(x, t)))
    }

    /// Embeddings of many positions, `n × embedding_dim`.
    pub fn forward_batch(&self, positions: &[Point3], t: f64) -> Array2<f64> {
        mlp::mlp_forward(&self.params.layers, self.encode_batch(positions, t), &mut mlp::Scratch::default()).0
    }

    /// Decoder logits of a splatted feature.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.params.decoder.forward_one(feature)
    }

    /// Class distribution of a splatted feature.
    pub fn decode(&self, feature: &[f64]) -> Vec<f64> {
        softmax(&self.logits(feature))
    }
}

/// Per-Gaussian class distributions at a queried time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub time: f64,
    pub distributions: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decodes every Gaussian's own embedding at time `t`.
pub fn label_gaussians(scene: &DynamicPointScene, field: &IdentityField, t: f64) -> Result<LabeledScene> {
    let positions = scene.positions_at(t)?;
    let emb = field.forward_batch(&positions, t);
    let distributions: Vec<Vec<f64>> = emb
        .rows()
        .into_iter()
        .map(|row| field.decode(row.as_slice().expect("row-major")))
        .collect();
    let labels = distributions.iter().map(|d| argmax(d)).collect();
    Ok(LabeledScene {
        time: t,
        distributions,
        labels,
    })
}

/// Splatted per-pixel class distributions, `pixels × classes`; rows of
/// pixels without fragments are `None`.
pub fn render_distributions(
    scene: &DynamicPointScene,
    field: &IdentityField,
    camera: &CameraModel,
    t: f64,
) -> Result<Vec<Option<Vec<f64>>>> {
    let positions = scene.positions_at(t)?;
    let fragments = crate::scene::rasterize_positions(scene, &positions, camera);
    let emb = field.forward_batch(&positions, t);
    let dim = field.embedding_dim();
    let emb = emb.as_slice().expect("row-major");
    let mut out = Vec::with_capacity(fragments.pixel_count());
    for p in 0..fragments.pixel_count() {
        let frags = fragments.at_index(p);
        if frags.is_empty() {
            out.push(None);
            continue;
        }
        let mut feature = vec![0.0; dim];
        for (g, c) in blend_coefficients(frags) {
            for (f, e) in feature.iter_mut().zip(&emb[g * dim..(g + 1) * dim]) {
                *f += c * e;
            }
        }
        out.push(Some(field.decode(&feature)));
    }
    Ok(out)
}

/// Foreground mask seen from `camera` at time `t`: pixels whose decoded
/// foreground probability exceeds `threshold`. Pixels without fragments are
/// never foreground.
pub fn query_mask(
    scene: &DynamicPointScene,
    field: &IdentityField,
    camera: &CameraModel,
    t: f64,
    threshold: f64,
) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let dists = render_distributions(scene, field, camera, t)?;
    let data = dists
        .iter()
        .map(|d| d.as_ref().is_some_and(|f| f[FOREGROUND] > threshold))
        .collect();
    BinaryMask::from_vec(camera.width(), camera.height(), data)
}

/// Rasterizes and exposes the fragments of one view; handy for inspection.
pub fn fragments_at(scene: &DynamicPointScene, camera: &CameraModel, t: f64) -> Result<crate::scene::Fragments> {
    rasterize(scene, camera, t)
}
