//! Adam optimization of the identity field against reliable masks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{effective_m, evaluate, Image2d, KnnGraph, L3dPlan, LossBreakdown};
use super::mlp::{FieldParams, Scratch};
use super::{FieldConfig, IdentityField};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraModel, MaskSequence, Point3};
use crate::scene::{rasterize_positions, DynamicPointScene, Normalizer};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    /// Gaussians sampled per consistency step.
    pub m: usize,
    /// Neighbors per sampled Gaussian.
    pub k: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub train_width: usize,
    pub train_height: usize,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_2d: 1.0,
            lambda_3d: 2.0,
            m: 1000,
            k: 5,
            iterations: 2000,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            train_width: 64,
            train_height: 64,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.m == 0 || self.k == 0 {
            return bad("m and k must be at least 1".into());
        }
        if !(self.lambda_2d >= 0.0 && self.lambda_3d >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("moment decays must lie in [0, 1) and epsilon be positive".into());
        }
        if self.train_width == 0 || self.train_height == 0 {
            return bad("training resolution must be positive".into());
        }
        self.field.validate()
    }
}

/// Masks of one reliable view together with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub camera: CameraModel,
    pub masks: MaskSequence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.l2d.is_finite() && r.l3d.is_finite() && r.total.is_finite())
    }

    /// Mean total loss over the first and the last `window` iterations.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.rows.len());
        if w == 0 {
            return None;
        }
        let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[self.rows.len() - w..])))
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: FieldParams,
    v: FieldParams,
}

impl Adam {
    pub fn new(params: &FieldParams, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: FieldParams::zeros_like(params),
            v: FieldParams::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut FieldParams, grad: &FieldParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(grad.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Lazily computed per-frame quantities shared across iterations.
struct FrameCache {
    positions: Vec<Option<Vec<Point3>>>,
    encoded: Vec<Option<Array2<f64>>>,
    graphs: Vec<Option<KnnGraph>>,
}

impl FrameCache {
    fn new(frames: usize) -> Self {
        Self {
            positions: vec![None; frames],
            encoded: vec![None; frames],
            graphs: vec![None; frames],
        }
    }

    fn ensure(&mut self, scene: &DynamicPointScene, field: &IdentityField, frame: usize) -> Result<()> {
        if self.positions[frame].is_none() {
            let t = scene.time_of(frame)?;
            let pos = scene.positions_at(t)?;
            self.encoded[frame] = Some(field.encode_batch(&pos, t));
            self.positions[frame] = Some(pos);
        }
        Ok(())
    }

    fn graph(&mut self, frame: usize, k: usize) -> Result<&KnnGraph> {
        if self.graphs[frame].is_none() {
            let pos = self.positions[frame].as_ref().expect("positions cached");
            self.graphs[frame] = Some(KnnGraph::build(pos, k)?);
        }
        Ok(self.graphs[frame].as_ref().expect("just built"))
    }
}

/// Trains a fresh field on the reliable views. Each iteration renders one
/// `(view, frame)` image, visiting all pairs once per epoch in a seeded
/// shuffled order, and draws one consistency-loss frame.
pub fn train(
    scene: &DynamicPointScene,
    reliable: &[Supervision],
    cfg: &TrainConfig,
) -> Result<(IdentityField, LossTrace)> {
    cfg.validate()?;
    if reliable.is_empty() {
        return Err(Error::NoReliableEvidence);
    }
    let frames = scene.frames();
    for s in reliable {
        if s.masks.frames() != frames {
            return Err(Error::FrameCountMismatch {
                expected: frames,
                found: s.masks.frames(),
            });
        }
    }
    let n = scene.len();
    if cfg.lambda_3d != 0.0 && cfg.k >= n {
        return Err(Error::InvalidConfig(format!("need k < N, got k={} with N={n}", cfg.k)));
    }
    let m = effective_m(cfg.m, n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = IdentityField::init(cfg.field.clone(), Normalizer::for_scene(scene), &mut rng)?;
    let mut adam = Adam::new(field.params(), cfg);

    let (tw, th) = (cfg.train_width, cfg.train_height);
    let cameras: Vec<CameraModel> = reliable
        .iter()
        .map(|s| s.camera.resized(tw, th))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<BinaryMask>> = reliable
        .iter()
        .map(|s| s.masks.masks.iter().map(|m| m.resized(tw, th)).collect())
        .collect();

    let mut order: Vec<(usize, usize)> = (0..reliable.len())
        .flat_map(|s| (0..frames).map(move |f| (s, f)))
        .collect();
    let mut cursor = order.len();
    let mut cache = FrameCache::new(frames);
    let mut trace = LossTrace::default();
    let mut scratch = Scratch::default();

    for iteration in 0..cfg.iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (s, f) = order[cursor];
        cursor += 1;

        cache.ensure(scene, &field, f)?;
        let fragments = rasterize_positions(scene, cache.positions[f].as_ref().expect("cached"), &cameras[s]);

        let plan = if cfg.lambda_3d != 0.0 {
            let pf = rng.random_range(0..frames);
            cache.ensure(scene, &field, pf)?;
            let t = scene.time_of(pf)?;
            let graph = cache.graph(pf, cfg.k)?;
            Some((L3dPlan::from_graph(graph, t, m, &mut rng), pf))
        } else {
            None
        };

        let image = Image2d {
            fragments: &fragments,
            mask: &masks[s][f],
            encoded: cache.encoded[f].as_ref().expect("cached"),
        };
        let plan_ref = plan
            .as_ref()
            .map(|(p, pf)| (p, cache.encoded[*pf].as_ref().expect("cached")));
        let (loss, grad): (LossBreakdown, _) =
            evaluate(
            &field,
            std::slice::from_ref(&image),
            plan_ref,
            cfg.lambda_2d,
            cfg.lambda_3d,
            true,
            &mut scratch,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam.step(field.params_mut(), &grad.expect("gradient requested"));
        trace.rows.push(TraceRow {
            iteration,
            l2d: loss.l2d,
            l3d: loss.l3d,
            total: loss.total,
        });
        if iteration % 200 == 0 {
            log::debug!("iteration {iteration}: total {:.5}", loss.total);
        }
    }
    Ok((field, trace))
}
