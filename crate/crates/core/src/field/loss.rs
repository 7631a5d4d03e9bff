//! Training objectives and their analytic gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand::Rng;

use super::mlp::{mlp_backward, mlp_forward, FieldParams, Scratch};
use super::train::TrainConfig;
use super::{softmax_rows, IdentityField, FOREGROUND, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraModel, Point3};
use crate::scene::{blend_coefficients, rasterize_positions, DynamicPointScene, Fragments};

/// One supervision image: a camera, a frame index and the target mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionImage {
    pub camera: CameraModel,
    pub frame: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Pixel-averaged cross-entropy of per-pixel class distributions
/// (`pixels × classes`, row-major pixels) against a foreground mask.
pub fn loss_2d(probs: &Array2<f64>, mask: &BinaryMask) -> Result<f64> {
    let pixels = mask.width() * mask.height();
    if probs.nrows() != pixels {
        return Err(Error::LengthMismatch {
            context: "prediction pixels",
            expected: pixels,
            found: probs.nrows(),
        });
    }
    if probs.ncols() <= FOREGROUND {
        return Err(Error::LengthMismatch {
            context: "prediction classes",
            expected: FOREGROUND + 1,
            found: probs.ncols(),
        });
    }
    if pixels == 0 {
        return Ok(0.0);
    }
    Ok(cross_entropy(probs, mask))
}

fn cross_entropy(probs: &Array2<f64>, mask: &BinaryMask) -> f64 {
    let sum: f64 = probs
        .rows()
        .into_iter()
        .zip(mask.data())
        .map(|(row, &fg)| -clamped_ln(row[usize::from(fg)]))
        .sum();
    sum / mask.data().len() as f64
}

/// `KL(p ‖ q)` with both distributions clamped before the logarithm.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (clamped_ln(a) - clamped_ln(b))).sum()
}

/// The `k` nearest neighbors of `positions[query]`, excluding the query,
/// ascending by distance with ties broken by index.
pub fn knn(positions: &[Point3], query: usize, k: usize) -> Result<Vec<usize>> {
    check_k(positions.len(), k)?;
    if query >= positions.len() {
        return Err(Error::LengthMismatch {
            context: "knn query index",
            expected: positions.len(),
            found: query,
        });
    }
    let q = positions[query];
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in positions.iter().enumerate() {
        if i != query {
            offer(&mut best, k, (p - q).norm_squared(), i);
        }
    }
    Ok(best.into_iter().map(|(_, i)| i).collect())
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!("need 1 <= k < N, got k={k} with N={n}")));
    }
    Ok(())
}

/// Inserts a candidate into a sorted bounded list keyed by `(d2, index)`.
fn offer(best: &mut Vec<(f64, usize)>, k: usize, d2: f64, i: usize) {
    let key = |a: &(f64, usize)| (a.0, a.1);
    if best.len() == k {
        let worst = key(&best[k - 1]);
        if (d2, i) >= worst {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|b| key(b) < (d2, i));
    best.insert(pos, (d2, i));
}

/// Neighbor lists of every point, `k` per point.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<u32>,
}

impl KnnGraph {
    /// Exact neighbors via a sweep along x with pruning; agrees with `knn`
    /// including tie order.
    pub fn build(positions: &[Point3], k: usize) -> Result<Self> {
        let n = positions.len();
        check_k(n, k)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| positions[a].x.total_cmp(&positions[b].x).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let mut neighbors = Vec::with_capacity(n * k);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for j in 0..n {
            best.clear();
            let q = positions[j];
            let r = rank[j];
            let (mut lo, mut hi) = (r, r + 1);
            let (mut left_open, mut right_open) = (true, true);
            while left_open || right_open {
                let bound = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
                if left_open {
                    if lo == 0 {
                        left_open = false;
                    } else {
                        let i = order[lo - 1];
                        let dx = q.x - positions[i].x;
                        if dx * dx > bound {
                            left_open = false;
                        } else {
                            offer(&mut best, k, (positions[i] - q).norm_squared(), i);
                            lo -= 1;
                        }
                    }
                }
                let bound = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
                if right_open {
                    if hi == n {
                        right_open = false;
                    } else {
                        let i = order[hi];
                        let dx = positions[i].x - q.x;
                        if dx * dx > bound {
                            right_open = false;
                        } else {
                            offer(&mut best, k, (positions[i] - q).norm_squared(), i);
                            hi += 1;
                        }
                    }
                }
            }
            neighbors.extend(best.iter().map(|&(_, i)| i as u32));
        }
        Ok(Self { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn of(&self, j: usize) -> &[u32] {
        &self.neighbors[j * self.k..(j + 1) * self.k]
    }
}

/// Sampled Gaussians and their neighbors for one consistency-loss step.
#[derive(Debug, Clone, PartialEq)]
pub struct L3dPlan {
    pub time: f64,
    pub samples: Vec<usize>,
    /// `samples.len() × k`, row-major.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

/// `m` clamped to the Gaussian count, with a warning when it had to be.
pub(crate) fn effective_m(m: usize, n: usize) -> usize {
    if m > n {
        log::warn!("m = {m} exceeds the {n} Gaussians in the scene; sampling all of them");
        n
    } else {
        m
    }
}

impl L3dPlan {
    /// Samples `m` Gaussians without replacement and looks up their
    /// neighbors in `graph`.
    pub fn from_graph(graph: &KnnGraph, time: f64, m: usize, rng: &mut impl Rng) -> Self {
        let n = graph.len();
        let m = effective_m(m, n);
        let samples = rand::seq::index::sample(rng, n, m).into_vec();
        let neighbors = samples
            .iter()
            .flat_map(|&j| graph.of(j).iter().map(|&i| i as usize))
            .collect();
        Self {
            time,
            samples,
            neighbors,
            k: graph.k(),
        }
    }

    /// Mean `KL(f_j ‖ f_i)` over sampled `j` and neighbors `i`, given every
    /// Gaussian's distribution.
    pub fn value_from(&self, dists: &[Vec<f64>]) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for (s, &j) in self.samples.iter().enumerate() {
            for &i in &self.neighbors[s * self.k..(s + 1) * self.k] {
                sum += kl_divergence(&dists[j], &dists[i]);
            }
        }
        sum / (self.samples.len() * self.k) as f64
    }
}

/// Draws the consistency-loss time index and plan the way training does.
fn draw_plan(scene: &DynamicPointScene, m: usize, k: usize, rng: &mut impl Rng) -> Result<L3dPlan> {
    let frame = rng.random_range(0..scene.frames());
    let t = scene.time_of(frame)?;
    let graph = KnnGraph::build(&scene.positions_at(t)?, k)?;
    Ok(L3dPlan::from_graph(&graph, t, m, rng))
}

/// Consistency loss at `t_sample`, unweighted.
pub fn loss_3d(
    scene: &DynamicPointScene,
    field: &IdentityField,
    t_sample: f64,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let positions = scene.positions_at(t_sample)?;
    let graph = KnnGraph::build(&positions, cfg.k)?;
    let plan = L3dPlan::from_graph(&graph, t_sample, cfg.m, rng);
    let encoded = field.encode_batch(&positions, t_sample);
    let (loss, _) = evaluate(field, &[], Some((&plan, &encoded)), 1.0, 1.0, false, &mut Scratch::default())?;
    Ok(loss.l3d)
}

/// Weighted objective and its gradient over a batch of supervision images,
/// plus one consistency-loss draw.
pub fn total_loss_and_grad(
    scene: &DynamicPointScene,
    field: &IdentityField,
    batch: &[SupervisionImage],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, FieldParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("supervision batch"));
    }
    let mut prepared = Vec::with_capacity(batch.len());
    for img in batch {
        let t = scene.time_of(img.frame)?;
        let positions = scene.positions_at(t)?;
        let fragments = rasterize_positions(scene, &positions, &img.camera);
        prepared.push((fragments, field.encode_batch(&positions, t)));
    }
    let images: Vec<Image2d<'_>> = prepared
        .iter()
        .zip(batch)
        .map(|((fragments, encoded), img)| Image2d {
            fragments,
            mask: &img.mask,
            encoded,
        })
        .collect();
    let plan = draw_plan(scene, cfg.m, cfg.k, rng)?;
    let encoded = field.encode_batch(&scene.positions_at(plan.time)?, plan.time);
    let (loss, grad) = evaluate(
        field,
        &images,
        Some((&plan, &encoded)),
        cfg.lambda_2d,
        cfg.lambda_3d,
        true,
        &mut Scratch::default(),
    )?;
    Ok((loss, grad.expect("gradient requested")))
}

/// One rasterized supervision image; `encoded` holds the network input of
/// every Gaussian at the image's time.
pub(crate) struct Image2d<'a> {
    pub fragments: &'a Fragments,
    pub mask: &'a BinaryMask,
    pub encoded: &'a Array2<f64>,
}

/// Distinct ids in first-appearance order and the row of every id.
fn gather_rows(ids: impl Iterator<Item = usize>, n: usize) -> (Vec<usize>, Vec<u32>) {
    let mut row_of = vec![u32::MAX; n];
    let mut unique = Vec::new();
    for g in ids {
        if row_of[g] == u32::MAX {
            row_of[g] = unique.len() as u32;
            unique.push(g);
        }
    }
    (unique, row_of)
}

/// Copies the listed rows of `encoded` into a pooled buffer.
fn gather(encoded: &Array2<f64>, rows: &[usize], scratch: &mut Scratch) -> Array2<f64> {
    let mut out = scratch.zeros((rows.len(), encoded.ncols()));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&encoded.row(r));
    }
    out
}

/// Backprop of a loss through softmax: `f ⊙ (g − ⟨g, f⟩)` per row, where
/// `g = dL/df`.
fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((f, g), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot: f64 = f.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((o, &fc), &gc) in o.iter_mut().zip(f.iter()).zip(g.iter()) {
            *o = fc * (gc - dot);
        }
    }
    out
}

/// Shared loss evaluation. Geometry (fragments and blend weights) is held
/// constant; gradients flow through the decoder, the compositing sum and
/// the MLP.
pub(crate) fn evaluate(
    field: &IdentityField,
    images: &[Image2d<'_>],
    plan: Option<(&L3dPlan, &Array2<f64>)>,
    lambda_2d: f64,
    lambda_3d: f64,
    want_grad: bool,
    scratch: &mut Scratch,
) -> Result<(LossBreakdown, Option<FieldParams>)> {
    let params = field.params();
    let dim = field.embedding_dim();
    let classes = field.classes();
    let dec_w = &params.decoder.weight;
    let mut grad = want_grad.then(|| FieldParams::zeros_like(params));
    let mut loss = LossBreakdown::default();

    for img in images {
        let (w, h) = (img.fragments.width(), img.fragments.height());
        if img.mask.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                context: "supervision mask",
                expected: (w, h),
                found: img.mask.dims(),
            });
        }
        let n = img.encoded.nrows();
        let pixels = w * h;
        let ids = (0..pixels).flat_map(|p| img.fragments.at_index(p).iter().map(|f| f.gaussian as usize));
        let (unique, row_of) = gather_rows(ids, n);
        let inputs = gather(img.encoded, &unique, scratch);
        let (emb, cache) = mlp_forward(&params.layers, inputs, scratch);
        let emb_s = emb.as_slice().expect("row-major");

        let mut features = scratch.zeros((pixels, dim));
        {
            let feat = features.as_slice_mut().expect("row-major");
            for p in 0..pixels {
                let out = &mut feat[p * dim..(p + 1) * dim];
                for (g, c) in blend_coefficients(img.fragments.at_index(p)) {
                    let r = row_of[g] as usize;
                    for (o, e) in out.iter_mut().zip(&emb_s[r * dim..(r + 1) * dim]) {
                        *o += c * e;
                    }
                }
            }
        }
        let mut probs = params.decoder.forward(&features);
        softmax_rows(&mut probs);
        let ce = if pixels == 0 { 0.0 } else { cross_entropy(&probs, img.mask) };
        loss.l2d += ce / images.len() as f64;

        let Some(grad) = grad.as_mut().filter(|_| pixels > 0 && lambda_2d != 0.0) else {
            scratch.recycle(features);
            scratch.recycle(emb);
            continue;
        };
        let scale = lambda_2d / (pixels as f64 * images.len() as f64);
        let mut dprobs = Array2::<f64>::zeros((pixels, classes));
        for ((row, mut d), &fg) in probs.rows().into_iter().zip(dprobs.rows_mut()).zip(img.mask.data()) {
            let y = usize::from(fg);
            if row[y] > LOG_CLAMP {
                d[y] = -scale / row[y];
            }
        }
        let dlogits = softmax_backward(&probs, &dprobs);
        grad.decoder.weight += &dlogits.t().dot(&features);
        grad.decoder.bias += &dlogits.sum_axis(Axis(0));
        scratch.recycle(features);
        let mut dfeat = scratch.zeros((pixels, dim));
        general_mat_mul(1.0, &dlogits, dec_w, 0.0, &mut dfeat);
        let dfeat_s = dfeat.as_slice().expect("row-major");
        let mut demb = scratch.zeros(emb.dim());
        {
            let de = demb.as_slice_mut().expect("row-major");
            for p in 0..pixels {
                let src = &dfeat_s[p * dim..(p + 1) * dim];
                for (g, c) in blend_coefficients(img.fragments.at_index(p)) {
                    let r = row_of[g] as usize;
                    for (o, s) in de[r * dim..(r + 1) * dim].iter_mut().zip(src) {
                        *o += c * s;
                    }
                }
            }
        }
        scratch.recycle(dfeat);
        scratch.recycle(emb);
        mlp_backward(&params.layers, cache, demb, &mut grad.layers, scratch);
    }

    if let Some((plan, encoded)) = plan {
        let n = encoded.nrows();
        let count = plan.samples.len() * plan.k;
        if count > 0 {
            let (unique, row_of) = gather_rows(plan.samples.iter().chain(&plan.neighbors).copied(), n);
            let inputs = gather(encoded, &unique, scratch);
            let (emb, cache) = mlp_forward(&params.layers, inputs, scratch);
            let mut probs = params.decoder.forward(&emb);
            softmax_rows(&mut probs);
            let logp = probs.mapv(clamped_ln);
            let backprop = want_grad && lambda_3d != 0.0;
            let mut dprobs = Array2::<f64>::zeros(probs.raw_dim());
            let scale = lambda_3d / count as f64;
            let mut sum = 0.0;
            for (s, &j) in plan.samples.iter().enumerate() {
                let rj = row_of[j] as usize;
                for &i in &plan.neighbors[s * plan.k..(s + 1) * plan.k] {
                    let ri = row_of[i] as usize;
                    for c in 0..classes {
                        let (fj, fi) = (probs[[rj, c]], probs[[ri, c]]);
                        sum += fj * (logp[[rj, c]] - logp[[ri, c]]);
                        if backprop {
                            let own = if fj > LOG_CLAMP { 1.0 } else { 0.0 };
                            dprobs[[rj, c]] += scale * (logp[[rj, c]] - logp[[ri, c]] + own);
                            if fi > LOG_CLAMP {
                                dprobs[[ri, c]] -= scale * fj / fi;
                            }
                        }
                    }
                }
            }
            loss.l3d = sum / count as f64;
            if let (true, Some(grad)) = (backprop, grad.as_mut()) {
                let dlogits = softmax_backward(&probs, &dprobs);
                grad.decoder.weight += &dlogits.t().dot(&emb);
                grad.decoder.bias += &dlogits.sum_axis(Axis(0));
                let mut demb = scratch.zeros(emb.dim());
                general_mat_mul(1.0, &dlogits, dec_w, 0.0, &mut demb);
                mlp_backward(&params.layers, cache, demb, &mut grad.layers, scratch);
            }
            scratch.recycle(emb);
        }
    }
    loss.total = lambda_2d * loss.l2d + lambda_3d * loss.l3d;
    Ok((loss, grad))
}
