//! Keyframed isotropic point-Gaussians and their splatting rasterizer.
//!
//! Each Gaussian follows a piecewise-linear center trajectory and carries a
//! constant opacity, isotropic world-space radius and color. Rendering
//! projects every center, spreads it over a 3σ pixel footprint and blends
//! the per-pixel fragments front to back.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, Point3, BEHIND_CAMERA_EPS};

/// Footprint cutoff in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

/// Accumulated opacity a fragment must push past to define the pixel depth.
pub const DEPTH_OPACITY_CROSSING: f64 = 0.5;

const TIME_SLACK: f64 = 1e-12;

/// Piecewise-linear center path; clamped outside its keyframe span.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    positions: Vec<Point3>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, positions: Vec<Point3>) -> Result<Self> {
        if times.is_empty() || times.len() != positions.len() {
            return Err(Error::InvalidScene(format!(
                "trajectory needs matching non-empty keyframes, got {} times and {} positions",
                times.len(),
                positions.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidScene("keyframe times must be strictly increasing".into()));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidScene("keyframes must be finite".into()));
        }
        Ok(Self { times, positions })
    }

    pub fn fixed(position: Point3) -> Self {
        Self {
            times: vec![0.0],
            positions: vec![position],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn at(&self, t: f64) -> Point3 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.positions[0];
        }
        if t >= self.times[n - 1] {
            return self.positions[n - 1];
        }
        // first keyframe strictly after t
        let hi = self.times.partition_point(|&k| k <= t);
        let lo = hi - 1;
        let s = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        self.positions[lo] + (self.positions[hi] - self.positions[lo]) * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub trajectory: Trajectory,
    pub opacity: f64,
    /// Isotropic world-space standard deviation.
    pub scale: f64,
    pub color: [f64; 3],
}

/// Simplified dynamic Gaussian scene with normalized frame timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicPointScene {
    gaussians: Vec<Gaussian>,
    timestamps: Vec<f64>,
}

impl DynamicPointScene {
    pub fn new(gaussians: Vec<Gaussian>, timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(Error::InvalidScene("at least one timestamp required".into()));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidScene("timestamps must be strictly increasing".into()));
        }
        if timestamps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidScene("timestamps must lie in [0, 1]".into()));
        }
        for (i, g) in gaussians.iter().enumerate() {
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(Error::InvalidScene(format!("gaussian {i}: opacity {} outside [0, 1]", g.opacity)));
            }
            if !(g.scale > 0.0 && g.scale.is_finite()) {
                return Err(Error::InvalidScene(format!("gaussian {i}: scale must be positive")));
            }
            if g.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidScene(format!("gaussian {i}: color outside [0, 1]")));
            }
        }
        Ok(Self { gaussians, timestamps })
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    /// Timestamp of a frame index.
    pub fn time_of(&self, frame: usize) -> Result<f64> {
        self.timestamps
            .get(frame)
            .copied()
            .ok_or(Error::FrameCountMismatch { expected: self.frames(), found: frame + 1 })
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.timestamps[0], *self.timestamps.last().unwrap())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.time_range();
        if !(t >= lo - TIME_SLACK && t <= hi + TIME_SLACK) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(())
    }

    /// Gaussian centers at time `t`.
    pub fn positions_at(&self, t: f64) -> Result<Vec<Point3>> {
        self.check_time(t)?;
        Ok(self.gaussians.iter().map(|g| g.trajectory.at(t)).collect())
    }

    /// Axis-aligned bounds of every keyframe position.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let mut it = self.gaussians.iter().flat_map(|g| g.trajectory.positions.iter());
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }
}

/// One Gaussian's contribution to one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFragment {
    pub gaussian: u32,
    /// `opacity · falloff`, in `[0, 1]`.
    pub weight: f64,
    pub depth: f64,
}

/// Per-pixel fragment lists in compressed row layout, each list sorted by
/// depth then Gaussian index.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    fragments: Vec<SplatFragment>,
}

impl Fragments {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn total(&self) -> usize {
        self.fragments.len()
    }

    /// Fragments of the row-major pixel index `p`.
    pub fn at_index(&self, p: usize) -> &[SplatFragment] {
        &self.fragments[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn at(&self, x: usize, y: usize) -> &[SplatFragment] {
        self.at_index(y * self.width + x)
    }
}

/// Projects every Gaussian of `scene` at time `t` into `camera`.
pub fn rasterize(scene: &DynamicPointScene, camera: &CameraModel, t: f64) -> Result<Fragments> {
    let positions = scene.positions_at(t)?;
    Ok(rasterize_positions(scene, &positions, camera))
}

pub(crate) fn rasterize_positions(scene: &DynamicPointScene, positions: &[Point3], camera: &CameraModel) -> Fragments {
    let (w, h) = camera.dims();
    let mut hits: Vec<(u32, SplatFragment)> = Vec::new();
    for (idx, (g, pos)) in scene.gaussians.iter().zip(positions).enumerate() {
        let Some(proj) = camera.project(pos) else { continue };
        if proj.depth <= BEHIND_CAMERA_EPS {
            continue;
        }
        let sigma = g.scale * camera.fx() / proj.depth;
        let radius = FOOTPRINT_SIGMAS * sigma;
        let (u, v) = (proj.pixel.x, proj.pixel.y);
        let x0 = (u - radius - 0.5).ceil().max(0.0);
        let x1 = (u + radius - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (v - radius - 0.5).ceil().max(0.0);
        let y1 = (v + radius - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let dx = x as f64 + 0.5 - u;
                let dy = y as f64 + 0.5 - v;
                let d2 = dx * dx + dy * dy;
                if d2 > radius * radius {
                    continue;
                }
                hits.push((
                    (y * w + x) as u32,
                    SplatFragment {
                        gaussian: idx as u32,
                        weight: g.opacity * (-d2 * inv).exp(),
                        depth: proj.depth,
                    },
                ));
            }
        }
    }

    let mut offsets = vec![0usize; w * h + 1];
    for (p, _) in &hits {
        offsets[*p as usize + 1] += 1;
    }
    for i in 0..w * h {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut fragments = vec![
        SplatFragment {
            gaussian: 0,
            weight: 0.0,
            depth: 0.0
        };
        hits.len()
    ];
    for (p, f) in hits {
        let slot = &mut cursor[p as usize];
        fragments[*slot] = f;
        *slot += 1;
    }
    for p in 0..w * h {
        fragments[offsets[p]..offsets[p + 1]]
            .sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian.cmp(&b.gaussian)));
    }
    Fragments {
        width: w,
        height: h,
        offsets,
        fragments,
    }
}

/// Front-to-back blend coefficients `w_i · Π_{j<i}(1 − w_j)` of a sorted
/// fragment list.
pub fn blend_coefficients(fragments: &[SplatFragment]) -> impl Iterator<Item = (usize, f64)> + '_ {
    let mut transmittance = 1.0;
    fragments.iter().map(move |f| {
        let c = f.weight * transmittance;
        transmittance *= 1.0 - f.weight;
        (f.gaussian as usize, c)
    })
}

/// Alpha-composited color; empty lists yield black.
pub fn composite_color(fragments: &[SplatFragment], scene: &DynamicPointScene) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (g, c) in blend_coefficients(fragments) {
        let color = scene.gaussians[g].color;
        for k in 0..3 {
            out[k] += color[k] * c;
        }
    }
    out
}

/// Alpha-composited feature vector. `embeddings` is row-major `N × dim`.
pub fn composite_feature(fragments: &[SplatFragment], embeddings: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (g, c) in blend_coefficients(fragments) {
        let e = &embeddings[g * dim..(g + 1) * dim];
        for (o, v) in out.iter_mut().zip(e) {
            *o += v * c;
        }
    }
    out
}

/// Depth of the first fragment at which the accumulated opacity exceeds
/// one half; `+∞` if it never does.
pub fn composite_depth(fragments: &[SplatFragment]) -> f64 {
    let mut acc = 0.0;
    for (f, (_, c)) in fragments.iter().zip(blend_coefficients(fragments)) {
        acc += c;
        if acc > DEPTH_OPACITY_CROSSING {
            return f.depth;
        }
    }
    f64::INFINITY
}

/// Rendered color, depth and fragments of one view.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// Row-major RGB in `[0, 1]`.
    pub color: Vec<[f64; 3]>,
    pub depth: DepthMap,
    pub fragments: Fragments,
}

pub fn render(scene: &DynamicPointScene, camera: &CameraModel, t: f64) -> Result<Rendered> {
    let fragments = rasterize(scene, camera, t)?;
    let (w, h) = camera.dims();
    let color: Vec<[f64; 3]> = (0..w * h)
        .into_par_iter()
        .map(|p| composite_color(fragments.at_index(p), scene))
        .collect();
    let depth = DepthMap::from_fn(w, h, |x, y| composite_depth(fragments.at(x, y)));
    Ok(Rendered { color, depth, fragments })
}

/// Bounding-box normalization of positions to `[-1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub center: Vector3<f64>,
    pub half_extent: Vector3<f64>,
}

impl Normalizer {
    pub fn from_bounds(lo: Point3, hi: Point3) -> Self {
        let center = (lo + hi) * 0.5;
        let half_extent = ((hi - lo) * 0.5).map(|v| if v > 1e-9 { v } else { 1.0 });
        Self { center, half_extent }
    }

    pub fn for_scene(scene: &DynamicPointScene) -> Self {
        match scene.bounds() {
            Some((lo, hi)) => Self::from_bounds(lo, hi),
            None => Self::identity(),
        }
    }

    pub fn identity() -> Self {
        Self {
            center: Vector3::zeros(),
            half_extent: Vector3::repeat(1.0),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        (p - self.center).component_div(&self.half_extent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gaussian_at(p: Point3, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            trajectory: Trajectory::fixed(p),
            opacity,
            scale: 0.05,
            color,
        }
    }

    fn cam() -> CameraModel {
        CameraModel::identity(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap()
    }

    fn frag(g: u32, weight: f64, depth: f64) -> SplatFragment {
        SplatFragment { gaussian: g, weight, depth }
    }

    #[test]
    fn single_keyframe_is_constant() {
        let tr = Trajectory::fixed(Point3::new(1.0, 2.0, 3.0));
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(tr.at(t), Point3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let tr = Trajectory::new(vec![0.0, 1.0], vec![Point3::zeros(), Point3::new(2.0, 0.0, 0.0)]).unwrap();
        assert_eq!(tr.at(0.5), Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn three_keyframes_second_segment() {
        let ps = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 0.0), Point3::new(1.0, 3.0, 2.0)];
        let tr = Trajectory::new(vec![0.0, 0.4, 0.8], ps.clone()).unwrap();
        // hand lerp: s = (0.7 - 0.4) / 0.4 = 0.75
        let expected = Point3::new(1.0, 1.0 + 0.75 * 2.0, 0.75 * 2.0);
        assert_relative_eq!(tr.at(0.7), expected, epsilon = 1e-12);
        // clamped past the last keyframe
        assert_eq!(tr.at(0.95), ps[2]);
    }

    #[test]
    fn positions_reject_out_of_range_time() {
        let s = DynamicPointScene::new(vec![gaussian_at(Point3::z(), 1.0, [1.0; 3])], vec![0.0, 0.5]).unwrap();
        assert!(s.positions_at(0.25).is_ok());
        assert!(matches!(s.positions_at(0.75), Err(Error::TimeOutOfRange(_))));
    }

    #[test]
    fn scene_validation() {
        let g = gaussian_at(Point3::z(), 1.5, [1.0; 3]);
        assert!(DynamicPointScene::new(vec![g], vec![0.0]).is_err());
        let g = Gaussian { scale: 0.0, ..gaussian_at(Point3::z(), 1.0, [1.0; 3]) };
        assert!(DynamicPointScene::new(vec![g], vec![0.0]).is_err());
        assert!(DynamicPointScene::new(vec![], vec![0.5, 0.5]).is_err());
        assert!(Trajectory::new(vec![0.0, 0.0], vec![Point3::zeros(); 2]).is_err());
    }

    #[test]
    fn centered_gaussian_full_falloff() {
        // projects onto the center of pixel (16, 16)
        let p = Point3::new(0.5 / 100.0 * 5.0, 0.5 / 100.0 * 5.0, 5.0);
        let s = DynamicPointScene::new(vec![gaussian_at(p, 0.8, [1.0; 3])], vec![0.0]).unwrap();
        let f = rasterize(&s, &cam(), 0.0).unwrap();
        let px = f.at(16, 16);
        assert_eq!(px.len(), 1);
        assert_relative_eq!(px[0].weight, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_behind_camera_has_no_fragments() {
        let s = DynamicPointScene::new(vec![gaussian_at(Point3::new(0.0, 0.0, -2.0), 1.0, [1.0; 3])], vec![0.0]).unwrap();
        assert_eq!(rasterize(&s, &cam(), 0.0).unwrap().total(), 0);
    }

    #[test]
    fn fragments_sorted_by_depth_then_index() {
        let gs = vec![
            gaussian_at(Point3::new(0.0, 0.0, 3.0), 1.0, [1.0, 0.0, 0.0]),
            gaussian_at(Point3::new(0.0, 0.0, 2.0), 1.0, [0.0, 1.0, 0.0]),
            gaussian_at(Point3::new(0.0, 0.0, 2.0), 1.0, [0.0, 0.0, 1.0]),
        ];
        let s = DynamicPointScene::new(gs, vec![0.0]).unwrap();
        let f = rasterize(&s, &cam(), 0.0).unwrap();
        let order: Vec<(u32, f64)> = f.at(16, 16).iter().map(|f| (f.gaussian, f.depth)).collect();
        assert_eq!(order, vec![(1, 2.0), (2, 2.0), (0, 3.0)]);
    }

    #[test]
    fn footprint_radius_is_three_sigma() {
        let s = DynamicPointScene::new(vec![gaussian_at(Point3::new(0.0, 0.0, 5.0), 1.0, [1.0; 3])], vec![0.0]).unwrap();
        let f = rasterize(&s, &cam(), 0.0).unwrap();
        // sigma = 0.05 * 100 / 5 = 1 px, radius 3 px around (16, 16)
        for y in 0..32 {
            for x in 0..32 {
                let d2 = (x as f64 + 0.5 - 16.0).powi(2) + (y as f64 + 0.5 - 16.0).powi(2);
                assert_eq!(!f.at(x, y).is_empty(), d2 <= 9.0, "pixel {x},{y}");
                if let Some(fr) = f.at(x, y).first() {
                    assert_relative_eq!(fr.weight, (-d2 / 2.0).exp(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn color_compositing_cases() {
        let s = DynamicPointScene::new(
            vec![
                gaussian_at(Point3::z(), 1.0, [0.2, 0.4, 0.6]),
                gaussian_at(Point3::z(), 1.0, [1.0, 0.0, 0.5]),
            ],
            vec![0.0],
        )
        .unwrap();
        assert_eq!(composite_color(&[frag(0, 1.0, 1.0)], &s), [0.2, 0.4, 0.6]);
        let c = composite_color(&[frag(0, 0.5, 1.0), frag(1, 0.5, 2.0)], &s);
        let expected = [0.5 * 0.2 + 0.25 * 1.0, 0.5 * 0.4, 0.5 * 0.6 + 0.25 * 0.5];
        for k in 0..3 {
            assert_relative_eq!(c[k], expected[k], epsilon = 1e-15);
        }
        assert_eq!(composite_color(&[], &s), [0.0; 3]);
    }

    #[test]
    fn feature_compositing_cases() {
        let emb = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        assert_eq!(composite_feature(&[frag(1, 1.0, 1.0)], &emb, 3), vec![3.0, 4.0, -1.0]);
        let e = composite_feature(&[frag(0, 0.5, 1.0), frag(1, 0.5, 2.0)], &emb, 3);
        let expected = [0.5 * 1.0 + 0.25 * 3.0, -0.5 * 2.0 + 0.25 * 4.0, 0.5 * 0.5 + -0.25];
        for k in 0..3 {
            assert_relative_eq!(e[k], expected[k], epsilon = 1e-15);
        }
        assert_eq!(composite_feature(&[], &emb, 3), vec![0.0; 3]);
    }

    #[test]
    fn depth_compositing_cases() {
        assert_eq!(composite_depth(&[frag(0, 1.0, 4.0)]), 4.0);
        assert_eq!(composite_depth(&[]), f64::INFINITY);
        // 0.4, then 0.4 + 0.6 · 0.9 = 0.94
        assert_eq!(composite_depth(&[frag(0, 0.4, 2.0), frag(1, 0.9, 5.0)]), 5.0);
        assert_eq!(composite_depth(&[frag(0, 0.2, 2.0), frag(1, 0.2, 5.0)]), f64::INFINITY);
    }

    #[test]
    fn empty_scene_renders_black() {
        let s = DynamicPointScene::new(vec![], vec![0.0]).unwrap();
        let r = render(&s, &cam(), 0.0).unwrap();
        assert!(r.color.iter().all(|c| *c == [0.0; 3]));
        assert!(r.depth.values().iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn opaque_gaussian_render() {
        let p = Point3::new(0.5 / 100.0 * 5.0, 0.5 / 100.0 * 5.0, 5.0);
        let s = DynamicPointScene::new(vec![gaussian_at(p, 1.0, [0.3, 0.6, 0.9])], vec![0.0]).unwrap();
        let r = render(&s, &cam(), 0.0).unwrap();
        let (w, _) = (32, 32);
        assert_eq!(r.color[16 * w + 16], [0.3, 0.6, 0.9]);
        assert_eq!(r.depth.get(16, 16), 5.0);
        let covered: Vec<usize> = (0..w * w).filter(|&p| r.color[p] != [0.0; 3]).collect();
        let footprint: Vec<usize> = (0..w * w).filter(|&p| !r.fragments.at_index(p).is_empty()).collect();
        assert_eq!(covered, footprint);
        assert!(!covered.is_empty());
    }

    #[test]
    fn normalizer_maps_bounds_to_unit_cube() {
        let n = Normalizer::from_bounds(Point3::new(-1.0, 0.0, 2.0), Point3::new(3.0, 2.0, 2.0));
        assert_eq!(n.apply(&Point3::new(-1.0, 0.0, 2.0)), Point3::new(-1.0, -1.0, 0.0));
        assert_eq!(n.apply(&Point3::new(3.0, 2.0, 2.0)), Point3::new(1.0, 1.0, 0.0));
    }
}
