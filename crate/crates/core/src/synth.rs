//! Synthetic dynamic scenes with analytic ground truth, and mask corruption
//! mimicking the failure modes of a 2D grounder.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::KnnGraph;
use crate::geometry::{BinaryMask, CameraModel, DepthMap, MaskSequence, Point3};
use crate::scene::{DynamicPointScene, Gaussian, Trajectory};

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f64 },
    /// Axis-aligned box.
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub primitive: Primitive,
    pub color: [f64; 3],
    pub path: Vec<Keyframe>,
}

impl ObjectSpec {
    fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.path.iter().map(|k| k.t).collect(),
            self.path.iter().map(|k| Point3::from(k.center)).collect(),
        )
    }
}

/// Cameras evenly spaced on a horizontal circle above `look_at`, all aimed
/// at it, plus optional held-out cameras on the same circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
    pub focal: f64,
    /// Azimuth of view 0, degrees.
    pub phase_deg: f64,
    /// Azimuths of held-out cameras, degrees.
    pub heldout_deg: Vec<f64>,
}

impl RingSpec {
    fn camera_at(&self, azimuth_deg: f64, width: usize, height: usize) -> Result<CameraModel> {
        let a = azimuth_deg.to_radians();
        let target = Point3::from(self.look_at);
        let eye = target + Vector3::new(self.radius * a.cos(), self.radius * a.sin(), self.height);
        CameraModel::look_at(eye, target, Vector3::z(), self.focal, width, height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub ring: RingSpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Index into `objects` of the queried object.
    pub target: usize,
    pub seed: u64,
    /// Gaussians per unit surface area.
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_opacity")]
    pub opacity: f64,
}

fn default_density() -> f64 {
    400.0
}
fn default_opacity() -> f64 {
    0.9
}

impl SceneSpec {
    /// Two equal spheres, the target moving and the other static, watched by
    /// `views` ring cameras plus one held-out camera at 22.5°.
    pub fn two_spheres(views: usize, seed: u64) -> Self {
        Self {
            objects: vec![
                ObjectSpec {
                    name: "moving sphere".into(),
                    primitive: Primitive::Sphere { radius: 0.5 },
                    color: [0.9, 0.2, 0.2],
                    path: vec![
                        Keyframe {
                            t: 0.0,
                            center: [-0.6, -0.4, 0.0],
                        },
                        Keyframe {
                            t: 1.0,
                            center: [-0.4, 0.4, 0.1],
                        },
                    ],
                },
                ObjectSpec {
                    name: "static sphere".into(),
                    primitive: Primitive::Sphere { radius: 0.5 },
                    color: [0.2, 0.3, 0.9],
                    path: vec![Keyframe {
                        t: 0.0,
                        center: [0.6, 0.0, 0.0],
                    }],
                },
            ],
            ring: RingSpec {
                count: views,
                radius: 0.8,
                height: 10.0,
                look_at: [0.0, 0.0, 0.0],
                focal: 220.0,
                phase_deg: 0.0,
                heldout_deg: vec![22.5],
            },
            frames: 30,
            width: 64,
            height: 64,
            target: 0,
            seed,
            density: default_density(),
            opacity: default_opacity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.ring.count == 0 || self.frames == 0 {
            return bad("need at least one view and one frame".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive".into());
        }
        if self.objects.is_empty() || self.target >= self.objects.len() {
            return bad(format!("target {} does not name one of {} objects", self.target, self.objects.len()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad("density must be positive".into());
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad("opacity must lie in (0, 1]".into());
        }
        if !(self.ring.focal > 0.0 && self.ring.radius >= 0.0) {
            return bad("ring focal length must be positive".into());
        }
        for o in &self.objects {
            let ok = match &o.primitive {
                Primitive::Sphere { radius } => *radius > 0.0,
                Primitive::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            };
            if !ok {
                return bad(format!("object `{}` is degenerate", o.name));
            }
            if o.path.is_empty() {
                return bad(format!("object `{}` has no keyframes", o.name));
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("object `{}` color outside [0, 1]", o.name));
            }
        }
        Ok(())
    }

    pub fn timestamps(&self) -> Vec<f64> {
        if self.frames == 1 {
            return vec![0.0];
        }
        (0..self.frames).map(|f| f as f64 / (self.frames - 1) as f64).collect()
    }

    /// Ring cameras followed by held-out cameras.
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        let step = 360.0 / self.ring.count as f64;
        (0..self.ring.count)
            .map(|v| self.ring.phase_deg + step * v as f64)
            .chain(self.ring.heldout_deg.iter().copied())
            .map(|a| self.ring.camera_at(a, self.width, self.height))
            .collect()
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// A generated scene with its cameras and analytic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub scene: DynamicPointScene,
    /// Ring views first, then held-out views.
    pub cameras: Vec<CameraModel>,
    /// Visible-surface masks, `[view][object]`.
    pub gt: Vec<Vec<MaskSequence>>,
    /// `[view][frame]`.
    pub depths: Vec<Vec<DepthMap>>,
    pub rgb: Vec<Vec<RgbImage>>,
    /// Object index of each Gaussian.
    pub owner: Vec<usize>,
}

impl SyntheticScene {
    pub fn ring_views(&self) -> usize {
        self.spec.ring.count
    }

    pub fn heldout_views(&self) -> std::ops::Range<usize> {
        self.spec.ring.count..self.cameras.len()
    }

    pub fn target_gt(&self, view: usize) -> &MaskSequence {
        &self.gt[view][self.spec.target]
    }

    /// First object other than the target, if any.
    pub fn distractor(&self) -> Option<usize> {
        (0..self.spec.objects.len()).find(|&o| o != self.spec.target)
    }
}

/// Nearest positive ray parameter hitting a sphere; `dir` is unit length.
pub fn ray_sphere(origin: &Point3, dir: &Vector3<f64>, center: &Point3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = dir.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [-b - sq, -b + sq].into_iter().find(|&s| s > RAY_EPS)
}

/// Nearest positive ray parameter hitting an axis-aligned box (slab test).
pub fn ray_box(origin: &Point3, dir: &Vector3<f64>, center: &Point3, half: &[f64; 3]) -> Option<f64> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let (o, d) = (origin[a] - center[a], dir[a]);
        if d.abs() < 1e-15 {
            if o.abs() > half[a] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((-half[a] - o) / d, (half[a] - o) / d);
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    if hi < lo || hi <= RAY_EPS {
        return None;
    }
    Some(if lo > RAY_EPS { lo } else { hi })
}

/// Per-pixel nearest hit: depth along the optical axis and the object hit.
pub fn analytic_hits(spec: &SceneSpec, camera: &CameraModel, t: f64) -> Result<(DepthMap, Vec<Option<usize>>)> {
    let centers = spec
        .objects
        .iter()
        .map(|o| Ok(o.trajectory()?.at(t)))
        .collect::<Result<Vec<Point3>>>()?;
    let (w, h) = camera.dims();
    let origin = Point3::from(*camera.translation());
    let forward = camera.forward();
    let mut owner = vec![None; w * h];
    let mut z = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let dir = camera.ray_direction(&nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            let mut best: Option<(f64, usize)> = None;
            for (i, (o, c)) in spec.objects.iter().zip(&centers).enumerate() {
                let hit = match &o.primitive {
                    Primitive::Sphere { radius } => ray_sphere(&origin, &dir, c, *radius),
                    Primitive::Box { half_extents } => ray_box(&origin, &dir, c, half_extents),
                };
                if let Some(s) = hit {
                    if best.is_none_or(|(b, _)| s < b) {
                        best = Some((s, i));
                    }
                }
            }
            if let Some((s, i)) = best {
                owner[y * w + x] = Some(i);
                z[y * w + x] = s * dir.dot(&forward);
            }
        }
    }
    let depth = DepthMap::from_fn(w, h, |x, y| z[y * w + x]);
    Ok((depth, owner))
}

/// Depth of the nearest primitive surface along each pixel's central ray
/// (measured along the optical axis); background pixels hold the sentinel.
pub fn analytic_depth(spec: &SceneSpec, camera: &CameraModel, t: f64) -> Result<DepthMap> {
    Ok(analytic_hits(spec, camera, t)?.0)
}

fn sample_sphere(radius: f64, density: f64, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let area = 4.0 * std::f64::consts::PI * radius * radius;
    let n = (density * area).round().max(1.0) as usize;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64 + phase;
            Vector3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect()
}

fn sample_box(half: &[f64; 3], density: f64, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let spacing = 1.0 / density.sqrt();
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = ((2.0 * half[u]) / spacing).ceil().max(1.0) as usize;
        let nv = ((2.0 * half[v]) / spacing).ceil().max(1.0) as usize;
        let (du, dv) = (2.0 * half[u] / nu as f64, 2.0 * half[v] / nv as f64);
        for side in [-1.0, 1.0] {
            for i in 0..nu {
                for j in 0..nv {
                    let mut p = Vector3::zeros();
                    p[axis] = side * half[axis];
                    p[u] = -half[u] + du * (i as f64 + 0.5 + rng.random_range(-0.25..0.25));
                    p[v] = -half[v] + dv * (j as f64 + 0.5 + rng.random_range(-0.25..0.25));
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Surface-sampled Gaussians of every object plus their owners.
fn sample_gaussians(spec: &SceneSpec, rng: &mut impl Rng) -> Result<(Vec<Gaussian>, Vec<usize>)> {
    let mut gaussians = Vec::new();
    let mut owner = Vec::new();
    for (idx, obj) in spec.objects.iter().enumerate() {
        let offsets = match &obj.primitive {
            Primitive::Sphere { radius } => sample_sphere(*radius, spec.density, rng),
            Primitive::Box { half_extents } => sample_box(half_extents, spec.density, rng),
        };
        if offsets.len() < 2 {
            return Err(Error::InvalidScene(format!("object `{}` received fewer than 2 samples", obj.name)));
        }
        let rest: Vec<Point3> = offsets.iter().map(|o| Point3::from(*o)).collect();
        let graph = KnnGraph::build(&rest, 1)?;
        let mean_spacing = (0..rest.len())
            .map(|i| (rest[graph.of(i)[0] as usize] - rest[i]).norm())
            .sum::<f64>()
            / rest.len() as f64;
        let scale = 0.5 * mean_spacing;
        let path = obj.trajectory()?;
        for o in &offsets {
            let positions = path.positions().iter().map(|c| c + o).collect();
            gaussians.push(Gaussian {
                trajectory: Trajectory::new(path.times().to_vec(), positions)?,
                opacity: spec.opacity,
                scale,
                color: obj.color,
            });
            owner.push(idx);
        }
    }
    Ok((gaussians, owner))
}

/// Builds the point-Gaussian scene, the cameras and analytic per-view
/// ground truth. Deterministic in the spec (including its seed).
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gaussians, owner) = sample_gaussians(spec, &mut rng)?;
    let timestamps = spec.timestamps();
    let scene = DynamicPointScene::new(gaussians, timestamps.clone())?;
    let cameras = spec.cameras()?;
    let objects = spec.objects.len();
    let mut gt = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    let mut rgb = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let mut per_object: Vec<Vec<BinaryMask>> = vec![Vec::with_capacity(spec.frames); objects];
        let mut view_depths = Vec::with_capacity(spec.frames);
        let mut view_rgb = Vec::with_capacity(spec.frames);
        for &t in &timestamps {
            let (depth, hits) = analytic_hits(spec, cam, t)?;
            for (o, masks) in per_object.iter_mut().enumerate() {
                let data = hits.iter().map(|h| *h == Some(o)).collect();
                masks.push(BinaryMask::from_vec(spec.width, spec.height, data)?);
            }
            let data = hits
                .iter()
                .flat_map(|h| match h {
                    Some(o) => spec.objects[*o].color.map(|c| (c * 255.0).round() as u8),
                    None => [0, 0, 0],
                })
                .collect();
            view_rgb.push(RgbImage {
                width: spec.width,
                height: spec.height,
                data,
            });
            view_depths.push(depth);
        }
        gt.push(
            per_object
                .into_iter()
                .map(|m| MaskSequence::new(v, m))
                .collect::<Result<Vec<_>>>()?,
        );
        depths.push(view_depths);
        rgb.push(view_rgb);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        scene,
        cameras,
        gt,
        depths,
        rgb,
        owner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Square structuring-element radius of boundary jitter.
    pub jitter_radius: usize,
    /// Per-frame probability of jitter (dilate or erode, equally likely).
    pub jitter_prob: f64,
    /// Per-frame probability of an empty proposal.
    pub dropout_prob: f64,
    /// Views whose proposals show the wrong object.
    pub hallucinated_views: Vec<usize>,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            jitter_radius: 1,
            jitter_prob: 0.0,
            dropout_prob: 0.0,
            hallucinated_views: Vec::new(),
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    /// Radius-1 jitter on half the frames everywhere and the last
    /// `ceil(3V/8)` ring views hallucinating.
    pub fn standard(views: usize, seed: u64) -> Self {
        let bad = (3 * views).div_ceil(8);
        Self {
            jitter_radius: 1,
            jitter_prob: 0.5,
            dropout_prob: 0.0,
            hallucinated_views: (views - bad.min(views)..views).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.jitter_prob, self.dropout_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Applies hallucination (replacing the sequence with `wrong`), frame
/// dropout, then boundary jitter. The random stream depends on the spec
/// seed and the sequence's view id only.
pub fn corrupt_masks(gt: &MaskSequence, wrong: Option<&MaskSequence>, cspec: &CorruptionSpec) -> Result<MaskSequence> {
    cspec.validate()?;
    let source = if cspec.hallucinated_views.contains(&gt.view) {
        let wrong = wrong.ok_or_else(|| Error::InvalidConfig(format!("view {} hallucinates but no wrong mask was given", gt.view)))?;
        if wrong.frames() != gt.frames() {
            return Err(Error::FrameCountMismatch {
                expected: gt.frames(),
                found: wrong.frames(),
            });
        }
        wrong
    } else {
        gt
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cspec.seed ^ (gt.view as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let masks = source
        .masks
        .iter()
        .map(|m| {
            let drop = rng.random_bool(cspec.dropout_prob);
            let jitter = rng.random_bool(cspec.jitter_prob);
            let dilate = rng.random_bool(0.5);
            if drop {
                BinaryMask::new(m.width(), m.height())
            } else if jitter && cspec.jitter_radius > 0 {
                if dilate {
                    m.dilate(cspec.jitter_radius)
                } else {
                    m.erode(cspec.jitter_radius)
                }
            } else {
                m.clone()
            }
        })
        .collect();
    MaskSequence::new(gt.view, masks)
}

/// Corrupted target proposals of every ring view: hallucinated views show
/// the distractor object.
pub fn fixture_proposals(synth: &SyntheticScene, cspec: &CorruptionSpec) -> Result<Vec<MaskSequence>> {
    let distractor = synth.distractor();
    (0..synth.ring_views())
        .map(|v| corrupt_masks(synth.target_gt(v), distractor.map(|d| &synth.gt[v][d]), cspec))
        .collect()
}
