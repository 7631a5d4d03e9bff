//! Pinhole camera math, depth maps and binary masks.
//!
//! Camera coordinates follow the usual computer-vision convention: `x` to the
//! right, `y` down, `z` along the optical axis. Pixel `(x, y)` covers the
//! continuous square `[x, x+1) × [y, y+1)`, so its center sits at
//! `(x + 0.5, y + 0.5)` and a projected coordinate belongs to the pixel given
//! by `floor`.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Points closer to the image plane than this are treated as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

/// Default relative slack of the re-projection occlusion test.
pub const DEFAULT_OCCLUSION_TOL: f64 = 0.01;

const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics plus a world-from-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// A world point expressed on the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    /// Integer pixel containing the projection, if inside `width × height`.
    pub fn pixel_index(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let x = self.pixel.x.floor();
        let y = self.pixel.y.floor();
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!(
                "resolution must be at least 1x1, got {width}x{height}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidCamera(
                "rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world's
    /// upward direction. The principal point is the image center.
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            eye,
        )
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    /// World-from-camera orientation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    /// Camera center in world coordinates.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
            self.rotation,
            self.translation,
        )
    }

    pub fn world_to_camera(&self, point: &Point3) -> Point3 {
        self.rotation.transpose() * (point - self.translation)
    }

    pub fn camera_to_world(&self, point: &Point3) -> Point3 {
        self.rotation * point + self.translation
    }

    /// Projects a world point. Returns `None` when the point lies at or
    /// behind the image plane (`Z <= 1e-9`).
    pub fn project(&self, point: &Point3) -> Option<Projection> {
        let p = self.world_to_camera(point);
        if p.z <= BEHIND_CAMERA_EPS {
            return None;
        }
        Some(Projection {
            pixel: Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy),
            depth: p.z,
        })
    }

    /// Inverse of [`project`](Self::project) for a continuous pixel and its
    /// depth along the optical axis.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Point3> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        let cam = Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        );
        Ok(self.camera_to_world(&cam))
    }

    /// World-space unit ray direction through a continuous pixel coordinate.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let cam = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        (self.rotation * cam).normalize()
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }
}

fn check_dims(context: &'static str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Per-pixel metric depth along the camera z-axis; `+∞` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthMap {
    /// All-background map.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![f32::INFINITY; width * height],
        }
    }

    /// Builds a map from row-major values. Non-positive or NaN entries are
    /// rejected; `+∞` is the background sentinel.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "depth map",
                expected: (width, height),
                found: (values.len(), 1),
            });
        }
        if let Some(&bad) = values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidDepth(bad as f64));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let d = f(x, y);
                values.push(if d.is_finite() && d > 0.0 { d as f32 } else { f32::INFINITY });
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Depth at a pixel, `+∞` for background.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x] as f64
    }

    pub fn is_background(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x].is_infinite()
    }
}

/// Per-pixel foreground flags.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let mut mask = Self::new(width, height);
        for &(x, y) in pixels {
            mask.set(x, y, true);
        }
        mask
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "binary mask",
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Coordinates of foreground pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Morphological dilation with a `(2r+1)²` square, clipped at the borders.
    pub fn dilate(&self, radius: usize) -> Self {
        self.morph(radius, true)
    }

    /// Morphological erosion with a `(2r+1)²` square. Pixels outside the
    /// image count as background.
    pub fn erode(&self, radius: usize) -> Self {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        Self::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            let mut window = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (x + dx, y + dy)));
            let inside = |(nx, ny): (isize, isize)| {
                nx >= 0 && ny >= 0 && nx < w && ny < h && self.get(nx as usize, ny as usize)
            };
            if dilate {
                window.any(inside)
            } else {
                window.all(inside)
            }
        })
    }

    /// Nearest-neighbor resampling (pixel-center aligned).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}

/// Time-indexed masks of one view, one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub view: usize,
    pub masks: Vec<BinaryMask>,
}

impl MaskSequence {
    pub fn new(view: usize, masks: Vec<BinaryMask>) -> Result<Self> {
        if let Some(first) = masks.first() {
            for m in &masks[1..] {
                check_dims("mask sequence", first.dims(), m.dims())?;
            }
        }
        Ok(Self { view, masks })
    }

    pub fn frames(&self) -> usize {
        self.masks.len()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.masks.first().map(BinaryMask::dims)
    }
}

/// Output of [`backproject_mask`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackProjection {
    pub points: Vec<Point3>,
    /// Foreground pixels dropped for lack of a valid depth.
    pub skipped: usize,
}

/// Lifts every foreground pixel with valid depth to a world point at the
/// pixel center.
pub fn backproject_mask(mask: &BinaryMask, depth: &DepthMap, camera: &CameraModel) -> Result<BackProjection> {
    backproject_mask_supersampled(mask, depth, camera, 1)
}

/// Like [`backproject_mask`] but emits `factor²` points per pixel on a
/// regular sub-pixel grid, all at the pixel's depth. `factor = 1` samples the
/// pixel center only.
pub fn backproject_mask_supersampled(
    mask: &BinaryMask,
    depth: &DepthMap,
    camera: &CameraModel,
    factor: usize,
) -> Result<BackProjection> {
    check_dims("back-projection (mask vs depth)", mask.dims(), depth.dims())?;
    check_dims("back-projection (mask vs camera)", camera.dims(), mask.dims())?;
    let factor = factor.max(1);
    let step = 1.0 / factor as f64;
    let mut out = BackProjection::default();
    for (x, y) in mask.pixels() {
        let d = depth.get(x, y);
        if !d.is_finite() {
            out.skipped += 1;
            continue;
        }
        for sy in 0..factor {
            for sx in 0..factor {
                let pixel = Vector2::new(
                    x as f64 + (sx as f64 + 0.5) * step,
                    y as f64 + (sy as f64 + 0.5) * step,
                );
                out.points.push(camera.back_project(&pixel, d)?);
            }
        }
    }
    Ok(out)
}

/// Renders a point cloud into `target` as a binary mask, keeping only points
/// in front of the camera, inside the image and not occluded according to
/// `target_depth` (relative slack `occlusion_tol`).
pub fn reproject_mask(
    cloud: &[Point3],
    target: &CameraModel,
    target_depth: &DepthMap,
    occlusion_tol: f64,
) -> Result<BinaryMask> {
    reproject_mask_min_hits(cloud, target, target_depth, occlusion_tol, 1)
}

/// Per-pixel count of cloud points passing the tests of [`reproject_mask`].
pub fn reproject_hits(
    cloud: &[Point3],
    target: &CameraModel,
    target_depth: &DepthMap,
    occlusion_tol: f64,
) -> Result<Vec<u32>> {
    check_dims("re-projection (camera vs depth)", target.dims(), target_depth.dims())?;
    if !(occlusion_tol >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "occlusion tolerance must be non-negative, got {occlusion_tol}"
        )));
    }
    let (w, h) = target.dims();
    let mut hits = vec![0u32; w * h];
    for p in cloud {
        let Some(proj) = target.project(p) else { continue };
        let Some((x, y)) = proj.pixel_index(w, h) else { continue };
        if proj.depth <= target_depth.get(x, y) * (1.0 + occlusion_tol) {
            hits[y * w + x] += 1;
        }
    }
    Ok(hits)
}

/// Like [`reproject_mask`] but a pixel needs at least `min_hits` points.
/// With a supersampled cloud this approximates "the transferred region
/// covers the pixel center" instead of "touches the pixel".
pub fn reproject_mask_min_hits(
    cloud: &[Point3],
    target: &CameraModel,
    target_depth: &DepthMap,
    occlusion_tol: f64,
    min_hits: u32,
) -> Result<BinaryMask> {
    let hits = reproject_hits(cloud, target, target_depth, occlusion_tol)?;
    let min_hits = min_hits.max(1);
    BinaryMask::from_vec(target.width(), target.height(), hits.iter().map(|&c| c >= min_hits).collect())
}

/// Intersection over union; 1 for two empty masks.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims("mask IoU", a.dims(), b.dims())?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Fraction of `projected` covered by `target`; 0 when `projected` is empty.
pub fn overlap_fraction(projected: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    check_dims("overlap fraction", projected.dims(), target.dims())?;
    let n = projected.count();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(projected.intersection_count(target) as f64 / n as f64)
}
