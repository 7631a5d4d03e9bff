//! On-disk formats.
//!
//! Depth maps are grayscale PFM (`Pf`, little-endian, rows stored bottom to
//! top, background written as `0.0`), masks binary PGM (`P5`), color frames
//! PPM (`P6`). Every JSON document carries a top-level `schema_version`;
//! unknown fields are ignored on load.
//!
//! A dataset directory looks like
//!
//! ```text
//! DIR/manifest.json
//! DIR/scene.json
//! DIR/views/v00/camera.json
//! DIR/views/v00/depth_0000.pfm ...
//! DIR/views/v00/rgb_0000.ppm ...
//! DIR/views/v00/proposal_0000.pgm ...   (ring views only)
//! DIR/views/v00/gt_0000.pgm ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusReport;
use crate::error::{Error, Result};
use crate::eval::{MetricsTable, QueryType};
use crate::field::{FieldConfig, FieldParams, IdentityField, Layer, LossTrace, TraceRow};
use crate::geometry::{BinaryMask, CameraModel, DepthMap, MaskSequence, Point3};
use crate::scene::{DynamicPointScene, Gaussian, Normalizer, Trajectory};
use crate::synth::{RgbImage, SyntheticScene};

/// Version written into every JSON document.
pub const SCHEMA_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: &str = "1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Netpbm-style headers

/// Reads `count` whitespace-separated header tokens after `magic`, skipping
/// `#` comments. Returns the tokens and the offset of the payload, which
/// starts after exactly one whitespace byte.
fn parse_header<'a>(bytes: &'a [u8], magic: &str, count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(format_err(path, 0, format!("expected magic {magic:?}")));
    }
    let mut pos = magic.len();
    let mut tokens = Vec::with_capacity(count);
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, pos, "truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, start, "non-ASCII header"))?;
        tokens.push(token);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing whitespace after header"));
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(token: &str, path: &Path, offset: usize) -> Result<usize> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(path, offset, format!("invalid dimension {token:?}"))),
    }
}

fn check_payload(bytes: &[u8], start: usize, needed: usize, path: &Path) -> Result<()> {
    let available = bytes.len() - start;
    if available < needed {
        return Err(format_err(
            path,
            bytes.len(),
            format!("pixel data truncated: expected {needed} bytes, found {available}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PFM depth

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for &v in &depth.values()[y * w..(y + 1) * w] {
            let stored = if v.is_infinite() { 0.0f32 } else { v };
            out.extend_from_slice(&stored.to_le_bytes());
        }
    }
    out
}

/// Decodes a grayscale PFM. `path` is only used in error messages.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let (tokens, start) = parse_header(bytes, "Pf", 3, path)?;
    let w = parse_dim(tokens[0], path, 0)?;
    let h = parse_dim(tokens[1], path, 0)?;
    let scale: f64 = tokens[2]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err(path, start - 1, format!("invalid scale {:?}", tokens[2])))?;
    let little = scale < 0.0;
    check_payload(bytes, start, w * h * 4, path)?;
    let mut values = vec![0.0f32; w * h];
    for (i, chunk) in bytes[start..start + w * h * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (i / w, i % w);
        let y = h - 1 - row;
        values[y * w + x] = if v == 0.0 { f32::INFINITY } else { v };
    }
    DepthMap::from_values(w, h, values).map_err(|e| format_err(path, start, e.to_string()))
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------------------
// PGM masks and PPM color

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let (w, h) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Any nonzero sample loads as foreground.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (tokens, start) = parse_header(bytes, "P5", 3, path)?;
    let w = parse_dim(tokens[0], path, 0)?;
    let h = parse_dim(tokens[1], path, 0)?;
    let maxval = parse_dim(tokens[2], path, 0)?;
    if maxval > 255 {
        return Err(format_err(path, start - 1, format!("16-bit PGM (maxval {maxval}) is not supported")));
    }
    check_payload(bytes, start, w * h, path)?;
    let data = bytes[start..start + w * h].iter().map(|&b| b != 0).collect();
    BinaryMask::from_vec(w, h, data)
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (tokens, start) = parse_header(bytes, "P6", 3, path)?;
    let width = parse_dim(tokens[0], path, 0)?;
    let height = parse_dim(tokens[1], path, 0)?;
    if parse_dim(tokens[2], path, 0)? > 255 {
        return Err(format_err(path, start - 1, "16-bit PPM is not supported"));
    }
    check_payload(bytes, start, width * height * 3, path)?;
    Ok(RgbImage {
        width,
        height,
        data: bytes[start..start + width * height * 3].to_vec(),
    })
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------------------
// Versioned JSON

/// Serializes `value` (which must be a JSON object) with a leading
/// `schema_version` key. Floats use the shortest representation that parses
/// back to the same bits.
pub fn to_document<T: Serialize>(value: &T) -> Result<String> {
    let body = serde_json::to_value(value).map_err(|source| Error::Json {
        path: PathBuf::new(),
        source,
    })?;
    let serde_json::Value::Object(fields) = body else {
        return Err(Error::InvalidConfig("only objects can be stored as documents".into()));
    };
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), SCHEMA_VERSION.into());
    doc.extend(fields.into_iter().filter(|(k, _)| k != "schema_version"));
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("values always serialize");
    text.push('\n');
    Ok(text)
}

pub fn from_document<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let json = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(json)?;
    let version = value
        .as_object_mut()
        .and_then(|o| o.remove("schema_version"))
        .ok_or_else(|| Error::SchemaVersion {
            path: path.to_path_buf(),
            found: "<missing>".into(),
        })?;
    let supported = version
        .as_str()
        .is_some_and(|v| v.split('.').next() == Some(SUPPORTED_MAJOR));
    if !supported {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version.to_string(),
        });
    }
    serde_json::from_value(value).map_err(json)
}

pub fn write_document<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_document(value).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })?;
    write_bytes(path, text.as_bytes())
}

pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    from_document(&text, path)
}

// ---------------------------------------------------------------------------
// Cameras and scenes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub center: [f64; 3],
}

impl From<&CameraModel> for CameraDoc {
    fn from(c: &CameraModel) -> Self {
        let r = c.rotation();
        let t = c.translation();
        Self {
            width: c.width(),
            height: c.height(),
            fx: c.fx(),
            fy: c.fy(),
            cx: c.cx(),
            cy: c.cy(),
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            center: [t.x, t.y, t.z],
        }
    }
}

impl CameraDoc {
    pub fn to_camera(&self) -> Result<CameraModel> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            r,
            Vector3::from(self.center),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDoc {
    /// Keyframe times.
    pub times: Vec<f64>,
    /// Keyframe centers.
    pub positions: Vec<[f64; 3]>,
    pub opacity: f64,
    pub scale: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub timestamps: Vec<f64>,
    pub gaussians: Vec<GaussianDoc>,
}

impl From<&DynamicPointScene> for SceneDoc {
    fn from(scene: &DynamicPointScene) -> Self {
        Self {
            timestamps: scene.timestamps().to_vec(),
            gaussians: scene
                .gaussians()
                .iter()
                .map(|g| GaussianDoc {
                    times: g.trajectory.times().to_vec(),
                    positions: g.trajectory.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
                    opacity: g.opacity,
                    scale: g.scale,
                    color: g.color,
                })
                .collect(),
        }
    }
}

impl SceneDoc {
    pub fn to_scene(&self) -> Result<DynamicPointScene> {
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let positions = g.positions.iter().map(|&p| Point3::from(p)).collect();
                Ok(Gaussian {
                    trajectory: Trajectory::new(g.times.clone(), positions)?,
                    opacity: g.opacity,
                    scale: g.scale,
                    color: g.color,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DynamicPointScene::new(gaussians, self.timestamps.clone())
    }
}

pub fn save_camera(path: &Path, camera: &CameraModel) -> Result<()> {
    write_document(path, &CameraDoc::from(camera))
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    read_document::<CameraDoc>(path)?.to_camera().map_err(|e| dataset_err(path, e))
}

pub fn save_scene(path: &Path, scene: &DynamicPointScene) -> Result<()> {
    write_document(path, &SceneDoc::from(scene))
}

pub fn load_scene(path: &Path) -> Result<DynamicPointScene> {
    read_document::<SceneDoc>(path)?.to_scene().map_err(|e| dataset_err(path, e))
}

fn dataset_err(path: &Path, e: Error) -> Error {
    match e {
        e @ (Error::Io { .. } | Error::Json { .. } | Error::Format { .. } | Error::SchemaVersion { .. } | Error::Dataset { .. }) => e,
        other => Error::Dataset {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub id: usize,
    /// Held-out views carry no proposals and are only used for evaluation.
    #[serde(default)]
    pub heldout: bool,
    pub camera: String,
    /// File pattern with a `{t}` or `{t:0N}` frame placeholder.
    pub depth: String,
    #[serde(default)]
    pub rgb: Option<String>,
    #[serde(default)]
    pub proposal: Option<String>,
    #[serde(default)]
    pub gt: Option<String>,
}

/// A grounding query. The prompt is opaque to this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMeta {
    pub id: String,
    #[serde(rename = "type")]
    pub query_type: QueryType,
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frames: usize,
    pub timestamps: Vec<f64>,
    pub scene: String,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub queries: Vec<QueryMeta>,
}

/// Substitutes the frame index into `{t}` or a zero-padded `{t:0N}`.
pub fn expand_pattern(pattern: &str, frame: usize) -> Result<String> {
    let Some(open) = pattern.find("{t") else {
        return Err(Error::InvalidConfig(format!("pattern {pattern:?} has no frame placeholder")));
    };
    let Some(close) = pattern[open..].find('}').map(|c| open + c) else {
        return Err(Error::InvalidConfig(format!("unterminated placeholder in {pattern:?}")));
    };
    let spec = &pattern[open + 2..close];
    let number = match spec {
        "" => frame.to_string(),
        _ => {
            let width = spec
                .strip_prefix(":0")
                .and_then(|w| w.parse::<usize>().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("unsupported placeholder in {pattern:?}")))?;
            format!("{frame:0width$}")
        }
    };
    Ok(format!("{}{}{}", &pattern[..open], number, &pattern[close + 1..]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub id: usize,
    pub heldout: bool,
    pub camera: CameraModel,
    pub depths: Vec<DepthMap>,
    pub rgb: Option<Vec<RgbImage>>,
    pub proposals: Option<MaskSequence>,
    pub gt: Option<MaskSequence>,
}

/// Fully loaded, cross-validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scene: DynamicPointScene,
    pub views: Vec<ViewData>,
}

impl Dataset {
    /// Packages a synthetic scene. `proposals` holds one sequence per ring
    /// view; ground truth is the target object's visible surface.
    pub fn from_synthetic(synth: &SyntheticScene, proposals: &[MaskSequence], queries: Vec<QueryMeta>) -> Result<Self> {
        if proposals.len() != synth.ring_views() {
            return Err(Error::LengthMismatch {
                context: "proposal sequences",
                expected: synth.ring_views(),
                found: proposals.len(),
            });
        }
        let frames = synth.scene.frames();
        let mut views = Vec::with_capacity(synth.cameras.len());
        let mut entries = Vec::with_capacity(synth.cameras.len());
        for (v, camera) in synth.cameras.iter().enumerate() {
            let heldout = v >= synth.ring_views();
            let dir = format!("views/v{v:02}");
            entries.push(ViewEntry {
                id: v,
                heldout,
                camera: format!("{dir}/camera.json"),
                depth: format!("{dir}/depth_{{t:04}}.pfm"),
                rgb: Some(format!("{dir}/rgb_{{t:04}}.ppm")),
                proposal: (!heldout).then(|| format!("{dir}/proposal_{{t:04}}.pgm")),
                gt: Some(format!("{dir}/gt_{{t:04}}.pgm")),
            });
            views.push(ViewData {
                id: v,
                heldout,
                camera: camera.clone(),
                depths: synth.depths[v].clone(),
                rgb: Some(synth.rgb[v].clone()),
                proposals: (!heldout).then(|| proposals[v].clone()),
                gt: Some(synth.target_gt(v).clone()),
            });
        }
        let manifest = DatasetManifest {
            frames,
            timestamps: synth.scene.timestamps().to_vec(),
            scene: "scene.json".into(),
            views: entries,
            queries,
        };
        Ok(Self {
            manifest,
            scene: synth.scene.clone(),
            views,
        })
    }

    pub fn view(&self, id: usize) -> Option<&ViewData> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn ring_views(&self) -> impl Iterator<Item = &ViewData> {
        self.views.iter().filter(|v| !v.heldout)
    }

    pub fn heldout_views(&self) -> impl Iterator<Item = &ViewData> {
        self.views.iter().filter(|v| v.heldout)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_dataset(root: &Path, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    write_document(&root.join(MANIFEST_FILE), m)?;
    save_scene(&root.join(&m.scene), &data.scene)?;
    for (entry, view) in m.views.iter().zip(&data.views) {
        save_camera(&root.join(&entry.camera), &view.camera)?;
        for t in 0..m.frames {
            write_pfm(&root.join(expand_pattern(&entry.depth, t)?), &view.depths[t])?;
            if let (Some(p), Some(rgb)) = (&entry.rgb, &view.rgb) {
                write_ppm(&root.join(expand_pattern(p, t)?), &rgb[t])?;
            }
            if let (Some(p), Some(seq)) = (&entry.proposal, &view.proposals) {
                write_pgm(&root.join(expand_pattern(p, t)?), &seq.masks[t])?;
            }
            if let (Some(p), Some(seq)) = (&entry.gt, &view.gt) {
                write_pgm(&root.join(expand_pattern(p, t)?), &seq.masks[t])?;
            }
        }
    }
    Ok(())
}

fn load_frames<T: Send>(
    root: &Path,
    pattern: &str,
    frames: usize,
    dims: (usize, usize),
    read: impl Fn(&Path) -> Result<T> + Sync,
    dims_of: impl Fn(&T) -> (usize, usize) + Sync,
) -> Result<Vec<T>> {
    (0..frames)
        .into_par_iter()
        .map(|t| {
            let path = root.join(expand_pattern(pattern, t)?);
            let item = read(&path)?;
            if dims_of(&item) != dims {
                return Err(Error::Dataset {
                    path,
                    message: format!("image is {:?}, camera expects {:?}", dims_of(&item), dims),
                });
            }
            Ok(item)
        })
        .collect()
}

fn load_view(root: &Path, entry: &ViewEntry, frames: usize) -> Result<ViewData> {
    let camera = load_camera(&root.join(&entry.camera))?;
    let dims = camera.dims();
    let depths = load_frames(root, &entry.depth, frames, dims, read_pfm, DepthMap::dims)?;
    let rgb = entry
        .rgb
        .as_ref()
        .map(|p| load_frames(root, p, frames, dims, read_ppm, |i: &RgbImage| (i.width, i.height)))
        .transpose()?;
    let masks = |pattern: &Option<String>| -> Result<Option<MaskSequence>> {
        pattern
            .as_ref()
            .map(|p| MaskSequence::new(entry.id, load_frames(root, p, frames, dims, read_pgm, BinaryMask::dims)?))
            .transpose()
    };
    Ok(ViewData {
        id: entry.id,
        heldout: entry.heldout,
        camera,
        depths,
        rgb,
        proposals: masks(&entry.proposal)?,
        gt: masks(&entry.gt)?,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_document(&manifest_path)?;
    let bad = |message: String| Error::Dataset {
        path: manifest_path.clone(),
        message,
    };
    if manifest.frames == 0 || manifest.timestamps.len() != manifest.frames {
        return Err(bad(format!(
            "{} timestamps listed for {} frames",
            manifest.timestamps.len(),
            manifest.frames
        )));
    }
    let mut ids: Vec<usize> = manifest.views.iter().map(|v| v.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != manifest.views.len() {
        return Err(bad("duplicate view ids".into()));
    }
    let scene_path = root.join(&manifest.scene);
    let scene = load_scene(&scene_path)?;
    if scene.timestamps() != manifest.timestamps.as_slice() {
        return Err(Error::Dataset {
            path: scene_path,
            message: "scene timestamps differ from the manifest".into(),
        });
    }
    let views = manifest
        .views
        .par_iter()
        .map(|entry| load_view(root, entry, manifest.frames).map_err(|e| dataset_err(&root.join(&entry.camera), e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, scene, views })
}

// ---------------------------------------------------------------------------
// Reports, checkpoints, metrics

pub fn save_report(path: &Path, report: &ConsensusReport) -> Result<()> {
    write_document(path, report)
}

pub fn load_report(path: &Path) -> Result<ConsensusReport> {
    read_document(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    /// `outputs × inputs`, row-major.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<&Layer> for LayerDoc {
    fn from(l: &Layer) -> Self {
        Self {
            weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.to_vec(),
        }
    }
}

impl LayerDoc {
    fn to_layer(&self) -> Result<Layer> {
        let outputs = self.weight.len();
        let inputs = self.weight.first().map_or(0, Vec::len);
        if self.weight.iter().any(|r| r.len() != inputs) {
            return Err(Error::InvalidConfig("ragged weight matrix".into()));
        }
        let flat: Vec<f64> = self.weight.iter().flatten().copied().collect();
        let weight = Array2::from_shape_vec((outputs, inputs), flat).expect("shape checked");
        Ok(Layer {
            weight,
            bias: Array1::from(self.bias.clone()),
        })
    }
}

/// Serialized identity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDoc {
    pub config: FieldConfig,
    pub normalizer_center: [f64; 3],
    pub normalizer_half_extent: [f64; 3],
    pub layers: Vec<LayerDoc>,
    pub decoder: LayerDoc,
}

impl From<&IdentityField> for FieldDoc {
    fn from(f: &IdentityField) -> Self {
        let n = f.normalizer();
        Self {
            config: f.config().clone(),
            normalizer_center: n.center.into(),
            normalizer_half_extent: n.half_extent.into(),
            layers: f.params().layers.iter().map(LayerDoc::from).collect(),
            decoder: LayerDoc::from(&f.params().decoder),
        }
    }
}

impl FieldDoc {
    pub fn to_field(&self) -> Result<IdentityField> {
        let params = FieldParams {
            layers: self.layers.iter().map(LayerDoc::to_layer).collect::<Result<_>>()?,
            decoder: self.decoder.to_layer()?,
        };
        let normalizer = Normalizer {
            center: Vector3::from(self.normalizer_center),
            half_extent: Vector3::from(self.normalizer_half_extent),
        };
        IdentityField::from_parts(self.config.clone(), normalizer, params)
    }
}

pub fn save_field(path: &Path, field: &IdentityField) -> Result<()> {
    write_document(path, &FieldDoc::from(field))
}

pub fn load_field(path: &Path) -> Result<IdentityField> {
    read_document::<FieldDoc>(path)?.to_field().map_err(|e| dataset_err(path, e))
}

pub fn save_metrics(path: &Path, table: &MetricsTable) -> Result<()> {
    write_document(path, table)
}

pub fn load_metrics(path: &Path) -> Result<MetricsTable> {
    read_document(path)
}

pub fn trace_csv(trace: &LossTrace) -> String {
    let mut out = String::from("iteration,l2d,l3d,total\n");
    for r in &trace.rows {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, r.l2d, r.l3d, r.total));
    }
    out
}

pub fn write_trace(path: &Path, trace: &LossTrace) -> Result<()> {
    write_bytes(path, trace_csv(trace).as_bytes())
}

pub fn read_trace(path: &Path) -> Result<LossTrace> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let line_start = offset;
        offset += line.len() + 1;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (fields.len() == 4)
            .then(|| {
                Some(TraceRow {
                    iteration: fields[0].parse().ok()?,
                    l2d: fields[1].parse().ok()?,
                    l3d: fields[2].parse().ok()?,
                    total: fields[3].parse().ok()?,
                })
            })
            .flatten();
        rows.push(parsed.ok_or_else(|| format_err(path, line_start, format!("malformed row {line:?}")))?);
    }
    Ok(LossTrace { rows })
}

// ---------------------------------------------------------------------------
// Mask directories for evaluation

/// One query's masks in one view, as listed in a mask directory's index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSetEntry {
    pub query: String,
    #[serde(rename = "type")]
    pub query_type: QueryType,
    pub view: usize,
    pub frames: usize,
    pub pattern: String,
    /// Frames with annotations; all frames when absent.
    #[serde(default)]
    pub valid_frames: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub sets: Vec<MaskSetEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub query: String,
    pub query_type: QueryType,
    pub view: usize,
    pub masks: Vec<BinaryMask>,
    pub valid_frames: Option<Vec<usize>>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `DIR/index.json` and `DIR/<query>/vNN/mask_TTTT.pgm`.
pub fn save_mask_dir(dir: &Path, sets: &[MaskSet]) -> Result<()> {
    let mut entries = Vec::with_capacity(sets.len());
    for s in sets {
        let pattern = format!("{}/v{:02}/mask_{{t:04}}.pgm", s.query, s.view);
        for (t, m) in s.masks.iter().enumerate() {
            write_pgm(&dir.join(expand_pattern(&pattern, t)?), m)?;
        }
        entries.push(MaskSetEntry {
            query: s.query.clone(),
            query_type: s.query_type,
            view: s.view,
            frames: s.masks.len(),
            pattern,
            valid_frames: s.valid_frames.clone(),
        });
    }
    write_document(&dir.join(INDEX_FILE), &MaskIndex { sets: entries })
}

pub fn load_mask_dir(dir: &Path) -> Result<Vec<MaskSet>> {
    let index: MaskIndex = read_document(&dir.join(INDEX_FILE))?;
    index
        .sets
        .into_iter()
        .map(|e| {
            let masks = (0..e.frames)
                .into_par_iter()
                .map(|t| read_pgm(&dir.join(expand_pattern(&e.pattern, t)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(MaskSet {
                query: e.query,
                query_type: e.query_type,
                view: e.view,
                masks,
                valid_frames: e.valid_frames,
            })
        })
        .collect()
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)
}
