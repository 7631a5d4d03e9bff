//! Multi-view geometric voting over per-view mask sequences.
//!
//! For every ordered pair of views `(i, j)` each frame's mask of view `i` is
//! lifted to 3D with view `i`'s depth and re-projected into view `j`. The
//! pair first has to pass a visibility test (mean overlap of the transferred
//! mask with view `j`'s mask). Frames whose transferred IoU exceeds `delta`
//! count as consensus frames; when their fraction exceeds `epsilon` view `j`
//! votes for view `i`. A view is reliable when its normalized vote count
//! reaches `tau`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    backproject_mask_supersampled, mask_iou, overlap_fraction, reproject_mask_min_hits, BinaryMask, CameraModel,
    DepthMap, MaskSequence, Point3, DEFAULT_OCCLUSION_TOL,
};

/// Denominator used to normalize a view's vote count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteNormalization {
    /// Divide by `V - 1`, the number of other views.
    #[default]
    AllPeers,
    /// Divide by the number of peers that passed the visibility test.
    VisiblePeers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    /// Frame IoU threshold (strict).
    pub delta: f64,
    /// Consensus-frame fraction threshold (strict).
    pub epsilon: f64,
    /// Reliability threshold (inclusive).
    pub tau: f64,
    /// Mean overlap fraction a pair must exceed to be considered visible.
    pub visibility_min: f64,
    /// Relative depth slack of the occlusion test.
    pub occlusion_tol: f64,
    /// Sub-pixel samples per axis when lifting a mask to 3D.
    pub supersample: usize,
    /// Fraction of a pixel's `supersample²` samples that must land in a
    /// target pixel for it to be set. With `supersample = 1` any hit counts.
    pub min_coverage: f64,
    pub normalization: VoteNormalization,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            epsilon: 0.5,
            tau: 0.3,
            visibility_min: 0.6,
            occlusion_tol: DEFAULT_OCCLUSION_TOL,
            supersample: 3,
            min_coverage: 0.5,
            normalization: VoteNormalization::AllPeers,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("tau", self.tau),
            ("visibility_min", self.visibility_min),
            ("occlusion_tol", self.occlusion_tol),
            ("min_coverage", self.min_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.supersample == 0 {
            return Err(Error::InvalidConfig("supersample must be at least 1".into()));
        }
        Ok(())
    }

    /// Hits a target pixel needs, `max(1, ceil(min_coverage · supersample²))`.
    pub fn min_hits(&self) -> u32 {
        let samples = (self.supersample * self.supersample) as f64;
        ((self.min_coverage * samples).ceil() as u32).max(1)
    }
}

/// One view's proposals together with the geometry needed to transfer them.
#[derive(Debug, Clone, Copy)]
pub struct ConsensusView<'a> {
    pub masks: &'a MaskSequence,
    pub depths: &'a [DepthMap],
    pub camera: &'a CameraModel,
}

impl ConsensusView<'_> {
    fn frames(&self) -> usize {
        self.masks.frames()
    }

    fn check(&self) -> Result<()> {
        if self.depths.len() != self.masks.frames() {
            return Err(Error::FrameCountMismatch {
                expected: self.masks.frames(),
                found: self.depths.len(),
            });
        }
        Ok(())
    }
}

/// Audit trail of a consensus run. Matrices are indexed `[i][j]` for the
/// ordered pair "view `i` transferred into view `j`"; `votes[i][j]` means
/// view `j` voted for view `i`. Diagonals are always false / zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub config: ConsensusConfig,
    /// View ids in input order.
    pub views: Vec<usize>,
    pub frames: usize,
    pub mean_overlap: Vec<Vec<f64>>,
    pub visibility: Vec<Vec<bool>>,
    pub consensus_fraction: Vec<Vec<f64>>,
    pub votes: Vec<Vec<bool>>,
    pub visible_peers: Vec<usize>,
    pub reliability_score: Vec<f64>,
    pub reliable: Vec<bool>,
}

/// Evidence gathered for one ordered view pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEvidence {
    pub mean_overlap: f64,
    pub visible: bool,
    pub consensus_fraction: f64,
    pub vote: bool,
}

fn lift_frames(view: &ConsensusView<'_>, cfg: &ConsensusConfig) -> Result<Vec<Vec<Point3>>> {
    view.masks
        .masks
        .iter()
        .zip(view.depths)
        .map(|(m, d)| Ok(backproject_mask_supersampled(m, d, view.camera, cfg.supersample)?.points))
        .collect()
}

fn transfer(
    clouds: &[Vec<Point3>],
    target: &ConsensusView<'_>,
    cfg: &ConsensusConfig,
) -> Result<Vec<BinaryMask>> {
    clouds
        .iter()
        .zip(target.depths)
        .map(|(cloud, depth)| reproject_mask_min_hits(cloud, target.camera, depth, cfg.occlusion_tol, cfg.min_hits()))
        .collect()
}

/// `Π_{i→j}(m_{i,t})` for every frame.
pub fn transfer_sequence(
    source: &ConsensusView<'_>,
    target: &ConsensusView<'_>,
    cfg: &ConsensusConfig,
) -> Result<Vec<BinaryMask>> {
    source.check()?;
    target.check()?;
    transfer(&lift_frames(source, cfg)?, target, cfg)
}

fn mean_visible_overlap(source: &MaskSequence, projected: &[BinaryMask], target: &MaskSequence) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((src, proj), tgt) in source.masks.iter().zip(projected).zip(&target.masks) {
        if src.is_empty() {
            continue;
        }
        sum += overlap_fraction(proj, tgt)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn count_consensus_frames(projected: &[BinaryMask], target: &MaskSequence, delta: f64) -> Result<usize> {
    let mut n = 0;
    for (p, t) in projected.iter().zip(&target.masks) {
        if mask_iou(p, t)? > delta {
            n += 1;
        }
    }
    Ok(n)
}

fn pair_evidence(
    source: &MaskSequence,
    projected: &[BinaryMask],
    target: &MaskSequence,
    cfg: &ConsensusConfig,
) -> Result<PairEvidence> {
    let mean_overlap = mean_visible_overlap(source, projected, target)?;
    let visible = mean_overlap > cfg.visibility_min;
    let frames = target.frames();
    let consensus_fraction = if frames == 0 {
        0.0
    } else {
        count_consensus_frames(projected, target, cfg.delta)? as f64 / frames as f64
    };
    Ok(PairEvidence {
        mean_overlap,
        visible,
        consensus_fraction,
        vote: visible && consensus_fraction > cfg.epsilon,
    })
}

fn check_aligned(source: &ConsensusView<'_>, target: &ConsensusView<'_>) -> Result<()> {
    source.check()?;
    target.check()?;
    if source.frames() != target.frames() {
        return Err(Error::FrameCountMismatch {
            expected: source.frames(),
            found: target.frames(),
        });
    }
    Ok(())
}

/// Whether view `target` sees enough of `source`'s object: the mean overlap
/// fraction of transferred masks over frames where `source` is non-empty
/// must exceed `visibility_min`.
pub fn visibility_test(source: &ConsensusView<'_>, target: &ConsensusView<'_>, cfg: &ConsensusConfig) -> Result<bool> {
    check_aligned(source, target)?;
    let projected = transfer_sequence(source, target, cfg)?;
    Ok(mean_visible_overlap(source.masks, &projected, target.masks)? > cfg.visibility_min)
}

/// Frame-level agreement: IoU of the transferred mask with the target mask
/// strictly above `delta`.
#[allow(clippy::too_many_arguments)]
pub fn frame_consensus(
    source_mask: &BinaryMask,
    source_depth: &DepthMap,
    source_cam: &CameraModel,
    target_mask: &BinaryMask,
    target_depth: &DepthMap,
    target_cam: &CameraModel,
    cfg: &ConsensusConfig,
) -> Result<bool> {
    let cloud = backproject_mask_supersampled(source_mask, source_depth, source_cam, cfg.supersample)?.points;
    let projected = reproject_mask_min_hits(&cloud, target_cam, target_depth, cfg.occlusion_tol, cfg.min_hits())?;
    Ok(mask_iou(&projected, target_mask)? > cfg.delta)
}

/// Fraction of consensus frames over all `T` frames and whether it exceeds
/// `epsilon`. Visibility is the caller's responsibility.
pub fn view_pair_vote(
    source: &ConsensusView<'_>,
    target: &ConsensusView<'_>,
    cfg: &ConsensusConfig,
) -> Result<(bool, f64)> {
    check_aligned(source, target)?;
    let projected = transfer_sequence(source, target, cfg)?;
    let t = target.frames();
    let fraction = if t == 0 {
        0.0
    } else {
        count_consensus_frames(&projected, target.masks, cfg.delta)? as f64 / t as f64
    };
    Ok((fraction > cfg.epsilon, fraction))
}

/// Runs the full vote over every ordered pair of views.
pub fn run_consensus(views: &[ConsensusView<'_>], cfg: &ConsensusConfig) -> Result<ConsensusReport> {
    cfg.validate()?;
    let v = views.len();
    if v < 2 {
        return Err(Error::TooFewViews(v));
    }
    let frames = views[0].frames();
    for view in views {
        check_aligned(&views[0], view)?;
    }

    let clouds: Vec<Vec<Vec<Point3>>> = views
        .par_iter()
        .map(|view| lift_frames(view, cfg))
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (0..v)
        .flat_map(|i| (0..v).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let evidence: Vec<PairEvidence> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let projected = transfer(&clouds[i], &views[j], cfg)?;
            pair_evidence(views[i].masks, &projected, views[j].masks, cfg)
        })
        .collect::<Result<_>>()?;

    let mut report = ConsensusReport {
        config: cfg.clone(),
        views: views.iter().map(|w| w.masks.view).collect(),
        frames,
        mean_overlap: vec![vec![0.0; v]; v],
        visibility: vec![vec![false; v]; v],
        consensus_fraction: vec![vec![0.0; v]; v],
        votes: vec![vec![false; v]; v],
        visible_peers: vec![0; v],
        reliability_score: vec![0.0; v],
        reliable: vec![false; v],
    };
    for (&(i, j), ev) in pairs.iter().zip(&evidence) {
        report.mean_overlap[i][j] = ev.mean_overlap;
        report.visibility[i][j] = ev.visible;
        report.consensus_fraction[i][j] = ev.consensus_fraction;
        report.votes[i][j] = ev.vote;
    }
    report.finalize_reliability();
    for (i, &peers) in report.visible_peers.iter().enumerate() {
        if peers == 0 {
            log::warn!("view {} has no visible peers; marked unreliable", report.views[i]);
        }
    }
    Ok(report)
}

/// Normalized vote count of a view.
pub fn reliability_score(votes: usize, visible_peers: usize, total_views: usize, normalization: VoteNormalization) -> f64 {
    let denom = match normalization {
        VoteNormalization::AllPeers => total_views.saturating_sub(1),
        VoteNormalization::VisiblePeers => visible_peers,
    };
    if denom == 0 {
        0.0
    } else {
        votes as f64 / denom as f64
    }
}

impl ConsensusReport {
    fn finalize_reliability(&mut self) {
        let v = self.views.len();
        for i in 0..v {
            let peers = (0..v).filter(|&j| j != i && self.visibility[i][j]).count();
            let votes = (0..v).filter(|&j| j != i && self.votes[i][j]).count();
            let score = reliability_score(votes, peers, v, self.config.normalization);
            self.visible_peers[i] = peers;
            self.reliability_score[i] = score;
            self.reliable[i] = peers >= 1 && score >= self.config.tau;
        }
    }

    /// Recomputes votes, scores and reliability from the stored pair
    /// evidence and configuration. Returns the indices of views whose stored
    /// verdict disagrees with the recomputation (empty for an untouched report).
    pub fn inconsistencies(&self) -> Vec<usize> {
        let mut fresh = self.clone();
        let v = fresh.views.len();
        for i in 0..v {
            for j in 0..v {
                fresh.visibility[i][j] = i != j && fresh.mean_overlap[i][j] > fresh.config.visibility_min;
                fresh.votes[i][j] =
                    fresh.visibility[i][j] && fresh.consensus_fraction[i][j] > fresh.config.epsilon;
            }
        }
        fresh.finalize_reliability();
        (0..v)
            .filter(|&i| {
                fresh.reliable[i] != self.reliable[i]
                    || fresh.visible_peers[i] != self.visible_peers[i]
                    || fresh.reliability_score[i] != self.reliability_score[i]
            })
            .collect()
    }

    pub fn reliable_views(&self) -> Vec<usize> {
        self.views
            .iter()
            .zip(&self.reliable)
            .filter(|(_, &r)| r)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// The sequences marked reliable, in input order.
pub fn reliable_supervision(report: &ConsensusReport, sequences: &[MaskSequence]) -> Vec<MaskSequence> {
    let keep = report.reliable_views();
    sequences
        .iter()
        .filter(|s| keep.contains(&s.view))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use nalgebra::Vector3;

    /// Two cameras looking at a fronto-parallel wall at z = 5 from slightly
    /// different positions.
    fn wall_setup() -> (Vec<CameraModel>, Vec<DepthMap>) {
        let cams: Vec<CameraModel> = [-0.2, 0.2]
            .into_iter()
            .map(|x| {
                CameraModel::look_at(Point3::new(x, 0.0, 0.0), Point3::new(x, 0.0, 5.0), -Vector3::y(), 40.0, 32, 32)
                    .unwrap()
            })
            .collect();
        let depths = cams.iter().map(|_| DepthMap::from_fn(32, 32, |_, _| 5.0)).collect();
        (cams, depths)
    }

    fn square(x0: usize, y0: usize, s: usize) -> BinaryMask {
        BinaryMask::from_fn(32, 32, |x, y| (x0..x0 + s).contains(&x) && (y0..y0 + s).contains(&y))
    }

    #[test]
    fn default_config_values() {
        let c = ConsensusConfig::default();
        assert_eq!((c.delta, c.epsilon, c.tau, c.visibility_min, c.occlusion_tol), (0.3, 0.5, 0.3, 0.6, 0.01));
    }

    #[test]
    fn frame_consensus_identical_transfer() {
        let (cams, depths) = wall_setup();
        // same camera twice: transfer is the identity
        let m = square(10, 10, 8);
        let cfg = ConsensusConfig { delta: 0.99, ..Default::default() };
        assert!(frame_consensus(&m, &depths[0], &cams[0], &m, &depths[0], &cams[0], &cfg).unwrap());
    }

    #[test]
    fn frame_consensus_strict_threshold() {
        let (cams, depths) = wall_setup();
        let cam = &cams[0];
        // 10 source pixels transfer to themselves; target shares 3 and adds 0 → IoU 0.3
        let src = BinaryMask::from_fn(32, 32, |x, y| y == 5 && (0..10).contains(&x));
        let tgt = BinaryMask::from_fn(32, 32, |x, y| y == 5 && (0..3).contains(&x));
        assert!((mask_iou(&src, &tgt).unwrap() - 0.3).abs() < 1e-15);
        let cfg = ConsensusConfig::default();
        assert!(!frame_consensus(&src, &depths[0], cam, &tgt, &depths[0], cam, &cfg).unwrap());
        let cfg = ConsensusConfig { delta: 0.29, ..Default::default() };
        assert!(frame_consensus(&src, &depths[0], cam, &tgt, &depths[0], cam, &cfg).unwrap());
    }

    #[test]
    fn visibility_fails_outside_frustum() {
        let (cams, depths) = wall_setup();
        let frames = 3;
        // object appears at the far left of view 0, outside of view 1's
        // proposals which sit at the far right
        let a = MaskSequence::new(0, vec![square(0, 10, 4); frames]).unwrap();
        let b = MaskSequence::new(1, vec![square(26, 10, 4); frames]).unwrap();
        let d0 = vec![depths[0].clone(); frames];
        let d1 = vec![depths[1].clone(); frames];
        let va = ConsensusView { masks: &a, depths: &d0, camera: &cams[0] };
        let vb = ConsensusView { masks: &b, depths: &d1, camera: &cams[1] };
        assert!(!visibility_test(&va, &vb, &ConsensusConfig::default()).unwrap());
        let empty = MaskSequence::new(0, vec![BinaryMask::new(32, 32); frames]).unwrap();
        let ve = ConsensusView { masks: &empty, depths: &d0, camera: &cams[0] };
        assert!(!visibility_test(&ve, &vb, &ConsensusConfig::default()).unwrap());
    }

    #[test]
    fn visibility_threshold_is_strict() {
        let (cams, depths) = wall_setup();
        let cam = &cams[0];
        // transfer onto itself; target covers 61 of 100 projected pixels
        let src = BinaryMask::from_fn(32, 32, |x, y| x < 10 && y < 10);
        let tgt = BinaryMask::from_fn(32, 32, |x, y| y < 6 && x < 10 || y == 6 && x < 1);
        assert_eq!(tgt.count(), 61);
        let s = MaskSequence::new(0, vec![src]).unwrap();
        let t = MaskSequence::new(1, vec![tgt]).unwrap();
        let d = vec![depths[0].clone()];
        let vs = ConsensusView { masks: &s, depths: &d, camera: cam };
        let vt = ConsensusView { masks: &t, depths: &d, camera: cam };
        assert!(visibility_test(&vs, &vt, &ConsensusConfig::default()).unwrap());
        let cfg = ConsensusConfig { visibility_min: 0.61, ..Default::default() };
        assert!(!visibility_test(&vs, &vt, &cfg).unwrap());
    }

    fn vote_fixture(consensus_frames: usize, total: usize) -> (bool, f64) {
        let (cams, depths) = wall_setup();
        let cam = &cams[0];
        let good = square(4, 4, 6);
        let masks: Vec<BinaryMask> = (0..total).map(|_| good.clone()).collect();
        let target: Vec<BinaryMask> = (0..total)
            .map(|t| if t < consensus_frames { good.clone() } else { square(20, 20, 6) })
            .collect();
        let s = MaskSequence::new(0, masks).unwrap();
        let t = MaskSequence::new(1, target).unwrap();
        let d = vec![depths[0].clone(); total];
        let vs = ConsensusView { masks: &s, depths: &d, camera: cam };
        let vt = ConsensusView { masks: &t, depths: &d, camera: cam };
        view_pair_vote(&vs, &vt, &ConsensusConfig::default()).unwrap()
    }

    #[test]
    fn vote_fraction_cases() {
        let (vote, f) = vote_fixture(16, 30);
        assert!((f - 16.0 / 30.0).abs() < 1e-15 && vote);
        let (vote, f) = vote_fixture(15, 30);
        assert_eq!(f, 0.5);
        assert!(!vote);
        let (vote, f) = vote_fixture(30, 30);
        assert_eq!(f, 1.0);
        assert!(vote);
    }

    #[test]
    fn reliability_score_hand_division() {
        let s = reliability_score(3, 7, 8, VoteNormalization::AllPeers);
        assert!((s - 3.0 / 7.0).abs() < 1e-15);
        assert!((s - 0.4286).abs() < 1e-4);
        assert_eq!(reliability_score(0, 7, 8, VoteNormalization::AllPeers), 0.0);
        assert_eq!(reliability_score(2, 2, 8, VoteNormalization::VisiblePeers), 1.0);
        assert_eq!(reliability_score(2, 2, 8, VoteNormalization::AllPeers), 2.0 / 7.0);
        assert_eq!(reliability_score(0, 0, 8, VoteNormalization::VisiblePeers), 0.0);
    }

    #[test]
    fn too_few_views() {
        let (cams, depths) = wall_setup();
        let s = MaskSequence::new(0, vec![square(1, 1, 3)]).unwrap();
        let d = vec![depths[0].clone()];
        let v = ConsensusView { masks: &s, depths: &d, camera: &cams[0] };
        assert!(matches!(run_consensus(&[v], &ConsensusConfig::default()), Err(Error::TooFewViews(1))));
    }

    #[test]
    fn misaligned_frames_rejected() {
        let (cams, depths) = wall_setup();
        let a = MaskSequence::new(0, vec![square(1, 1, 3); 2]).unwrap();
        let b = MaskSequence::new(1, vec![square(1, 1, 3); 3]).unwrap();
        let da = vec![depths[0].clone(); 2];
        let db = vec![depths[1].clone(); 3];
        let views = [
            ConsensusView { masks: &a, depths: &da, camera: &cams[0] },
            ConsensusView { masks: &b, depths: &db, camera: &cams[1] },
        ];
        assert!(matches!(run_consensus(&views, &ConsensusConfig::default()), Err(Error::FrameCountMismatch { .. })));
    }

    fn report_with(reliable: &[bool]) -> ConsensusReport {
        let v = reliable.len();
        ConsensusReport {
            config: ConsensusConfig::default(),
            views: (0..v).collect(),
            frames: 1,
            mean_overlap: vec![vec![0.0; v]; v],
            visibility: vec![vec![false; v]; v],
            consensus_fraction: vec![vec![0.0; v]; v],
            votes: vec![vec![false; v]; v],
            visible_peers: vec![0; v],
            reliability_score: vec![0.0; v],
            reliable: reliable.to_vec(),
        }
    }

    #[test]
    fn reliable_supervision_selection() {
        let seqs: Vec<MaskSequence> = (0..3).map(|v| MaskSequence::new(v, vec![square(v, v, 2)]).unwrap()).collect();
        assert_eq!(reliable_supervision(&report_with(&[true; 3]), &seqs), seqs);
        assert!(reliable_supervision(&report_with(&[false; 3]), &seqs).is_empty());
        let picked = reliable_supervision(&report_with(&[true, false, true]), &seqs);
        assert_eq!(picked.iter().map(|s| s.view).collect::<Vec<_>>(), vec![0, 2]);
    }
}
