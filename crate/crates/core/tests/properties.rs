use std::path::Path;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use pq_core::consensus::{frame_consensus, reliability_score};
use pq_core::eval::{macc, mean_miou, miou};
use pq_core::field::{kl_divergence, softmax};
use pq_core::geometry::mask_iou;
use pq_core::io::{decode_pfm, decode_pgm, encode_pfm, encode_pgm};
use pq_core::scene::{blend_coefficients, SplatFragment};
use pq_core::{
    BinaryMask, CameraModel, ConsensusConfig, ConsensusReport, DepthMap, Point3, QueryRecord, QueryType, Trajectory,
    VoteNormalization,
};

fn mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |d| BinaryMask::from_vec(w, h, d).unwrap())
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn record(id: usize, pairs: Vec<(BinaryMask, BinaryMask)>) -> QueryRecord {
    let (p, g) = pairs.into_iter().unzip();
    QueryRecord::all_frames(format!("q{id}"), QueryType::ALL[id % 4], p, g).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in mask(6, 5), b in mask(6, 5)) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_matches_set_oracle(a in mask(7, 3), b in mask(7, 3)) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (x, y) in a.data().iter().zip(b.data()) {
            inter += (*x && *y) as usize;
            union += (*x || *y) as usize;
        }
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(mask_iou(&a, &b).unwrap(), want);
    }

    #[test]
    fn metrics_ignore_record_order(
        frames in prop::collection::vec(prop::collection::vec((mask(4, 4), mask(4, 4)), 1..4), 2..5),
        rot in 0usize..4,
    ) {
        let records: Vec<QueryRecord> = frames.into_iter().enumerate().map(|(i, f)| record(i, f)).collect();
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % records.len());
        shuffled.reverse();
        prop_assert!((mean_miou(&records).unwrap() - mean_miou(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert!((macc(&records).unwrap() - macc(&shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(mask(5, 5), 1..5)) {
        let r = QueryRecord::all_frames("q", QueryType::Spatial, gt.clone(), gt).unwrap();
        prop_assert_eq!(miou(&r).unwrap(), 1.0);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 1..6),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(p in distribution(4), q in distribution(4)) {
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn back_projection_inverts_projection(
        az in 0.0f64..std::f64::consts::TAU,
        px in 0.0f64..64.0,
        py in 0.0f64..48.0,
        depth in 0.1f64..50.0,
    ) {
        let eye = Point3::new(6.0 * az.cos(), 6.0 * az.sin(), 2.0);
        let cam = CameraModel::look_at(eye, Point3::zeros(), Vector3::z(), 80.0, 64, 48).unwrap();
        let pixel = Vector2::new(px, py);
        let world = cam.back_project(&pixel, depth).unwrap();
        let proj = cam.project(&world).unwrap();
        prop_assert!((proj.pixel - pixel).norm() < 1e-8);
        prop_assert!((proj.depth - depth).abs() < 1e-9 * depth.max(1.0));
    }

    #[test]
    fn blend_coefficients_leave_nonnegative_transmittance(weights in prop::collection::vec(0.0f64..=1.0, 0..12)) {
        let frags: Vec<SplatFragment> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| SplatFragment { gaussian: i as u32, weight: w, depth: i as f64 })
            .collect();
        let coeffs: Vec<f64> = blend_coefficients(&frags).map(|(_, c)| c).collect();
        prop_assert!(coeffs.iter().all(|&c| c >= 0.0));
        let total: f64 = coeffs.iter().sum();
        let remaining: f64 = weights.iter().map(|w| 1.0 - w).product();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!((total + remaining - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_hits_its_keyframes(steps in prop::collection::vec((0.01f64..1.0, -5.0f64..5.0), 1..6)) {
        let mut t = 0.0;
        let mut times = Vec::new();
        let mut positions = Vec::new();
        for (dt, x) in steps {
            times.push(t);
            positions.push(Point3::new(x, -x, 2.0 * x));
            t += dt;
        }
        let traj = Trajectory::new(times.clone(), positions.clone()).unwrap();
        for (t, p) in times.iter().zip(&positions) {
            prop_assert!((traj.at(*t) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn reliability_score_is_a_fraction(votes in 0usize..10, extra in 0usize..5, total in 2usize..16) {
        let peers = votes + extra;
        for norm in [VoteNormalization::AllPeers, VoteNormalization::VisiblePeers] {
            let s = reliability_score(votes.min(total - 1), peers.min(total - 1), total, norm);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    /// Stored verdicts built by a naive recount agree with the report's own
    /// recomputation, and raising tau never adds reliable views.
    #[test]
    fn report_verdicts_match_naive_recount(
        overlap in prop::collection::vec(0.0f64..1.0, 36),
        fraction in prop::collection::vec(0.0f64..1.0, 36),
        tau in 0.0f64..1.0,
        bump in 0.0f64..0.5,
    ) {
        let v = 6;
        let verdicts = |tau: f64| {
            let cfg = ConsensusConfig { tau, ..ConsensusConfig::default() };
            let mut r = ConsensusReport {
                views: (0..v).collect(),
                frames: 1,
                mean_overlap: vec![vec![0.0; v]; v],
                visibility: vec![vec![false; v]; v],
                consensus_fraction: vec![vec![0.0; v]; v],
                votes: vec![vec![false; v]; v],
                visible_peers: vec![0; v],
                reliability_score: vec![0.0; v],
                reliable: vec![false; v],
                config: cfg.clone(),
            };
            for i in 0..v {
                let mut votes = 0;
                let mut peers = 0;
                for j in 0..v {
                    if i == j {
                        continue;
                    }
                    r.mean_overlap[i][j] = overlap[i * v + j];
                    r.consensus_fraction[i][j] = fraction[i * v + j];
                    let visible = overlap[i * v + j] > cfg.visibility_min;
                    let vote = visible && fraction[i * v + j] > cfg.epsilon;
                    r.visibility[i][j] = visible;
                    r.votes[i][j] = vote;
                    peers += visible as usize;
                    votes += vote as usize;
                }
                r.visible_peers[i] = peers;
                r.reliability_score[i] = votes as f64 / (v - 1) as f64;
                r.reliable[i] = peers > 0 && r.reliability_score[i] >= tau;
            }
            r
        };
        let low = verdicts(tau);
        prop_assert!(low.inconsistencies().is_empty());
        let high = verdicts((tau + bump).min(1.0));
        for i in 0..v {
            prop_assert!(!high.reliable[i] || low.reliable[i]);
        }
    }

    #[test]
    fn frame_consensus_is_monotone_in_delta(m in mask(12, 12), other in mask(12, 12), d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let cam = CameraModel::identity(20.0, 20.0, 6.0, 6.0, 12, 12).unwrap();
        let depth = DepthMap::from_fn(12, 12, |_, _| 4.0);
        let at = |delta| {
            let cfg = ConsensusConfig { delta, ..ConsensusConfig::default() };
            frame_consensus(&m, &depth, &cam, &other, &depth, &cam, &cfg).unwrap()
        };
        prop_assert!(!at(hi) || at(lo));
    }

    #[test]
    fn pgm_round_trip(m in mask(9, 4)) {
        prop_assert_eq!(decode_pgm(&encode_pgm(&m), Path::new("m.pgm")).unwrap(), m);
    }

    #[test]
    fn pfm_round_trip(values in prop::collection::vec(prop_oneof![Just(f32::INFINITY), 0.001f32..100.0], 15)) {
        let d = DepthMap::from_values(5, 3, values).unwrap();
        prop_assert_eq!(decode_pfm(&encode_pfm(&d), Path::new("d.pfm")).unwrap(), d);
    }
}
