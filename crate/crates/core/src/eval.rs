//! Estimated tracks vs ground truth: speed error, trajectory RMSE,
//! identity switches, and lobe false positives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::ImageCalibration;
use crate::io::GtBox;
use crate::tracking::{smoothed_speed, Track};

/// Window used for both the estimated and the reference speed average, so a
/// track fed its own ground truth scores exactly zero error.
const SPEED_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GtVector {
    pub frame: usize,
    /// px/frame (consecutive-center difference over the frame gap).
    pub u: f64,
    pub v: f64,
}

/// Per-target finite-difference motion from GT boxes. The vector at frame k
/// is the center step from the previous annotated frame; the first frame of
/// each target has none. Targets with a single box are skipped with a warning.
pub fn gt_motion_vectors(gt: &[GtBox]) -> BTreeMap<i64, Vec<GtVector>> {
    let mut by_id: BTreeMap<i64, Vec<&GtBox>> = BTreeMap::new();
    for b in gt {
        by_id.entry(b.id).or_default().push(b);
    }
    let mut out = BTreeMap::new();
    for (id, mut boxes) in by_id {
        boxes.sort_by_key(|b| b.frame);
        if boxes.len() < 2 {
            log::warn!("gt target {id} has a single box; no motion vector");
            continue;
        }
        let vectors = boxes
            .windows(2)
            .map(|w| {
                let df = (w[1].frame - w[0].frame).max(1) as f64;
                GtVector {
                    frame: w[1].frame,
                    u: (w[1].cx - w[0].cx) / df,
                    v: (w[1].cy - w[0].cy) / df,
                }
            })
            .collect();
        out.insert(id, vectors);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_id: i64,
    pub gt_speed_mps: f64,
    pub est_speed_mps: f64,
    pub speed_abs_err_mps: f64,
    /// Fraction of gt_speed; 0 when gt_speed is 0.
    pub speed_rel_err: f64,
    pub traj_rmse_px: f64,
    pub matched_frames: usize,
    pub id_switches: usize,
    /// False when no track point ever fell inside this target's gate.
    pub matched: bool,
    pub primary_track_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub mean_speed_abs_err_mps: f64,
    pub mean_speed_rel_err: f64,
    pub mean_traj_rmse_px: f64,
    pub total_id_switches: usize,
    pub matched_targets: usize,
    /// Tracks whose majority assignment is a crosstalk lobe (negative GT id).
    pub false_positive_tracks: usize,
    /// Tracks that never fell inside any GT gate.
    pub unassigned_tracks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_target: Vec<TargetReport>,
    pub aggregate: EvalAggregates,
    /// Effective run parameters, echoed by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn diag(b: &GtBox) -> f64 {
    b.w.hypot(b.h)
}

struct Vote {
    gt_id: i64,
    dist: f64,
    frame: usize,
}

/// Nearest gated GT center for a point among the given boxes; gate is
/// max(20 px, that box's diagonal).
fn nearest_gt(boxes: &[&GtBox], cx: f64, cy: f64) -> Option<(i64, f64)> {
    boxes
        .iter()
        .filter_map(|b| {
            let d = (b.cx - cx).hypot(b.cy - cy);
            (d <= 20f64.max(diag(b))).then_some((b.id, d))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn windowed_mean(speeds: &[f64], window: usize) -> f64 {
    if speeds.is_empty() {
        return 0.0;
    }
    let take = window.min(speeds.len());
    let recent = &speeds[speeds.len() - take..];
    recent.iter().sum::<f64>() / recent.len() as f64
}

/// Matches tracks to GT targets by majority vote of per-point nearest gated
/// centers. Lobe entries (negative ids) are excluded from that matching, so
/// a spurious track riding inside a target's gate pools into the target's
/// trajectory RMSE; whether a track follows a lobe is judged separately
/// (nearest center across all ids) and reported as a false positive.
pub fn compare(tracks: &[Track], gt: &[GtBox], cal: &ImageCalibration) -> EvalReport {
    let mut by_frame: BTreeMap<usize, Vec<&GtBox>> = BTreeMap::new();
    for b in gt {
        by_frame.entry(b.frame).or_default().push(b);
    }
    let gt_vectors = gt_motion_vectors(gt);

    // Vote every track point; majority over positive ids assigns the track.
    struct Assignment {
        votes: Vec<Vote>,
        winner: Option<i64>,
        follows_lobe: bool,
    }
    let majority = |tally: BTreeMap<i64, usize>| {
        tally
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id)
    };
    let mut assignments: Vec<Assignment> = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mut votes = Vec::new();
        let mut pos_tally: BTreeMap<i64, usize> = BTreeMap::new();
        let mut any_tally: BTreeMap<i64, usize> = BTreeMap::new();
        for p in &t.points {
            let Some(boxes) = by_frame.get(&p.frame_index) else {
                continue;
            };
            let positives: Vec<&GtBox> = boxes.iter().copied().filter(|b| b.id > 0).collect();
            if let Some((gt_id, dist)) = nearest_gt(&positives, p.cx, p.cy) {
                *pos_tally.entry(gt_id).or_default() += 1;
                votes.push(Vote {
                    gt_id,
                    dist,
                    frame: p.frame_index,
                });
            }
            if let Some((gt_id, _)) = nearest_gt(boxes, p.cx, p.cy) {
                *any_tally.entry(gt_id).or_default() += 1;
            }
        }
        assignments.push(Assignment {
            votes,
            winner: majority(pos_tally),
            follows_lobe: majority(any_tally).is_some_and(|id| id < 0),
        });
    }

    let false_positive_tracks = assignments.iter().filter(|a| a.follows_lobe).count();
    let unassigned_tracks = assignments
        .iter()
        .filter(|a| a.winner.is_none() && !a.follows_lobe)
        .count();

    let mut gt_ids: Vec<i64> = gt.iter().map(|b| b.id).filter(|&id| id > 0).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();

    let mut per_target = Vec::with_capacity(gt_ids.len());
    for &gt_id in &gt_ids {
        let matched_track_idxs: Vec<usize> = (0..tracks.len())
            .filter(|&i| assignments[i].winner == Some(gt_id))
            .collect();

        // Pool matched-point distances across all matched tracks: shadow
        // tracks riding a target's gate inflate its RMSE, which is the
        // failure mode this report exists to expose.
        let mut sq_sum = 0.0;
        let mut n_matched = 0usize;
        // Per frame, the closest matched track claims the frame for the
        // identity-switch count.
        let mut best_per_frame: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
        for &ti in &matched_track_idxs {
            for v in assignments[ti].votes.iter().filter(|v| v.gt_id == gt_id) {
                sq_sum += v.dist * v.dist;
                n_matched += 1;
                let entry = best_per_frame
                    .entry(v.frame)
                    .or_insert((f64::INFINITY, u64::MAX));
                if v.dist < entry.0 {
                    *entry = (v.dist, tracks[ti].target_id);
                }
            }
        }
        let id_switches = best_per_frame
            .values()
            .collect::<Vec<_>>()
            .windows(2)
            .filter(|w| w[0].1 != w[1].1)
            .count();

        let primary = matched_track_idxs.iter().copied().max_by(|&a, &b| {
            let na = assignments[a]
                .votes
                .iter()
                .filter(|v| v.gt_id == gt_id)
                .count();
            let nb = assignments[b]
                .votes
                .iter()
                .filter(|v| v.gt_id == gt_id)
                .count();
            na.cmp(&nb)
                .then(tracks[b].target_id.cmp(&tracks[a].target_id))
        });

        let gt_speeds: Vec<f64> = gt_vectors
            .get(&gt_id)
            .map(|vs| {
                vs.iter()
                    .map(|v| cal.px_per_frame_to_speed(v.u.hypot(v.v)))
                    .collect()
            })
            .unwrap_or_default();
        let gt_speed = windowed_mean(&gt_speeds, SPEED_WINDOW);
        let est_speed = primary
            .map(|ti| smoothed_speed(&tracks[ti], cal, SPEED_WINDOW).unwrap_or(0.0))
            .unwrap_or(0.0);
        let abs_err = (est_speed - gt_speed).abs();
        let rel_err = if gt_speed > 0.0 {
            abs_err / gt_speed
        } else {
            0.0
        };
        let matched = n_matched > 0;

        per_target.push(TargetReport {
            target_id: gt_id,
            gt_speed_mps: gt_speed,
            est_speed_mps: est_speed,
            speed_abs_err_mps: if matched { abs_err } else { 0.0 },
            speed_rel_err: if matched { rel_err } else { 0.0 },
            traj_rmse_px: if matched {
                (sq_sum / n_matched as f64).sqrt()
            } else {
                0.0
            },
            matched_frames: n_matched,
            id_switches,
            matched,
            primary_track_id: primary.map(|ti| tracks[ti].target_id),
        });
    }

    let matched_rows: Vec<&TargetReport> = per_target.iter().filter(|r| r.matched).collect();
    let mean = |f: &dyn Fn(&TargetReport) -> f64| {
        if matched_rows.is_empty() {
            0.0
        } else {
            matched_rows.iter().map(|r| f(r)).sum::<f64>() / matched_rows.len() as f64
        }
    };
    let aggregate = EvalAggregates {
        mean_speed_abs_err_mps: mean(&|r| r.speed_abs_err_mps),
        mean_speed_rel_err: mean(&|r| r.speed_rel_err),
        mean_traj_rmse_px: mean(&|r| r.traj_rmse_px),
        total_id_switches: per_target.iter().map(|r| r.id_switches).sum(),
        matched_targets: matched_rows.len(),
        false_positive_tracks,
        unassigned_tracks,
    };

    EvalReport {
        per_target,
        aggregate,
        config: None,
    }
}

/// Aligned plain-text table for stdout.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>7} {:>12} {:>13} {:>12} {:>10} {:>12} {:>8} {:>7}\n",
        "target", "gt_speed", "est_speed", "abs_err", "rel_err", "traj_rmse", "frames", "id_sw"
    ));
    for r in &report.per_target {
        if r.matched {
            s.push_str(&format!(
                "{:>7} {:>10.4} {:>11.4} {:>12.4} {:>9.1}% {:>9.2} px {:>8} {:>7}\n",
                r.target_id,
                r.gt_speed_mps,
                r.est_speed_mps,
                r.speed_abs_err_mps,
                100.0 * r.speed_rel_err,
                r.traj_rmse_px,
                r.matched_frames,
                r.id_switches
            ));
        } else {
            s.push_str(&format!(
                "{:>7} {:>10.4} {:>11} {:>12} {:>10} {:>12} {:>8} {:>7}\n",
                r.target_id, r.gt_speed_mps, "-", "-", "unmatched", "-", 0, "-"
            ));
        }
    }
    let a = &report.aggregate;
    s.push_str(&format!(
        "matched {}/{} targets | mean rel err {:.1}% | mean traj rmse {:.2} px | id switches {} | lobe tracks {} | unassigned {}\n",
        a.matched_targets,
        report.per_target.len(),
        100.0 * a.mean_speed_rel_err,
        a.mean_traj_rmse_px,
        a.total_id_switches,
        a.false_positive_tracks,
        a.unassigned_tracks
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::{TrackPoint, TrackStatus};

    fn cal() -> ImageCalibration {
        ImageCalibration {
            meters_per_pixel: 0.0029,
            fps: 10.0,
            fov_azimuth_deg: 120.0,
            range_min_m: 0.0,
            range_max_m: 2.0,
        }
    }

    fn gtb(frame: usize, id: i64, cx: f64, cy: f64) -> GtBox {
        GtBox {
            frame,
            id,
            cx,
            cy,
            w: 30.0,
            h: 30.0,
        }
    }

    fn linear_gt(id: i64, n: usize, start: (f64, f64), step: (f64, f64)) -> Vec<GtBox> {
        (0..n)
            .map(|f| {
                gtb(
                    f,
                    id,
                    start.0 + step.0 * f as f64,
                    start.1 + step.1 * f as f64,
                )
            })
            .collect()
    }

    fn track_from_centers(id: u64, centers: &[(usize, f64, f64)], u: f64, v: f64) -> Track {
        let c = cal();
        Track {
            target_id: id,
            points: centers
                .iter()
                .enumerate()
                .map(|(k, &(frame, cx, cy))| TrackPoint {
                    frame_index: frame,
                    cx,
                    cy,
                    u: if k == 0 { 0.0 } else { u },
                    v: if k == 0 { 0.0 } else { v },
                    range_m: 0.0,
                    speed_mps: if k == 0 {
                        0.0
                    } else {
                        c.px_per_frame_to_speed(u.hypot(v))
                    },
                    reliable: k != 0,
                })
                .collect(),
            status: TrackStatus::Finished,
        }
    }

    #[test]
    fn vectors_are_consecutive_differences() {
        let gt = vec![gtb(0, 1, 10.0, 10.0), gtb(1, 1, 13.0, 10.0)];
        let v = gt_motion_vectors(&gt);
        let vs = &v[&1];
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].frame, 1);
        assert_eq!((vs[0].u, vs[0].v), (3.0, 0.0));

        let stationary = vec![gtb(0, 2, 40.0, 40.0), gtb(1, 2, 40.0, 40.0)];
        let v = gt_motion_vectors(&stationary);
        assert_eq!((v[&2][0].u, v[&2][0].v), (0.0, 0.0));
    }

    #[test]
    fn single_box_target_skipped() {
        let gt = vec![gtb(0, 1, 10.0, 10.0)];
        assert!(gt_motion_vectors(&gt).is_empty());
    }

    #[test]
    fn generator_linear_path_gives_constant_vectors() {
        let gt = linear_gt(1, 8, (30.0, 60.0), (7.931034482758621, 0.0));
        let v = gt_motion_vectors(&gt);
        for gv in &v[&1] {
            assert!((gv.u - 7.931034482758621).abs() < 1e-6);
            assert!(gv.v.abs() < 1e-6);
        }
    }

    #[test]
    fn self_comparison_is_exact() {
        let step = 7.931034482758621;
        let gt = linear_gt(1, 12, (30.0, 60.0), (step, 0.0));
        let centers: Vec<(usize, f64, f64)> = gt.iter().map(|b| (b.frame, b.cx, b.cy)).collect();
        let tracks = vec![track_from_centers(1, &centers, step, 0.0)];
        let rep = compare(&tracks, &gt, &cal());
        assert_eq!(rep.per_target.len(), 1);
        let r = &rep.per_target[0];
        assert!(r.matched);
        assert_eq!(r.traj_rmse_px, 0.0);
        assert_eq!(r.speed_abs_err_mps, 0.0);
        assert_eq!(r.speed_rel_err, 0.0);
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.matched_frames, 12);
    }

    #[test]
    fn table_one_arithmetic() {
        let c = cal();
        let gt_step = c.speed_to_px_per_frame(0.23);
        let gt = linear_gt(1, 12, (30.0, 60.0), (gt_step, 0.0));
        let centers: Vec<(usize, f64, f64)> = gt.iter().map(|b| (b.frame, b.cx, b.cy)).collect();
        let est_step = c.speed_to_px_per_frame(0.24);
        let tracks = vec![track_from_centers(1, &centers, est_step, 0.0)];
        let rep = compare(&tracks, &gt, &c);
        let r = &rep.per_target[0];
        assert!((r.speed_abs_err_mps - 0.01).abs() < 1e-12);
        assert!((r.speed_rel_err - 0.01 / 0.23).abs() < 1e-12);

        let est_step = c.speed_to_px_per_frame(0.20);
        let tracks = vec![track_from_centers(1, &centers, est_step, 0.0)];
        let rep = compare(&tracks, &gt, &c);
        assert!((rep.per_target[0].speed_rel_err - 0.03 / 0.23).abs() < 1e-12);
    }

    #[test]
    fn gate_is_max_of_20px_and_diagonal() {
        // Small box: diagonal 5 < 20, so the gate is 20 px.
        let mut gt = vec![GtBox {
            frame: 0,
            id: 1,
            cx: 100.0,
            cy: 100.0,
            w: 3.0,
            h: 4.0,
        }];
        gt.push(GtBox { frame: 1, ..gt[0] });
        let hit = vec![track_from_centers(
            1,
            &[(0, 119.0, 100.0), (1, 119.0, 100.0)],
            0.0,
            0.0,
        )];
        assert!(compare(&hit, &gt, &cal()).per_target[0].matched);
        let miss = vec![track_from_centers(
            1,
            &[(0, 121.5, 100.0), (1, 121.5, 100.0)],
            0.0,
            0.0,
        )];
        let rep = compare(&miss, &gt, &cal());
        assert!(!rep.per_target[0].matched);
        assert_eq!(rep.per_target[0].matched_frames, 0);
        assert_eq!(rep.aggregate.unassigned_tracks, 1);
    }

    #[test]
    fn lobes_excluded_and_counted_as_false_positives() {
        let mut gt = linear_gt(1, 10, (100.0, 60.0), (2.0, 0.0));
        // Lobe rides 25 px to the side, negative id, inside the target's
        // 42.4 px gate. Excluded from matching, the lobe-following track
        // pools into the target row and drags its RMSE up by the offset.
        gt.extend(linear_gt(-3, 10, (125.0, 60.0), (2.0, 0.0)));
        let lobe_centers: Vec<(usize, f64, f64)> =
            (0..10).map(|f| (f, 125.0 + 2.0 * f as f64, 60.0)).collect();
        let tracks = vec![track_from_centers(7, &lobe_centers, 2.0, 0.0)];
        let rep = compare(&tracks, &gt, &cal());
        assert_eq!(rep.aggregate.false_positive_tracks, 1);
        assert_eq!(rep.aggregate.unassigned_tracks, 0);
        assert_eq!(rep.per_target.len(), 1);
        assert!(rep.per_target[0].matched);
        assert!((rep.per_target[0].traj_rmse_px - 25.0).abs() < 1e-9);
    }

    #[test]
    fn lobe_beyond_gate_leaves_target_unmatched() {
        let mut gt = linear_gt(1, 10, (100.0, 60.0), (2.0, 0.0));
        gt.extend(linear_gt(-3, 10, (150.0, 60.0), (2.0, 0.0)));
        let lobe_centers: Vec<(usize, f64, f64)> =
            (0..10).map(|f| (f, 150.0 + 2.0 * f as f64, 60.0)).collect();
        let tracks = vec![track_from_centers(7, &lobe_centers, 2.0, 0.0)];
        let rep = compare(&tracks, &gt, &cal());
        assert_eq!(rep.aggregate.false_positive_tracks, 1);
        assert_eq!(rep.aggregate.unassigned_tracks, 0);
        assert!(!rep.per_target[0].matched);
    }

    #[test]
    fn shadow_track_inflates_target_rmse() {
        let gt = linear_gt(1, 10, (100.0, 60.0), (2.0, 0.0));
        let on_target: Vec<(usize, f64, f64)> =
            (0..10).map(|f| (f, 100.0 + 2.0 * f as f64, 60.0)).collect();
        // 18 px off: inside the 20 px gate, no lobe GT to blame.
        let shadow: Vec<(usize, f64, f64)> =
            (0..10).map(|f| (f, 100.0 + 2.0 * f as f64, 78.0)).collect();
        let clean = compare(&[track_from_centers(1, &on_target, 2.0, 0.0)], &gt, &cal());
        let polluted = compare(
            &[
                track_from_centers(1, &on_target, 2.0, 0.0),
                track_from_centers(2, &shadow, 2.0, 0.0),
            ],
            &gt,
            &cal(),
        );
        assert!(
            polluted.per_target[0].traj_rmse_px > clean.per_target[0].traj_rmse_px + 5.0,
            "shadow track should inflate rmse: {} vs {}",
            polluted.per_target[0].traj_rmse_px,
            clean.per_target[0].traj_rmse_px
        );
    }

    #[test]
    fn id_switch_counted_once_per_handover() {
        let gt = linear_gt(1, 10, (100.0, 60.0), (0.0, 0.0));
        let first: Vec<(usize, f64, f64)> = (0..5).map(|f| (f, 100.0, 60.0)).collect();
        let second: Vec<(usize, f64, f64)> = (5..10).map(|f| (f, 100.0, 60.0)).collect();
        let rep = compare(
            &[
                track_from_centers(1, &first, 0.0, 0.0),
                track_from_centers(2, &second, 0.0, 0.0),
            ],
            &gt,
            &cal(),
        );
        assert_eq!(rep.per_target[0].id_switches, 1);
        assert_eq!(rep.per_target[0].matched_frames, 10);
    }

    #[test]
    fn relabeling_leaves_aggregates_unchanged() {
        let mut gt = linear_gt(1, 8, (80.0, 60.0), (3.0, 0.0));
        gt.extend(linear_gt(2, 8, (80.0, 140.0), (0.0, 2.0)));
        let t1: Vec<(usize, f64, f64)> = (0..8).map(|f| (f, 80.0 + 3.0 * f as f64, 61.0)).collect();
        let t2: Vec<(usize, f64, f64)> =
            (0..8).map(|f| (f, 81.0, 140.0 + 2.0 * f as f64)).collect();
        let tracks = vec![
            track_from_centers(1, &t1, 3.0, 0.0),
            track_from_centers(2, &t2, 0.0, 2.0),
        ];
        let rep_a = compare(&tracks, &gt, &cal());
        for b in &mut gt {
            b.id = 3 - b.id;
        }
        let rep_b = compare(&tracks, &gt, &cal());
        assert!(
            (rep_a.aggregate.mean_speed_rel_err - rep_b.aggregate.mean_speed_rel_err).abs() < 1e-12
        );
        assert!(
            (rep_a.aggregate.mean_traj_rmse_px - rep_b.aggregate.mean_traj_rmse_px).abs() < 1e-12
        );
        assert_eq!(
            rep_a.aggregate.total_id_switches,
            rep_b.aggregate.total_id_switches
        );
    }

    #[test]
    fn report_serializes_and_formats() {
        let gt = linear_gt(1, 6, (100.0, 60.0), (2.0, 0.0));
        let centers: Vec<(usize, f64, f64)> = gt.iter().map(|b| (b.frame, b.cx, b.cy)).collect();
        let tracks = vec![track_from_centers(1, &centers, 2.0, 0.0)];
        let mut rep = compare(&tracks, &gt, &cal());
        rep.config = Some(serde_json::json!({"stride": 1}));
        let text = serde_json::to_string_pretty(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.per_target.len(), 1);
        let table = format_report(&rep);
        assert!(table.contains("target"));
        assert!(table.contains("matched 1/1"));
    }
}
