//! Per-target motion: flow aggregation over blobs, crosstalk rejection,
//! frame-to-frame association, and metric speed.
//!
//! Speed law: speed_mps = hypot(u, v) · meters_per_pixel · fps, with (u, v)
//! in px/frame. Every TrackPoint holds that identity exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_between, FlowField, FlowParams};
use crate::geometry::{fan_apex, fan_mask, pixel_polar, ImageCalibration};
use crate::grid::Grid;
use crate::io::{Frame, Sequence, TrackRecord};
use crate::preprocess::{
    build_background, detect_holes, guided_filter, inpaint, subtract_background, InpaintMethod,
    DEFAULT_BG_FRAMES, DEFAULT_GF_EPS, DEFAULT_GF_RADIUS, DEFAULT_HOLE_THRESH,
};
use crate::saliency::{
    roi_from_saliency, spectral_residual, Blob, DEFAULT_MIN_BLOB_AREA, DEFAULT_ROI_QUANTILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_index: usize,
    pub cx: f64,
    pub cy: f64,
    /// Flow-aggregated displacement, px/frame; (0,0) when unreliable.
    pub u: f64,
    pub v: f64,
    /// Range of the centroid under the calibration, meters.
    pub range_m: f64,
    pub speed_mps: f64,
    /// False when too few blob pixels carried valid flow; such points
    /// contribute position but are skipped by speed averaging.
    pub reliable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Active,
    Lost,
    Finished,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub target_id: u64,
    /// Time-ordered; frame indices strictly increasing.
    pub points: Vec<TrackPoint>,
    pub status: TrackStatus,
}

impl Track {
    fn last(&self) -> &TrackPoint {
        self.points.last().expect("track never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub max_assoc_dist: f64,
    pub max_gap: usize,
    pub speed_window: usize,
    pub crosstalk_rejection: bool,
    pub crosstalk_axis_ratio: f64,
    pub crosstalk_intensity_ratio: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_assoc_dist: 30.0,
            max_gap: 3,
            speed_window: 10,
            crosstalk_rejection: true,
            crosstalk_axis_ratio: 3.0,
            crosstalk_intensity_ratio: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_assoc_dist > 0.0) {
            return Err(Error::invalid_param("max_assoc_dist", "must be > 0"));
        }
        if self.max_gap == 0 {
            return Err(Error::invalid_param("max_gap", "must be >= 1"));
        }
        if self.speed_window == 0 {
            return Err(Error::invalid_param("speed_window", "must be >= 1"));
        }
        if !(self.crosstalk_axis_ratio > 0.0) {
            return Err(Error::invalid_param("crosstalk_axis_ratio", "must be > 0"));
        }
        if !(self.crosstalk_intensity_ratio > 0.0) {
            return Err(Error::invalid_param(
                "crosstalk_intensity_ratio",
                "must be > 0",
            ));
        }
        Ok(())
    }
}

/// Flow aggregated over one blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobMotion {
    pub u: f64,
    pub v: f64,
    pub reliable: bool,
}

fn median_in_place(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Componentwise median of the flow over the blob's valid pixels. Fewer than
/// 25% valid pixels → unreliable (0, 0).
pub fn blob_motion(flow: &FlowField, blob: &Blob) -> BlobMotion {
    let mut us = Vec::with_capacity(blob.pixels.len());
    let mut vs = Vec::with_capacity(blob.pixels.len());
    for &(x, y) in &blob.pixels {
        if flow.valid.in_bounds(x as i64, y as i64) && flow.valid.is_set(x, y) {
            us.push(flow.u.get(x, y));
            vs.push(flow.v.get(x, y));
        }
    }
    if blob.pixels.is_empty() || us.len() * 4 < blob.pixels.len() {
        return BlobMotion {
            u: 0.0,
            v: 0.0,
            reliable: false,
        };
    }
    BlobMotion {
        u: median_in_place(&mut us),
        v: median_in_place(&mut vs),
        reliable: true,
    }
}

fn blob_mean_intensity(frame: &Grid<f64>, blob: &Blob) -> f64 {
    if blob.pixels.is_empty() {
        return 0.0;
    }
    let sum: f64 = blob.pixels.iter().map(|&(x, y)| frame.get(x, y)).sum();
    sum / blob.pixels.len() as f64
}

/// Blob extents measured in the local range/azimuth frame at its centroid
/// (px). The raster bbox is useless here: a lobe rotated off the fan axis
/// has a nearly square raster box but stays thin along range.
fn range_azimuth_extents(blob: &Blob, apex: (f64, f64)) -> (f64, f64) {
    let dx = blob.cx - apex.0;
    let dy = blob.cy - apex.1;
    let n = dx.hypot(dy).max(1e-9);
    let (rx, ry) = (dx / n, dy / n);
    let (ax, ay) = (-ry, rx);
    let mut a_lo = f64::INFINITY;
    let mut a_hi = f64::NEG_INFINITY;
    let mut r_lo = f64::INFINITY;
    let mut r_hi = f64::NEG_INFINITY;
    for &(x, y) in &blob.pixels {
        let (px, py) = (x as f64, y as f64);
        let a = px * ax + py * ay;
        let r = px * rx + py * ry;
        a_lo = a_lo.min(a);
        a_hi = a_hi.max(a);
        r_lo = r_lo.min(r);
        r_hi = r_hi.max(r);
    }
    (a_hi - a_lo + 1.0, r_hi - r_lo + 1.0)
}

/// Drops azimuth-elongated blobs that sit at the same range band as a much
/// stronger blob: the side-lobe signature. Survivors keep their order; the
/// highest-mean blob is never dropped.
pub fn reject_crosstalk(blobs: &[Blob], frame: &Frame, cfg: &TrackerConfig) -> Vec<Blob> {
    if blobs.len() <= 1 {
        return blobs.to_vec();
    }
    let apex = fan_apex(frame.width(), frame.height());
    let means: Vec<f64> = blobs
        .iter()
        .map(|b| blob_mean_intensity(&frame.pixels, b))
        .collect();
    let max_mean = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range_px = |b: &Blob| (b.cx - apex.0).hypot(b.cy - apex.1);

    let mut out = Vec::with_capacity(blobs.len());
    for (i, b) in blobs.iter().enumerate() {
        if means[i] >= max_mean {
            out.push(b.clone());
            continue;
        }
        let (a_ext, r_ext) = range_azimuth_extents(b, apex);
        let elongated = a_ext / r_ext >= cfg.crosstalk_axis_ratio;
        let shadowed = elongated
            && blobs.iter().enumerate().any(|(j, s)| {
                j != i
                    && means[j] >= means[i] / cfg.crosstalk_intensity_ratio
                    && (range_px(b) - range_px(s)).abs() <= s.bbox.3 as f64
            });
        if !shadowed {
            out.push(b.clone());
        }
    }
    out
}

/// A blob plus its aggregated motion, ready for association.
#[derive(Debug, Clone)]
pub struct Detection {
    pub blob: Blob,
    pub u: f64,
    pub v: f64,
    pub reliable: bool,
}

fn make_point(
    det: &Detection,
    frame_index: usize,
    cal: &ImageCalibration,
    width: usize,
    height: usize,
) -> TrackPoint {
    let (range_m, _) = pixel_polar(cal, width, height, det.blob.cx, det.blob.cy);
    let (u, v) = if det.reliable {
        (det.u, det.v)
    } else {
        (0.0, 0.0)
    };
    TrackPoint {
        frame_index,
        cx: det.blob.cx,
        cy: det.blob.cy,
        u,
        v,
        range_m,
        speed_mps: cal.px_per_frame_to_speed(u.hypot(v)),
        reliable: det.reliable,
    }
}

/// Greedy nearest-neighbor association against constant-velocity predictions
/// (last centroid + last per-frame displacement). Ties break by smaller
/// distance, then smaller target id, then detection order. Tracks silent for
/// more than `max_gap` frames are retired before matching; unmatched
/// detections open new tracks under the next unused id.
pub fn associate(
    tracks: &mut Vec<Track>,
    detections: &[Detection],
    frame_index: usize,
    cal: &ImageCalibration,
    width: usize,
    height: usize,
    cfg: &TrackerConfig,
) {
    for t in tracks.iter_mut() {
        if t.status == TrackStatus::Active
            && frame_index.saturating_sub(t.last().frame_index) > cfg.max_gap
        {
            t.status = TrackStatus::Lost;
        }
    }

    struct Pair {
        dist: f64,
        track_idx: usize,
        target_id: u64,
        det_idx: usize,
    }
    let mut pairs = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        if t.status != TrackStatus::Active {
            continue;
        }
        let last = t.last();
        let (px, py) = (last.cx + last.u, last.cy + last.v);
        for (di, d) in detections.iter().enumerate() {
            let dist = (d.blob.cx - px).hypot(d.blob.cy - py);
            if dist <= cfg.max_assoc_dist {
                pairs.push(Pair {
                    dist,
                    track_idx: ti,
                    target_id: t.target_id,
                    det_idx: di,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.dist
            .total_cmp(&b.dist)
            .then(a.target_id.cmp(&b.target_id))
            .then(a.det_idx.cmp(&b.det_idx))
    });

    let mut track_taken = vec![false; tracks.len()];
    let mut det_taken = vec![false; detections.len()];
    for p in &pairs {
        if track_taken[p.track_idx] || det_taken[p.det_idx] {
            continue;
        }
        track_taken[p.track_idx] = true;
        det_taken[p.det_idx] = true;
        tracks[p.track_idx].points.push(make_point(
            &detections[p.det_idx],
            frame_index,
            cal,
            width,
            height,
        ));
    }

    let mut next_id = tracks.iter().map(|t| t.target_id).max().unwrap_or(0) + 1;
    for (di, d) in detections.iter().enumerate() {
        if det_taken[di] {
            continue;
        }
        tracks.push(Track {
            target_id: next_id,
            points: vec![make_point(d, frame_index, cal, width, height)],
            status: TrackStatus::Active,
        });
        next_id += 1;
    }
}

/// Mean of the most recent min(window, available) reliable per-point speeds;
/// 0 when no point carries a reliable speed.
pub fn smoothed_speed(track: &Track, cal: &ImageCalibration, window: usize) -> Result<f64> {
    if track.points.is_empty() {
        return Err(Error::EmptyTrack);
    }
    let speeds: Vec<f64> = track
        .points
        .iter()
        .filter(|p| p.reliable)
        .map(|p| cal.px_per_frame_to_speed(p.u.hypot(p.v)))
        .collect();
    if speeds.is_empty() {
        return Ok(0.0);
    }
    let take = window.min(speeds.len()).max(1);
    let recent = &speeds[speeds.len() - take..];
    Ok(recent.iter().sum::<f64>() / recent.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Frame gap of each flow pair (i, i+stride); detections still advance
    /// one frame at a time.
    pub stride: usize,
    pub bg_frames: usize,
    pub hole_thresh: f64,
    /// None skips hole detection and inpainting entirely.
    pub inpaint: Option<InpaintMethod>,
    pub gf_radius: usize,
    pub gf_eps: f64,
    pub roi_quantile: f64,
    pub min_blob_area: usize,
    pub flow: FlowParams,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            bg_frames: DEFAULT_BG_FRAMES,
            hole_thresh: DEFAULT_HOLE_THRESH,
            inpaint: Some(InpaintMethod::Telea),
            gf_radius: DEFAULT_GF_RADIUS,
            gf_eps: DEFAULT_GF_EPS,
            roi_quantile: DEFAULT_ROI_QUANTILE,
            min_blob_area: DEFAULT_MIN_BLOB_AREA,
            flow: FlowParams::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid_param("stride", "must be >= 1"));
        }
        if self.bg_frames == 0 {
            return Err(Error::invalid_param("bg_frames", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.hole_thresh) {
            return Err(Error::invalid_param("hole_thresh", "must be in [0,1]"));
        }
        if self.gf_radius == 0 {
            return Err(Error::invalid_param("gf_radius", "must be >= 1"));
        }
        if !(self.gf_eps > 0.0) {
            return Err(Error::invalid_param("gf_eps", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.roi_quantile) {
            return Err(Error::invalid_param("roi_quantile", "must be in [0,1]"));
        }
        self.flow.validate()?;
        self.tracker.validate()
    }
}

struct FrameAnalysis {
    /// Background-subtracted image the blobs were extracted from; crosstalk
    /// intensity comparisons happen here, where target contrast is sharpest.
    subtracted: Grid<f64>,
    enhanced: Grid<f64>,
    blobs: Vec<Blob>,
}

fn analyze_frame(
    frame: &Frame,
    bg_frame: &Frame,
    fan: &crate::grid::Mask,
    cfg: &PipelineConfig,
) -> Result<FrameAnalysis> {
    let sub = subtract_background(
        frame,
        &crate::preprocess::BackgroundModel {
            intensity: bg_frame.pixels.clone(),
            n_frames_used: 0,
        },
    )?;
    let sal = spectral_residual(&sub.pixels)?;
    let (roi, blobs) =
        roi_from_saliency(&sal, &sub.pixels, fan, cfg.roi_quantile, cfg.min_blob_area)?;
    let filled = match cfg.inpaint {
        Some(method) => {
            let holes = detect_holes(&sub.pixels, &roi, cfg.hole_thresh)?;
            inpaint(&sub.pixels, &holes, method)?
        }
        None => sub.pixels.clone(),
    };
    let enhanced = guided_filter(&filled, &filled, cfg.gf_radius, cfg.gf_eps)?;
    Ok(FrameAnalysis {
        subtracted: sub.pixels,
        enhanced,
        blobs,
    })
}

/// Full tracking pipeline over a sequence. For every frame i with a partner
/// i+stride: background subtraction, saliency ROI + blobs, hole inpainting,
/// guided smoothing, Farneback flow to the partner (normalized to px/frame),
/// per-blob median motion, crosstalk rejection, then association. Association
/// is a sequential fold; everything before it runs parallel per frame.
pub fn run_pipeline(seq: &Sequence, cfg: &PipelineConfig) -> Result<Vec<Track>> {
    cfg.validate()?;
    if seq.len() < cfg.stride + 1 {
        return Err(Error::invalid_param(
            "stride",
            format!(
                "sequence of {} frames needs length >= stride + 1 = {}",
                seq.len(),
                cfg.stride + 1
            ),
        ));
    }
    let (w, h) = (seq.width(), seq.height());
    let cal = seq.calibration;
    let bg = build_background(seq, cfg.bg_frames.min(seq.len()))?;
    let bg_frame = Frame {
        index: 0,
        timestamp_s: 0.0,
        pixels: bg.intensity,
    };
    let fan = fan_mask(w, h, &cal)?;

    let analyses: Vec<FrameAnalysis> = seq
        .frames
        .par_iter()
        .map(|f| analyze_frame(f, &bg_frame, &fan, cfg))
        .collect::<Result<_>>()?;

    let enhanced_seq = Sequence {
        frames: analyses
            .iter()
            .zip(&seq.frames)
            .map(|(a, f)| Frame {
                index: f.index,
                timestamp_s: f.timestamp_s,
                pixels: a.enhanced.clone(),
            })
            .collect(),
        calibration: cal,
    };

    let n_pairs = seq.len() - cfg.stride;
    let per_frame_detections: Vec<Vec<Detection>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| -> Result<Vec<Detection>> {
            let flow = flow_between(&enhanced_seq, i, cfg.stride, &cfg.flow)?;
            let motions: Vec<BlobMotion> = analyses[i]
                .blobs
                .iter()
                .map(|b| blob_motion(&flow, b))
                .collect();
            let kept = if cfg.tracker.crosstalk_rejection {
                let sub_frame = Frame {
                    index: seq.frames[i].index,
                    timestamp_s: seq.frames[i].timestamp_s,
                    pixels: analyses[i].subtracted.clone(),
                };
                reject_crosstalk(&analyses[i].blobs, &sub_frame, &cfg.tracker)
            } else {
                analyses[i].blobs.clone()
            };
            let dets = kept
                .into_iter()
                .map(|blob| {
                    let idx = analyses[i]
                        .blobs
                        .iter()
                        .position(|b| b.label == blob.label)
                        .expect("survivor came from this frame's blobs");
                    let m = motions[idx];
                    Detection {
                        blob,
                        u: m.u,
                        v: m.v,
                        reliable: m.reliable,
                    }
                })
                .collect();
            Ok(dets)
        })
        .collect::<Result<_>>()?;

    let mut tracks: Vec<Track> = Vec::new();
    for (i, dets) in per_frame_detections.iter().enumerate() {
        associate(&mut tracks, dets, i, &cal, w, h, &cfg.tracker);
    }
    // A trajectory needs at least two observations; single-detection tracks
    // are speckle flickers, not motion (unless only one pair was processed).
    let min_len = 2.min(n_pairs);
    tracks.retain(|t| t.points.len() >= min_len);
    for t in &mut tracks {
        t.status = TrackStatus::Finished;
    }
    Ok(tracks)
}

/// Flattens tracks to CSV rows ordered by (frame, target id).
pub fn track_records(tracks: &[Track]) -> Vec<TrackRecord> {
    let mut rows: Vec<TrackRecord> = tracks
        .iter()
        .flat_map(|t| {
            t.points.iter().map(|p| TrackRecord {
                frame: p.frame_index,
                target_id: t.target_id as i64,
                cx_px: p.cx,
                cy_px: p.cy,
                u_px: p.u,
                v_px: p.v,
                speed_mps: p.speed_mps,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.target_id.cmp(&b.target_id)));
    rows
}

/// Rebuilds Track structures from CSV rows. Reliability is not stored in the
/// CSV; a point is taken as reliable iff it carries nonzero displacement.
pub fn tracks_from_records(
    records: &[TrackRecord],
    cal: &ImageCalibration,
    width: usize,
    height: usize,
) -> Vec<Track> {
    let mut by_id: std::collections::BTreeMap<i64, Vec<&TrackRecord>> = Default::default();
    for r in records {
        by_id.entry(r.target_id).or_default().push(r);
    }
    by_id
        .into_iter()
        .map(|(target_id, mut rows)| {
            rows.sort_by_key(|r| r.frame);
            let points = rows
                .into_iter()
                .map(|r| {
                    let (range_m, _) = pixel_polar(cal, width, height, r.cx_px, r.cy_px);
                    TrackPoint {
                        frame_index: r.frame,
                        cx: r.cx_px,
                        cy: r.cy_px,
                        u: r.u_px,
                        v: r.v_px,
                        range_m,
                        speed_mps: r.speed_mps,
                        reliable: r.u_px != 0.0 || r.v_px != 0.0,
                    }
                })
                .collect();
            Track {
                target_id: target_id.max(0) as u64,
                points,
                status: TrackStatus::Finished,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;
    use crate::synth::{generate, preset, SynthScene};
    use tempfile::tempdir;

    fn cal_29mm() -> ImageCalibration {
        ImageCalibration {
            meters_per_pixel: 0.0029,
            fps: 10.0,
            fov_azimuth_deg: 120.0,
            range_min_m: 0.0,
            range_max_m: 2.0,
        }
    }

    fn blob_at(pixels: Vec<(usize, usize)>) -> Blob {
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let x0 = pixels.iter().map(|p| p.0).min().unwrap();
        let x1 = pixels.iter().map(|p| p.0).max().unwrap();
        let y0 = pixels.iter().map(|p| p.1).min().unwrap();
        let y1 = pixels.iter().map(|p| p.1).max().unwrap();
        Blob {
            label: 0,
            area: pixels.len(),
            cx,
            cy,
            bbox: (x0, y0, x1 - x0 + 1, y1 - y0 + 1),
            pixels,
        }
    }

    fn rect_pixels(x0: usize, y0: usize, w: usize, h: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                v.push((x, y));
            }
        }
        v
    }

    fn uniform_flow(w: usize, h: usize, u: f64, v: f64) -> FlowField {
        FlowField {
            u: Grid::filled(w, h, u),
            v: Grid::filled(w, h, v),
            valid: Mask::all(w, h),
        }
    }

    #[test]
    fn blob_motion_uniform() {
        let flow = uniform_flow(32, 32, 2.0, -1.0);
        let blob = blob_at(rect_pixels(5, 5, 6, 4));
        let m = blob_motion(&flow, &blob);
        assert!(m.reliable);
        assert_eq!((m.u, m.v), (2.0, -1.0));
    }

    #[test]
    fn blob_motion_median_ignores_outliers() {
        let mut flow = uniform_flow(32, 32, 2.0, 0.0);
        let blob = blob_at(rect_pixels(5, 5, 10, 4));
        // 10% outliers at (50, 50).
        for &(x, y) in blob.pixels.iter().take(4) {
            flow.u.set(x, y, 50.0);
            flow.v.set(x, y, 50.0);
        }
        let m = blob_motion(&flow, &blob);
        assert!(m.reliable);
        assert_eq!((m.u, m.v), (2.0, 0.0));
    }

    #[test]
    fn blob_motion_validity_quorum() {
        let mut flow = uniform_flow(32, 32, 3.0, 1.0);
        let blob = blob_at(rect_pixels(0, 0, 10, 4));
        for &(x, y) in &blob.pixels {
            flow.valid.set(x, y, false);
        }
        let m = blob_motion(&flow, &blob);
        assert!(!m.reliable);
        assert_eq!((m.u, m.v), (0.0, 0.0));

        // Exactly 25% valid is enough.
        for &(x, y) in blob.pixels.iter().take(10) {
            flow.valid.set(x, y, true);
        }
        assert!(blob_motion(&flow, &blob).reliable);
        // 24% is not.
        flow.valid.set(blob.pixels[0].0, blob.pixels[0].1, false);
        assert!(!blob_motion(&flow, &blob).reliable);
    }

    fn frame_with(blobs: &[(&[(usize, usize)], f64)], w: usize, h: usize) -> Frame {
        let mut g = Grid::filled(w, h, 0.05);
        for (pixels, intensity) in blobs {
            for &(x, y) in *pixels {
                g.set(x, y, *intensity);
            }
        }
        Frame {
            index: 0,
            timestamp_s: 0.0,
            pixels: g,
        }
    }

    #[test]
    fn crosstalk_single_blob_unchanged() {
        let pix = rect_pixels(40, 20, 10, 10);
        let frame = frame_with(&[(&pix, 0.9)], 100, 200);
        let blobs = vec![blob_at(pix)];
        let out = reject_crosstalk(&blobs, &frame, &TrackerConfig::default());
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn crosstalk_lobes_rejected_target_kept() {
        // Tall raster: apex (49.5, 199); everything near the fan axis at
        // range ~180 so azimuth-elongation survives the frame rotation.
        let target = rect_pixels(44, 14, 12, 12);
        let lobe_l = rect_pixels(27, 19, 15, 3);
        let lobe_r = rect_pixels(58, 19, 15, 3);
        let frame = frame_with(
            &[(&target, 0.9), (&lobe_l, 0.35), (&lobe_r, 0.35)],
            100,
            200,
        );
        let blobs = vec![blob_at(target.clone()), blob_at(lobe_l), blob_at(lobe_r)];
        let out = reject_crosstalk(&blobs, &frame, &TrackerConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].area, target.len());
    }

    #[test]
    fn crosstalk_compact_pair_survives() {
        let a = rect_pixels(34, 14, 12, 12);
        let b = rect_pixels(54, 14, 12, 12);
        let frame = frame_with(&[(&a, 0.7), (&b, 0.7)], 100, 200);
        let blobs = vec![blob_at(a), blob_at(b)];
        let out = reject_crosstalk(&blobs, &frame, &TrackerConfig::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn crosstalk_never_drops_strongest() {
        // Elongated strongest blob next to a dimmer compact one, with a
        // permissive intensity ratio that would otherwise reject anything.
        let strong = rect_pixels(30, 18, 30, 3);
        let weak = rect_pixels(47, 30, 6, 6);
        let frame = frame_with(&[(&strong, 0.95), (&weak, 0.4)], 100, 200);
        let blobs = vec![blob_at(strong.clone()), blob_at(weak)];
        let cfg = TrackerConfig {
            crosstalk_intensity_ratio: 10.0,
            ..TrackerConfig::default()
        };
        let out = reject_crosstalk(&blobs, &frame, &cfg);
        assert!(out.iter().any(|b| b.area == strong.len()));
    }

    fn det(cx: f64, cy: f64, u: f64, v: f64) -> Detection {
        let x = cx.round() as usize;
        let y = cy.round() as usize;
        Detection {
            blob: blob_at(vec![(x, y)]),
            u,
            v,
            reliable: true,
        }
    }

    fn assoc(tracks: &mut Vec<Track>, dets: &[Detection], frame: usize) {
        associate(
            tracks,
            dets,
            frame,
            &cal_29mm(),
            128,
            128,
            &TrackerConfig::default(),
        );
    }

    #[test]
    fn associate_matches_near_prediction_and_spawns_far() {
        let mut tracks = Vec::new();
        assoc(&mut tracks, &[det(50.0, 50.0, 3.0, 0.0)], 0);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].target_id, 1);

        // 2 px from the predicted (53, 50): matched.
        assoc(&mut tracks, &[det(55.0, 50.0, 3.0, 0.0)], 1);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].points.len(), 2);

        // 100 px away: new track.
        assoc(&mut tracks, &[det(10.0, 120.0, 0.0, 0.0)], 2);
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[1].target_id, 2);
    }

    #[test]
    fn associate_prediction_preserves_ids_through_crossing() {
        let mut tracks = Vec::new();
        let path_a = |t: f64| (10.0 + 5.0 * t, 50.0);
        let path_b = |t: f64| (90.0 - 5.0 * t, 50.0);
        for f in 0..17 {
            let t = f as f64;
            let (ax, ay) = path_a(t);
            let (bx, by) = path_b(t);
            assoc(
                &mut tracks,
                &[det(ax, ay, 5.0, 0.0), det(bx, by, -5.0, 0.0)],
                f,
            );
        }
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.points.len(), 17);
            let first_u = t.points[1].u;
            for p in &t.points[1..] {
                assert_eq!(p.u, first_u, "id switch around the crossing");
            }
        }
    }

    #[test]
    fn associate_tie_prefers_smaller_id() {
        let mut tracks = Vec::new();
        assoc(
            &mut tracks,
            &[det(40.0, 50.0, 0.0, 0.0), det(60.0, 50.0, 0.0, 0.0)],
            0,
        );
        // One detection equidistant from both stationary predictions.
        assoc(&mut tracks, &[det(50.0, 50.0, 0.0, 0.0)], 1);
        assert_eq!(tracks[0].points.len(), 2);
        assert_eq!(tracks[1].points.len(), 1);
    }

    #[test]
    fn associate_retires_after_gap() {
        let mut tracks = Vec::new();
        assoc(&mut tracks, &[det(50.0, 50.0, 0.0, 0.0)], 0);
        for f in 1..=4 {
            assoc(&mut tracks, &[], f);
        }
        assert_eq!(tracks[0].status, TrackStatus::Lost);
        // Same spot again: a new id, not a resurrection.
        assoc(&mut tracks, &[det(50.0, 50.0, 0.0, 0.0)], 5);
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[1].target_id, 2);
    }

    #[test]
    fn associate_tolerates_short_gap() {
        let mut tracks = Vec::new();
        assoc(&mut tracks, &[det(50.0, 50.0, 0.0, 0.0)], 0);
        assoc(&mut tracks, &[], 1);
        assoc(&mut tracks, &[], 2);
        assoc(&mut tracks, &[det(50.0, 50.0, 0.0, 0.0)], 3);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].points.len(), 2);
        assert_eq!(tracks[0].status, TrackStatus::Active);
    }

    #[test]
    fn speed_law_holds_on_points() {
        let cal = cal_29mm();
        let mut tracks = Vec::new();
        associate(
            &mut tracks,
            &[det(50.0, 50.0, 3.0, 4.0)],
            0,
            &cal,
            128,
            128,
            &TrackerConfig::default(),
        );
        let p = &tracks[0].points[0];
        assert!((p.speed_mps - 5.0 * 0.0029 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_speed_examples() {
        let cal = cal_29mm();
        let mk = |uv: &[(f64, f64)]| Track {
            target_id: 1,
            points: uv
                .iter()
                .enumerate()
                .map(|(i, &(u, v))| TrackPoint {
                    frame_index: i,
                    cx: 0.0,
                    cy: 0.0,
                    u,
                    v,
                    range_m: 0.0,
                    speed_mps: cal.px_per_frame_to_speed(u.hypot(v)),
                    reliable: true,
                })
                .collect(),
            status: TrackStatus::Finished,
        };
        let t = mk(&[(7.931034482758621, 0.0); 12]);
        let s = smoothed_speed(&t, &cal, 10).unwrap();
        assert!((s - 0.23).abs() < 1e-12, "{s}");

        let t = mk(&[(0.0, 0.0); 3]);
        assert_eq!(smoothed_speed(&t, &cal, 10).unwrap(), 0.0);

        // Speeds 0.20 then 0.24 over window 2 → 0.22.
        let px = |mps: f64| cal.speed_to_px_per_frame(mps);
        let t = mk(&[(px(0.10), 0.0), (px(0.20), 0.0), (px(0.24), 0.0)]);
        let s = smoothed_speed(&t, &cal, 2).unwrap();
        assert!((s - 0.22).abs() < 1e-12);

        let empty = Track {
            target_id: 1,
            points: vec![],
            status: TrackStatus::Finished,
        };
        assert!(smoothed_speed(&empty, &cal, 10).is_err());
    }

    #[test]
    fn smoothed_speed_skips_unreliable() {
        let cal = cal_29mm();
        let mut t = Track {
            target_id: 1,
            points: vec![],
            status: TrackStatus::Finished,
        };
        for i in 0..4 {
            let reliable = i % 2 == 0;
            let u = if reliable { 10.0 } else { 0.0 };
            t.points.push(TrackPoint {
                frame_index: i,
                cx: 0.0,
                cy: 0.0,
                u,
                v: 0.0,
                range_m: 0.0,
                speed_mps: cal.px_per_frame_to_speed(u),
                reliable,
            });
        }
        let s = smoothed_speed(&t, &cal, 10).unwrap();
        assert!((s - 0.29).abs() < 1e-12, "unreliable zeros leaked in: {s}");
    }

    #[test]
    fn records_round_trip() {
        let cal = cal_29mm();
        let mut tracks = Vec::new();
        for f in 0..3 {
            let x = 50.0 + 4.0 * f as f64;
            associate(
                &mut tracks,
                &[det(x, 60.0, 4.0, 0.0)],
                f,
                &cal,
                128,
                128,
                &TrackerConfig::default(),
            );
        }
        let records = track_records(&tracks);
        assert_eq!(records.len(), 3);
        let back = tracks_from_records(&records, &cal, 128, 128);
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].points.len(), 3);
        for (a, b) in tracks[0].points.iter().zip(&back[0].points) {
            assert_eq!(a.frame_index, b.frame_index);
            assert!((a.speed_mps - b.speed_mps).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_recovers_bottle_speed() {
        let dir = tempdir().unwrap();
        let scene = preset("horizontal-bottle").unwrap();
        generate(&scene, dir.path()).unwrap();
        let seq = crate::io::load_sequence(&crate::io::manifest_path(dir.path())).unwrap();
        let cfg = PipelineConfig::default();
        let tracks = run_pipeline(&seq, &cfg).unwrap();
        let long: Vec<&Track> = tracks.iter().filter(|t| t.points.len() >= 10).collect();
        assert_eq!(
            long.len(),
            1,
            "expected one persistent track, got {}",
            long.len()
        );
        let speed = smoothed_speed(long[0], &seq.calibration, cfg.tracker.speed_window).unwrap();
        assert!(
            (speed - 0.23).abs() / 0.23 <= 0.10,
            "smoothed speed {speed} outside +/-10% of 0.23"
        );
    }

    #[test]
    fn pipeline_empty_scene_yields_no_tracks() {
        let dir = tempdir().unwrap();
        let mut scene: SynthScene = preset("horizontal-bottle").unwrap();
        scene.targets.clear();
        scene.duration_frames = 6;
        generate(&scene, dir.path()).unwrap();
        let seq = crate::io::load_sequence(&crate::io::manifest_path(dir.path())).unwrap();
        let tracks = run_pipeline(&seq, &PipelineConfig::default()).unwrap();
        assert!(tracks.is_empty(), "spurious tracks: {}", tracks.len());
    }

    #[test]
    fn pipeline_rejects_bad_stride() {
        let dir = tempdir().unwrap();
        let mut scene = preset("horizontal-bottle").unwrap();
        scene.targets.clear();
        scene.duration_frames = 4;
        generate(&scene, dir.path()).unwrap();
        let seq = crate::io::load_sequence(&crate::io::manifest_path(dir.path())).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.stride = 0;
        assert!(run_pipeline(&seq, &cfg).is_err());
        cfg.stride = 4;
        assert!(run_pipeline(&seq, &cfg).is_err());
    }
}
