//! Raster visual artifacts: trajectory overlays and flow quivers, drawn
//! directly (Bresenham) into PNGs. No plotting dependency; re-rendering the
//! same inputs is bit-identical.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grid::Grid;
use crate::io::{GtBox, Sequence};
use crate::tracking::Track;

/// Track ids pick their color as id mod palette size.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 80, 80],
    [40, 220, 40],
    [80, 120, 255],
    [0, 200, 200],
    [220, 80, 220],
    [240, 160, 40],
    [140, 220, 60],
    [255, 120, 160],
];

pub const GT_COLOR: [u8; 3] = [240, 220, 60];
pub const FLOW_COLOR: [u8; 3] = [40, 220, 40];

pub fn color_for_id(id: u64) -> [u8; 3] {
    PALETTE[(id % PALETTE.len() as u64) as usize]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStyle {
    /// Disc radius marking a track's latest position.
    pub point_radius: usize,
    /// Grid step between quiver vectors, px.
    pub vector_stride: usize,
    /// Drawn vector length = magnitude × this.
    pub vector_scale: f64,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            point_radius: 2,
            vector_stride: 8,
            vector_scale: 3.0,
        }
    }
}

fn to_rgb(frame: &Grid<f64>) -> RgbImage {
    let mut img = RgbImage::new(frame.width() as u32, frame.height() as u32);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let g = (frame.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
    }
    img
}

fn plot(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_line(img: &mut RgbImage, p0: (f64, f64), p1: (f64, f64), color: [u8; 3]) {
    let (mut x0, mut y0) = (p0.0.round() as i64, p0.1.round() as i64);
    let (x1, y1) = (p1.0.round() as i64, p1.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_disc(img: &mut RgbImage, center: (f64, f64), radius: usize, color: [u8; 3]) {
    let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                plot(img, cx + dx, cy + dy, color);
            }
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::ImageFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Per-frame RGB PNGs: the grayscale frame, GT center polylines (one fixed
/// color, positive ids only), and per-track polylines in palette colors, each
/// drawn up to that frame with a disc at the latest position. Files are named
/// overlay_NNNN.png; returns the written paths in frame order.
pub fn render_overlay(
    seq: &Sequence,
    tracks: &[Track],
    gt: Option<&[GtBox]>,
    style: &OverlayStyle,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut gt_paths: Vec<Vec<(usize, f64, f64)>> = Vec::new();
    if let Some(gt) = gt {
        let mut ids: Vec<i64> = gt.iter().map(|b| b.id).filter(|&id| id > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let mut centers: Vec<(usize, f64, f64)> = gt
                .iter()
                .filter(|b| b.id == id)
                .map(|b| (b.frame, b.cx, b.cy))
                .collect();
            centers.sort_by_key(|c| c.0);
            gt_paths.push(centers);
        }
    }

    seq.frames
        .par_iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut img = to_rgb(&frame.pixels);
            for centers in &gt_paths {
                let visible: Vec<&(usize, f64, f64)> =
                    centers.iter().filter(|c| c.0 <= t).collect();
                for w in visible.windows(2) {
                    draw_line(&mut img, (w[0].1, w[0].2), (w[1].1, w[1].2), GT_COLOR);
                }
            }
            for track in tracks {
                let color = color_for_id(track.target_id);
                let visible: Vec<(f64, f64)> = track
                    .points
                    .iter()
                    .filter(|p| p.frame_index <= t)
                    .map(|p| (p.cx, p.cy))
                    .collect();
                for w in visible.windows(2) {
                    draw_line(&mut img, w[0], w[1], color);
                }
                if let Some(&last) = visible.last() {
                    draw_disc(&mut img, last, style.point_radius, color);
                }
            }
            let path = out_dir.join(format!("overlay_{t:04}.png"));
            save_png(&img, &path)?;
            Ok(path)
        })
        .collect()
}

/// Flow quiver on a black canvas: one segment per valid grid point (step =
/// vector_stride), from the point along (u, v) × vector_scale. Zero vectors
/// and invalid pixels draw nothing.
pub fn render_flow(flow: &FlowField, out_path: &Path, style: &OverlayStyle) -> Result<()> {
    let (w, h) = (flow.width(), flow.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    let stride = style.vector_stride.max(1);
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if !flow.valid.is_set(x, y) {
                continue;
            }
            let (u, v) = (flow.u.get(x, y), flow.v.get(x, y));
            if u == 0.0 && v == 0.0 {
                continue;
            }
            let p0 = (x as f64, y as f64);
            let p1 = (
                x as f64 + u * style.vector_scale,
                y as f64 + v * style.vector_scale,
            );
            draw_line(&mut img, p0, p1, FLOW_COLOR);
        }
    }
    save_png(&img, out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageCalibration;
    use crate::grid::Mask;
    use crate::io::Frame;
    use crate::tracking::{TrackPoint, TrackStatus};
    use tempfile::tempdir;

    fn small_seq(n: usize) -> Sequence {
        let cal = ImageCalibration {
            meters_per_pixel: 0.0029,
            fps: 10.0,
            fov_azimuth_deg: 120.0,
            range_min_m: 0.0,
            range_max_m: 2.0,
        };
        Sequence {
            frames: (0..n)
                .map(|i| Frame {
                    index: i,
                    timestamp_s: i as f64 / 10.0,
                    pixels: Grid::from_fn(48, 40, |x, y| ((x + y + i) % 7) as f64 / 10.0),
                })
                .collect(),
            calibration: cal,
        }
    }

    fn track(id: u64, centers: &[(usize, f64, f64)]) -> Track {
        Track {
            target_id: id,
            points: centers
                .iter()
                .map(|&(f, cx, cy)| TrackPoint {
                    frame_index: f,
                    cx,
                    cy,
                    u: 0.0,
                    v: 0.0,
                    range_m: 0.0,
                    speed_mps: 0.0,
                    reliable: false,
                })
                .collect(),
            status: TrackStatus::Finished,
        }
    }

    #[test]
    fn empty_tracks_give_plain_grayscale() {
        let dir = tempdir().unwrap();
        let seq = small_seq(2);
        let paths = render_overlay(&seq, &[], None, &OverlayStyle::default(), dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let img = image::open(&paths[0]).unwrap().to_rgb8();
        for y in 0..40u32 {
            for x in 0..48u32 {
                let g = (seq.frames[0].pixels.get(x as usize, y as usize) * 255.0).round() as u8;
                assert_eq!(img.get_pixel(x, y).0, [g, g, g]);
            }
        }
    }

    #[test]
    fn track_centers_overdrawn_with_palette_color() {
        let dir = tempdir().unwrap();
        let seq = small_seq(10);
        let centers: Vec<(usize, f64, f64)> =
            (0..10).map(|f| (f, 5.0 + 3.0 * f as f64, 20.0)).collect();
        let tracks = vec![track(1, &centers)];
        let paths =
            render_overlay(&seq, &tracks, None, &OverlayStyle::default(), dir.path()).unwrap();
        let last = image::open(paths.last().unwrap()).unwrap().to_rgb8();
        let color = color_for_id(1);
        for &(_, cx, cy) in &centers {
            assert_eq!(
                last.get_pixel(cx as u32, cy as u32).0,
                color,
                "vertex ({cx},{cy}) not overdrawn"
            );
        }
    }

    #[test]
    fn gt_polyline_drawn_in_fixed_color() {
        let dir = tempdir().unwrap();
        let seq = small_seq(4);
        let gt: Vec<GtBox> = (0..4)
            .map(|f| GtBox {
                frame: f,
                id: 1,
                cx: 10.0 + 5.0 * f as f64,
                cy: 8.0,
                w: 4.0,
                h: 4.0,
            })
            .collect();
        let paths =
            render_overlay(&seq, &[], Some(&gt), &OverlayStyle::default(), dir.path()).unwrap();
        let last = image::open(paths.last().unwrap()).unwrap().to_rgb8();
        assert_eq!(last.get_pixel(15, 8).0, GT_COLOR);
        // Lobe entries are not drawn.
        let gt_lobe = vec![
            GtBox {
                frame: 0,
                id: -2,
                cx: 30.0,
                cy: 30.0,
                w: 4.0,
                h: 4.0,
            },
            GtBox {
                frame: 1,
                id: -2,
                cx: 36.0,
                cy: 30.0,
                w: 4.0,
                h: 4.0,
            },
        ];
        let dir2 = tempdir().unwrap();
        let paths = render_overlay(
            &seq,
            &[],
            Some(&gt_lobe),
            &OverlayStyle::default(),
            dir2.path(),
        )
        .unwrap();
        let last = image::open(paths.last().unwrap()).unwrap().to_rgb8();
        assert_ne!(last.get_pixel(33, 30).0, GT_COLOR);
    }

    #[test]
    fn rerender_is_bit_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let seq = small_seq(3);
        let centers: Vec<(usize, f64, f64)> = (0..3).map(|f| (f, 10.0, 10.0 + f as f64)).collect();
        let tracks = vec![track(2, &centers)];
        let a = render_overlay(&seq, &tracks, None, &OverlayStyle::default(), d1.path()).unwrap();
        let b = render_overlay(&seq, &tracks, None, &OverlayStyle::default(), d2.path()).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "overlay differs between renders"
            );
        }
    }

    #[test]
    fn flow_quiver_draws_valid_nonzero_only() {
        let dir = tempdir().unwrap();
        let (w, h) = (32, 24);

        let zero = FlowField {
            u: Grid::zeros(w, h),
            v: Grid::zeros(w, h),
            valid: Mask::all(w, h),
        };
        let p = dir.path().join("zero.png");
        render_flow(&zero, &p, &OverlayStyle::default()).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert!(img.pixels().all(|px| px.0 == [0, 0, 0]));

        let mut uniform = FlowField {
            u: Grid::filled(w, h, 5.0),
            v: Grid::zeros(w, h),
            valid: Mask::all(w, h),
        };
        uniform.valid.set(16, 8, false);
        let p = dir.path().join("uniform.png");
        let style = OverlayStyle {
            vector_scale: 1.0,
            vector_stride: 8,
            point_radius: 2,
        };
        render_flow(&uniform, &p, &style).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        // Valid grid point (8, 8): horizontal segment of length 5.
        for dx in 0..=5u32 {
            assert_eq!(img.get_pixel(8 + dx, 8).0, FLOW_COLOR);
        }
        assert_eq!(img.get_pixel(8, 9).0, [0, 0, 0]);
        // Invalidated grid point (16, 8): nothing drawn from it.
        assert_eq!(img.get_pixel(17, 8).0, [0, 0, 0]);
    }

    #[test]
    fn unwritable_path_errors() {
        let seq = small_seq(1);
        let err = render_overlay(
            &seq,
            &[],
            None,
            &OverlayStyle::default(),
            Path::new("/proc/definitely/not/writable"),
        );
        assert!(err.is_err());
    }
}
