//! Open on-disk formats: sequence manifests with 8-bit grayscale frames,
//! ground-truth annotation JSON, and track CSV files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageCalibration;
use crate::grid::Grid;

pub const MANIFEST_VERSION: u32 = 1;
pub const GT_VERSION: u32 = 1;
pub const TRACK_CSV_HEADER: &str = "frame,target_id,cx_px,cy_px,u_px,v_px,speed_mps";

/// One grayscale sonar frame with intensities normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// 0-based frame number within its sequence.
    pub index: usize,
    /// Seconds since the first frame, `index / fps`.
    pub timestamp_s: f64,
    pub pixels: Grid<f64>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// An ordered, uniformly calibrated frame sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub calibration: ImageCalibration,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Frame::width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, Frame::height)
    }
}

/// JSON manifest describing a sequence: calibration plus ordered frame paths
/// relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    pub fps: f64,
    pub meters_per_pixel: f64,
    pub fov_azimuth_deg: f64,
    pub range_min_m: f64,
    pub range_max_m: f64,
    pub frames: Vec<String>,
}

impl SequenceManifest {
    pub fn new(cal: &ImageCalibration, frames: Vec<String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            fps: cal.fps,
            meters_per_pixel: cal.meters_per_pixel,
            fov_azimuth_deg: cal.fov_azimuth_deg,
            range_min_m: cal.range_min_m,
            range_max_m: cal.range_max_m,
            frames,
        }
    }

    pub fn calibration(&self) -> ImageCalibration {
        ImageCalibration {
            meters_per_pixel: self.meters_per_pixel,
            fps: self.fps,
            fov_azimuth_deg: self.fov_azimuth_deg,
            range_min_m: self.range_min_m,
            range_max_m: self.range_max_m,
        }
    }
}

/// A manually or synthetically annotated bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub frame: usize,
    /// Target identity; negative ids mark crosstalk lobes, excluded from matching.
    pub id: i64,
    /// Box center, pixels.
    pub cx: f64,
    pub cy: f64,
    /// Box extents, pixels, positive.
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtFile {
    version: u32,
    boxes: Vec<GtBox>,
}

/// One row of a track CSV file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub target_id: i64,
    pub cx_px: f64,
    pub cy_px: f64,
    /// Per-frame displacement, pixels.
    pub u_px: f64,
    pub v_px: f64,
    pub speed_mps: f64,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a sequence from its JSON manifest. Frames decode in parallel and are
/// assembled in manifest order; intensities normalize from 8-bit to [0, 1].
pub fn load_sequence(manifest_path: &Path) -> Result<Sequence> {
    let text = read_to_string(manifest_path)?;
    let manifest: SequenceManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let calibration = manifest.calibration();
    calibration.validate()?;
    if manifest.frames.is_empty() {
        return Err(Error::Manifest("manifest lists no frames".into()));
    }

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let pixel_grids: Vec<Result<Grid<f64>>> = manifest
        .frames
        .par_iter()
        .map(|rel| load_gray_frame(&base.join(rel)))
        .collect();

    let mut frames = Vec::with_capacity(pixel_grids.len());
    let mut dims: Option<(usize, usize)> = None;
    for (index, grid) in pixel_grids.into_iter().enumerate() {
        let pixels = grid?;
        let got = (pixels.width(), pixels.height());
        match dims {
            None => dims = Some(got),
            Some(expected) if expected != got => {
                return Err(Error::dimension_mismatch(
                    format!("frame {} ({})", index, manifest.frames[index]),
                    expected,
                    got,
                ));
            }
            _ => {}
        }
        frames.push(Frame {
            index,
            timestamp_s: index as f64 / calibration.fps,
            pixels,
        });
    }
    Ok(Sequence {
        frames,
        calibration,
    })
}

/// Decodes a single 8-bit grayscale PGM or PNG frame.
pub fn load_gray_frame(path: &Path) -> Result<Grid<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageFormat {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(Error::NonGrayscale {
                path: path.to_path_buf(),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ZeroSizedImage);
    }
    let data: Vec<f64> = gray.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Grid::from_vec(w, h, data))
}

/// Writes intensities in [0, 1] as a binary 8-bit PGM (P5).
pub fn write_frame_pgm(path: &Path, pixels: &Grid<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + pixels.len());
    write!(
        &mut bytes,
        "P5\n{} {}\n255\n",
        pixels.width(),
        pixels.height()
    )
    .expect("in-memory write");
    bytes.extend(
        pixels
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, manifest: &SequenceManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads ground-truth boxes sorted by (id, frame). Rejects duplicate
/// (frame, id) pairs and non-positive extents; bounds checking against a
/// raster is a separate step ([`validate_gt_bounds`]).
pub fn load_gt(path: &Path) -> Result<Vec<GtBox>> {
    let text = read_to_string(path)?;
    let file: GtFile =
        serde_json::from_str(&text).map_err(|e| Error::GroundTruth(e.to_string()))?;
    if file.version != GT_VERSION {
        return Err(Error::GroundTruth(format!(
            "unsupported ground-truth version {} (expected {GT_VERSION})",
            file.version
        )));
    }
    let mut boxes = file.boxes;
    for b in &boxes {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::GroundTruth(format!(
                "box (frame {}, id {}) has non-positive extent {}x{}",
                b.frame, b.id, b.w, b.h
            )));
        }
    }
    boxes.sort_by(|a, b| (a.id, a.frame).cmp(&(b.id, b.frame)));
    for pair in boxes.windows(2) {
        if pair[0].id == pair[1].id && pair[0].frame == pair[1].frame {
            return Err(Error::DuplicateGtBox {
                frame: pair[0].frame,
                id: pair[0].id,
            });
        }
    }
    Ok(boxes)
}

/// Checks that every box lies fully inside a `width` × `height` raster.
pub fn validate_gt_bounds(boxes: &[GtBox], width: usize, height: usize) -> Result<()> {
    for b in boxes {
        let (x0, x1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
        let (y0, y1) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
        if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 - 1.0 || y1 > height as f64 - 1.0 {
            return Err(Error::GtBoxOutOfBounds {
                frame: b.frame,
                id: b.id,
            });
        }
    }
    Ok(())
}

pub fn write_gt(path: &Path, boxes: &[GtBox]) -> Result<()> {
    let file = GtFile {
        version: GT_VERSION,
        boxes: boxes.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("ground truth serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes track records as CSV with the fixed header and 6-decimal floats.
pub fn write_tracks(records: &[TrackRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TRACK_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.frame, r.target_id, r.cx_px, r.cy_px, r.u_px, r.v_px, r.speed_mps
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRACK_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::TrackRow {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(Error::TrackRow {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::TrackRow {
                line: row,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, name: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::TrackRow {
                line: row,
                reason: format!("bad {name} value {s:?}"),
            })
        };
        records.push(TrackRecord {
            frame: fields[0].parse().map_err(|_| Error::TrackRow {
                line: row,
                reason: format!("bad frame value {:?}", fields[0]),
            })?,
            target_id: fields[1].parse().map_err(|_| Error::TrackRow {
                line: row,
                reason: format!("bad target_id value {:?}", fields[1]),
            })?,
            cx_px: parse_f(fields[2], "cx_px")?,
            cy_px: parse_f(fields[3], "cy_px")?,
            u_px: parse_f(fields[4], "u_px")?,
            v_px: parse_f(fields[5], "v_px")?,
            speed_mps: parse_f(fields[6], "speed_mps")?,
        });
    }
    Ok(records)
}

/// Convenience for tests and the generator: a frame with every pixel at `value`.
pub fn uniform_frame(index: usize, width: usize, height: usize, value: f64, fps: f64) -> Frame {
    Frame {
        index,
        timestamp_s: index as f64 / fps,
        pixels: Grid::filled(width, height, value),
    }
}

/// Sequence path helpers shared by the generator and CLI.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn gt_path(dir: &Path) -> PathBuf {
    dir.join("gt.json")
}
