//! Spectral-residual saliency and ROI extraction.
//!
//! The saliency map is computed at native resolution (no 64 px downsample as
//! in the original spectral-residual formulation; sonar targets are small).
//! ROI thresholding is quantile-based so per-sequence gain differences do not
//! need retuning.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::preprocess::{box_mean, gaussian_blur};

/// Per-pixel saliency in [0,1]; max is 1 unless the map is identically zero.
pub type SaliencyMap = Grid<f64>;
/// Binary region-of-interest mask, always a subset of the fan mask.
pub type RoiMask = Mask;

pub const DEFAULT_ROI_QUANTILE: f64 = 0.985;
pub const DEFAULT_MIN_BLOB_AREA: usize = 50;
/// Post-residual smoothing bandwidth, px.
pub const SALIENCY_SMOOTH_SIGMA: f64 = 2.5;

/// A connected bright region with intensity-weighted centroid.
#[derive(Debug, Clone)]
pub struct Blob {
    pub label: usize,
    /// (x, y) member pixels.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Centroid weighted by the underlying frame intensity, px.
    pub cx: f64,
    pub cy: f64,
    /// (x, y, w, h) inclusive pixel bounds.
    pub bbox: (usize, usize, usize, usize),
}

impl Blob {
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (bx, by, bw, bh) = self.bbox;
        x >= bx as f64 && y >= by as f64 && x <= (bx + bw - 1) as f64 && y <= (by + bh - 1) as f64
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], w: usize, h: usize) {
    for y in 0..h {
        for x in 0..w {
            dst[x * h + y] = src[y * w + x];
        }
    }
}

/// In-place 2D FFT: rows, transpose, columns, transpose back.
fn fft_2d(data: &mut Vec<Complex64>, w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut t = vec![Complex64::default(); w * h];
    transpose(data, &mut t, w, h);
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for col in t.chunks_exact_mut(h) {
        col_fft.process(col);
    }
    transpose(&t, data, h, w);
}

/// Spectral-residual saliency: log-amplitude minus its 3×3 box mean drives a
/// phase-preserving reconstruction, squared, smoothed, and max-normalized.
/// An all-equal frame has no residual and maps to all-zero.
pub fn spectral_residual(pixels: &Grid<f64>) -> Result<SaliencyMap> {
    let (w, h) = (pixels.width(), pixels.height());
    if w < 8 || h < 8 {
        return Err(Error::invalid_param(
            "frame",
            format!("spectral residual needs at least 8x8 pixels, got {w}x{h}"),
        ));
    }
    let first = pixels.as_slice()[0];
    if pixels.as_slice().iter().all(|&v| v == first) {
        return Ok(Grid::zeros(w, h));
    }

    let mut spectrum: Vec<Complex64> = pixels
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft_2d(&mut spectrum, w, h, false);

    // The 1e-12 floor keeps exact spectral zeros finite in the log.
    let log_amp = Grid::from_vec(
        w,
        h,
        spectrum.iter().map(|z| (z.norm() + 1e-12).ln()).collect(),
    );
    let residual = box_mean(&log_amp, 1);
    for (i, z) in spectrum.iter_mut().enumerate() {
        let r = log_amp.as_slice()[i] - residual.as_slice()[i];
        *z = Complex64::from_polar(r.exp(), z.arg());
    }
    fft_2d(&mut spectrum, w, h, true);

    let power = Grid::from_vec(w, h, spectrum.iter().map(|z| z.norm_sqr()).collect());
    let mut sal = gaussian_blur(&power, SALIENCY_SMOOTH_SIGMA);
    let max = sal.max_value();
    if max > 0.0 {
        for v in sal.as_mut_slice() {
            *v /= max;
        }
    }
    Ok(sal)
}

fn dilate3(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if mask.in_bounds(nx, ny) && mask.is_set(nx as usize, ny as usize) {
                    return true;
                }
            }
        }
        false
    })
}

fn erode3(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if mask.in_bounds(nx, ny) && !mask.is_set(nx as usize, ny as usize) {
                    return false;
                }
            }
        }
        true
    })
}

/// Thresholds the saliency map at the in-fan quantile, cleans the mask with
/// one 3×3 close then open, and extracts 8-connected blobs of at least
/// `min_blob_area` px². Blobs are sorted by area descending, ties by (cy, cx)
/// ascending; centroids are weighted by `frame` intensity.
pub fn roi_from_saliency(
    sal: &SaliencyMap,
    frame: &Grid<f64>,
    fan: &Mask,
    quantile: f64,
    min_blob_area: usize,
) -> Result<(RoiMask, Vec<Blob>)> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid_param(
            "roi_quantile",
            format!("must be in (0,1), got {quantile}"),
        ));
    }
    if !sal.same_size(fan) || !sal.same_size(frame) {
        return Err(Error::dimension_mismatch(
            "roi_from_saliency",
            (sal.width(), sal.height()),
            (fan.width(), fan.height()),
        ));
    }
    let (w, h) = (sal.width(), sal.height());

    let mut in_fan: Vec<f64> = (0..w * h)
        .filter(|&i| fan.as_slice()[i])
        .map(|i| sal.as_slice()[i])
        .collect();
    if in_fan.is_empty() {
        return Ok((Mask::none(w, h), Vec::new()));
    }
    in_fan.sort_unstable_by(f64::total_cmp);
    let rank = ((quantile * in_fan.len() as f64).floor() as usize).min(in_fan.len() - 1);
    let threshold = in_fan[rank];

    // Zero saliency never enters the ROI, so a flat map yields nothing even
    // though it technically sits at its own quantile.
    let mut mask = Mask::from_fn(w, h, |x, y| {
        let v = sal.get(x, y);
        fan.is_set(x, y) && v > 0.0 && v >= threshold
    });
    mask = erode3(&dilate3(&mask)); // close
    mask = dilate3(&erode3(&mask)); // open
    mask = mask.intersect(fan);

    let mut blobs = collect_blobs(&mask, frame, min_blob_area);
    // Components below the area floor leave the ROI mask as well.
    let mut kept = Mask::none(w, h);
    for b in &blobs {
        for &(x, y) in &b.pixels {
            kept.set(x, y, true);
        }
    }
    blobs.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.cy.total_cmp(&b.cy))
            .then(a.cx.total_cmp(&b.cx))
    });
    for (label, b) in blobs.iter_mut().enumerate() {
        b.label = label;
    }
    Ok((kept, blobs))
}

/// 8-connected components of `mask` with area ≥ `min_area`, in scan order.
fn collect_blobs(mask: &Mask, frame: &Grid<f64>, min_area: usize) -> Vec<Blob> {
    let (w, h) = (mask.width(), mask.height());
    let mut visited = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.as_slice()[start] || visited[start] {
            continue;
        }
        let mut pixels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if !mask.in_bounds(nx, ny) {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.as_slice()[j] && !visited[j] {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if pixels.len() < min_area.max(1) {
            continue;
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let (mut wx, mut wy, mut wsum) = (0.0f64, 0.0f64, 0.0f64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for &(x, y) in &pixels {
            let weight = frame.get(x, y).max(0.0);
            wx += weight * x as f64;
            wy += weight * y as f64;
            wsum += weight;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (cx, cy) = if wsum > 0.0 {
            (wx / wsum, wy / wsum)
        } else {
            let n = pixels.len() as f64;
            (
                pixels.iter().map(|&(x, _)| x as f64).sum::<f64>() / n,
                pixels.iter().map(|&(_, y)| y as f64).sum::<f64>() / n,
            )
        };
        blobs.push(Blob {
            label: 0,
            area: pixels.len(),
            pixels,
            cx,
            cy,
            bbox: (x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        });
    }
    blobs
}
