//! Frame conditioning: temporal-median background model, background
//! subtraction, hole detection and inpainting, guided-filter smoothing.
//!
//! Border policy for every windowed operation in this crate: truncated
//! windows normalized by the actual in-image pixel count (or weight sum).
//! No reflection or zero padding. The shared [`box_mean`] and
//! [`gaussian_blur`] primitives live here and are reused by the saliency
//! and flow stages.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::io::{Frame, Sequence};

pub const DEFAULT_BG_FRAMES: usize = 30;
pub const DEFAULT_HOLE_THRESH: f64 = 0.15;
pub const DEFAULT_GF_RADIUS: usize = 4;
pub const DEFAULT_GF_EPS: f64 = 1e-3;
/// Neighborhood radius for Telea fill values, px.
pub const TELEA_RADIUS: f64 = 5.0;
/// A solve iteration that moves no pixel more than this counts as converged.
pub const BIHARMONIC_TOL: f64 = 1e-6;

/// Per-pixel background intensity estimated from leading frames.
#[derive(Debug, Clone)]
pub struct BackgroundModel {
    pub intensity: Grid<f64>,
    pub n_frames_used: usize,
}

/// Hole-filling method; Telea is the pipeline default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintMethod {
    Telea,
    Biharmonic,
}

/// Per-pixel median over the first `n` frames.
pub fn build_background(seq: &Sequence, n: usize) -> Result<BackgroundModel> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if n == 0 || n > seq.len() {
        return Err(Error::invalid_param(
            "bg_frames",
            format!("must be in 1..={}, got {n}", seq.len()),
        ));
    }
    let (w, h) = (seq.width(), seq.height());
    let mut data = vec![0.0f64; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut samples = vec![0.0f64; n];
        for (x, out) in row.iter_mut().enumerate() {
            for (k, f) in seq.frames[..n].iter().enumerate() {
                samples[k] = f.pixels.get(x, y);
            }
            *out = median_in_place(&mut samples);
        }
    });
    Ok(BackgroundModel {
        intensity: Grid::from_vec(w, h, data),
        n_frames_used: n,
    })
}

fn median_in_place(samples: &mut [f64]) -> f64 {
    samples.sort_unstable_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// `clamp(frame - background, 0, 1)`, preserving frame metadata.
pub fn subtract_background(frame: &Frame, bg: &BackgroundModel) -> Result<Frame> {
    if !frame.pixels.same_size(&bg.intensity) {
        return Err(Error::dimension_mismatch(
            "subtract_background",
            (bg.intensity.width(), bg.intensity.height()),
            (frame.pixels.width(), frame.pixels.height()),
        ));
    }
    let mut pixels = frame.pixels.clone();
    for (out, b) in pixels
        .as_mut_slice()
        .iter_mut()
        .zip(bg.intensity.as_slice())
    {
        *out = (*out - b).clamp(0.0, 1.0);
    }
    Ok(Frame {
        index: frame.index,
        timestamp_s: frame.timestamp_s,
        pixels,
    })
}

/// Dark gaps strictly inside the ROI: 4-connected components of
/// `(roi ∧ intensity < low_thresh)` that do not touch the ROI border.
/// Single-pixel holes are retained.
pub fn detect_holes(pixels: &Grid<f64>, roi: &Mask, low_thresh: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&low_thresh) {
        return Err(Error::invalid_param(
            "hole_thresh",
            format!("must be in [0,1], got {low_thresh}"),
        ));
    }
    if !pixels.same_size(roi) {
        return Err(Error::dimension_mismatch(
            "detect_holes",
            (pixels.width(), pixels.height()),
            (roi.width(), roi.height()),
        ));
    }
    let (w, h) = (pixels.width(), pixels.height());
    let candidate = Mask::from_fn(w, h, |x, y| {
        roi.is_set(x, y) && pixels.get(x, y) < low_thresh
    });
    let mut holes = Mask::none(w, h);
    let mut visited = vec![false; w * h];
    let mut component = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !candidate.as_slice()[start] || visited[start] {
            continue;
        }
        component.clear();
        stack.push(start);
        visited[start] = true;
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                if !roi.in_bounds(nx, ny) || !roi.is_set(nx as usize, ny as usize) {
                    touches_border = true;
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if candidate.as_slice()[j] && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        if !touches_border {
            for &i in &component {
                holes.as_mut_slice()[i] = true;
            }
        }
    }
    Ok(holes)
}

/// Fills hole pixels; non-hole pixels pass through bit-exactly.
pub fn inpaint(pixels: &Grid<f64>, holes: &Mask, method: InpaintMethod) -> Result<Grid<f64>> {
    if !pixels.same_size(holes) {
        return Err(Error::dimension_mismatch(
            "inpaint",
            (pixels.width(), pixels.height()),
            (holes.width(), holes.height()),
        ));
    }
    let n_holes = holes.count();
    if n_holes == 0 {
        return Ok(pixels.clone());
    }
    if n_holes == pixels.len() {
        return Err(Error::HoleCoversImage);
    }
    match method {
        InpaintMethod::Telea => Ok(telea(pixels, holes)),
        InpaintMethod::Biharmonic => Ok(biharmonic(pixels, holes)),
    }
}

const KNOWN: u8 = 0;
const BAND: u8 = 1;
const INSIDE: u8 = 2;

#[derive(PartialEq)]
struct BandEntry {
    t: f64,
    y: usize,
    x: usize,
}

impl Eq for BandEntry {}

impl Ord for BandEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // (t, y, x) total order keeps the march deterministic under ties.
        self.t
            .total_cmp(&other.t)
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
    }
}

impl PartialOrd for BandEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Eikonal update |∇T| = 1 from two orthogonal neighbor values (±∞ if unknown).
fn eikonal_pair(t1: f64, t2: f64) -> f64 {
    match (t1.is_finite(), t2.is_finite()) {
        (true, true) => {
            let d = t1 - t2;
            if d.abs() >= 1.0 {
                t1.min(t2) + 1.0
            } else {
                0.5 * (t1 + t2 + (2.0 - d * d).sqrt())
            }
        }
        (true, false) => t1 + 1.0,
        (false, true) => t2 + 1.0,
        (false, false) => f64::INFINITY,
    }
}

fn telea(pixels: &Grid<f64>, holes: &Mask) -> Grid<f64> {
    let (w, h) = (pixels.width(), pixels.height());
    let mut out = pixels.clone();
    let mut state = vec![KNOWN; w * h];
    let mut t = Grid::filled(w, h, 0.0f64);
    for i in 0..w * h {
        if holes.as_slice()[i] {
            state[i] = INSIDE;
            t.as_mut_slice()[i] = f64::INFINITY;
        }
    }

    let known_t = |t: &Grid<f64>, state: &[u8], x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return f64::INFINITY;
        }
        let i = y as usize * w + x as usize;
        if state[i] == KNOWN {
            t.as_slice()[i]
        } else {
            f64::INFINITY
        }
    };
    let eikonal_at = |t: &Grid<f64>, state: &[u8], x: usize, y: usize| -> f64 {
        let (xi, yi) = (x as i64, y as i64);
        let tw = known_t(t, state, xi - 1, yi);
        let te = known_t(t, state, xi + 1, yi);
        let tn = known_t(t, state, xi, yi - 1);
        let ts = known_t(t, state, xi, yi + 1);
        eikonal_pair(tw, tn)
            .min(eikonal_pair(te, tn))
            .min(eikonal_pair(tw, ts))
            .min(eikonal_pair(te, ts))
    };

    let mut heap: BinaryHeap<Reverse<BandEntry>> = BinaryHeap::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if state[i] != INSIDE {
                continue;
            }
            let tq = eikonal_at(&t, &state, x, y);
            if tq.is_finite() {
                t.as_mut_slice()[i] = tq;
                state[i] = BAND;
                heap.push(Reverse(BandEntry { t: tq, y, x }));
            }
        }
    }

    let ri = TELEA_RADIUS.ceil() as i64;
    while let Some(Reverse(e)) = heap.pop() {
        let i = e.y * w + e.x;
        if state[i] == KNOWN {
            continue;
        }
        out.set(e.x, e.y, telea_fill_value(&out, &t, &state, e.x, e.y, ri));
        state[i] = KNOWN;
        let (xi, yi) = (e.x as i64, e.y as i64);
        for (nx, ny) in [(xi - 1, yi), (xi + 1, yi), (xi, yi - 1), (xi, yi + 1)] {
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (ux, uy) = (nx as usize, ny as usize);
            let j = uy * w + ux;
            if state[j] == KNOWN {
                continue;
            }
            let tq = eikonal_at(&t, &state, ux, uy);
            if tq < t.as_slice()[j] {
                t.as_mut_slice()[j] = tq;
                state[j] = BAND;
                heap.push(Reverse(BandEntry {
                    t: tq,
                    y: uy,
                    x: ux,
                }));
            }
        }
    }
    out
}

/// Weighted average over known pixels in the Telea disc: weight =
/// direction (alignment with the march front normal) × 1/dist² × level-set
/// proximity 1/(1+|ΔT|).
fn telea_fill_value(
    out: &Grid<f64>,
    t: &Grid<f64>,
    state: &[u8],
    x: usize,
    y: usize,
    ri: i64,
) -> f64 {
    let (w, h) = (out.width(), out.height());
    let finite_t = |xq: i64, yq: i64| -> Option<f64> {
        if xq < 0 || yq < 0 || xq >= w as i64 || yq >= h as i64 {
            return None;
        }
        let v = t.get(xq as usize, yq as usize);
        v.is_finite().then_some(v)
    };
    let (xi, yi) = (x as i64, y as i64);
    let tp = t.get(x, y);
    let slope = |a: Option<f64>, b: Option<f64>, c: f64| -> f64 {
        match (a, b) {
            (Some(a), Some(b)) => 0.5 * (b - a),
            (Some(a), None) => c - a,
            (None, Some(b)) => b - c,
            (None, None) => 0.0,
        }
    };
    let gx = slope(finite_t(xi - 1, yi), finite_t(xi + 1, yi), tp);
    let gy = slope(finite_t(xi, yi - 1), finite_t(xi, yi + 1), tp);
    let has_grad = gx != 0.0 || gy != 0.0;

    let r2 = TELEA_RADIUS * TELEA_RADIUS;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if dx == 0 && dy == 0 {
                continue;
            }
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > r2 {
                continue;
            }
            let (qx, qy) = (xi + dx, yi + dy);
            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                continue;
            }
            let j = qy as usize * w + qx as usize;
            if state[j] != KNOWN {
                continue;
            }
            let dir = if has_grad {
                ((-dx as f64) * gx + (-dy as f64) * gy).abs() / d2.sqrt()
            } else {
                1.0
            };
            let lev = 1.0 / (1.0 + (t.as_slice()[j] - tp).abs());
            let weight = (dir.max(1e-6)) * (1.0 / d2) * lev;
            num += weight * out.as_slice()[j];
            den += weight;
        }
    }
    debug_assert!(den > 0.0, "band pixel has a known 4-neighbor within radius");
    num / den
}

/// 5-point Laplacian with truncated (Neumann-style) borders; symmetric, so
/// its square is the SPD biharmonic operator the solver needs.
fn laplacian_neumann(src: &Grid<f64>, dst: &mut Grid<f64>) {
    let (w, h) = (src.width(), src.height());
    for y in 0..h {
        for x in 0..w {
            let c = src.get(x, y);
            let mut acc = 0.0;
            if x > 0 {
                acc += src.get(x - 1, y) - c;
            }
            if x + 1 < w {
                acc += src.get(x + 1, y) - c;
            }
            if y > 0 {
                acc += src.get(x, y - 1) - c;
            }
            if y + 1 < h {
                acc += src.get(x, y + 1) - c;
            }
            dst.set(x, y, acc);
        }
    }
}

/// Solves ∇⁴u = 0 on the holes (13-point stencil at interior pixels) with
/// Dirichlet data from the surrounding pixels, by conjugate gradients on the
/// squared Neumann Laplacian. Stops when no pixel moves more than
/// [`BIHARMONIC_TOL`] in an iteration.
fn biharmonic(pixels: &Grid<f64>, holes: &Mask) -> Grid<f64> {
    let (w, h) = (pixels.width(), pixels.height());
    let hole_idx: Vec<usize> = (0..w * h).filter(|&i| holes.as_slice()[i]).collect();
    let n = hole_idx.len();

    let mut full = Grid::filled(w, h, 0.0f64);
    let mut tmp = Grid::filled(w, h, 0.0f64);
    let mut tmp2 = Grid::filled(w, h, 0.0f64);
    let apply_biharmonic = |vals: &[f64],
                            full: &mut Grid<f64>,
                            tmp: &mut Grid<f64>,
                            tmp2: &mut Grid<f64>,
                            out: &mut [f64]| {
        full.as_mut_slice().fill(0.0);
        for (k, &i) in hole_idx.iter().enumerate() {
            full.as_mut_slice()[i] = vals[k];
        }
        laplacian_neumann(full, tmp);
        laplacian_neumann(tmp, tmp2);
        for (k, &i) in hole_idx.iter().enumerate() {
            out[k] = tmp2.as_slice()[i];
        }
    };

    // b = -(L² g)|holes with g = known values, holes zeroed.
    let mut g = pixels.clone();
    for &i in &hole_idx {
        g.as_mut_slice()[i] = 0.0;
    }
    laplacian_neumann(&g, &mut tmp);
    laplacian_neumann(&tmp, &mut tmp2);
    let b: Vec<f64> = hole_idx.iter().map(|&i| -tmp2.as_slice()[i]).collect();

    // Start from the mean of known pixels bordering the holes.
    let (mut seed_sum, mut seed_cnt) = (0.0f64, 0usize);
    for &i in &hole_idx {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
            if holes.in_bounds(nx, ny) && !holes.is_set(nx as usize, ny as usize) {
                seed_sum += pixels.get(nx as usize, ny as usize);
                seed_cnt += 1;
            }
        }
    }
    let seed = if seed_cnt > 0 {
        seed_sum / seed_cnt as f64
    } else {
        0.0
    };

    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![seed; n];
    let mut ax = vec![0.0; n];
    apply_biharmonic(&x, &mut full, &mut tmp, &mut tmp2, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut ap = vec![0.0; n];
    let cap = 1000.max(30 * n);
    let mut converged = rs == 0.0;
    for _ in 0..cap {
        if converged {
            break;
        }
        apply_biharmonic(&p, &mut full, &mut tmp, &mut tmp2, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            converged = true;
            break;
        }
        let alpha = rs / pap;
        let mut max_update = 0.0f64;
        for k in 0..n {
            let step = alpha * p[k];
            x[k] += step;
            r[k] -= alpha * ap[k];
            max_update = max_update.max(step.abs());
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        if max_update < BIHARMONIC_TOL {
            converged = true;
        }
    }
    if !converged {
        log::warn!("biharmonic inpaint: solver hit the iteration cap ({cap}) before convergence");
    }

    let mut out = pixels.clone();
    for (k, &i) in hole_idx.iter().enumerate() {
        out.as_mut_slice()[i] = x[k];
    }
    out
}

/// Mean over the truncated `(2·radius+1)²` window centered at each pixel,
/// normalized by the in-image window area.
pub fn box_mean(g: &Grid<f64>, radius: usize) -> Grid<f64> {
    let (w, h) = (g.width(), g.height());
    let r = radius;
    let win_sum_1d = |line: &[f64], out: &mut [f64]| {
        let n = line.len();
        let mut prefix = vec![0.0f64; n + 1];
        for (i, &v) in line.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v;
        }
        for (i, out_v) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            *out_v = prefix[hi + 1] - prefix[lo];
        }
    };

    let mut horiz = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        let row_in: Vec<f64> = (0..w).map(|x| g.get(x, y)).collect();
        let mut row_out = vec![0.0f64; w];
        win_sum_1d(&row_in, &mut row_out);
        for (x, v) in row_out.into_iter().enumerate() {
            horiz.set(x, y, v);
        }
    }
    let mut sums = Grid::filled(w, h, 0.0f64);
    for x in 0..w {
        let col_in: Vec<f64> = (0..h).map(|y| horiz.get(x, y)).collect();
        let mut col_out = vec![0.0f64; h];
        win_sum_1d(&col_in, &mut col_out);
        for (y, v) in col_out.into_iter().enumerate() {
            sums.set(x, y, v);
        }
    }
    let count_1d = |i: usize, n: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    Grid::from_fn(w, h, |x, y| {
        sums.get(x, y) / (count_1d(x, w) * count_1d(y, h))
    })
}

/// Separable Gaussian blur, kernel truncated at 3σ and renormalized per pixel
/// by the in-image weight sum.
pub fn gaussian_blur(g: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let (w, h) = (g.width(), g.height());
    let pass = |src: &Grid<f64>, horizontal: bool| -> Grid<f64> {
        Grid::from_fn(w, h, |x, y| {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (ki, &kw) in kernel.iter().enumerate() {
                let off = ki as i64 - radius;
                let (sx, sy) = if horizontal {
                    (x as i64 + off, y as i64)
                } else {
                    (x as i64, y as i64 + off)
                };
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                num += kw * src.get(sx as usize, sy as usize);
                den += kw;
            }
            num / den
        })
    };
    pass(&pass(g, true), false)
}

/// Standard guided filter: q = mean(a)·I + mean(b), a = cov(I,p)/(var(I)+ε),
/// b = mean(p) − a·mean(I), over truncated box windows of side 2·radius+1.
pub fn guided_filter(
    input: &Grid<f64>,
    guide: &Grid<f64>,
    radius: usize,
    epsilon: f64,
) -> Result<Grid<f64>> {
    if radius == 0 {
        return Err(Error::invalid_param("gf_radius", "must be >= 1"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid_param("gf_eps", "must be > 0"));
    }
    if !input.same_size(guide) {
        return Err(Error::dimension_mismatch(
            "guided_filter",
            (guide.width(), guide.height()),
            (input.width(), input.height()),
        ));
    }
    let (w, h) = (input.width(), input.height());
    let mean_i = box_mean(guide, radius);
    let mean_p = box_mean(input, radius);
    let ii = Grid::from_fn(w, h, |x, y| guide.get(x, y) * guide.get(x, y));
    let ip = Grid::from_fn(w, h, |x, y| guide.get(x, y) * input.get(x, y));
    let corr_ii = box_mean(&ii, radius);
    let corr_ip = box_mean(&ip, radius);
    let mut a = Grid::filled(w, h, 0.0f64);
    let mut b = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mi = mean_i.get(x, y);
            let mp = mean_p.get(x, y);
            let var = corr_ii.get(x, y) - mi * mi;
            let cov = corr_ip.get(x, y) - mi * mp;
            let av = cov / (var + epsilon);
            a.set(x, y, av);
            b.set(x, y, mp - av * mi);
        }
    }
    let mean_a = box_mean(&a, radius);
    let mean_b = box_mean(&b, radius);
    Ok(Grid::from_fn(w, h, |x, y| {
        mean_a.get(x, y) * guide.get(x, y) + mean_b.get(x, y)
    }))
}
