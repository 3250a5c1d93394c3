//! Dense two-frame optical flow: per-pixel quadratic polynomial expansion,
//! window-averaged displacement solves, and a coarse-to-fine pyramid.
//!
//! Conventions: flow (u, v) is the motion of scene content from frame 1 to
//! frame 2, u positive rightward, v positive downward. Pixels without a
//! trustworthy estimate are flagged invalid and carry (0, 0); nothing is
//! extrapolated into them.

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::io::Sequence;
use crate::preprocess::{box_mean, gaussian_blur};

/// Determinant floor below which the 2×2 displacement solve is rejected.
pub const FLOW_DET_EPS: f64 = 1e-12;

/// Farneback parameters; defaults follow the conventional choices.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub win_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 3,
            win_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::invalid_param("pyramid_scale", "must be in (0,1)"));
        }
        if self.levels == 0 {
            return Err(Error::invalid_param("fb_levels", "must be >= 1"));
        }
        if self.win_size < 3 || self.win_size % 2 == 0 {
            return Err(Error::invalid_param("fb_win", "must be odd and >= 3"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid_param("fb_iters", "must be >= 1"));
        }
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return Err(Error::invalid_param("fb_poly_n", "must be odd and >= 3"));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::invalid_param("fb_poly_sigma", "must be > 0"));
        }
        Ok(())
    }
}

/// Per-pixel quadratic model f(p+δ) ≈ δᵀAδ + bᵀδ + c with A = [[a11,a12],[a12,a22]].
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub a11: Grid<f64>,
    pub a12: Grid<f64>,
    pub a22: Grid<f64>,
    pub bx: Grid<f64>,
    pub by: Grid<f64>,
    pub c: Grid<f64>,
}

impl PolyExpansion {
    pub fn width(&self) -> usize {
        self.c.width()
    }

    pub fn height(&self) -> usize {
        self.c.height()
    }
}

/// Dense displacement field with a per-pixel validity flag.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Grid<f64>,
    pub v: Grid<f64>,
    pub valid: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: Grid::zeros(width, height),
            v: Grid::zeros(width, height),
            valid: Mask::all(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        self.u.get(x, y).hypot(self.v.get(x, y))
    }
}

/// Weighted least-squares fit of {1, x, y, x², y², xy} over each poly_n×poly_n
/// neighborhood with Gaussian applicability of std poly_sigma; borders use
/// truncated neighborhoods. Correlations are separable; the per-pixel normal
/// matrix comes from 1D moment tables of the truncated windows.
pub fn poly_expand(pixels: &Grid<f64>, poly_n: usize, poly_sigma: f64) -> Result<PolyExpansion> {
    if poly_n < 3 || poly_n % 2 == 0 {
        return Err(Error::invalid_param("fb_poly_n", "must be odd and >= 3"));
    }
    if !(poly_sigma > 0.0) {
        return Err(Error::invalid_param("fb_poly_sigma", "must be > 0"));
    }
    let (w, h) = (pixels.width(), pixels.height());
    let r = (poly_n / 2) as i64;
    let weight: Vec<f64> = (-r..=r)
        .map(|k| (-0.5 * (k as f64 / poly_sigma).powi(2)).exp())
        .collect();

    // moments[i][k] = Σ_{δ in truncated window at i} w(δ)·δ^k, k = 0..4.
    let axis_moments = |n: usize| -> Vec<[f64; 5]> {
        (0..n as i64)
            .map(|i| {
                let mut m = [0.0f64; 5];
                for d in -r..=r {
                    let j = i + d;
                    if j < 0 || j >= n as i64 {
                        continue;
                    }
                    let wgt = weight[(d + r) as usize];
                    let df = d as f64;
                    let mut p = 1.0;
                    for mk in m.iter_mut() {
                        *mk += wgt * p;
                        p *= df;
                    }
                }
                m
            })
            .collect()
    };
    let mx = axis_moments(w);
    let my = axis_moments(h);

    // Separable correlations of f against w(δx)·δx^k then w(δy)·δy^m.
    let correlate = |src: &Grid<f64>, horizontal: bool, k: u32| -> Grid<f64> {
        Grid::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for d in -r..=r {
                let (sx, sy) = if horizontal {
                    (x as i64 + d, y as i64)
                } else {
                    (x as i64, y as i64 + d)
                };
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                acc += weight[(d + r) as usize]
                    * (d as f64).powi(k as i32)
                    * src.get(sx as usize, sy as usize);
            }
            acc
        })
    };
    let hx: Vec<Grid<f64>> = (0..3).map(|k| correlate(pixels, true, k)).collect();
    // corr[a][b]: x-power a, y-power b.
    let corr: Vec<Vec<Grid<f64>>> = hx
        .iter()
        .map(|g| (0..3).map(|m| correlate(g, false, m)).collect())
        .collect();

    // Basis order: 1, x, y, x², y², xy with (x-power, y-power) per entry.
    const POWERS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

    let mut out = PolyExpansion {
        a11: Grid::zeros(w, h),
        a12: Grid::zeros(w, h),
        a22: Grid::zeros(w, h),
        bx: Grid::zeros(w, h),
        by: Grid::zeros(w, h),
        c: Grid::zeros(w, h),
    };
    for y in 0..h {
        for x in 0..w {
            let mut g = Matrix6::<f64>::zeros();
            for i in 0..6 {
                for j in 0..6 {
                    let (ai, bi) = POWERS[i];
                    let (aj, bj) = POWERS[j];
                    g[(i, j)] = mx[x][ai + aj] * my[y][bi + bj];
                }
            }
            let rhs = Vector6::new(
                corr[0][0].get(x, y),
                corr[1][0].get(x, y),
                corr[0][1].get(x, y),
                corr[2][0].get(x, y),
                corr[0][2].get(x, y),
                corr[1][1].get(x, y),
            );
            let beta = match g.cholesky() {
                Some(ch) => ch.solve(&rhs),
                // Degenerate truncated corner (possible for poly_n = 3):
                // minimal-norm least squares keeps the result finite.
                None => g.svd(true, true).solve(&rhs, 1e-12).unwrap_or_default(),
            };
            out.c.set(x, y, beta[0]);
            out.bx.set(x, y, beta[1]);
            out.by.set(x, y, beta[2]);
            out.a11.set(x, y, beta[3]);
            out.a22.set(x, y, beta[4]);
            out.a12.set(x, y, 0.5 * beta[5]);
        }
    }
    Ok(out)
}

/// One pyramid level: iterative window-averaged displacement solve between
/// two expansions, warm-started from `prior`. Displaced coefficient reads use
/// the rounded current flow; reads leaving the image mark the pixel invalid.
pub fn flow_single_level(
    exp1: &PolyExpansion,
    exp2: &PolyExpansion,
    prior: &FlowField,
    win_size: usize,
    iterations: usize,
) -> Result<FlowField> {
    let (w, h) = (exp1.width(), exp1.height());
    if exp2.width() != w || exp2.height() != h {
        return Err(Error::dimension_mismatch(
            "flow_single_level",
            (w, h),
            (exp2.width(), exp2.height()),
        ));
    }
    if prior.width() != w || prior.height() != h {
        return Err(Error::dimension_mismatch(
            "flow_single_level prior",
            (w, h),
            (prior.width(), prior.height()),
        ));
    }
    if win_size < 3 || win_size % 2 == 0 {
        return Err(Error::invalid_param("fb_win", "must be odd and >= 3"));
    }
    if iterations == 0 {
        return Err(Error::invalid_param("fb_iters", "must be >= 1"));
    }

    let win_r = win_size / 2;
    let mut flow = prior.clone();
    let mut g11 = Grid::zeros(w, h);
    let mut g12 = Grid::zeros(w, h);
    let mut g22 = Grid::zeros(w, h);
    let mut h1 = Grid::zeros(w, h);
    let mut h2 = Grid::zeros(w, h);
    let mut in_range = Mask::none(w, h);

    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let dx = flow.u.get(x, y).round();
                let dy = flow.v.get(x, y).round();
                let qx = x as i64 + dx as i64;
                let qy = y as i64 + dy as i64;
                if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                    // No usable constraint; contributes nothing to averages.
                    in_range.set(x, y, false);
                    g11.set(x, y, 0.0);
                    g12.set(x, y, 0.0);
                    g22.set(x, y, 0.0);
                    h1.set(x, y, 0.0);
                    h2.set(x, y, 0.0);
                    continue;
                }
                in_range.set(x, y, true);
                let (qx, qy) = (qx as usize, qy as usize);
                let a11 = 0.5 * (exp1.a11.get(x, y) + exp2.a11.get(qx, qy));
                let a12 = 0.5 * (exp1.a12.get(x, y) + exp2.a12.get(qx, qy));
                let a22 = 0.5 * (exp1.a22.get(x, y) + exp2.a22.get(qx, qy));
                let db1 = -0.5 * (exp2.bx.get(qx, qy) - exp1.bx.get(x, y)) + a11 * dx + a12 * dy;
                let db2 = -0.5 * (exp2.by.get(qx, qy) - exp1.by.get(x, y)) + a12 * dx + a22 * dy;
                // G = AᵀA and h = AᵀΔb for the symmetric averaged A.
                g11.set(x, y, a11 * a11 + a12 * a12);
                g12.set(x, y, a11 * a12 + a12 * a22);
                g22.set(x, y, a12 * a12 + a22 * a22);
                h1.set(x, y, a11 * db1 + a12 * db2);
                h2.set(x, y, a12 * db1 + a22 * db2);
            }
        }
        let m11 = box_mean(&g11, win_r);
        let m12 = box_mean(&g12, win_r);
        let m22 = box_mean(&g22, win_r);
        let mh1 = box_mean(&h1, win_r);
        let mh2 = box_mean(&h2, win_r);
        for y in 0..h {
            for x in 0..w {
                let (a, b, d) = (m11.get(x, y), m12.get(x, y), m22.get(x, y));
                let det = a * d - b * b;
                if det < FLOW_DET_EPS || !in_range.is_set(x, y) {
                    flow.u.set(x, y, 0.0);
                    flow.v.set(x, y, 0.0);
                    flow.valid.set(x, y, false);
                } else {
                    let (p, q) = (mh1.get(x, y), mh2.get(x, y));
                    flow.u.set(x, y, (d * p - b * q) / det);
                    flow.v.set(x, y, (a * q - b * p) / det);
                    flow.valid.set(x, y, true);
                }
            }
        }
    }
    Ok(flow)
}

/// Bilinear resize with edge clamping, center-aligned sampling.
fn resize_bilinear(src: &Grid<f64>, nw: usize, nh: usize) -> Grid<f64> {
    let (w, h) = (src.width(), src.height());
    if nw == w && nh == h {
        return src.clone();
    }
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    Grid::from_fn(nw, nh, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
        let bot = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Pyramidal Farneback flow from `f1` to `f2`.
pub fn farneback(f1: &Grid<f64>, f2: &Grid<f64>, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    let (w, h) = (f1.width(), f1.height());
    if !f1.same_size(f2) {
        return Err(Error::dimension_mismatch(
            "farneback",
            (w, h),
            (f2.width(), f2.height()),
        ));
    }
    if w < 16 || h < 16 {
        return Err(Error::invalid_param(
            "frame",
            format!("flow needs at least 16x16 pixels, got {w}x{h}"),
        ));
    }

    // Drop levels whose resampled size would fall under 8x8.
    let mut levels = params.levels;
    while levels > 1 {
        let s = params.pyramid_scale.powi(levels as i32 - 1);
        let (lw, lh) = (
            (w as f64 * s).round() as usize,
            (h as f64 * s).round() as usize,
        );
        if lw >= 8 && lh >= 8 {
            break;
        }
        levels -= 1;
    }
    if levels < params.levels {
        log::warn!(
            "farneback: reduced pyramid to {levels} level(s) for a {w}x{h} image (coarsest level must stay at least 8x8)"
        );
    }

    let mut flow: Option<FlowField> = None;
    for k in (0..levels).rev() {
        let scale = params.pyramid_scale.powi(k as i32);
        let (lw, lh) = if k == 0 {
            (w, h)
        } else {
            (
                (w as f64 * scale).round() as usize,
                (h as f64 * scale).round() as usize,
            )
        };
        let smooth_sigma = 0.5 * (1.0 / scale - 1.0);
        let (l1, l2) = if k == 0 {
            (f1.clone(), f2.clone())
        } else {
            (
                resize_bilinear(&gaussian_blur(f1, smooth_sigma), lw, lh),
                resize_bilinear(&gaussian_blur(f2, smooth_sigma), lw, lh),
            )
        };
        let exp1 = poly_expand(&l1, params.poly_n, params.poly_sigma)?;
        let exp2 = poly_expand(&l2, params.poly_n, params.poly_sigma)?;
        let prior = match flow.take() {
            None => FlowField::zeros(lw, lh),
            Some(coarse) => {
                let gain = 1.0 / params.pyramid_scale;
                let mut u = resize_bilinear(&coarse.u, lw, lh);
                let mut v = resize_bilinear(&coarse.v, lw, lh);
                for val in u.as_mut_slice() {
                    *val *= gain;
                }
                for val in v.as_mut_slice() {
                    *val *= gain;
                }
                FlowField {
                    u,
                    v,
                    valid: Mask::all(lw, lh),
                }
            }
        };
        flow = Some(flow_single_level(
            &exp1,
            &exp2,
            &prior,
            params.win_size,
            params.iterations,
        )?);
    }
    Ok(flow.expect("at least one pyramid level"))
}

/// Flow between frames `i` and `i + stride`, divided by `stride` so the
/// result is a per-frame displacement regardless of the interval.
pub fn flow_between(
    seq: &Sequence,
    i: usize,
    stride: usize,
    params: &FlowParams,
) -> Result<FlowField> {
    if stride == 0 {
        return Err(Error::invalid_param("stride", "must be >= 1"));
    }
    let j = i + stride;
    if j >= seq.len() {
        return Err(Error::FrameIndexOutOfRange {
            index: j,
            len: seq.len(),
            context: "flow_between",
        });
    }
    let mut flow = farneback(&seq.frames[i].pixels, &seq.frames[j].pixels, params)?;
    if stride > 1 {
        let inv = 1.0 / stride as f64;
        for val in flow.u.as_mut_slice() {
            *val *= inv;
        }
        for val in flow.v.as_mut_slice() {
            *val *= inv;
        }
    }
    Ok(flow)
}
