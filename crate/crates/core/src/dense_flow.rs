//! Masked dense optical flow behind a pluggable estimator interface.
//!
//! The bundled estimator is a coarse-to-fine block matcher with one
//! least-squares gradient step per block. Precomputed Middlebury files can be
//! substituted through [`FileFlow`].

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::io::{flow_file_name, read_flo, IoError};
use crate::raster::{pad_frame, Canvas, FlowField, Frame, GrayImage, Mask};
use crate::track::pyr_down;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("estimator `{0}` returned non-finite displacements")]
    NonFinite(String),
    #[error("estimator `{0}` needs frame indices for this pair")]
    MissingPair(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One flow query: displacement from each reference pixel to its match in
/// the target.
#[derive(Debug, Clone, Copy)]
pub struct FlowRequest<'a> {
    pub reference: &'a Canvas,
    pub target: &'a Canvas,
    /// `(reference index, neighbor index)` within the sequence, when known.
    pub pair: Option<(usize, usize)>,
}

pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Returns a field with the reference's dimensions.
    fn estimate(&self, request: &FlowRequest<'_>) -> Result<FlowField, FlowError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineFlowParams {
    pub levels: usize,
    pub block: usize,
    pub stride: usize,
    pub search: i64,
    pub median: usize,
}

impl Default for BaselineFlowParams {
    fn default() -> Self {
        Self {
            levels: 4,
            block: 16,
            stride: 8,
            search: 8,
            median: 5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BaselineFlow {
    pub params: BaselineFlowParams,
}

impl FlowEstimator for BaselineFlow {
    fn name(&self) -> &str {
        "baseline"
    }

    fn estimate(&self, request: &FlowRequest<'_>) -> Result<FlowField, FlowError> {
        let (r, t) = (request.reference, request.target);
        if !r.same_dims(t) {
            return Err(FlowError::DimensionMismatch(
                r.width(),
                r.height(),
                t.width(),
                t.height(),
            ));
        }
        Ok(block_flow(
            &r.frame.luma(),
            &r.mask,
            &t.frame.luma(),
            &t.mask,
            &self.params,
        ))
    }
}

/// Reads `flow_<ref>_<neighbor>.flo` from a directory.
#[derive(Debug, Clone)]
pub struct FileFlow {
    pub dir: PathBuf,
}

impl FlowEstimator for FileFlow {
    fn name(&self) -> &str {
        "files"
    }

    fn estimate(&self, request: &FlowRequest<'_>) -> Result<FlowField, FlowError> {
        let (a, b) = request
            .pair
            .ok_or_else(|| FlowError::MissingPair(self.name().to_string()))?;
        let flow = read_flo(&self.dir.join(flow_file_name(a, b)))?;
        let r = request.reference;
        if flow.width() != r.width() || flow.height() != r.height() {
            return Err(FlowError::DimensionMismatch(
                flow.width(),
                flow.height(),
                r.width(),
                r.height(),
            ));
        }
        Ok(flow)
    }
}

/// Flow from the reference canvas to the aligned neighbor, restricted to the
/// reference mask: zero displacement and invalid outside it. Pixels the
/// estimator itself marks invalid stay invalid.
pub fn estimate_masked_flow(
    estimator: &dyn FlowEstimator,
    reference: &Canvas,
    aligned: &Canvas,
    pair: Option<(usize, usize)>,
) -> Result<FlowField, FlowError> {
    if !reference.same_dims(aligned) {
        return Err(FlowError::DimensionMismatch(
            reference.width(),
            reference.height(),
            aligned.width(),
            aligned.height(),
        ));
    }
    let flow = estimator.estimate(&FlowRequest {
        reference,
        target: aligned,
        pair,
    })?;
    if flow.width() != reference.width() || flow.height() != reference.height() {
        return Err(FlowError::DimensionMismatch(
            flow.width(),
            flow.height(),
            reference.width(),
            reference.height(),
        ));
    }
    if !flow.is_finite() {
        return Err(FlowError::NonFinite(estimator.name().to_string()));
    }
    Ok(flow.masked(&reference.mask).expect("dims checked"))
}

/// Baseline estimate between two unmasked frames.
pub fn baseline_flow(reference: &Frame, target: &Frame) -> Result<FlowField, FlowError> {
    BaselineFlow::default().estimate(&FlowRequest {
        reference: &pad_frame(reference, 0),
        target: &pad_frame(target, 0),
        pair: None,
    })
}

struct Level {
    width: usize,
    height: usize,
    gray: Vec<f32>,
    valid: Vec<bool>,
    /// Summed-area table of invalid pixels, `(width + 1) * (height + 1)`.
    holes: Vec<u32>,
}

impl Level {
    fn new(width: usize, height: usize, gray: Vec<f32>, valid: Vec<bool>) -> Self {
        let mut holes = vec![0u32; (width + 1) * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += u32::from(!valid[y * width + x]);
                holes[(y + 1) * (width + 1) + x + 1] = holes[y * (width + 1) + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            gray,
            valid,
            holes,
        }
    }

    /// Whether `[x0, x1) × [y0, y1)` lies inside the level and is fully valid.
    fn all_valid(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> bool {
        if x0 < 0 || y0 < 0 || x1 > self.width as i64 || y1 > self.height as i64 {
            return false;
        }
        let s = self.width + 1;
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
        self.holes[y1 * s + x1] + self.holes[y0 * s + x0]
            == self.holes[y0 * s + x1] + self.holes[y1 * s + x0]
    }
}

fn mask_down(valid: &[bool], w: usize, h: usize) -> Vec<bool> {
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![false; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let mut all = true;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = ((2 * x + dx).min(w - 1), (2 * y + dy).min(h - 1));
                all &= valid[sy * w + sx];
            }
            out[y * nw + x] = all;
        }
    }
    out
}

fn build_levels(gray: &GrayImage, valid: &Mask, count: usize) -> Vec<Level> {
    let mut levels = vec![Level::new(
        gray.width(),
        gray.height(),
        gray.data().to_vec(),
        valid.data().to_vec(),
    )];
    let mut img = gray.clone();
    while levels.len() < count {
        let last = levels.last().unwrap();
        if last.width < 24 || last.height < 24 {
            break;
        }
        let v = mask_down(&last.valid, last.width, last.height);
        img = pyr_down(&img);
        levels.push(Level::new(
            img.width(),
            img.height(),
            img.data().to_vec(),
            v,
        ));
    }
    levels
}

/// Bilinear read of a dense two-channel field with clamped coordinates.
fn sample_field(field: &[[f64; 2]], w: usize, h: usize, x: f64, y: f64) -> [f64; 2] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 2];
    for c in 0..2 {
        let top = field[y0 * w + x0][c] * (1.0 - fx) + field[y0 * w + x1][c] * fx;
        let bot = field[y1 * w + x0][c] * (1.0 - fx) + field[y1 * w + x1][c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

fn median_filter(field: &[[f64; 2]], w: usize, h: usize, size: usize) -> Vec<[f64; 2]> {
    let r = (size / 2) as i64;
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut bx = Vec::with_capacity(size * size);
            let mut by = Vec::with_capacity(size * size);
            (0..w)
                .map(move |x| {
                    bx.clear();
                    by.clear();
                    for dy in -r..=r {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        for dx in -r..=r {
                            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            let v = field[yy * w + xx];
                            bx.push(v[0]);
                            by.push(v[1]);
                        }
                    }
                    let mid = bx.len() / 2;
                    let mx = *bx.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
                    let my = *by.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
                    [mx, my]
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Best displacement for one block: integer search around `init` followed by
/// one least-squares gradient step.
fn match_block(
    r: &Level,
    t: &Level,
    cx: usize,
    cy: usize,
    init: [f64; 2],
    params: &BaselineFlowParams,
) -> Option<[f64; 2]> {
    let half = (params.block / 2) as i64;
    let (w, h) = (r.width as i64, r.height as i64);
    let mut pix: Vec<(i64, i64, f32)> = Vec::with_capacity(params.block * params.block);
    for y in cy as i64 - half..cy as i64 + half {
        for x in cx as i64 - half..cx as i64 + half {
            if x >= 0 && y >= 0 && x < w && y < h {
                let i = (y * w + x) as usize;
                if r.valid[i] {
                    pix.push((x, y, r.gray[i]));
                }
            }
        }
    }
    let min_count = (params.block * params.block / 4).max(1);
    if pix.len() < min_count {
        return None;
    }
    let (ix, iy) = (init[0].round() as i64, init[1].round() as i64);
    let eval = |dx: i64, dy: i64| -> Option<f32> {
        let mut sad = 0.0f32;
        let mut n = 0usize;
        for &(x, y, v) in &pix {
            let (tx, ty) = (x + dx, y + dy);
            if tx < 0 || ty < 0 || tx >= w || ty >= h {
                continue;
            }
            let j = (ty * w + tx) as usize;
            if t.valid[j] {
                sad += (t.gray[j] - v).abs();
                n += 1;
            }
        }
        (n >= min_count).then(|| sad / n as f32)
    };
    let b = params.block as i64;
    let (x0, y0) = (cx as i64 - half, cy as i64 - half);
    let s = params.search;
    let interior = pix.len() == params.block * params.block
        && t.all_valid(x0 + ix - s, y0 + iy - s, x0 + b + ix + s, y0 + b + iy + s);
    let best = if interior {
        // every candidate sees the full block, so raw sums compare directly
        // and a candidate can stop as soon as it is no better
        let bw = params.block;
        let sad_at = |dx: i64, dy: i64, bound: f32| -> f32 {
            let mut sad = 0.0f32;
            for (row, yy) in (y0..y0 + b).enumerate() {
                let rs = &pix[row * bw..(row + 1) * bw];
                let ts = ((yy + dy) * w + x0 + dx) as usize;
                for (p, q) in rs.iter().zip(&t.gray[ts..ts + bw]) {
                    sad += (q - p.2).abs();
                }
                if sad >= bound {
                    break;
                }
            }
            sad
        };
        let mut best = (sad_at(ix, iy, f32::INFINITY), ix, iy);
        for oy in -s..=s {
            for ox in -s..=s {
                if ox == 0 && oy == 0 {
                    continue;
                }
                let v = sad_at(ix + ox, iy + oy, best.0);
                if v < best.0 {
                    best = (v, ix + ox, iy + oy);
                }
            }
        }
        Some(best)
    } else {
        let mut best = eval(ix, iy).map(|s| (s, ix, iy));
        for oy in -s..=s {
            for ox in -s..=s {
                if ox == 0 && oy == 0 {
                    continue;
                }
                if let Some(v) = eval(ix + ox, iy + oy) {
                    if best.map_or(true, |b| v < b.0) {
                        best = Some((v, ix + ox, iy + oy));
                    }
                }
            }
        }
        best
    };
    let (_, dx, dy) = best?;
    // one Gauss-Newton step on the matched block
    let at = |x: i64, y: i64| t.gray[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let (mut gxx, mut gxy, mut gyy, mut bx, mut by) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(x, y, v) in &pix {
        let (tx, ty) = (x + dx, y + dy);
        if tx < 1 || ty < 1 || tx >= w - 1 || ty >= h - 1 {
            continue;
        }
        let j = (ty * w + tx) as usize;
        if !t.valid[j] {
            continue;
        }
        let gx = 0.5 * (at(tx + 1, ty) - at(tx - 1, ty)) as f64;
        let gy = 0.5 * (at(tx, ty + 1) - at(tx, ty - 1)) as f64;
        let e = (v - t.gray[j]) as f64;
        gxx += gx * gx;
        gxy += gx * gy;
        gyy += gy * gy;
        bx += gx * e;
        by += gy * e;
    }
    let det = gxx * gyy - gxy * gxy;
    let trace = gxx + gyy;
    let (mut sx, mut sy) = (0.0, 0.0);
    if det > 1e-9 * trace.max(1e-12) * trace.max(1e-12) && det > 1e-12 {
        sx = (gyy * bx - gxy * by) / det;
        sy = (gxx * by - gxy * bx) / det;
        let norm = sx.hypot(sy);
        if norm > 1.0 {
            sx /= norm;
            sy /= norm;
        }
    }
    Some([dx as f64 + sx, dy as f64 + sy])
}

fn level_flow(
    r: &Level,
    t: &Level,
    init: &[[f64; 2]],
    params: &BaselineFlowParams,
) -> Vec<[f64; 2]> {
    let (w, h) = (r.width, r.height);
    let half = params.block / 2;
    let centers = |n: usize| -> Vec<usize> {
        let mut c = vec![];
        let mut v = half.min(n - 1);
        loop {
            c.push(v);
            if v + half >= n {
                break;
            }
            v = (v + params.stride).min(n - 1);
        }
        c
    };
    let (cxs, cys) = (centers(w), centers(h));
    let (nbx, nby) = (cxs.len(), cys.len());
    let blocks: Vec<Option<[f64; 2]>> = (0..nbx * nby)
        .into_par_iter()
        .map(|k| {
            let (cx, cy) = (cxs[k % nbx], cys[k / nbx]);
            match_block(r, t, cx, cy, init[cy * w + cx], params)
        })
        .collect();
    // interpolate block centers to a dense field
    let coord = |centers: &[usize], v: usize| -> f64 {
        if v <= centers[0] {
            return 0.0;
        }
        for k in 0..centers.len() - 1 {
            if v <= centers[k + 1] {
                return k as f64 + (v - centers[k]) as f64 / (centers[k + 1] - centers[k]) as f64;
            }
        }
        (centers.len() - 1) as f64
    };
    let ux: Vec<f64> = (0..w).map(|x| coord(&cxs, x)).collect();
    let uy: Vec<f64> = (0..h).map(|y| coord(&cys, y)).collect();
    // bilinear over matched blocks only; pixels with no matched corner keep
    // their initial estimate
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (by, fy) = split(uy[y], nby);
        for x in 0..w {
            let (bx, fx) = split(ux[x], nbx);
            let mut acc = [0.0f64; 2];
            let mut total = 0.0f64;
            for (j, wy) in [(by, 1.0 - fy), ((by + 1).min(nby - 1), fy)] {
                for (i, wx) in [(bx, 1.0 - fx), ((bx + 1).min(nbx - 1), fx)] {
                    let wt = wx * wy;
                    if let (Some(v), true) = (blocks[j * nbx + i], wt > 0.0) {
                        acc[0] += wt * v[0];
                        acc[1] += wt * v[1];
                        total += wt;
                    }
                }
            }
            out.push(if total > 1e-9 {
                [acc[0] / total, acc[1] / total]
            } else {
                init[y * w + x]
            });
        }
    }
    out
}

fn split(u: f64, n: usize) -> (usize, f64) {
    let i = (u.floor() as usize).min(n - 1);
    (i, u - i as f64)
}

/// Coarse-to-fine block flow from `r` to `t`; both masks gate which pixels
/// take part in matching.
pub fn block_flow(
    r: &GrayImage,
    r_valid: &Mask,
    t: &GrayImage,
    t_valid: &Mask,
    params: &BaselineFlowParams,
) -> FlowField {
    let rl = build_levels(r, r_valid, params.levels.max(1));
    let tl = build_levels(t, t_valid, rl.len());
    let top = rl.len() - 1;
    let mut field = vec![[0.0f64; 2]; rl[top].width * rl[top].height];
    for l in (0..=top).rev() {
        let (w, h) = (rl[l].width, rl[l].height);
        if l < top {
            let (pw, ph) = (rl[l + 1].width, rl[l + 1].height);
            let mut up = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let v = sample_field(&field, pw, ph, x as f64 / 2.0, y as f64 / 2.0);
                    up.push([2.0 * v[0], 2.0 * v[1]]);
                }
            }
            field = up;
        }
        field = level_flow(&rl[l], &tl[l], &field, params);
        if l > 0 && params.median > 1 {
            field = median_filter(&field, w, h, params.median);
        }
    }
    FlowField::from_fn(r.width(), r.height(), |x, y| field[y * r.width() + x])
        .expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rect;
    use crate::synth::procedural_panorama;

    fn crop(pano: &Frame, x: usize, y: usize, w: usize, h: usize) -> Frame {
        pano.crop(Rect::new(x, y, w, h)).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_field() {
        let f = procedural_panorama(96, 80, 1);
        let flow = baseline_flow(&f, &f).unwrap();
        assert!(flow
            .data()
            .iter()
            .all(|d| d[0].abs() < 1e-9 && d[1].abs() < 1e-9));
    }

    #[test]
    fn translation_is_recovered() {
        let pano = procedural_panorama(200, 160, 2);
        let r = crop(&pano, 20, 20, 160, 120);
        // target pixel p shows pano at p + (26, 16), i.e. ref content moved by (-6, +4)
        let t = crop(&pano, 14, 24, 160, 120);
        let flow = baseline_flow(&r, &t).unwrap();
        let good = flow
            .data()
            .iter()
            .filter(|d| (d[0] - 6.0).abs() < 1.0 && (d[1] + 4.0).abs() < 1.0)
            .count();
        assert!(good as f64 >= 0.8 * flow.data().len() as f64, "{good}");
    }

    #[test]
    fn rotation_field_matches_analytic_flow() {
        let (w, h) = (160usize, 120usize);
        let pano = procedural_panorama(240, 200, 3);
        let (ox, oy) = (40.0, 40.0);
        let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
        let th = 3f64.to_radians();
        let r = crop(&pano, 40, 40, w, h);
        // target(p) = ref(R^-1 (p - c) + c): ref pixel q moves to R (q - c) + c
        let t = Frame::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
            let sx = th.cos() * dx + th.sin() * dy + c[0];
            let sy = -th.sin() * dx + th.cos() * dy + c[1];
            pano.sample(sx + ox, sy + oy).unwrap()
        })
        .unwrap();
        let flow = baseline_flow(&r, &t).unwrap();
        let (mut se, mut n) = (0.0, 0usize);
        for y in (h / 10)..(h - h / 10) {
            for x in (w / 10)..(w - w / 10) {
                let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
                let ex = th.cos() * dx - th.sin() * dy + c[0] - x as f64;
                let ey = th.sin() * dx + th.cos() * dy + c[1] - y as f64;
                let f = flow.get(x, y);
                se += (f[0] - ex).powi(2) + (f[1] - ey).powi(2);
                n += 1;
            }
        }
        let rms = (se / n as f64).sqrt();
        assert!(rms < 1.0, "rms {rms}");
    }

    #[test]
    fn masked_flow_honors_reference_mask() {
        let pano = procedural_panorama(160, 140, 4);
        let r = pad_frame(&crop(&pano, 20, 20, 100, 80), 12);
        let t = pad_frame(&crop(&pano, 22, 21, 100, 80), 12);
        let flow = estimate_masked_flow(&BaselineFlow::default(), &r, &t, None).unwrap();
        assert_eq!(flow.valid(), &r.mask);
        for y in 0..flow.height() {
            for x in 0..flow.width() {
                if !r.mask.get(x, y) {
                    assert_eq!(flow.get(x, y), [0.0, 0.0]);
                }
            }
        }
        let mut xs: Vec<f64> = (0..flow.data().len())
            .filter(|&i| flow.valid().data()[i])
            .map(|i| flow.data()[i][0])
            .collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[xs.len() / 2] + 2.0).abs() < 0.5);
    }

    #[test]
    fn shifted_canvas_median_flow() {
        let pano = procedural_panorama(200, 170, 5);
        let r = pad_frame(&crop(&pano, 40, 40, 100, 80), 16);
        // target canvas: ref content translated by (3, 2) inside its support
        let t = pad_frame(&crop(&pano, 37, 38, 100, 80), 16);
        let flow = estimate_masked_flow(&BaselineFlow::default(), &r, &t, None).unwrap();
        let pick = |c: usize| {
            let mut v: Vec<f64> = (0..flow.data().len())
                .filter(|&i| flow.valid().data()[i])
                .map(|i| flow.data()[i][c])
                .collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!((pick(0) - 3.0).abs() < 0.5 && (pick(1) - 2.0).abs() < 0.5);
        let same = estimate_masked_flow(&BaselineFlow::default(), &r, &r, None).unwrap();
        let mut mags: Vec<f64> = same
            .data()
            .iter()
            .map(|d| d[0].abs().max(d[1].abs()))
            .collect();
        mags.sort_by(f64::total_cmp);
        assert!(mags[mags.len() * 9 / 10] < 0.3);
    }

    #[test]
    fn file_estimator_reads_named_pair() {
        let dir = tempfile::tempdir().unwrap();
        let f = pad_frame(&procedural_panorama(20, 16, 1), 2);
        let field = FlowField::constant(24, 20, [1.5, -0.25]).unwrap();
        crate::io::write_flo(&dir.path().join(flow_file_name(3, 2)), &field).unwrap();
        let est = FileFlow {
            dir: dir.path().to_path_buf(),
        };
        let got = estimate_masked_flow(&est, &f, &f, Some((3, 2))).unwrap();
        assert_eq!(got, field.masked(&f.mask).unwrap());
        assert!(matches!(
            estimate_masked_flow(&est, &f, &f, Some((3, 4))),
            Err(FlowError::Io(_))
        ));
        assert!(matches!(
            estimate_masked_flow(&est, &f, &f, None),
            Err(FlowError::MissingPair(_))
        ));
    }
}
