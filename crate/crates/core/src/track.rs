//! Sparse keypoint motion: Shi-Tomasi corners tracked by pyramidal
//! Lucas-Kanade with a forward-backward consistency check.

use thiserror::Error;

use crate::raster::{Frame, GrayImage};

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("frames differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("only {found} keypoints survived tracking (need {needed})")]
    TooFewKeypoints { found: usize, needed: usize },
}

/// A corner in the neighbor frame and its displacement toward the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: [f64; 2],
    pub motion: [f64; 2],
    pub score: f64,
}

impl Keypoint {
    pub fn target(&self) -> [f64; 2] {
        [
            self.position[0] + self.motion[0],
            self.position[1] + self.motion[1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    pub max_points: usize,
    pub min_distance: f64,
    /// Corners weaker than this fraction of the strongest response are dropped.
    pub quality: f64,
    pub levels: usize,
    pub window: usize,
    pub max_iterations: usize,
    pub epsilon: f32,
    pub fb_threshold: f64,
    pub min_keypoints: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            max_points: 1000,
            min_distance: 10.0,
            quality: 0.01,
            levels: 3,
            window: 21,
            max_iterations: 30,
            epsilon: 0.01,
            fb_threshold: 1.0,
            min_keypoints: 8,
        }
    }
}

const MIN_RESPONSE: f64 = 1e-7;
const MIN_EIGEN: f32 = 1e-6;

/// Separable [1 4 6 4 1]/16 blur followed by 2x decimation.
pub(crate) fn pyr_down(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let k = [1.0f32, 4.0, 6.0, 4.0, 1.0];
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img.get_clamped(x as i64 + i as i64 - 2, y as i64);
            }
            tmp[y * w + x] = acc / 16.0;
        }
    }
    let tmp = GrayImage::from_vec(w, h, tmp).expect("same dims");
    let (nw, nh) = (w.div_ceil(2).max(1), h.div_ceil(2).max(1));
    let mut out = vec![0.0f32; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp.get_clamped(2 * x as i64, 2 * y as i64 + i as i64 - 2);
            }
            out[y * nw + x] = acc / 16.0;
        }
    }
    GrayImage::from_vec(nw, nh, out).expect("positive dims")
}

pub(crate) fn pyramid(base: GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut out = vec![base];
    while out.len() < levels.max(1) {
        let next = pyr_down(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Scharr derivatives normalized to per-pixel units.
fn gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = |dx: i64, dy: i64| img.get_clamped(x as i64 + dx, y as i64 + dy);
            gx[y * w + x] = (3.0 * (p(1, -1) - p(-1, -1))
                + 10.0 * (p(1, 0) - p(-1, 0))
                + 3.0 * (p(1, 1) - p(-1, 1)))
                / 32.0;
            gy[y * w + x] = (3.0 * (p(-1, 1) - p(-1, -1))
                + 10.0 * (p(0, 1) - p(0, -1))
                + 3.0 * (p(1, 1) - p(1, -1)))
                / 32.0;
        }
    }
    (
        GrayImage::from_vec(w, h, gx).unwrap(),
        GrayImage::from_vec(w, h, gy).unwrap(),
    )
}

/// Shi-Tomasi corners: minimum eigenvalue of the 5x5 structure tensor,
/// 3x3 non-maximum suppression, then greedy selection with a minimum spacing.
pub fn detect_corners(gray: &GrayImage, params: &TrackParams) -> Vec<([f64; 2], f64)> {
    let (w, h) = (gray.width(), gray.height());
    if w < 8 || h < 8 {
        return Vec::new();
    }
    let (gx, gy) = gradients(gray);
    let mut resp = vec![0.0f64; w * h];
    let margin = 4usize;
    let mut max_resp = 0.0f64;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
            for j in y - 2..=y + 2 {
                for i in x - 2..=x + 2 {
                    let dx = gx.get(i, j) as f64;
                    let dy = gy.get(i, j) as f64;
                    a += dx * dx;
                    b += dx * dy;
                    c += dy * dy;
                }
            }
            let m = 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt();
            resp[y * w + x] = m;
            max_resp = max_resp.max(m);
        }
    }
    let threshold = (params.quality * max_resp).max(MIN_RESPONSE);
    let mut cands: Vec<(usize, f64)> = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = resp[y * w + x];
            if r < threshold {
                continue;
            }
            let is_max = (y - 1..=y + 1)
                .flat_map(|j| (x - 1..=x + 1).map(move |i| (i, j)))
                .all(|(i, j)| resp[j * w + i] <= r);
            if is_max {
                cands.push((y * w + x, r));
            }
        }
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let cell = params.min_distance.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut buckets: Vec<Vec<[f64; 2]>> = vec![Vec::new(); gw * gh];
    let min_d2 = params.min_distance * params.min_distance;
    let mut out = Vec::new();
    for (idx, r) in cands {
        if out.len() >= params.max_points {
            break;
        }
        let p = [(idx % w) as f64, (idx / w) as f64];
        let cx = (p[0] / cell) as usize;
        let cy = (p[1] / cell) as usize;
        let mut ok = true;
        'scan: for j in cy.saturating_sub(1)..=(cy + 1).min(gh - 1) {
            for i in cx.saturating_sub(1)..=(cx + 1).min(gw - 1) {
                for q in &buckets[j * gw + i] {
                    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                    if dx * dx + dy * dy < min_d2 {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            buckets[cy * gw + cx].push(p);
            out.push((p, r));
        }
    }
    out
}

/// Precomputed pyramid with gradients for one frame.
pub(crate) struct TrackPyramid {
    levels: Vec<GrayImage>,
    grads: Vec<(GrayImage, GrayImage)>,
}

impl TrackPyramid {
    pub(crate) fn new(gray: GrayImage, levels: usize) -> Self {
        let levels = pyramid(gray, levels);
        let grads = levels.iter().map(gradients).collect();
        Self { levels, grads }
    }
}

/// Pyramidal LK for one point from `from` to `to`; `None` on loss of track.
fn track_point(
    from: &TrackPyramid,
    to: &TrackPyramid,
    p: [f32; 2],
    params: &TrackParams,
) -> Option<[f32; 2]> {
    let half = (params.window / 2) as i32;
    let n_levels = from.levels.len().min(to.levels.len());
    let mut guess = [0.0f32; 2];
    let win = params.window * params.window;
    let mut tmpl = vec![0.0f32; win];
    let mut ix = vec![0.0f32; win];
    let mut iy = vec![0.0f32; win];
    for level in (0..n_levels).rev() {
        let scale = 1.0 / (1u32 << level) as f32;
        let pl = [p[0] * scale, p[1] * scale];
        let a = &from.levels[level];
        let (gx, gy) = &from.grads[level];
        let b = &to.levels[level];
        let (mut g11, mut g12, mut g22) = (0.0f32, 0.0f32, 0.0f32);
        let mut k = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (sx, sy) = (pl[0] + dx as f32, pl[1] + dy as f32);
                tmpl[k] = a.sample_clamped(sx, sy);
                let (vx, vy) = (gx.sample_clamped(sx, sy), gy.sample_clamped(sx, sy));
                ix[k] = vx;
                iy[k] = vy;
                g11 += vx * vx;
                g12 += vx * vy;
                g22 += vy * vy;
                k += 1;
            }
        }
        let det = g11 * g22 - g12 * g12;
        let min_eig = 0.5 * (g11 + g22) - (0.25 * (g11 - g22) * (g11 - g22) + g12 * g12).sqrt();
        if min_eig / win as f32 <= MIN_EIGEN || det.abs() < f32::MIN_POSITIVE {
            if level == 0 {
                return None;
            }
            guess = [2.0 * guess[0], 2.0 * guess[1]];
            continue;
        }
        let mut nu = [0.0f32; 2];
        for _ in 0..params.max_iterations {
            let (mut b1, mut b2) = (0.0f32, 0.0f32);
            let mut k = 0;
            let base = [pl[0] + guess[0] + nu[0], pl[1] + guess[1] + nu[1]];
            for dy in -half..=half {
                for dx in -half..=half {
                    let diff = tmpl[k] - b.sample_clamped(base[0] + dx as f32, base[1] + dy as f32);
                    b1 += diff * ix[k];
                    b2 += diff * iy[k];
                    k += 1;
                }
            }
            let eta = [(g22 * b1 - g12 * b2) / det, (g11 * b2 - g12 * b1) / det];
            nu[0] += eta[0];
            nu[1] += eta[1];
            if !nu[0].is_finite() || !nu[1].is_finite() {
                return None;
            }
            if eta[0].abs() < params.epsilon && eta[1].abs() < params.epsilon {
                break;
            }
        }
        guess = if level > 0 {
            [2.0 * (guess[0] + nu[0]), 2.0 * (guess[1] + nu[1])]
        } else {
            [guess[0] + nu[0], guess[1] + nu[1]]
        };
    }
    let out = [p[0] + guess[0], p[1] + guess[1]];
    let base = &to.levels[0];
    let inside = out[0] >= 0.0
        && out[1] >= 0.0
        && out[0] <= (base.width() - 1) as f32
        && out[1] <= (base.height() - 1) as f32;
    inside.then_some(out)
}

/// Detects corners in `neighbor` and tracks them toward `reference`.
pub fn detect_and_track(
    reference: &Frame,
    neighbor: &Frame,
    params: &TrackParams,
) -> Result<Vec<Keypoint>, TrackError> {
    if reference.width() != neighbor.width() || reference.height() != neighbor.height() {
        return Err(TrackError::DimensionMismatch(
            reference.width(),
            reference.height(),
            neighbor.width(),
            neighbor.height(),
        ));
    }
    let from_gray = neighbor.luma();
    let corners = detect_corners(&from_gray, params);
    let from = TrackPyramid::new(from_gray, params.levels);
    let to = TrackPyramid::new(reference.luma(), params.levels);
    let keypoints = track_corners(&from, &to, &corners, params);
    if keypoints.len() < params.min_keypoints {
        return Err(TrackError::TooFewKeypoints {
            found: keypoints.len(),
            needed: params.min_keypoints,
        });
    }
    Ok(keypoints)
}

pub(crate) fn track_corners(
    from: &TrackPyramid,
    to: &TrackPyramid,
    corners: &[([f64; 2], f64)],
    params: &TrackParams,
) -> Vec<Keypoint> {
    let mut out = Vec::with_capacity(corners.len());
    for &(pos, score) in corners {
        let p = [pos[0] as f32, pos[1] as f32];
        let Some(fwd) = track_point(from, to, p, params) else {
            continue;
        };
        let Some(back) = track_point(to, from, fwd, params) else {
            continue;
        };
        let err = ((back[0] - p[0]) as f64).hypot((back[1] - p[1]) as f64);
        if err > params.fb_threshold {
            continue;
        }
        out.push(Keypoint {
            position: pos,
            motion: [(fwd[0] - p[0]) as f64, (fwd[1] - p[1]) as f64],
            score,
        });
    }
    out
}
