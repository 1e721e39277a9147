//! Minimal warping stabilizer: per-vertex camera paths from grid motion,
//! Gaussian path smoothing, and per-cell rendering that can read from
//! expanded canvases.

use std::fmt;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use thiserror::Error;

use crate::coarse::{pair_motion_or_identity, warp_canvas, CoarseParams, HomographyGrid};
use crate::distance::nearest_sites;
use crate::expand::pair_seed;
use crate::geometry::{fit_similarity, Point};
use crate::raster::{pad_frame, Canvas, Frame, Mask, Rect};

#[derive(Debug, Error, PartialEq)]
pub enum StabilizeError {
    #[error("need at least {needed} frames, got {frames}")]
    TooFewFrames { frames: usize, needed: usize },
    #[error("smoothing window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("{canvases} canvases for {frames} frames")]
    CanvasCountMismatch { frames: usize, canvases: usize },
    #[error("no pixel is valid in every frame; nothing to crop to")]
    DegenerateCrop,
    #[error("unknown fill mode `{0}` (expected none or nearest)")]
    UnknownFill(String),
    #[error("frames differ in size")]
    RaggedSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fill {
    #[default]
    None,
    /// Holes take the color of the nearest rendered pixel.
    Nearest,
}

impl fmt::Display for Fill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fill::None => "none",
            Fill::Nearest => "nearest",
        })
    }
}

impl FromStr for Fill {
    type Err = StabilizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Fill::None),
            "nearest" => Ok(Fill::Nearest),
            other => Err(StabilizeError::UnknownFill(other.to_string())),
        }
    }
}

/// Cumulative vertex displacements per frame, relative to frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: usize,
    pub cols: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    /// `positions[i][v]` is how far grid vertex `v` has moved by frame `i`.
    pub positions: Vec<Vec<[f64; 2]>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rest_vertices(&self) -> Vec<Point> {
        let g = HomographyGrid::identity(self.rows, self.cols, self.frame_width, self.frame_height);
        (0..=self.rows)
            .flat_map(|i| (0..=self.cols).map(move |j| (i, j)))
            .map(|(i, j)| g.vertex(i, j))
            .collect()
    }

    /// Per-frame `[tx, ty, scale, angle]` of the similarity best mapping the
    /// rest grid onto the displaced grid.
    pub fn similarity(&self) -> Vec<[f64; 4]> {
        let rest = self.rest_vertices();
        self.positions
            .iter()
            .map(|pos| {
                let moved: Vec<Point> = rest
                    .iter()
                    .zip(pos)
                    .map(|(r, d)| [r[0] + d[0], r[1] + d[1]])
                    .collect();
                fit_similarity(&rest, &moved).unwrap_or([0.0, 0.0, 1.0, 0.0])
            })
            .collect()
    }

    /// Mean vertex displacement per frame.
    pub fn mean_translation(&self) -> Vec<[f64; 2]> {
        self.positions
            .iter()
            .map(|pos| {
                let n = pos.len() as f64;
                let s = pos
                    .iter()
                    .fold([0.0, 0.0], |a, d| [a[0] + d[0], a[1] + d[1]]);
                [s[0] / n, s[1] / n]
            })
            .collect()
    }
}

fn check_sequence(frames: &[Frame], needed: usize) -> Result<(), StabilizeError> {
    if frames.len() < needed {
        return Err(StabilizeError::TooFewFrames {
            frames: frames.len(),
            needed,
        });
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| f.width() != w || f.height() != h) {
        return Err(StabilizeError::RaggedSequence);
    }
    Ok(())
}

/// Accumulates grid vertex motion between consecutive frames. Pairs whose
/// motion cannot be fitted contribute no motion.
pub fn estimate_trajectory(
    frames: &[Frame],
    params: &CoarseParams,
    seed: u64,
) -> Result<Trajectory, StabilizeError> {
    check_sequence(frames, 2)?;
    let (w, h) = (frames[0].width(), frames[0].height());
    let motions: Vec<Vec<[f64; 2]>> = (1..frames.len())
        .into_par_iter()
        .map(|i| {
            pair_motion_or_identity(
                &frames[i],
                &frames[i - 1],
                params,
                pair_seed(seed, i, i - 1),
            )
            .grid
            .vertex_motion()
            .to_vec()
        })
        .collect();
    let nv = (params.rows + 1) * (params.cols + 1);
    let mut positions = vec![vec![[0.0f64; 2]; nv]];
    for m in motions {
        let last = positions.last().expect("starts with rest pose");
        positions.push(
            last.iter()
                .zip(&m)
                .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
                .collect(),
        );
    }
    Ok(Trajectory {
        rows: params.rows,
        cols: params.cols,
        frame_width: w,
        frame_height: h,
        positions,
    })
}

/// Normalized Gaussian taps for offsets `-window/2 ..= window/2`.
pub fn gaussian_weights(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as i64;
    let w: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian temporal average of every vertex path; taps falling outside the
/// sequence are dropped and the rest renormalized.
pub fn smooth_trajectory(
    traj: &Trajectory,
    window: usize,
    sigma: f64,
) -> Result<Trajectory, StabilizeError> {
    if window < 3 || window % 2 == 0 {
        return Err(StabilizeError::BadWindow(window));
    }
    let taps = gaussian_weights(window, sigma);
    let half = (window / 2) as i64;
    let n = traj.len() as i64;
    let positions = (0..n)
        .map(|i| {
            let mut acc = vec![[0.0f64; 2]; traj.positions[0].len()];
            let mut total = 0.0;
            for (k, &wk) in taps.iter().enumerate() {
                let t = i + k as i64 - half;
                if t < 0 || t >= n {
                    continue;
                }
                total += wk;
                for (a, p) in acc.iter_mut().zip(&traj.positions[t as usize]) {
                    a[0] += wk * p[0];
                    a[1] += wk * p[1];
                }
            }
            acc.iter().map(|a| [a[0] / total, a[1] / total]).collect()
        })
        .collect();
    Ok(Trajectory {
        positions,
        ..traj.clone()
    })
}

/// Default smoothing strength for a window.
pub fn default_sigma(window: usize) -> f64 {
    window as f64 / 6.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stabilized {
    pub frames: Vec<Frame>,
    /// Valid output pixels after filling.
    pub masks: Vec<Mask>,
    /// Hole pixels per frame before filling.
    pub holes: Vec<usize>,
}

impl Stabilized {
    pub fn total_holes(&self) -> usize {
        self.holes.iter().sum()
    }
}

/// Renders each frame from its canvas so that every vertex moves from its
/// original path position to the smoothed one.
pub fn render_stabilized(
    sources: &[Canvas],
    original: &Trajectory,
    smoothed: &Trajectory,
    fill: Fill,
) -> Result<Stabilized, StabilizeError> {
    if sources.len() != original.len() || smoothed.len() != original.len() {
        return Err(StabilizeError::CanvasCountMismatch {
            frames: original.len(),
            canvases: sources.len(),
        });
    }
    let rendered: Vec<(Frame, Mask, usize)> = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let disp: Vec<[f64; 2]> = smoothed.positions[i]
                .iter()
                .zip(&original.positions[i])
                .map(|(s, o)| [s[0] - o[0], s[1] - o[1]])
                .collect();
            let grid = HomographyGrid::from_vertex_motion(
                original.rows,
                original.cols,
                original.frame_width,
                original.frame_height,
                disp,
            )
            .unwrap_or_else(|| {
                HomographyGrid::identity(
                    original.rows,
                    original.cols,
                    original.frame_width,
                    original.frame_height,
                )
            });
            let out = warp_canvas(src, &grid, 0);
            let holes = out.mask.data().len() - out.mask.count();
            let (frame, mask) = match fill {
                Fill::None => (out.frame, out.mask),
                Fill::Nearest => fill_nearest(&out.frame, &out.mask),
            };
            (frame, mask, holes)
        })
        .collect();
    let mut out = Stabilized {
        frames: vec![],
        masks: vec![],
        holes: vec![],
    };
    for (f, m, h) in rendered {
        out.frames.push(f);
        out.masks.push(m);
        out.holes.push(h);
    }
    Ok(out)
}

/// Replaces every invalid pixel with its nearest valid one. A frame with no
/// valid pixel is returned unchanged.
pub fn fill_nearest(frame: &Frame, mask: &Mask) -> (Frame, Mask) {
    let nearest = nearest_sites(mask);
    if mask.count() == 0 {
        return (frame.clone(), mask.clone());
    }
    let w = frame.width();
    let filled = Frame::from_fn(w, frame.height(), |x, y| {
        let j = nearest[y * w + x].expect("mask has a valid pixel");
        frame.get(j % w, j / w)
    })
    .expect("positive dims");
    (
        filled,
        Mask::new(w, frame.height(), true).expect("positive dims"),
    )
}

/// Largest rectangle centered on the frame, with the frame's aspect ratio,
/// that is valid in every mask.
pub fn crop_rectangle(masks: &[Mask]) -> Result<Rect, StabilizeError> {
    let first = masks.first().ok_or(StabilizeError::DegenerateCrop)?;
    let (w, h) = (first.width(), first.height());
    // integral image of invalid pixels in the intersection
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            if masks.iter().any(|m| !m.get(x, y)) {
                row += 1;
            }
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let bad = |r: Rect| {
        let at = |x: usize, y: usize| integral[y * (w + 1) + x];
        at(r.x + r.width, r.y + r.height) + at(r.x, r.y)
            - at(r.x + r.width, r.y)
            - at(r.x, r.y + r.height)
    };
    for rw in (1..=w).rev() {
        let rh = ((rw as f64 * h as f64 / w as f64).round() as usize).clamp(1, h);
        let r = Rect::new((w - rw) / 2, (h - rh) / 2, rw, rh);
        if bad(r) == 0 {
            return Ok(r);
        }
    }
    Err(StabilizeError::DegenerateCrop)
}

/// Scale of a crop rectangle relative to the full frame.
pub fn crop_scale(rect: Rect, width: usize, height: usize) -> f64 {
    (rect.width as f64 / width as f64).min(rect.height as f64 / height as f64)
}

/// Bilinear resize.
pub fn resize(frame: &Frame, width: usize, height: usize) -> Frame {
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
            Rgb(frame.get(x as usize, y as usize))
        });
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Frame::from_fn(width, height, |x, y| {
        out.get_pixel(x as u32, y as u32)
            .0
            .map(|v| v.clamp(0.0, 1.0))
    })
    .expect("positive dims")
}

/// Cuts every frame to `rect` and scales it back to full size. A rectangle
/// covering the whole frame returns the frames unchanged.
pub fn present(frames: &[Frame], rect: Rect) -> Vec<Frame> {
    frames
        .par_iter()
        .map(|f| {
            if rect == Rect::new(0, 0, f.width(), f.height()) {
                return f.clone();
            }
            let c = f.crop(rect).expect("rect inside frame");
            resize(&c, f.width(), f.height())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizeParams {
    pub window: usize,
    pub sigma: f64,
    pub fill: Fill,
    pub coarse: CoarseParams,
    pub seed: u64,
}

impl Default for StabilizeParams {
    fn default() -> Self {
        Self {
            window: 31,
            sigma: default_sigma(31),
            fill: Fill::None,
            coarse: CoarseParams::default(),
            seed: 0,
        }
    }
}

/// Estimates, smooths and renders. `canvases` are expanded canvases, one per
/// frame; without them each frame is its own source.
pub fn stabilize(
    frames: &[Frame],
    canvases: Option<&[Canvas]>,
    params: &StabilizeParams,
) -> Result<(Stabilized, Trajectory, Trajectory), StabilizeError> {
    check_sequence(frames, 2)?;
    let traj = estimate_trajectory(frames, &params.coarse, params.seed)?;
    let smooth = smooth_trajectory(&traj, params.window, params.sigma)?;
    let owned: Vec<Canvas>;
    let sources = match canvases {
        Some(c) => c,
        None => {
            owned = frames.iter().map(|f| pad_frame(f, 0)).collect();
            &owned
        }
    };
    let out = render_stabilized(sources, &traj, &smooth, params.fill)?;
    Ok((out, traj, smooth))
}
