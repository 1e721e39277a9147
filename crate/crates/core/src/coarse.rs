//! Grid-homography motion between a neighbor and a reference frame, and the
//! backward warp of the neighbor onto the reference's padded canvas.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{
    apply, fit_least_squares, from_four_points, normalize, ransac, Homography, Point, RansacParams,
};
use crate::raster::{pad_frame, Canvas, FlowField, Frame, Mask, Rect};
use crate::track::{detect_and_track, Keypoint, TrackError, TrackParams};

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("robust fit kept {inliers} inliers, need {needed}")]
    DegenerateFit { inliers: usize, needed: usize },
    #[error("grid must have at least one row and column")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseParams {
    pub rows: usize,
    pub cols: usize,
    /// Neighborhood radius for residual medians, in cells.
    pub median_radius: f64,
    /// Gaussian weight scale for residual medians, in cells.
    pub median_sigma: f64,
    pub track: TrackParams,
    pub ransac: RansacParams,
}

impl Default for CoarseParams {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            median_radius: 1.5,
            median_sigma: 1.0,
            track: TrackParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

/// Per-cell homographies over the unpadded frame. Vertex `(i, j)` sits at
/// `(j * (W - 1) / cols, i * (H - 1) / rows)`; its motion carries a neighbor
/// pixel to the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyGrid {
    rows: usize,
    cols: usize,
    frame_width: usize,
    frame_height: usize,
    vertex_motion: Vec<[f64; 2]>,
    cells: Vec<Homography>,
    inverse: Vec<Homography>,
}

#[derive(Serialize)]
struct GridDump {
    rows: usize,
    cols: usize,
    frame_width: usize,
    frame_height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl HomographyGrid {
    pub fn identity(rows: usize, cols: usize, width: usize, height: usize) -> Self {
        let n = (rows + 1) * (cols + 1);
        Self::from_vertex_motion(rows, cols, width, height, vec![[0.0; 2]; n])
            .expect("identity grid is valid")
    }

    /// Every cell carries the same homography.
    pub fn from_homography(
        rows: usize,
        cols: usize,
        width: usize,
        height: usize,
        h: &Homography,
    ) -> Option<Self> {
        let h = normalize(*h)?;
        let inv = normalize(h.try_inverse()?)?;
        let mut grid = Self::identity(rows, cols, width, height);
        for i in 0..=rows {
            for j in 0..=cols {
                let v = grid.vertex(i, j);
                let t = apply(&h, v);
                grid.vertex_motion[i * (cols + 1) + j] = [t[0] - v[0], t[1] - v[1]];
            }
        }
        grid.cells.fill(h);
        grid.inverse.fill(inv);
        Some(grid)
    }

    /// Fits each cell from its four displaced vertices. A cell whose fit is
    /// degenerate makes the whole grid invalid.
    pub fn from_vertex_motion(
        rows: usize,
        cols: usize,
        width: usize,
        height: usize,
        vertex_motion: Vec<[f64; 2]>,
    ) -> Option<Self> {
        if rows == 0 || cols == 0 || vertex_motion.len() != (rows + 1) * (cols + 1) {
            return None;
        }
        let mut grid = Self {
            rows,
            cols,
            frame_width: width,
            frame_height: height,
            vertex_motion,
            cells: Vec::with_capacity(rows * cols),
            inverse: Vec::with_capacity(rows * cols),
        };
        for i in 0..rows {
            for j in 0..cols {
                let corners = [(i, j), (i, j + 1), (i + 1, j + 1), (i + 1, j)];
                let src: [Point; 4] = corners.map(|(a, b)| grid.vertex(a, b));
                let dst: [Point; 4] = corners.map(|(a, b)| {
                    let v = grid.vertex(a, b);
                    let m = grid.vertex_motion[a * (cols + 1) + b];
                    [v[0] + m[0], v[1] + m[1]]
                });
                let h = from_four_points(&src, &dst)?;
                if h.determinant().abs() <= 1e-9 {
                    return None;
                }
                let inv = normalize(h.try_inverse()?)?;
                grid.cells.push(h);
                grid.inverse.push(inv);
            }
        }
        Some(grid)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frame_width, self.frame_height)
    }

    pub fn vertex(&self, i: usize, j: usize) -> Point {
        [
            j as f64 * (self.frame_width as f64 - 1.0) / self.cols as f64,
            i as f64 * (self.frame_height as f64 - 1.0) / self.rows as f64,
        ]
    }

    pub fn vertex_motion(&self) -> &[[f64; 2]] {
        &self.vertex_motion
    }

    pub fn cell(&self, i: usize, j: usize) -> &Homography {
        &self.cells[i * self.cols + j]
    }

    /// Cell covering a source point; points outside the grid use the nearest
    /// border cell.
    #[inline]
    fn cell_of(&self, p: Point) -> usize {
        let cw = (self.frame_width as f64 - 1.0) / self.cols as f64;
        let ch = (self.frame_height as f64 - 1.0) / self.rows as f64;
        let j = ((p[0] / cw).floor().max(0.0) as usize).min(self.cols - 1);
        let i = ((p[1] / ch).floor().max(0.0) as usize).min(self.rows - 1);
        i * self.cols + j
    }

    /// Forward map of a neighbor point into the reference frame.
    pub fn forward(&self, p: Point) -> Point {
        apply(&self.cells[self.cell_of(p)], p)
    }

    /// Source point whose forward image is `q`, found by alternating between
    /// cell selection and that cell's inverse.
    #[inline]
    pub fn inverse(&self, q: Point) -> Point {
        let mut c = self.cell_of(q);
        let mut s = apply(&self.inverse[c], q);
        for _ in 0..4 {
            let next = self.cell_of(s);
            if next == c {
                break;
            }
            c = next;
            s = apply(&self.inverse[c], q);
        }
        s
    }

    /// Grid motion as TOML text (`rows`, `cols`, and row-major vertex `dx`/`dy`).
    pub fn to_toml(&self) -> String {
        let dump = GridDump {
            rows: self.rows,
            cols: self.cols,
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            dx: self.vertex_motion.iter().map(|m| m[0]).collect(),
            dy: self.vertex_motion.iter().map(|m| m[1]).collect(),
        };
        toml::to_string(&dump).expect("plain numeric table")
    }
}

fn weighted_median(mut values: Vec<(f64, f64)>) -> f64 {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = values.iter().map(|v| v.1).sum();
    let mut acc = 0.0;
    for (v, w) in &values {
        acc += w;
        if acc >= 0.5 * total {
            return *v;
        }
    }
    values.last().map_or(0.0, |v| v.0)
}

/// Motion between one neighbor/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMotion {
    pub grid: HomographyGrid,
    pub global: Homography,
    /// Set when tracking or fitting failed and identity motion was substituted.
    pub fallback: bool,
}

impl PairMotion {
    pub fn identity(params: &CoarseParams, width: usize, height: usize) -> Self {
        Self {
            grid: HomographyGrid::identity(params.rows, params.cols, width, height),
            global: Homography::identity(),
            fallback: true,
        }
    }
}

/// Robust global homography plus local residual medians at the grid vertices.
pub fn propagate_to_grid(
    keypoints: &[Keypoint],
    width: usize,
    height: usize,
    params: &CoarseParams,
    seed: u64,
) -> Result<PairMotion, CoarseError> {
    if params.rows == 0 || params.cols == 0 {
        return Err(CoarseError::EmptyGrid);
    }
    let needed = params.ransac.min_inliers.max(8);
    let src: Vec<Point> = keypoints.iter().map(|k| k.position).collect();
    let dst: Vec<Point> = keypoints.iter().map(|k| k.target()).collect();
    let fit = ransac(&src, &dst, &params.ransac, seed)
        .ok_or(CoarseError::DegenerateFit { inliers: 0, needed })?;
    if fit.inlier_count() < needed {
        return Err(CoarseError::DegenerateFit {
            inliers: fit.inlier_count(),
            needed,
        });
    }
    let global = fit.homography;
    let residuals: Vec<(Point, [f64; 2])> = src
        .iter()
        .zip(&dst)
        .zip(&fit.inliers)
        .filter(|(_, &ok)| ok)
        .map(|((s, d), _)| {
            let g = apply(&global, *s);
            (*s, [d[0] - g[0], d[1] - g[1]])
        })
        .collect();
    let mut grid = HomographyGrid::identity(params.rows, params.cols, width, height);
    let cw = (width as f64 - 1.0).max(1.0) / params.cols as f64;
    let ch = (height as f64 - 1.0).max(1.0) / params.rows as f64;
    let mut motion = Vec::with_capacity((params.rows + 1) * (params.cols + 1));
    for i in 0..=params.rows {
        for j in 0..=params.cols {
            let v = grid.vertex(i, j);
            let g = apply(&global, v);
            let mut near_x = Vec::new();
            let mut near_y = Vec::new();
            for (p, r) in &residuals {
                let dx = (p[0] - v[0]) / cw;
                let dy = (p[1] - v[1]) / ch;
                let d2 = dx * dx + dy * dy;
                if d2 <= params.median_radius * params.median_radius {
                    let w = (-d2 / (2.0 * params.median_sigma * params.median_sigma)).exp();
                    near_x.push((r[0], w));
                    near_y.push((r[1], w));
                }
            }
            let (rx, ry) = if near_x.is_empty() {
                (0.0, 0.0)
            } else {
                (weighted_median(near_x), weighted_median(near_y))
            };
            motion.push([g[0] - v[0] + rx, g[1] - v[1] + ry]);
        }
    }
    grid = match HomographyGrid::from_vertex_motion(params.rows, params.cols, width, height, motion)
    {
        Some(g) => g,
        None => HomographyGrid::from_homography(params.rows, params.cols, width, height, &global)
            .ok_or(CoarseError::DegenerateFit {
            inliers: fit.inlier_count(),
            needed,
        })?,
    };
    Ok(PairMotion {
        grid,
        global,
        fallback: false,
    })
}

/// Tracks `neighbor` toward `reference` and fits the grid motion.
pub fn estimate_pair_motion(
    reference: &Frame,
    neighbor: &Frame,
    params: &CoarseParams,
    seed: u64,
) -> Result<PairMotion, CoarseError> {
    let kps = detect_and_track(reference, neighbor, &params.track)?;
    propagate_to_grid(&kps, reference.width(), reference.height(), params, seed)
}

/// Same as [`estimate_pair_motion`] with the identity fallback applied.
pub fn pair_motion_or_identity(
    reference: &Frame,
    neighbor: &Frame,
    params: &CoarseParams,
    seed: u64,
) -> PairMotion {
    estimate_pair_motion(reference, neighbor, params, seed)
        .unwrap_or_else(|_| PairMotion::identity(params, reference.width(), reference.height()))
}

/// Least-squares homography of a grid's vertex correspondences.
pub fn grid_global_fit(grid: &HomographyGrid) -> Option<Homography> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..=grid.rows {
        for j in 0..=grid.cols {
            let v = grid.vertex(i, j);
            let m = grid.vertex_motion[i * (grid.cols + 1) + j];
            src.push(v);
            dst.push([v[0] + m[0], v[1] + m[1]]);
        }
    }
    fit_least_squares(&src, &dst)
}

/// Backward-warps a canvas (whose inner rectangle is the neighbor frame) onto
/// a reference canvas with `pad` pixels per side.
pub fn warp_canvas(source: &Canvas, grid: &HomographyGrid, pad: usize) -> Canvas {
    warp_canvas_along(source, grid, pad, None)
}

/// Like [`warp_canvas`], but each output pixel `p` reads the grid warp at
/// `p + offset(p)`. Equivalent to warping and then resampling along
/// `offset`, with a single interpolation. Pixels where `offset` is invalid
/// stay invalid.
pub fn warp_canvas_along(
    source: &Canvas,
    grid: &HomographyGrid,
    pad: usize,
    offset: Option<&FlowField>,
) -> Canvas {
    let (fw, fh) = grid.frame_size();
    let (w, h) = (fw + 2 * pad, fh + 2 * pad);
    let (ox, oy) = (source.inner.x as f64, source.inner.y as f64);
    let rows: Vec<(Vec<[f32; 3]>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = vec![[0.0f32; 3]; w];
            let mut valid = vec![false; w];
            for x in 0..w {
                let mut q = [x as f64 - pad as f64, y as f64 - pad as f64];
                if let Some(f) = offset {
                    if !f.is_valid(x, y) {
                        continue;
                    }
                    let d = f.get(x, y);
                    q = [q[0] + d[0], q[1] + d[1]];
                }
                let s = grid.inverse(q);
                if let Some(c) = source.sample(s[0] + ox, s[1] + oy) {
                    colors[x] = c;
                    valid[x] = true;
                }
            }
            (colors, valid)
        })
        .collect();
    let mut colors = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for (c, v) in rows {
        colors.extend(c);
        valid.extend(v);
    }
    Canvas::from_parts(
        Frame::from_pixels(w, h, colors).expect("samples stay in [0, 1]"),
        Mask::from_vec(w, h, valid).expect("dims match"),
        pad,
        Rect::new(pad, pad, fw, fh),
    )
    .expect("dims match")
}

/// Warps an unpadded neighbor frame onto the padded reference canvas.
pub fn warp_to_canvas(neighbor: &Frame, grid: &HomographyGrid, pad: usize) -> Canvas {
    warp_canvas(&pad_frame(neighbor, 0), grid, pad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Frame `i` aligned to frame `i + 1`.
    Forward,
    /// Frame `i` aligned to frame `i - 1`.
    Backward,
}

/// Aligns every frame to its successor (forward) or predecessor (backward).
/// Frames without such a partner are returned padded.
pub fn coarse_align_pass(
    frames: &[Frame],
    direction: Direction,
    pad: usize,
    params: &CoarseParams,
    seed: u64,
) -> Vec<Canvas> {
    let n = frames.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let target = match direction {
                Direction::Forward => (i + 1 < n).then_some(i + 1),
                Direction::Backward => i.checked_sub(1),
            };
            match target {
                None => pad_frame(&frames[i], pad),
                Some(t) => {
                    let m = pair_motion_or_identity(
                        &frames[t],
                        &frames[i],
                        params,
                        seed ^ ((i as u64) << 20 | t as u64),
                    );
                    warp_to_canvas(&frames[i], &m.grid, pad)
                }
            }
        })
        .collect()
}
