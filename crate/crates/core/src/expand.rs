//! Resampling along flow fields, compositing, and iterative canvas expansion
//! over a sequence.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::affinity::{fine_align, FineParams};
use crate::coarse::{
    pair_motion_or_identity, warp_canvas, warp_canvas_along, CoarseParams, HomographyGrid,
    PairMotion,
};
use crate::dense_flow::FlowEstimator;
use crate::raster::{pad_frame, Canvas, EdgeMap, FlowField, Frame, GrayImage, Mask, RasterError};

#[derive(Debug, Error, PartialEq)]
pub enum ExpandError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("unknown expansion mode `{0}` (expected baseline, coarse, fine or full)")]
    UnknownMode(String),
    #[error("frames differ in size")]
    RaggedSequence,
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), ExpandError> {
    if a != b {
        return Err(ExpandError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// `out(q) = source(q + flow(q))`, mask-aware. Pixels where the flow is
/// invalid or the sample misses the valid source are invalid.
pub fn extrapolate_canvas(source: &Canvas, flow: &FlowField) -> Canvas {
    let (w, h) = (source.width(), source.height());
    let mut colors = vec![[0.0f32; 3]; w * h];
    let mut valid = vec![false; w * h];
    colors
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (crow, vrow))| {
            for x in 0..w {
                if !flow.is_valid(x, y) {
                    continue;
                }
                let d = flow.get(x, y);
                if let Some(c) = source.sample(x as f64 + d[0], y as f64 + d[1]) {
                    crow[x] = c;
                    vrow[x] = true;
                }
            }
        });
    Canvas::from_parts(
        Frame::from_pixels(w, h, colors).expect("samples stay in [0, 1]"),
        Mask::from_vec(w, h, valid).expect("dims match"),
        source.pad,
        source.inner,
    )
    .expect("dims match")
}

/// Edge magnitudes resampled along the flow; misses read 0.
pub fn extrapolate_edges(edges: &EdgeMap, flow: &FlowField) -> EdgeMap {
    let (w, h) = (edges.width(), edges.height());
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !flow.is_valid(x, y) {
                return 0.0;
            }
            let d = flow.get(x, y);
            edges
                .0
                .sample(x as f64 + d[0], y as f64 + d[1])
                .unwrap_or(0.0)
        })
        .collect();
    EdgeMap(GrayImage::from_vec(w, h, data).expect("dims match"))
}

/// Mask resampled along the flow and re-binarized at 0.5.
pub fn extrapolate_mask(mask: &Mask, flow: &FlowField) -> Mask {
    Mask::from_fn(mask.width(), mask.height(), |x, y| {
        if !flow.is_valid(x, y) {
            return false;
        }
        let d = flow.get(x, y);
        mask.sample(x as f64 + d[0], y as f64 + d[1])
    })
    .expect("positive dims")
}

/// Keeps every valid reference pixel and fills the rest from the contribution.
pub fn composite(reference: &Canvas, contribution: &Canvas) -> Result<Canvas, ExpandError> {
    same_dims(
        (reference.width(), reference.height()),
        (contribution.width(), contribution.height()),
    )?;
    let mut out = reference.clone();
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            if !reference.mask.get(x, y) && contribution.mask.get(x, y) {
                out.frame.set(x, y, contribution.frame.get(x, y));
                out.mask.set(x, y, true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpandMode {
    /// Single global homography per pair.
    Baseline,
    CoarseOnly,
    /// Flow refinement of the unwarped neighbor canvas.
    FineOnly,
    Full,
}

impl ExpandMode {
    pub const ALL: [ExpandMode; 4] = [
        ExpandMode::Baseline,
        ExpandMode::CoarseOnly,
        ExpandMode::FineOnly,
        ExpandMode::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExpandMode::Baseline => "baseline",
            ExpandMode::CoarseOnly => "coarse",
            ExpandMode::FineOnly => "fine",
            ExpandMode::Full => "full",
        }
    }
}

impl fmt::Display for ExpandMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpandMode {
    type Err = ExpandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ExpandMode::Baseline),
            "coarse" | "coarse_only" => Ok(ExpandMode::CoarseOnly),
            "fine" | "fine_only" => Ok(ExpandMode::FineOnly),
            "full" => Ok(ExpandMode::Full),
            other => Err(ExpandError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandParams {
    pub iterations: usize,
    pub mode: ExpandMode,
    pub pad: usize,
    pub coarse: CoarseParams,
    pub fine: FineParams,
    pub seed: u64,
}

impl ExpandParams {
    pub fn new(pad: usize) -> Self {
        Self {
            iterations: 10,
            mode: ExpandMode::Full,
            pad,
            coarse: CoarseParams::default(),
            fine: FineParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpandStats {
    pub aligned_pairs: usize,
    pub skipped_pairs: usize,
    /// Pairs whose motion fit or shared view failed and used a fallback.
    pub fallbacks: usize,
}

impl std::ops::AddAssign for ExpandStats {
    fn add_assign(&mut self, o: Self) {
        self.aligned_pairs += o.aligned_pairs;
        self.skipped_pairs += o.skipped_pairs;
        self.fallbacks += o.fallbacks;
    }
}

/// Motions of frame `i - 1` and frame `i + 1` onto frame `i`.
pub struct NeighborMotions {
    pub prev: Vec<Option<PairMotion>>,
    pub next: Vec<Option<PairMotion>>,
}

impl NeighborMotions {
    pub fn estimate(frames: &[Frame], params: &CoarseParams, seed: u64) -> Self {
        let n = frames.len();
        let pair = |r: usize, nb: usize| {
            pair_motion_or_identity(&frames[r], &frames[nb], params, pair_seed(seed, r, nb))
        };
        let prev = (0..n)
            .into_par_iter()
            .map(|i| (i > 0).then(|| pair(i, i - 1)))
            .collect();
        let next = (0..n)
            .into_par_iter()
            .map(|i| (i + 1 < n).then(|| pair(i, i + 1)))
            .collect();
        Self { prev, next }
    }
}

pub(crate) fn pair_seed(seed: u64, reference: usize, neighbor: usize) -> u64 {
    seed ^ ((reference as u64) << 32 | neighbor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Aligns one neighbor canvas to the reference canvas in the given mode.
/// `None` when the pair contributes nothing new or alignment failed.
#[allow(clippy::too_many_arguments)]
fn align_neighbor(
    reference: &Canvas,
    neighbor: &Canvas,
    motion: &PairMotion,
    mode: ExpandMode,
    params: &ExpandParams,
    estimator: &dyn FlowEstimator,
    pair: (usize, usize),
    stats: &mut ExpandStats,
) -> Option<Canvas> {
    let (fw, fh) = (reference.inner.width, reference.inner.height);
    let coarse = match mode {
        ExpandMode::Baseline => {
            let g = HomographyGrid::from_homography(
                params.coarse.rows,
                params.coarse.cols,
                fw,
                fh,
                &motion.global,
            )
            .unwrap_or_else(|| {
                HomographyGrid::identity(params.coarse.rows, params.coarse.cols, fw, fh)
            });
            warp_canvas(neighbor, &g, params.pad)
        }
        ExpandMode::CoarseOnly | ExpandMode::Full => {
            warp_canvas(neighbor, &motion.grid, params.pad)
        }
        ExpandMode::FineOnly => neighbor.clone(),
    };
    if motion.fallback && mode != ExpandMode::FineOnly {
        stats.fallbacks += 1;
    }
    // an unwarped neighbor only moves once its flow is known
    if mode != ExpandMode::FineOnly && coarse.mask.is_subset_of(&reference.mask) {
        stats.skipped_pairs += 1;
        return None;
    }
    let aligned = match mode {
        ExpandMode::Baseline | ExpandMode::CoarseOnly => Some(coarse),
        ExpandMode::FineOnly | ExpandMode::Full => {
            match fine_align(reference, &coarse, estimator, &params.fine, Some(pair)) {
                Ok(out) if out.fallback => {
                    stats.fallbacks += 1;
                    Some(out.canvas)
                }
                Ok(out) if mode == ExpandMode::Full => {
                    // grid warp and refinement in one interpolation
                    let offset = out.flow.negated();
                    Some(warp_canvas_along(
                        neighbor,
                        &motion.grid,
                        params.pad,
                        Some(&offset),
                    ))
                }
                Ok(out) if out.canvas.mask.is_subset_of(&reference.mask) => {
                    stats.skipped_pairs += 1;
                    return None;
                }
                Ok(out) => Some(out.canvas),
                Err(_) => {
                    stats.fallbacks += 1;
                    None
                }
            }
        }
    };
    stats.aligned_pairs += 1;
    aligned
}

/// Iteratively grows every frame's canvas from its already-expanded temporal
/// neighbors.
///
/// Iteration `k` aligns the canvases of frames `i - 1` and `i + 1` from
/// iteration `k - 1` onto frame `i` and composites them behind it, previous
/// neighbor first; after `k` iterations content from up to `k` frames away can
/// arrive. A neighbor whose canvas did not change in the previous iteration is
/// skipped, as is any pair whose aligned mask adds no pixel.
///
/// `observer` sees the canvases after every iteration, starting with the
/// padded frames at iteration 0.
pub fn expand_sequence(
    frames: &[Frame],
    params: &ExpandParams,
    estimator: &dyn FlowEstimator,
    motions: Option<&NeighborMotions>,
    mut observer: Option<&mut dyn FnMut(usize, &[Canvas])>,
) -> Result<(Vec<Canvas>, ExpandStats), ExpandError> {
    let n = frames.len();
    if let Some(f0) = frames.first() {
        if frames
            .iter()
            .any(|f| f.width() != f0.width() || f.height() != f0.height())
        {
            return Err(ExpandError::RaggedSequence);
        }
    }
    let mut state: Vec<Canvas> = frames.iter().map(|f| pad_frame(f, params.pad)).collect();
    let mut stats = ExpandStats::default();
    if let Some(obs) = observer.as_mut() {
        obs(0, &state);
    }
    if params.iterations == 0 || n < 2 {
        if let Some(obs) = observer.as_mut() {
            for k in 1..=params.iterations {
                obs(k, &state);
            }
        }
        return Ok((state, stats));
    }
    let owned;
    let motions = match motions {
        Some(m) => m,
        None => {
            owned = NeighborMotions::estimate(frames, &params.coarse, params.seed);
            &owned
        }
    };
    let mut changed = vec![true; n];
    for k in 1..=params.iterations {
        let results: Vec<(Canvas, ExpandStats)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut local = ExpandStats::default();
                let mut canvas = state[i].clone();
                let neighbors = [
                    (i.checked_sub(1), motions.prev[i].as_ref()),
                    ((i + 1 < n).then_some(i + 1), motions.next[i].as_ref()),
                ];
                for (nb, motion) in neighbors {
                    let (Some(nb), Some(motion)) = (nb, motion) else {
                        continue;
                    };
                    if !changed[nb] {
                        local.skipped_pairs += 1;
                        continue;
                    }
                    if let Some(c) = align_neighbor(
                        &canvas,
                        &state[nb],
                        motion,
                        params.mode,
                        params,
                        estimator,
                        (i, nb),
                        &mut local,
                    ) {
                        canvas = composite(&canvas, &c).expect("same canvas size");
                    }
                }
                (canvas, local)
            })
            .collect();
        let mut next = Vec::with_capacity(n);
        for (i, (c, s)) in results.into_iter().enumerate() {
            changed[i] = c.mask != state[i].mask;
            stats += s;
            next.push(c);
        }
        state = next;
        if let Some(obs) = observer.as_mut() {
            obs(k, &state);
        }
    }
    Ok((state, stats))
}

/// Interior check used by tests and callers: the inner rectangle of an
/// expanded canvas still holds the original frame.
pub fn inner_preserved(canvas: &Canvas, frame: &Frame) -> Result<bool, RasterError> {
    let (f, m) = canvas.crop_inner();
    Ok(&f == frame && m.count() == m.width() * m.height())
}
