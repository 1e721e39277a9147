//! Affinity kernels and anchored flow propagation into the out-of-boundary
//! region.
//!
//! Kernels are bilateral weights on a guide image (color plus edge
//! magnitude). Off-center weights of each pixel are rescaled so their sum
//! `lambda` never exceeds `lambda_cap < 1`, and the center gets `1 - lambda`.
//! One Jacobi sweep then reads
//!
//! ```text
//! B[t+1](p) = k_c(p) B0(p) + sum_k k_k(p) B[t](p - o_k)
//! ```
//!
//! which is a contraction with constant `lambda_cap` in the sup norm. Inside
//! the shared view each sweep is pulled back toward the anchor.

use rayon::prelude::*;
use thiserror::Error;

use crate::dense_flow::{estimate_masked_flow, FlowError, FlowEstimator};
use crate::distance::nearest_sites;
use crate::expand::extrapolate_canvas;
use crate::raster::{luma, sobel_edges, Canvas, EdgeMap, FlowField, Mask};
use crate::reverse::reverse_flow;

/// Largest luma difference between a reference pixel and its flow match for
/// the pair to count as a correspondence.
pub const PHOTO_TOLERANCE: f32 = 0.05;

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("shared view is empty")]
    EmptySharedView,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("kernel radius must be at least 1")]
    BadRadius,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityParams {
    pub radius: usize,
    pub sigma_color: f64,
    pub sigma_edge: f64,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            radius: 4,
            sigma_color: 0.1,
            sigma_edge: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    pub lambda_cap: f64,
    pub max_sweeps: usize,
    pub tolerance_px: f64,
    /// Weight of the anchor in the shared-view blend after each sweep.
    pub anchor_ratio: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            lambda_cap: 0.99,
            max_sweeps: 200,
            tolerance_px: 0.01,
            anchor_ratio: 0.9,
        }
    }
}

/// Per-pixel normalized kernels of `(2r+1)^2` weights. Offset `(a, b)` (x then
/// y) is stored at index `(a + r)(2r + 1) + (b + r)` and weighs the neighbor
/// at `(x - a, y - b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    width: usize,
    height: usize,
    radius: usize,
    weights: Vec<f64>,
}

impl AffinityField {
    pub fn kernel_len(radius: usize) -> usize {
        (2 * radius + 1) * (2 * radius + 1)
    }

    pub fn center_index(radius: usize) -> usize {
        radius * (2 * radius + 1) + radius
    }

    /// Offset `(a, b)` of kernel index `k`.
    pub fn offset(radius: usize, k: usize) -> (i64, i64) {
        let side = 2 * radius + 1;
        (
            (k / side) as i64 - radius as i64,
            (k % side) as i64 - radius as i64,
        )
    }

    /// Normalizes raw non-negative weights (`kernel_len` per pixel, row-major
    /// pixels). Center entries of `raw` are ignored.
    pub fn from_raw(
        width: usize,
        height: usize,
        radius: usize,
        mut raw: Vec<f64>,
        lambda_cap: f64,
    ) -> Result<Self, AffinityError> {
        if radius == 0 {
            return Err(AffinityError::BadRadius);
        }
        let kl = Self::kernel_len(radius);
        assert_eq!(raw.len(), width * height * kl, "raw kernel buffer size");
        let c = Self::center_index(radius);
        for kernel in raw.chunks_exact_mut(kl) {
            kernel[c] = 0.0;
            let s: f64 = kernel.iter().sum();
            let scale = if s > 0.0 { s.min(lambda_cap) / s } else { 0.0 };
            kernel.iter_mut().for_each(|v| *v *= scale);
            let lambda: f64 = kernel.iter().sum();
            kernel[c] = 1.0 - lambda;
        }
        Ok(Self {
            width,
            height,
            radius,
            weights: raw,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn kernel(&self, x: usize, y: usize) -> &[f64] {
        let kl = Self::kernel_len(self.radius);
        let i = y * self.width + x;
        &self.weights[i * kl..(i + 1) * kl]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check(a: (usize, usize), b: (usize, usize)) -> Result<(), AffinityError> {
    if a != b {
        return Err(AffinityError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Bilateral kernels on the guide image: aligned color and edges where the
/// aligned mask is set, the reference's elsewhere.
pub fn compute_affinity(
    reference: &Canvas,
    aligned: &Canvas,
    ref_edges: &EdgeMap,
    aligned_edges: &EdgeMap,
    params: &AffinityParams,
    lambda_cap: f64,
) -> Result<AffinityField, AffinityError> {
    compute_affinity_within(
        reference,
        aligned,
        ref_edges,
        aligned_edges,
        params,
        lambda_cap,
        None,
    )
}

/// [`compute_affinity`] restricted to `active` pixels. Every other pixel gets
/// the identity kernel, so propagation leaves it at its anchor value.
pub fn compute_affinity_within(
    reference: &Canvas,
    aligned: &Canvas,
    ref_edges: &EdgeMap,
    aligned_edges: &EdgeMap,
    params: &AffinityParams,
    lambda_cap: f64,
    active: Option<&Mask>,
) -> Result<AffinityField, AffinityError> {
    let dims = (reference.width(), reference.height());
    if let Some(a) = active {
        check(dims, (a.width(), a.height()))?;
    }
    check(dims, (aligned.width(), aligned.height()))?;
    check(dims, (ref_edges.width(), ref_edges.height()))?;
    check(dims, (aligned_edges.width(), aligned_edges.height()))?;
    if params.radius == 0 {
        return Err(AffinityError::BadRadius);
    }
    let (w, h) = dims;
    let guide: Vec<[f32; 4]> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let (c, e) = if aligned.mask.get(x, y) {
                (aligned.frame.get(x, y), aligned_edges.get(x, y))
            } else {
                (reference.frame.get(x, y), ref_edges.get(x, y))
            };
            [c[0], c[1], c[2], e]
        })
        .collect();
    let kl = AffinityField::kernel_len(params.radius);
    let cc = 1.0 / (2.0 * params.sigma_color * params.sigma_color);
    let ce = 1.0 / (2.0 * params.sigma_edge * params.sigma_edge);
    let mut raw = vec![0.0f64; w * h * kl];
    raw.par_chunks_mut(w * kl).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            if active.is_some_and(|a| !a.get(x, y)) {
                continue;
            }
            let g = guide[y * w + x];
            let kernel = &mut row[x * kl..(x + 1) * kl];
            for (k, out) in kernel.iter_mut().enumerate() {
                let (a, b) = AffinityField::offset(params.radius, k);
                if a == 0 && b == 0 {
                    continue;
                }
                let nx = (x as i64 - a).clamp(0, w as i64 - 1) as usize;
                let ny = (y as i64 - b).clamp(0, h as i64 - 1) as usize;
                let n = guide[ny * w + nx];
                let dc = (0..3)
                    .map(|c| {
                        let d = (g[c] - n[c]) as f64;
                        d * d
                    })
                    .sum::<f64>();
                let de = (g[3] - n[3]) as f64;
                *out = (-dc * cc - de * de * ce).exp();
            }
        }
    });
    AffinityField::from_raw(w, h, params.radius, raw, lambda_cap)
}

/// Anchor field: the reversed flow inside the shared view, the value of the
/// nearest shared pixel elsewhere inside `domain`.
pub fn init_refined_flow(
    reversed: &FlowField,
    shared: &Mask,
    domain: &Mask,
) -> Result<FlowField, AffinityError> {
    let (w, h) = (reversed.width(), reversed.height());
    check((w, h), (shared.width(), shared.height()))?;
    check((w, h), (domain.width(), domain.height()))?;
    if shared.count() == 0 {
        return Err(AffinityError::EmptySharedView);
    }
    let nearest = nearest_sites(shared);
    let data: Vec<[f64; 2]> = nearest
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if !domain.data()[i] {
                return [0.0, 0.0];
            }
            reversed.data()[n.expect("shared view is nonempty")]
        })
        .collect();
    Ok(FlowField::from_parts(w, h, data, domain.clone()).expect("dims checked"))
}

/// One Jacobi sweep of the anchored update (no shared-view blend).
pub fn sweep(b0: &[[f64; 2]], bt: &[[f64; 2]], aff: &AffinityField, out: &mut [[f64; 2]]) {
    let (w, h, r) = (aff.width, aff.height, aff.radius);
    let kl = AffinityField::kernel_len(r);
    let c = AffinityField::center_index(r);
    let offsets: Vec<(i64, i64, isize)> = (0..kl)
        .map(|k| {
            let (a, b) = AffinityField::offset(r, k);
            (a, b, -(a as isize) - b as isize * w as isize)
        })
        .collect();
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let kernel = &aff.weights[i * kl..(i + 1) * kl];
            if kernel[c] == 1.0 {
                *o = b0[i];
                continue;
            }
            let interior = x >= r && y >= r && x + r < w && y + r < h;
            let mut acc = [0.0f64; 2];
            if interior {
                // the centre tap reads bt[i] here and is corrected below
                let base = i as isize;
                for (&wk, &(_, _, off)) in kernel.iter().zip(&offsets) {
                    let v = bt[(base + off) as usize];
                    acc[0] += wk * v[0];
                    acc[1] += wk * v[1];
                }
                acc[0] += kernel[c] * (b0[i][0] - bt[i][0]);
                acc[1] += kernel[c] * (b0[i][1] - bt[i][1]);
            } else {
                acc = [kernel[c] * b0[i][0], kernel[c] * b0[i][1]];
                for (k, &(a, b, _)) in offsets.iter().enumerate() {
                    if k == c {
                        continue;
                    }
                    let nx = (x as i64 - a).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 - b).clamp(0, h as i64 - 1) as usize;
                    let v = bt[ny * w + nx];
                    acc[0] += kernel[k] * v[0];
                    acc[1] += kernel[k] * v[1];
                }
            }
            *o = acc;
        }
    });
}

/// Anchor, current iterate and shared view of one propagation.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub b0: Vec<[f64; 2]>,
    pub bt: Vec<[f64; 2]>,
    pub shared: Mask,
    pub t: usize,
    scratch: Vec<[f64; 2]>,
}

impl PropagationState {
    pub fn new(b0: &FlowField, shared: &Mask) -> Self {
        Self {
            b0: b0.data().to_vec(),
            bt: b0.data().to_vec(),
            shared: shared.clone(),
            t: 0,
            scratch: vec![[0.0; 2]; b0.data().len()],
        }
    }

    /// Sweep, then blend toward the anchor on the shared view. Returns the
    /// largest per-pixel displacement change.
    pub fn step(&mut self, aff: &AffinityField, params: &PropagationParams) -> f64 {
        sweep(&self.b0, &self.bt, aff, &mut self.scratch);
        let keep = 1.0 - params.anchor_ratio;
        let mut change = 0.0f64;
        for (i, v) in self.scratch.iter_mut().enumerate() {
            if self.shared.data()[i] {
                v[0] = keep * v[0] + params.anchor_ratio * self.b0[i][0];
                v[1] = keep * v[1] + params.anchor_ratio * self.b0[i][1];
            }
            let d = (v[0] - self.bt[i][0]).hypot(v[1] - self.bt[i][1]);
            change = change.max(d);
        }
        std::mem::swap(&mut self.bt, &mut self.scratch);
        self.t += 1;
        change
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub flow: FlowField,
    pub sweeps: usize,
    pub converged: bool,
}

/// Runs sweeps until the largest change drops below the tolerance or the
/// sweep cap is reached. The result keeps the anchor's validity.
pub fn propagate(
    b0: &FlowField,
    shared: &Mask,
    aff: &AffinityField,
    params: &PropagationParams,
) -> Result<Propagation, AffinityError> {
    check((b0.width(), b0.height()), (aff.width, aff.height))?;
    check((b0.width(), b0.height()), (shared.width(), shared.height()))?;
    let mut state = PropagationState::new(b0, shared);
    let mut converged = false;
    while state.t < params.max_sweeps {
        if state.step(aff, params) < params.tolerance_px {
            converged = true;
            break;
        }
    }
    let flow = FlowField::from_parts(b0.width(), b0.height(), state.bt, b0.valid().clone())
        .expect("dims checked");
    Ok(Propagation {
        flow,
        sweeps: state.t,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FineParams {
    pub affinity: AffinityParams,
    pub propagation: PropagationParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineOutcome {
    pub canvas: Canvas,
    /// Propagated flow from aligned-canvas pixels to their reference match.
    pub flow: FlowField,
    pub shared: Mask,
    pub sweeps: usize,
    /// The shared view was empty and the coarse canvas was passed through.
    pub fallback: bool,
}

/// Pixels within `margin` of an aligned pixel the reference still lacks.
/// Flow elsewhere is never read when compositing, so it stays at its anchor.
pub fn working_region(reference: &Canvas, aligned: &Canvas, margin: usize) -> Mask {
    let (w, h) = (reference.width(), reference.height());
    let fill = Mask::from_fn(w, h, |x, y| {
        aligned.mask.get(x, y) && !reference.mask.get(x, y)
    })
    .expect("positive dims");
    let nearest = nearest_sites(&fill);
    let m2 = (margin * margin) as i64;
    Mask::from_fn(w, h, |x, y| {
        nearest[y * w + x].is_some_and(|j| {
            let (dx, dy) = ((j % w) as i64 - x as i64, (j / w) as i64 - y as i64);
            dx * dx + dy * dy <= m2
        })
    })
    .expect("positive dims")
}

/// Flow refinement of a coarsely aligned canvas against the reference:
/// masked flow, reversal, affinity, anchor initialization, propagation, then
/// resampling of the aligned canvas along the propagated flow.
pub fn fine_align(
    reference: &Canvas,
    coarse: &Canvas,
    estimator: &dyn FlowEstimator,
    params: &FineParams,
    pair: Option<(usize, usize)>,
) -> Result<FineOutcome, AffinityError> {
    check(
        (reference.width(), reference.height()),
        (coarse.width(), coarse.height()),
    )?;
    let flow = estimate_masked_flow(estimator, reference, coarse, pair)?;
    // a correspondence splats only when the aligned canvas has content both
    // at the reference pixel and at its match
    let sources = Mask::from_fn(flow.width(), flow.height(), |x, y| {
        let d = flow.get(x, y);
        if !(flow.is_valid(x, y) && coarse.mask.get(x, y)) {
            return false;
        }
        coarse
            .sample(x as f64 + d[0], y as f64 + d[1])
            .is_some_and(|c| (luma(c) - luma(reference.frame.get(x, y))).abs() <= PHOTO_TOLERANCE)
    })
    .expect("positive dims");
    let (reversed, shared) = reverse_flow(&flow, &sources);
    let shared = Mask::from_fn(shared.width(), shared.height(), |x, y| {
        shared.get(x, y) && coarse.mask.get(x, y)
    })
    .expect("positive dims");
    let domain = Mask::new(reference.width(), reference.height(), true).expect("positive dims");
    let b0 = match init_refined_flow(&reversed, &shared, &domain) {
        Ok(b0) => b0,
        Err(AffinityError::EmptySharedView) => {
            return Ok(FineOutcome {
                canvas: coarse.clone(),
                flow: FlowField::zeros(reference.width(), reference.height())
                    .expect("positive dims"),
                shared,
                sweeps: 0,
                fallback: true,
            })
        }
        Err(e) => return Err(e),
    };
    let active = working_region(reference, coarse, 4 * params.affinity.radius);
    let aff = compute_affinity_within(
        reference,
        coarse,
        &sobel_edges(&reference.frame),
        &sobel_edges(&coarse.frame),
        &params.affinity,
        params.propagation.lambda_cap,
        Some(&active),
    )?;
    let prop = propagate(&b0, &shared, &aff, &params.propagation)?;
    // aligned(q) matches reference(q + B(q)), so reference pixel p reads the
    // aligned canvas at p - B(p)
    let canvas = extrapolate_canvas(coarse, &prop.flow.negated());
    Ok(FineOutcome {
        canvas,
        flow: prop.flow,
        shared,
        sweeps: prop.sweeps,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense_flow::{BaselineFlow, FlowRequest};
    use crate::metrics::psnr;
    use crate::raster::{pad_frame, Frame, Rect};
    use crate::synth::procedural_panorama;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affinity(w: usize, h: usize, r: usize, rng: &mut ChaCha8Rng) -> AffinityField {
        let kl = AffinityField::kernel_len(r);
        let raw: Vec<f64> = (0..w * h * kl)
            .map(|_| {
                if rng.gen_bool(0.8) {
                    rng.gen::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        AffinityField::from_raw(w, h, r, raw, 0.99).unwrap()
    }

    fn random_flow(w: usize, h: usize, rng: &mut ChaCha8Rng) -> FlowField {
        FlowField::from_fn(w, h, |_, _| {
            [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]
        })
        .unwrap()
    }

    /// Dense `A` and `I - D` built entry by entry from the kernel definition.
    fn matrix_form(aff: &AffinityField) -> (DMatrix<f64>, DVector<f64>) {
        let (w, h, r) = (aff.width(), aff.height(), aff.radius());
        let n = w * h;
        let mut a = DMatrix::zeros(n, n);
        let mut center = DVector::zeros(n);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for (k, &v) in aff.kernel(x, y).iter().enumerate() {
                    let (da, db) = AffinityField::offset(r, k);
                    if da == 0 && db == 0 {
                        center[p] = v;
                        continue;
                    }
                    let nx = (x as i64 - da).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 - db).clamp(0, h as i64 - 1) as usize;
                    a[(p, ny * w + nx)] += v;
                }
            }
        }
        (a, center)
    }

    #[test]
    fn kernel_index_layout() {
        assert_eq!(AffinityField::kernel_len(4), 81);
        assert_eq!(AffinityField::center_index(4), 40);
        assert_eq!(AffinityField::offset(1, 0), (-1, -1));
        assert_eq!(AffinityField::offset(1, 1), (-1, 0));
        assert_eq!(AffinityField::offset(1, 3), (0, -1));
        assert_eq!(AffinityField::offset(2, 12), (0, 0));
    }

    #[test]
    fn sweep_matches_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let r = rng.gen_range(1..=3);
            let aff = random_affinity(w, h, r, &mut rng);
            let b0 = random_flow(w, h, &mut rng);
            let (a, center) = matrix_form(&aff);
            let mut bt = b0.data().to_vec();
            let mut out = vec![[0.0; 2]; w * h];
            for _ in 0..5 {
                sweep(b0.data(), &bt, &aff, &mut out);
                for c in 0..2 {
                    let vt = DVector::from_iterator(w * h, bt.iter().map(|v| v[c]));
                    let v0 = DVector::from_iterator(w * h, b0.data().iter().map(|v| v[c]));
                    let expect = &a * vt + center.component_mul(&v0);
                    for p in 0..w * h {
                        assert!((out[p][c] - expect[p]).abs() < 1e-9);
                    }
                }
                std::mem::swap(&mut bt, &mut out);
            }
        }
    }

    #[test]
    fn constant_anchor_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let aff = random_affinity(9, 7, 2, &mut rng);
        let b0 = FlowField::constant(9, 7, [1.25, -3.0]).unwrap();
        let shared = Mask::from_fn(9, 7, |x, _| x < 3).unwrap();
        let p = propagate(&b0, &shared, &aff, &PropagationParams::default()).unwrap();
        for d in p.flow.data() {
            assert!((d[0] - 1.25).abs() < 1e-12 && (d[1] + 3.0).abs() < 1e-12);
        }
        assert_eq!(p.sweeps, 1);
        assert!(p.converged);
    }

    #[test]
    fn uniform_guide_gives_equal_weights() {
        let f = Frame::from_fn(12, 10, |_, _| [0.3, 0.6, 0.1]).unwrap();
        let c = pad_frame(&f, 0);
        let e = sobel_edges(&f);
        let aff = compute_affinity(&c, &c, &e, &e, &AffinityParams::default(), 0.99).unwrap();
        let expect = 0.99 / 80.0;
        for y in 0..10 {
            for x in 0..12 {
                let k = aff.kernel(x, y);
                for (i, v) in k.iter().enumerate() {
                    if i == 40 {
                        assert!((v - 0.01).abs() < 1e-12);
                    } else {
                        assert!((v - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn step_edge_separates_sides() {
        let f = Frame::from_fn(16, 12, |x, _| if x < 8 { [0.0; 3] } else { [1.0; 3] }).unwrap();
        let c = pad_frame(&f, 0);
        let e = sobel_edges(&f);
        let aff = compute_affinity(&c, &c, &e, &e, &AffinityParams::default(), 0.99).unwrap();
        let (x, y) = (7usize, 6usize);
        let (mut same, mut cross) = (0.0f64, 0.0f64);
        for (k, &v) in aff.kernel(x, y).iter().enumerate() {
            let (a, _) = AffinityField::offset(4, k);
            if a == 0 && k == 40 {
                continue;
            }
            let nx = x as i64 - a;
            if nx < 8 {
                same = same.max(v);
            } else {
                cross = cross.max(v);
            }
        }
        assert!(same > 10.0 * cross, "{same} vs {cross}");
    }

    #[test]
    fn refined_flow_initialization() {
        let rev = FlowField::from_fn(6, 5, |x, y| [x as f64, y as f64]).unwrap();
        let all = Mask::new(6, 5, true).unwrap();
        let b0 = init_refined_flow(&rev, &all, &all).unwrap();
        assert_eq!(b0.data(), rev.data());

        let one = Mask::from_fn(6, 5, |x, y| (x, y) == (2, 3)).unwrap();
        let single = FlowField::from_parts(6, 5, vec![[2.0, 1.0]; 30], one.clone()).unwrap();
        let b0 = init_refined_flow(&single, &one, &all).unwrap();
        assert!(b0.data().iter().all(|d| *d == [2.0, 1.0]));

        let corners = Mask::from_fn(7, 5, |x, y| (x, y) == (0, 0) || (x, y) == (6, 4)).unwrap();
        let f = FlowField::from_fn(7, 5, |x, _| if x == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .unwrap()
            .masked(&corners)
            .unwrap();
        let all7 = Mask::new(7, 5, true).unwrap();
        let b0 = init_refined_flow(&f, &corners, &all7).unwrap();
        for y in 0..5i64 {
            for x in 0..7i64 {
                let d0 = x * x + y * y;
                let d1 = (x - 6).pow(2) + (y - 4).pow(2);
                let expect = if d0 <= d1 { [1.0, 0.0] } else { [0.0, 1.0] };
                assert_eq!(b0.get(x as usize, y as usize), expect);
            }
        }
        let none = Mask::new(6, 5, false).unwrap();
        assert!(matches!(
            init_refined_flow(&rev, &none, &all),
            Err(AffinityError::EmptySharedView)
        ));
    }

    #[test]
    fn contraction_and_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PropagationParams::default();
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
            let aff = random_affinity(w, h, rng.gen_range(1..=4), &mut rng);
            let b0 = random_flow(w, h, &mut rng);
            let shared = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.3)).unwrap();
            let mut st = PropagationState::new(&b0, &shared);
            let mut prev = st.bt.clone();
            let mut last_delta: Option<f64> = None;
            let mut done = false;
            while st.t < params.max_sweeps {
                let change = st.step(&aff, &params);
                let delta = st
                    .bt
                    .iter()
                    .zip(&prev)
                    .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                    .fold(0.0, f64::max);
                if let Some(d) = last_delta {
                    assert!(delta <= 0.99 * d + 1e-12, "{delta} > 0.99 * {d}");
                }
                last_delta = Some(delta);
                prev = st.bt.clone();
                if change < params.tolerance_px {
                    done = true;
                    break;
                }
            }
            assert!(done);
        }
    }

    #[test]
    fn zero_residual_pair_is_fixed_point() {
        let pano = procedural_panorama(160, 130, 3);
        let r = pad_frame(&pano.crop(Rect::new(20, 20, 96, 72)).unwrap(), 12);
        let out = fine_align(
            &r,
            &r,
            &BaselineFlow::default(),
            &FineParams::default(),
            None,
        )
        .unwrap();
        assert!(!out.fallback);
        assert!(psnr(&out.canvas.frame, &r.frame, &out.shared).unwrap() >= 40.0);
    }

    #[test]
    fn residual_shift_propagates_into_band() {
        let pano = procedural_panorama(260, 220, 4);
        let (w, h, pad) = (120usize, 96usize, 40usize);
        let (ox, oy) = (60usize, 50usize);
        let reference = pad_frame(&pano.crop(Rect::new(ox, oy, w, h)).unwrap(), pad);
        // aligned(q) shows the true view at q - (2, 0)
        let window = pano
            .crop(Rect::new(ox - pad - 2, oy - pad, w + 2 * pad, h + 2 * pad))
            .unwrap();
        let aligned = Canvas::from_parts(
            window,
            Mask::new(w + 2 * pad, h + 2 * pad, true).unwrap(),
            pad,
            Rect::new(pad, pad, w, h),
        )
        .unwrap();
        let out = fine_align(
            &reference,
            &aligned,
            &BaselineFlow::default(),
            &FineParams::default(),
            None,
        )
        .unwrap();
        let (mut good, mut total) = (0, 0);
        for y in 0..h + 2 * pad {
            for x in 0..w + 2 * pad {
                if reference.inner.contains(x, y) {
                    continue;
                }
                total += 1;
                let d = out.flow.get(x, y);
                if (d[0] + 2.0).hypot(d[1]) < 1.0 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
    }

    #[test]
    fn empty_shared_view_passes_coarse_through() {
        struct FarAway;
        impl FlowEstimator for FarAway {
            fn name(&self) -> &str {
                "far"
            }
            fn estimate(&self, req: &FlowRequest<'_>) -> Result<FlowField, FlowError> {
                Ok(
                    FlowField::constant(req.reference.width(), req.reference.height(), [1e6, 0.0])
                        .unwrap(),
                )
            }
        }
        let f = procedural_panorama(40, 30, 1);
        let r = pad_frame(&f, 5);
        let out = fine_align(&r, &r, &FarAway, &FineParams::default(), None).unwrap();
        assert!(out.fallback);
        assert_eq!(out.canvas, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernels_are_normalized(seed in 0u64..10_000, r in 1usize..5) {
            let f = procedural_panorama(14, 11, seed);
            let g = procedural_panorama(14, 11, seed + 1);
            let m = Mask::from_fn(14, 11, |x, y| (x * 7 + y * 3 + seed as usize) % 5 != 0).unwrap();
            let reference = pad_frame(&f, 0);
            let aligned = Canvas::from_parts(g.clone(), m, 0, Rect::new(0, 0, 14, 11)).unwrap();
            let params = AffinityParams { radius: r, ..AffinityParams::default() };
            let aff = compute_affinity(
                &reference, &aligned, &sobel_edges(&f), &sobel_edges(&aligned.frame), &params, 0.99,
            ).unwrap();
            let c = AffinityField::center_index(r);
            for y in 0..11 {
                for x in 0..14 {
                    let k = aff.kernel(x, y);
                    let total: f64 = k.iter().sum();
                    let off: f64 = k.iter().enumerate().filter(|(i, _)| *i != c).map(|(_, v)| v).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    prop_assert!(off <= 0.99 + 1e-12);
                    prop_assert!(k.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }
}
