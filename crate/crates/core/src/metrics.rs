//! Stabilization metrics (cropping ratio, distortion, stability), image
//! similarity (PSNR, SSIM) and the extrapolation loss measures.

use nalgebra::Matrix2;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{fit_similarity, normalize, ransac, Homography, Point, RansacParams};
use crate::raster::{EdgeMap, Frame, GrayImage, Mask};
use crate::track::{detect_and_track, TrackParams};

pub const PSNR_CAP: f64 = 99.0;
pub const MIN_STABILITY_FRAMES: usize = 32;
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("evaluation region is empty")]
    EmptyRegion,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frame count mismatch: {0} inputs vs {1} outputs")]
    FrameCountMismatch(usize, usize),
    #[error("homography fit failed on {skipped} of {total} frames")]
    FitFailure { skipped: usize, total: usize },
    #[error("stability needs at least {needed} frames, got {frames}")]
    TooShort { frames: usize, needed: usize },
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Robust homography taking `from` pixel coordinates to `to` coordinates.
pub fn fit_frame_homography(from: &Frame, to: &Frame, seed: u64) -> Option<Homography> {
    let kps = detect_and_track(to, from, &TrackParams::default()).ok()?;
    let src: Vec<Point> = kps.iter().map(|k| k.position).collect();
    let dst: Vec<Point> = kps.iter().map(|k| k.target()).collect();
    let fit = ransac(&src, &dst, &RansacParams::default(), seed)?;
    normalize(fit.homography)
}

fn affine_part(h: &Homography) -> Matrix2<f64> {
    Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)])
}

/// Cropping term of one fitted map: the inverse of its affine scale, in (0, 2].
pub fn cropping_from_homography(h: &Homography) -> f64 {
    let s = affine_part(h).determinant().abs().sqrt();
    if s <= 0.5 {
        2.0
    } else {
        (1.0 / s).min(2.0)
    }
}

/// Anisotropy of one fitted map: ratio of affine singular values.
pub fn distortion_from_homography(h: &Homography) -> f64 {
    let sv = affine_part(h).singular_values();
    let (hi, lo) = (sv[0].max(sv[1]), sv[0].min(sv[1]));
    if hi <= 0.0 {
        return 0.0;
    }
    lo / hi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpMetrics {
    pub cropping: f64,
    pub distortion: f64,
    /// `None` where the fit failed and the frame was skipped.
    pub per_frame_cropping: Vec<Option<f64>>,
    pub per_frame_distortion: Vec<Option<f64>>,
}

/// Cropping ratio (mean over frames) and distortion (minimum over frames) of
/// an input/output video pair.
pub fn warp_metrics(
    inputs: &[Frame],
    outputs: &[Frame],
    seed: u64,
) -> Result<WarpMetrics, MetricError> {
    if inputs.len() != outputs.len() {
        return Err(MetricError::FrameCountMismatch(inputs.len(), outputs.len()));
    }
    if inputs.is_empty() {
        return Err(MetricError::FitFailure {
            skipped: 0,
            total: 0,
        });
    }
    for (a, b) in inputs.iter().zip(outputs) {
        check_same((a.width(), a.height()), (b.width(), b.height()))?;
    }
    let fits: Vec<Option<Homography>> = inputs
        .par_iter()
        .zip(outputs.par_iter())
        .enumerate()
        .map(|(i, (a, b))| fit_frame_homography(a, b, seed.wrapping_add(i as u64)))
        .collect();
    let per_frame_cropping: Vec<Option<f64>> = fits
        .iter()
        .map(|h| h.as_ref().map(cropping_from_homography))
        .collect();
    let per_frame_distortion: Vec<Option<f64>> = fits
        .iter()
        .map(|h| h.as_ref().map(distortion_from_homography))
        .collect();
    let ok: Vec<usize> = (0..fits.len()).filter(|&i| fits[i].is_some()).collect();
    let skipped = fits.len() - ok.len();
    if ok.is_empty() || 2 * skipped > fits.len() {
        return Err(MetricError::FitFailure {
            skipped,
            total: fits.len(),
        });
    }
    let cropping = ok
        .iter()
        .map(|&i| per_frame_cropping[i].unwrap())
        .sum::<f64>()
        / ok.len() as f64;
    let distortion = ok
        .iter()
        .map(|&i| per_frame_distortion[i].unwrap())
        .fold(f64::INFINITY, f64::min);
    Ok(WarpMetrics {
        cropping,
        distortion,
        per_frame_cropping,
        per_frame_distortion,
    })
}

pub fn cropping_ratio(inputs: &[Frame], outputs: &[Frame], seed: u64) -> Result<f64, MetricError> {
    warp_metrics(inputs, outputs, seed).map(|m| m.cropping)
}

pub fn distortion(inputs: &[Frame], outputs: &[Frame], seed: u64) -> Result<f64, MetricError> {
    warp_metrics(inputs, outputs, seed).map(|m| m.distortion)
}

/// Share of spectral energy in bins 2..=6 among bins 2..=N/2, averaged over
/// the trajectory components. Components whose considered energy vanishes
/// (RMS below 1e-4 px or rad) count as perfectly stable.
pub fn stability_from_trajectory(components: &[Vec<f64>]) -> Result<f64, MetricError> {
    let n = components.first().map_or(0, Vec::len);
    if n < MIN_STABILITY_FRAMES {
        return Err(MetricError::TooShort {
            frames: n,
            needed: MIN_STABILITY_FRAMES,
        });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut sum = 0.0;
    for comp in components {
        let mut buf: Vec<Complex<f64>> = comp.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        let energy = |k: usize| buf[k].norm_sqr();
        let total: f64 = (2..=n / 2).map(energy).sum();
        let low: f64 = (2..=6.min(n / 2)).map(energy).sum();
        // Parseval: a real signal with this much one-sided energy has RMS
        // about sqrt(2 * total) / n.
        if (2.0 * total).sqrt() / (n as f64) < 1e-4 {
            sum += 1.0;
        } else {
            sum += low / total;
        }
    }
    Ok(sum / components.len() as f64)
}

/// Inter-frame similarity motion accumulated into `(tx, ty, angle)` tracks.
pub fn similarity_trajectory(frames: &[Frame], seed: u64) -> [Vec<f64>; 3] {
    let steps: Vec<[f64; 3]> = (1..frames.len())
        .into_par_iter()
        .map(|i| {
            let kps = match detect_and_track(&frames[i], &frames[i - 1], &TrackParams::default()) {
                Ok(k) => k,
                Err(_) => return [0.0; 3],
            };
            let src: Vec<Point> = kps.iter().map(|k| k.position).collect();
            let dst: Vec<Point> = kps.iter().map(|k| k.target()).collect();
            let Some(fit) = ransac(
                &src,
                &dst,
                &RansacParams::default(),
                seed.wrapping_add(i as u64),
            ) else {
                return [0.0; 3];
            };
            let (s, d): (Vec<Point>, Vec<Point>) = src
                .iter()
                .zip(&dst)
                .zip(&fit.inliers)
                .filter(|(_, &ok)| ok)
                .map(|((a, b), _)| (*a, *b))
                .unzip();
            match fit_similarity(&s, &d) {
                Some([tx, ty, _, angle]) => [tx, ty, angle],
                None => [0.0; 3],
            }
        })
        .collect();
    let mut out = [vec![0.0], vec![0.0], vec![0.0]];
    for step in steps {
        for c in 0..3 {
            let last = *out[c].last().unwrap();
            out[c].push(last + step[c]);
        }
    }
    out
}

pub fn stability(frames: &[Frame], seed: u64) -> Result<f64, MetricError> {
    if frames.len() < MIN_STABILITY_FRAMES {
        return Err(MetricError::TooShort {
            frames: frames.len(),
            needed: MIN_STABILITY_FRAMES,
        });
    }
    stability_from_trajectory(&similarity_trajectory(frames, seed))
}

/// Peak signal-to-noise ratio over `region`, capped at 99 dB.
pub fn psnr(a: &Frame, b: &Frame, region: &Mask) -> Result<f64, MetricError> {
    check_same((a.width(), a.height()), (b.width(), b.height()))?;
    check_same((a.width(), a.height()), (region.width(), region.height()))?;
    let mut se = 0.0f64;
    let mut count = 0usize;
    for ((pa, pb), &m) in a.pixels().iter().zip(b.pixels()).zip(region.data()) {
        if m {
            for c in 0..3 {
                let d = pa[c] as f64 - pb[c] as f64;
                se += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyRegion);
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// "Valid" separable correlation: output pixel (x, y) is the window centered
/// at (x + R, y + R) of the input.
fn blur_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|k| taps[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity on luminance, averaged over the 11x11 Gaussian
/// windows that lie entirely inside `region`.
pub fn ssim(a: &Frame, b: &Frame, region: &Mask) -> Result<f64, MetricError> {
    check_same((a.width(), a.height()), (b.width(), b.height()))?;
    check_same((a.width(), a.height()), (region.width(), region.height()))?;
    let n = 2 * SSIM_RADIUS + 1;
    let (w, h) = (a.width(), a.height());
    if w < n || h < n {
        return Err(MetricError::EmptyRegion);
    }
    let la: Vec<f64> = a.luma().data().iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = b.luma().data().iter().map(|&v| v as f64).collect();
    // integral image of invalid pixels
    let mut holes = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            holes[(y + 1) * (w + 1) + x + 1] = u32::from(!region.get(x, y))
                + holes[y * (w + 1) + x + 1]
                + holes[(y + 1) * (w + 1) + x]
                - holes[y * (w + 1) + x];
        }
    }
    let window_clean = |x0: usize, y0: usize| {
        let (x1, y1) = (x0 + n, y0 + n);
        holes[y1 * (w + 1) + x1] + holes[y0 * (w + 1) + x0]
            == holes[y0 * (w + 1) + x1] + holes[y1 * (w + 1) + x0]
    };
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = blur_valid(&la, w, h, &taps);
    let mu_b = blur_valid(&lb, w, h, &taps);
    let aa = blur_valid(&prod(&la, &la), w, h, &taps);
    let bb = blur_valid(&prod(&lb, &lb), w, h, &taps);
    let ab = blur_valid(&prod(&la, &lb), w, h, &taps);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let ow = w + 1 - n;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h + 1 - n {
        for x in 0..ow {
            if !window_clean(x, y) {
                continue;
            }
            let i = y * ow + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyRegion);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Losses {
    pub l_i: f64,
    pub l_g: f64,
    pub l_m: f64,
    /// `l_i + 2 l_g + 2 l_m`.
    pub total: f64,
}

/// Photometric, edge and mask-shrinkage measures of an extrapolated canvas
/// against ground truth.
pub fn eval_losses(
    extrap_frame: &Frame,
    extrap_edges: &EdgeMap,
    extrap_mask: &Mask,
    gt_frame: &Frame,
    gt_edges: &EdgeMap,
    pre_mask: &Mask,
) -> Result<Losses, MetricError> {
    let dims = (extrap_frame.width(), extrap_frame.height());
    check_same(dims, (gt_frame.width(), gt_frame.height()))?;
    check_same(dims, (extrap_edges.width(), extrap_edges.height()))?;
    check_same(dims, (gt_edges.width(), gt_edges.height()))?;
    check_same(dims, (extrap_mask.width(), extrap_mask.height()))?;
    check_same(dims, (pre_mask.width(), pre_mask.height()))?;
    let n = (dims.0 * dims.1) as f64;
    let m = extrap_mask.data();
    let mut l_i = 0.0;
    for ((e, g), &mk) in extrap_frame.pixels().iter().zip(gt_frame.pixels()).zip(m) {
        if mk {
            for c in 0..3 {
                l_i += (e[c] as f64 - g[c] as f64 + LOSS_EPSILON).abs();
            }
        }
    }
    l_i /= 3.0 * n;
    let l_g = edge_l1(&extrap_edges.0, &gt_edges.0, m) / n;
    let l_m = pre_mask
        .data()
        .iter()
        .zip(m)
        .map(|(&p, &e)| {
            let p = f64::from(u8::from(p));
            let d = p * f64::from(u8::from(e)) - p;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(Losses {
        l_i,
        l_g,
        l_m,
        total: l_i + 2.0 * l_g + 2.0 * l_m,
    })
}

fn edge_l1(e: &GrayImage, g: &GrayImage, mask: &[bool]) -> f64 {
    e.data()
        .iter()
        .zip(g.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a as f64 - b as f64 + LOSS_EPSILON).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::translation;
    use crate::raster::sobel_edges;
    use crate::synth::procedural_panorama;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn uniform(w: usize, h: usize, v: f32) -> Frame {
        Frame::from_fn(w, h, |_, _| [v; 3]).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let full = Mask::new(8, 8, true).unwrap();
        let a = uniform(8, 8, 0.0);
        assert_eq!(psnr(&a, &a, &full).unwrap(), 99.0);
        let b = uniform(8, 8, 0.1);
        assert_relative_eq!(psnr(&a, &b, &full).unwrap(), 20.0, epsilon = 1e-5);
        let empty = Mask::new(8, 8, false).unwrap();
        assert_eq!(psnr(&a, &b, &empty), Err(MetricError::EmptyRegion));
    }

    #[test]
    fn ssim_identity_and_negative() {
        let tex = Frame::from_fn(16, 16, |x, y| {
            let v = if (x / 2 + y / 3) % 2 == 0 { 0.9 } else { 0.1 };
            [v, v, v]
        })
        .unwrap();
        let full = Mask::new(16, 16, true).unwrap();
        assert_relative_eq!(ssim(&tex, &tex, &full).unwrap(), 1.0, epsilon = 1e-12);
        let neg = Frame::from_fn(16, 16, |x, y| {
            let c = tex.get(x, y);
            [1.0 - c[0], 1.0 - c[1], 1.0 - c[2]]
        })
        .unwrap();
        assert!(ssim(&tex, &neg, &full).unwrap() < 0.0);
        let tiny = Mask::from_fn(16, 16, |x, _| x < 10).unwrap();
        assert_eq!(ssim(&tex, &tex, &tiny), Err(MetricError::EmptyRegion));
    }

    /// Direct per-window evaluation of the SSIM formula.
    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = procedural_panorama(20, 18, 3);
        let b = procedural_panorama(20, 18, 4);
        let region = Mask::from_fn(20, 18, |x, y| x >= 2 && y >= 1).unwrap();
        let taps = gaussian_taps();
        let (la, lb) = (a.luma(), b.luma());
        let mut sum = 0.0;
        let mut count = 0;
        for cy in 5..13 {
            for cx in 5..15 {
                let inside = (cy - 5..=cy + 5).all(|y| (cx - 5..=cx + 5).all(|x| region.get(x, y)));
                if !inside {
                    continue;
                }
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = taps[i] * taps[j];
                        let p = la.get(cx + i - 5, cy + j - 5) as f64;
                        let q = lb.get(cx + i - 5, cy + j - 5) as f64;
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                sum += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                count += 1;
            }
        }
        assert!(count > 0);
        assert_relative_eq!(
            ssim(&a, &b, &region).unwrap(),
            sum / count as f64,
            epsilon = 1e-9
        );
    }

    #[test]
    fn losses_perfect_reconstruction() {
        let f = procedural_panorama(4, 4, 1);
        let e = sobel_edges(&f);
        let m = Mask::new(4, 4, true).unwrap();
        let l = eval_losses(&f, &e, &m, &f, &e, &m).unwrap();
        assert_relative_eq!(l.l_i, LOSS_EPSILON, max_relative = 1e-9);
        assert_relative_eq!(l.l_g, LOSS_EPSILON, max_relative = 1e-9);
        assert_eq!(l.l_m, 0.0);
    }

    #[test]
    fn losses_one_wrong_pixel() {
        let g = uniform(4, 4, 0.25);
        let mut e = g.clone();
        e.set(2, 1, [0.75; 3]);
        let edges = sobel_edges(&g);
        let m = Mask::new(4, 4, true).unwrap();
        let l = eval_losses(&e, &edges, &m, &g, &edges, &m).unwrap();
        assert_relative_eq!(l.l_i, 0.5 / 16.0 + LOSS_EPSILON, epsilon = 1e-15);
    }

    #[test]
    fn losses_full_shrinkage() {
        let g = uniform(4, 4, 0.25);
        let edges = sobel_edges(&g);
        let none = Mask::new(4, 4, false).unwrap();
        let pre = Mask::from_fn(4, 4, |x, y| x < 3 && y < 2).unwrap();
        let l = eval_losses(&g, &edges, &none, &g, &edges, &pre).unwrap();
        assert_eq!(l.l_m, 6.0 / 16.0);
        assert_eq!(l.l_i, 0.0);
        assert_eq!(l.total, l.l_i + 2.0 * l.l_g + 2.0 * l.l_m);
    }

    #[test]
    fn homography_terms() {
        assert_eq!(cropping_from_homography(&Matrix3::identity()), 1.0);
        assert_eq!(distortion_from_homography(&Matrix3::identity()), 1.0);
        let zoom = Matrix3::new(1.0 / 0.9, 0.0, 3.0, 0.0, 1.0 / 0.9, -2.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(cropping_from_homography(&zoom), 0.9, epsilon = 1e-12);
        let stretch = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(distortion_from_homography(&stretch), 0.8, epsilon = 1e-12);
        let (s, c) = 0.3f64.sin_cos();
        let rot = translation(4.0, 1.0) * Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(distortion_from_homography(&rot), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cropping_from_homography(&rot), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stability_spectrum_cases() {
        let n = 128;
        let tone = |bin: f64| -> Vec<f64> {
            (0..n)
                .map(|t| (2.0 * std::f64::consts::PI * bin * t as f64 / n as f64).sin() * 5.0)
                .collect()
        };
        let low = stability_from_trajectory(&[tone(3.0), tone(3.0), tone(3.0)]).unwrap();
        assert!((low - 1.0).abs() <= 0.01, "{low}");
        let high = stability_from_trajectory(&[tone(32.0), tone(32.0), tone(32.0)]).unwrap();
        assert!(high <= 0.05, "{high}");
        let flat = vec![0.0; n];
        assert_eq!(
            stability_from_trajectory(&[flat.clone(), flat.clone(), flat]).unwrap(),
            1.0
        );
        let offset: Vec<f64> = tone(20.0).iter().map(|v| v + 7.0).collect();
        assert_relative_eq!(
            stability_from_trajectory(&[offset]).unwrap(),
            stability_from_trajectory(&[tone(20.0)]).unwrap(),
            epsilon = 1e-9
        );
        assert!(matches!(
            stability_from_trajectory(&[vec![0.0; 31]]),
            Err(MetricError::TooShort { .. })
        ));
    }
}
