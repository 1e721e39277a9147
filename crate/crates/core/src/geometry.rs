//! Planar homographies: application, 4-point and least-squares DLT, RANSAC.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Homography = Matrix3<f64>;

pub type Point = [f64; 2];

#[inline]
pub fn apply(h: &Homography, p: Point) -> Point {
    let x = h[(0, 0)] * p[0] + h[(0, 1)] * p[1] + h[(0, 2)];
    let y = h[(1, 0)] * p[0] + h[(1, 1)] * p[1] + h[(1, 2)];
    let w = h[(2, 0)] * p[0] + h[(2, 1)] * p[1] + h[(2, 2)];
    [x / w, y / w]
}

pub fn translation(dx: f64, dy: f64) -> Homography {
    Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
}

/// Scales so the bottom-right element is 1. `None` when that element vanishes.
pub fn normalize(h: Homography) -> Option<Homography> {
    let s = h[(2, 2)];
    if s.abs() < 1e-12 || !s.is_finite() {
        return None;
    }
    let n = h / s;
    n.iter().all(|v| v.is_finite()).then_some(n)
}

/// Exact homography through four correspondences (solves the 8x8 system with
/// `h33 = 1`). Equal displacements yield an exact translation.
pub fn from_four_points(src: &[Point; 4], dst: &[Point; 4]) -> Option<Homography> {
    let d0 = [dst[0][0] - src[0][0], dst[0][1] - src[0][1]];
    if (1..4).all(|i| dst[i][0] - src[i][0] == d0[0] && dst[i][1] - src[i][1] == d0[1]) {
        return Some(translation(d0[0], d0[1]));
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    let h = Matrix3::new(
        sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
    );
    h.iter().all(|v| v.is_finite()).then_some(h)
}

/// Similarity transform that maps the points to zero centroid and mean
/// distance sqrt(2).
fn hartley(points: &[Point]) -> Option<Homography> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = points
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy))
        .sum::<f64>()
        / n;
    if mean < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Normalized least-squares DLT over all correspondences (at least 4).
pub fn fit_least_squares(src: &[Point], dst: &[Point]) -> Option<Homography> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = hartley(src)?;
    let td = hartley(dst)?;
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in src.iter().zip(dst) {
        let [x, y] = apply(&ts, *p);
        let [u, v] = apply(&td, *q);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let full = td.try_inverse()? * hn * ts;
    normalize(full)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub threshold: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 2.0,
            min_inliers: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacFit {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

#[inline]
fn reprojection_error(h: &Homography, p: Point, q: Point) -> f64 {
    let r = apply(h, p);
    (r[0] - q[0]).hypot(r[1] - q[1])
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() < 1e-6
}

/// Robust homography via 4-point RANSAC, refit by least squares on the
/// consensus set. Returns `None` when fewer than `min_inliers` agree.
pub fn ransac(src: &[Point], dst: &[Point], params: &RansacParams, seed: u64) -> Option<RansacFit> {
    let n = src.len();
    if n < 4 || n != dst.len() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..params.iterations {
        let idx = sample(&mut rng, n, 4);
        let s = [
            src[idx.index(0)],
            src[idx.index(1)],
            src[idx.index(2)],
            src[idx.index(3)],
        ];
        let d = [
            dst[idx.index(0)],
            dst[idx.index(1)],
            dst[idx.index(2)],
            dst[idx.index(3)],
        ];
        let degenerate = (0..4).any(|i| {
            let o: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            collinear(s[o[0]], s[o[1]], s[o[2]]) || collinear(d[o[0]], d[o[1]], d[o[2]])
        });
        if degenerate {
            continue;
        }
        let Some(h) = from_four_points(&s, &d) else {
            continue;
        };
        let count = src
            .iter()
            .zip(dst)
            .filter(|(p, q)| reprojection_error(&h, **p, **q) < params.threshold)
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, h));
            if count == n {
                break;
            }
        }
    }
    let (count, h) = best?;
    if count < params.min_inliers.max(4) {
        return None;
    }
    let mark = |h: &Homography| -> Vec<bool> {
        src.iter()
            .zip(dst)
            .map(|(p, q)| reprojection_error(h, *p, *q) < params.threshold)
            .collect()
    };
    let mut inliers = mark(&h);
    let mut homography = h;
    // two refinement rounds on the growing consensus set
    for _ in 0..2 {
        let (s, d): (Vec<Point>, Vec<Point>) = src
            .iter()
            .zip(dst)
            .zip(&inliers)
            .filter(|(_, &keep)| keep)
            .map(|((p, q), _)| (*p, *q))
            .unzip();
        let Some(refit) = fit_least_squares(&s, &d) else {
            break;
        };
        let next = mark(&refit);
        if next.iter().filter(|&&b| b).count() < params.min_inliers.max(4) {
            break;
        }
        homography = refit;
        inliers = next;
    }
    Some(RansacFit {
        homography,
        inliers,
    })
}

/// Least-squares 2D similarity `q = s R p + t` as `(tx, ty, scale, angle)`.
pub fn fit_similarity(src: &[Point], dst: &[Point]) -> Option<[f64; 4]> {
    let n = src.len();
    if n < 2 || n != dst.len() {
        return None;
    }
    let nf = n as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        sx += p[0];
        sy += p[1];
        dx += q[0];
        dy += q[1];
    }
    let (sx, sy, dx, dy) = (sx / nf, sy / nf, dx / nf, dy / nf);
    // complex least squares: (q - qc) = a (p - pc), a = s e^{i theta}
    let (mut num_re, mut num_im, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p[0] - sx, p[1] - sy);
        let (qx, qy) = (q[0] - dx, q[1] - dy);
        num_re += qx * px + qy * py;
        num_im += qy * px - qx * py;
        den += px * px + py * py;
    }
    if den < 1e-12 {
        return None;
    }
    let (a_re, a_im) = (num_re / den, num_im / den);
    let tx = dx - (a_re * sx - a_im * sy);
    let ty = dy - (a_im * sx + a_re * sy);
    Some([tx, ty, a_re.hypot(a_im), a_im.atan2(a_re)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rot(theta: f64, c: Point) -> Homography {
        let (s, co) = theta.sin_cos();
        translation(c[0], c[1])
            * Matrix3::new(co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0)
            * translation(-c[0], -c[1])
    }

    #[test]
    fn four_points_recover_projective_map() {
        let h = Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, -2.0, 1e-4, -2e-4, 1.0);
        let src = [[0.0, 0.0], [40.0, 0.0], [40.0, 30.0], [0.0, 30.0]];
        let dst = src.map(|p| apply(&h, p));
        let fit = from_four_points(&src, &dst).unwrap();
        assert_abs_diff_eq!(fit, h, epsilon = 1e-9);
    }

    #[test]
    fn equal_displacements_give_exact_translation() {
        let src = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let dst = src.map(|p| [p[0] + 5.0, p[1]]);
        assert_eq!(from_four_points(&src, &dst).unwrap(), translation(5.0, 0.0));
    }

    #[test]
    fn least_squares_matches_exact_on_clean_data() {
        let h = rot(0.03, [50.0, 40.0]) * translation(2.0, -1.0);
        let src: Vec<Point> = (0..30)
            .map(|i| [(i * 37 % 100) as f64, (i * 53 % 80) as f64])
            .collect();
        let dst: Vec<Point> = src.iter().map(|&p| apply(&h, p)).collect();
        let fit = fit_least_squares(&src, &dst).unwrap();
        assert_abs_diff_eq!(fit, h, epsilon = 1e-8);
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let h = translation(4.0, -3.0);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..100 {
            let p = [(i * 37 % 200) as f64, (i * 61 % 150) as f64];
            src.push(p);
            if i % 5 == 0 {
                dst.push([p[0] + 40.0 + i as f64, p[1] - 25.0]);
            } else {
                dst.push(apply(&h, p));
            }
        }
        let fit = ransac(&src, &dst, &RansacParams::default(), 1).unwrap();
        assert_eq!(fit.inlier_count(), 80);
        let c = apply(&fit.homography, [100.0, 75.0]);
        assert_abs_diff_eq!(c[0], 104.0, epsilon = 1e-6);
        assert_abs_diff_eq!(c[1], 72.0, epsilon = 1e-6);
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let src: Vec<Point> = (0..20)
            .map(|i| [i as f64 * 3.0, (i * i % 17) as f64])
            .collect();
        let dst: Vec<Point> = src.iter().map(|p| [p[0] + 1.0, p[1] + 0.5]).collect();
        let a = ransac(&src, &dst, &RansacParams::default(), 9).unwrap();
        let b = ransac(&src, &dst, &RansacParams::default(), 9).unwrap();
        assert_eq!(a.homography, b.homography);
    }

    #[test]
    fn similarity_recovers_parameters() {
        let theta: f64 = 0.1;
        let s = 1.2;
        let src: Vec<Point> = (0..10).map(|i| [i as f64, (i * 3 % 7) as f64]).collect();
        let dst: Vec<Point> = src
            .iter()
            .map(|p| {
                [
                    s * (theta.cos() * p[0] - theta.sin() * p[1]) + 3.0,
                    s * (theta.sin() * p[0] + theta.cos() * p[1]) - 2.0,
                ]
            })
            .collect();
        let [tx, ty, sc, an] = fit_similarity(&src, &dst).unwrap();
        assert_abs_diff_eq!(tx, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ty, -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sc, 1.2, epsilon = 1e-9);
        assert_abs_diff_eq!(an, 0.1, epsilon = 1e-9);
    }
}
