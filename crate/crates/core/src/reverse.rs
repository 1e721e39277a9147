//! Flow reversal by forward splatting.

use crate::raster::{for_each_tap, FlowField, Mask};

/// Accumulated weight a target pixel needs to count as part of the shared view.
pub const SPLAT_THRESHOLD: f64 = 0.5;

/// Converts flow `f` (source -> target) into flow on the target grid pointing
/// back to the source.
///
/// Every source pixel inside `mask` splats `-f(p)` at `p + f(p)` with bilinear
/// weights; each target pixel averages what it received. The returned mask
/// holds the target pixels whose accumulated weight reaches
/// [`SPLAT_THRESHOLD`]; elsewhere the reversed flow is zero. Splatting runs in
/// row-major source order, so the sums are reproducible bit for bit.
pub fn reverse_flow(flow: &FlowField, mask: &Mask) -> (FlowField, Mask) {
    let (w, h) = (flow.width(), flow.height());
    let mut acc = vec![[0.0f64; 2]; w * h];
    let mut weight = vec![0.0f64; w * h];
    for (i, (d, &m)) in flow.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        for_each_tap(w, h, x + d[0], y + d[1], |j, tw| {
            acc[j][0] -= tw * d[0];
            acc[j][1] -= tw * d[1];
            weight[j] += tw;
            tw
        });
    }
    let shared: Vec<bool> = weight.iter().map(|&s| s >= SPLAT_THRESHOLD).collect();
    let data: Vec<[f64; 2]> = acc
        .iter()
        .zip(&weight)
        .zip(&shared)
        .map(|((a, &s), &ok)| if ok { [a[0] / s, a[1] / s] } else { [0.0, 0.0] })
        .collect();
    let shared = Mask::from_vec(w, h, shared).expect("dims match");
    let rev = FlowField::from_parts(w, h, data, shared.clone()).expect("dims match");
    (rev, shared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bilinear field read with clamped coordinates.
    fn sample(f: &FlowField, x: f64, y: f64) -> [f64; 2] {
        let (w, h) = (f.width(), f.height());
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 2];
        for c in 0..2 {
            out[c] = (f.get(x0, y0)[c] * (1.0 - fx) + f.get(x1, y0)[c] * fx) * (1.0 - fy)
                + (f.get(x0, y1)[c] * (1.0 - fx) + f.get(x1, y1)[c] * fx) * fy;
        }
        out
    }

    /// Dense oracle: every target pixel scans every source pixel and sums the
    /// bilinear kernel `max(0, 1-|dx|) * max(0, 1-|dy|)` directly.
    fn brute_force(flow: &FlowField, mask: &Mask) -> (Vec<[f64; 2]>, Vec<bool>) {
        let (w, h) = (flow.width(), flow.height());
        let mut out = vec![[0.0; 2]; w * h];
        let mut valid = vec![false; w * h];
        for qy in 0..h {
            for qx in 0..w {
                let (mut a, mut s) = ([0.0f64; 2], 0.0f64);
                for py in 0..h {
                    for px in 0..w {
                        if !mask.get(px, py) {
                            continue;
                        }
                        let d = flow.get(px, py);
                        let tx = px as f64 + d[0];
                        let ty = py as f64 + d[1];
                        let k = (1.0 - (tx - qx as f64).abs()).max(0.0)
                            * (1.0 - (ty - qy as f64).abs()).max(0.0);
                        a[0] -= k * d[0];
                        a[1] -= k * d[1];
                        s += k;
                    }
                }
                if s >= 0.5 {
                    out[qy * w + qx] = [a[0] / s, a[1] / s];
                    valid[qy * w + qx] = true;
                }
            }
        }
        (out, valid)
    }

    fn smooth_field(w: usize, h: usize, seed: u64) -> FlowField {
        let p =
            |k: u64| ((seed.wrapping_mul(2654435761).wrapping_add(k * 97)) % 1000) as f64 / 1000.0;
        let (a, b, c, d) = (p(1), p(2), p(3), p(4));
        FlowField::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            [
                2.0 * (x * 0.11 + a * 6.0).sin() * (y * 0.07 + b * 6.0).cos(),
                2.0 * (y * 0.09 + c * 6.0).sin() * (x * 0.05 + d * 6.0).cos(),
            ]
        })
        .unwrap()
    }

    #[test]
    fn constant_translation_reverses_exactly() {
        let (w, h, d) = (12usize, 9usize, 3usize);
        let flow = FlowField::constant(w, h, [d as f64, 0.0]).unwrap();
        let mask = Mask::new(w, h, true).unwrap();
        let (rev, shared) = reverse_flow(&flow, &mask);
        assert_eq!(shared.count(), w * h - d * h);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(shared.get(x, y), x >= d);
                let expect = if x >= d {
                    [-(d as f64), 0.0]
                } else {
                    [0.0, 0.0]
                };
                assert_eq!(rev.get(x, y), expect);
            }
        }
        // reversing again restores the original constant on the doubly shifted support
        let (back, back_mask) = reverse_flow(&rev, &shared);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(back_mask.get(x, y), x < w - d);
                if back_mask.get(x, y) {
                    assert_eq!(back.get(x, y), [d as f64, 0.0]);
                }
            }
        }
    }

    #[test]
    fn zero_flow_is_identity() {
        let mask = Mask::from_fn(7, 5, |x, y| (x * y) % 3 != 1).unwrap();
        let flow = FlowField::zeros(7, 5).unwrap().masked(&mask).unwrap();
        let (rev, shared) = reverse_flow(&flow, &mask);
        assert_eq!(shared, mask);
        assert!(rev.data().iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn matches_brute_force_and_is_cycle_consistent() {
        for seed in 0..4 {
            let (w, h) = (24, 20);
            let mask = Mask::from_fn(w, h, |x, y| {
                x > 1 && y + 2 < h && (x + seed as usize) % 11 != 0
            })
            .unwrap();
            let flow = smooth_field(w, h, seed).masked(&mask).unwrap();
            let (rev, shared) = reverse_flow(&flow, &mask);
            let (oracle, oracle_valid) = brute_force(&flow, &mask);
            assert_eq!(shared.data(), &oracle_valid[..]);
            for (a, b) in rev.data().iter().zip(&oracle) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            let mut good = 0;
            for y in 0..h {
                for x in 0..w {
                    if !shared.get(x, y) {
                        continue;
                    }
                    let r = rev.get(x, y);
                    let f = sample(&flow, x as f64 + r[0], y as f64 + r[1]);
                    if (r[0] + f[0]).hypot(r[1] + f[1]) < 0.5 {
                        good += 1;
                    }
                }
            }
            assert!(
                good as f64 >= 0.95 * shared.count() as f64,
                "{good}/{}",
                shared.count()
            );
        }
    }

    proptest! {
        #[test]
        fn reversed_values_are_convex_averages(
            seed in 0u64..1000,
            w in 4usize..14,
            h in 4usize..14,
        ) {
            let flow = smooth_field(w, h, seed);
            let mask = Mask::new(w, h, true).unwrap();
            let (rev, shared) = reverse_flow(&flow, &mask);
            let bound = flow.max_magnitude() + 1e-9;
            prop_assert!(rev.max_magnitude() <= bound);
            prop_assert!(shared.is_subset_of(rev.valid()) && rev.valid().is_subset_of(&shared));
        }
    }
}
