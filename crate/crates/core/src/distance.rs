//! Exact nearest-site lookup on the pixel lattice.

use crate::raster::Mask;

/// For every pixel, the linear index of the nearest `true` pixel of `sites`
/// in Euclidean distance. Ties go to the smaller linear index. `None`
/// everywhere when there is no site.
///
/// Columns are resolved first (nearest site row per column, upper one on
/// ties), then each pixel scans columns outward from its own and stops once
/// the horizontal distance alone exceeds the best candidate.
pub fn nearest_sites(sites: &Mask) -> Vec<Option<usize>> {
    let (w, h) = (sites.width(), sites.height());
    if sites.count() == 0 {
        return vec![None; w * h];
    }
    // nearest[y * w + x] = row of the nearest site in column x
    let mut nearest: Vec<Option<u32>> = vec![None; w * h];
    for x in 0..w {
        let mut above: Option<usize> = None;
        for y in 0..h {
            if sites.get(x, y) {
                above = Some(y);
            }
            nearest[y * w + x] = above.map(|r| r as u32);
        }
        let mut below: Option<usize> = None;
        for y in (0..h).rev() {
            if sites.get(x, y) {
                below = Some(y);
            }
            let cur = nearest[y * w + x].map(|r| r as usize);
            nearest[y * w + x] = match (cur, below) {
                (Some(a), Some(b)) => Some(if b - y < y - a { b } else { a } as u32),
                (None, b) => b.map(|r| r as u32),
                (a, None) => a.map(|r| r as u32),
            };
        }
    }
    let mut out = vec![None; w * h];
    for y in 0..h {
        let row = &nearest[y * w..(y + 1) * w];
        for x in 0..w {
            let mut best: Option<(u64, usize)> = None;
            let consider = |xx: usize, best: &mut Option<(u64, usize)>| {
                if let Some(r) = row[xx] {
                    let dy = r as i64 - y as i64;
                    let dx = xx as i64 - x as i64;
                    let d2 = (dx * dx + dy * dy) as u64;
                    let idx = r as usize * w + xx;
                    if best.map_or(true, |(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                        *best = Some((d2, idx));
                    }
                }
            };
            for off in 0..w {
                let d2 = (off * off) as u64;
                if best.is_some_and(|(bd, _)| d2 > bd) {
                    break;
                }
                if off <= x {
                    consider(x - off, &mut best);
                }
                if off > 0 && x + off < w {
                    consider(x + off, &mut best);
                }
            }
            out[y * w + x] = best.map(|b| b.1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(sites: &Mask) -> Vec<Option<usize>> {
        let (w, h) = (sites.width(), sites.height());
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                (0..w * h).filter(|&j| sites.data()[j]).min_by_key(|&j| {
                    let (sx, sy) = ((j % w) as i64, (j / w) as i64);
                    ((sx - x).pow(2) + (sy - y).pow(2), j)
                })
            })
            .collect()
    }

    #[test]
    fn no_sites() {
        let m = Mask::new(4, 3, false).unwrap();
        assert!(nearest_sites(&m).iter().all(Option::is_none));
    }

    #[test]
    fn opposite_corners_split_on_bisector() {
        let m = Mask::from_fn(9, 7, |x, y| (x, y) == (0, 0) || (x, y) == (8, 6)).unwrap();
        assert_eq!(nearest_sites(&m), brute(&m));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            w in 1usize..16,
            h in 1usize..16,
            bits in proptest::collection::vec(0u8..10, 256),
        ) {
            let m = Mask::from_fn(w, h, |x, y| bits[(y * 16 + x) % 256] == 0).unwrap();
            prop_assert_eq!(nearest_sites(&m), brute(&m));
        }
    }
}
