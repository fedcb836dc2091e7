//! Binary character masks and resolution changes.
//!
//! Downsampling uses any-pooling, an output cell is set iff any covered input
//! cell is set, so small characters survive coarse layers. Because any-pooling
//! can make neighboring characters overlap at low resolution, overlaps are
//! resolved by majority source-cell coverage with a smaller-label tie-break.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterMask {
    pub identity: u32,
    h: usize,
    w: usize,
    grid: Vec<u8>,
}

impl CharacterMask {
    pub fn new(identity: u32, h: usize, w: usize, grid: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::domain(format!("mask resolution must be positive, got {h}x{w}")));
        }
        if grid.len() != h * w {
            return Err(Error::shape(
                "mask new",
                format!("{h}x{w} grid needs {} cells, got {}", h * w, grid.len()),
            ));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::domain("mask grid must contain only 0/1 values"));
        }
        Ok(CharacterMask { identity, h, w, grid })
    }

    pub fn empty(identity: u32, h: usize, w: usize) -> Self {
        CharacterMask { identity, h, w, grid: vec![0; h * w] }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.grid[y * self.w + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_mask_empty(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    /// Flat indices (row-major) of set cells, the token index set V.
    pub fn token_indices(&self) -> Vec<usize> {
        self.grid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }

    /// Mean x coordinate of set cells, None when empty.
    pub fn centroid_x(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    sum += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Input cells covered by output cell `o` when resampling `n_in` cells to
/// `n_out`: the integer cells intersecting the real interval
/// [o·n_in/n_out, (o+1)·n_in/n_out).
fn cover(o: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let lo = o * n_in / n_out;
    let hi = ((o + 1) * n_in + n_out - 1) / n_out;
    lo..hi.min(n_in)
}

/// Any-pool resample to a target resolution. The second return is the warning
/// flag: true when the input (and therefore the output) mask was empty.
pub fn interp_mask(mask: &CharacterMask, target: (usize, usize)) -> Result<(CharacterMask, bool)> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::domain(format!("interp target must be positive, got {th}x{tw}")));
    }
    let (h, w) = mask.resolution();
    let mut out = CharacterMask::empty(mask.identity, th, tw);
    for oy in 0..th {
        for ox in 0..tw {
            let hit = cover(oy, h, th)
                .any(|iy| cover(ox, w, tw).clone().any(|ix| mask.get(iy, ix)));
            if hit {
                out.set(oy, ox, true);
            }
        }
    }
    Ok((out, mask.is_mask_empty()))
}

/// Per-output-cell count of set source cells, the evidence used by
/// [`resolve_overlaps`].
pub fn coverage_counts(mask: &CharacterMask, target: (usize, usize)) -> Vec<u32> {
    let (th, tw) = target;
    let (h, w) = mask.resolution();
    let mut counts = vec![0u32; th * tw];
    for oy in 0..th {
        for ox in 0..tw {
            let mut n = 0u32;
            for iy in cover(oy, h, th) {
                for ix in cover(ox, w, tw) {
                    n += mask.get(iy, ix) as u32;
                }
            }
            counts[oy * tw + ox] = n;
        }
    }
    counts
}

/// Makes interpolated masks pairwise disjoint: each contested cell goes to the
/// identity with the most covered source cells, ties to the smaller label.
pub fn resolve_overlaps(masks: &[CharacterMask], counts: &[Vec<u32>]) -> Result<Vec<CharacterMask>> {
    if masks.len() != counts.len() {
        return Err(Error::shape(
            "resolve_overlaps",
            format!("{} masks vs {} count grids", masks.len(), counts.len()),
        ));
    }
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.resolution();
    for (m, c) in masks.iter().zip(counts) {
        if m.resolution() != (h, w) || c.len() != h * w {
            return Err(Error::shape("resolve_overlaps", "mixed resolutions".to_string()));
        }
    }
    let mut out = masks.to_vec();
    for cell in 0..h * w {
        let mut winner: Option<usize> = None;
        for (k, mask) in masks.iter().enumerate() {
            if mask.grid()[cell] == 0 {
                continue;
            }
            winner = match winner {
                None => Some(k),
                Some(cur) => {
                    let (cc, cw) = (counts[k][cell], counts[cur][cell]);
                    let better = cc > cw
                        || (cc == cw && masks[k].identity < masks[cur].identity);
                    Some(if better { k } else { cur })
                }
            };
        }
        if let Some(win) = winner {
            for (k, m) in out.iter_mut().enumerate() {
                if k != win {
                    m.grid[cell] = 0;
                }
            }
        }
    }
    Ok(out)
}

/// interp + overlap resolution in one step, the usual path from full-resolution
/// masks to one layer's masks.
pub fn downsample_masks(masks: &[CharacterMask], target: (usize, usize)) -> Result<Vec<CharacterMask>> {
    let mut interped = Vec::with_capacity(masks.len());
    let mut counts = Vec::with_capacity(masks.len());
    for m in masks {
        let (im, _) = interp_mask(m, target)?;
        interped.push(im);
        counts.push(coverage_counts(m, target));
    }
    resolve_overlaps(&interped, &counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(identity: u32, rows: &[&[u8]]) -> CharacterMask {
        let h = rows.len();
        let w = rows[0].len();
        CharacterMask::new(identity, h, w, rows.concat()).unwrap()
    }

    #[test]
    fn block_downsample() {
        let mut m = CharacterMask::empty(0, 4, 4);
        for y in 0..2 {
            for x in 0..2 {
                m.set(y, x, true);
            }
        }
        let (out, warn) = interp_mask(&m, (2, 2)).unwrap();
        assert!(!warn);
        assert_eq!(out.grid(), &[1, 0, 0, 0]);
    }

    #[test]
    fn single_cell_survives() {
        let mut m = CharacterMask::empty(0, 4, 4);
        m.set(3, 3, true);
        let (out, _) = interp_mask(&m, (2, 2)).unwrap();
        assert_eq!(out.grid(), &[0, 0, 0, 1]);
    }

    #[test]
    fn empty_mask_warns() {
        let m = CharacterMask::empty(0, 4, 4);
        let (out, warn) = interp_mask(&m, (2, 2)).unwrap();
        assert!(warn);
        assert!(out.is_mask_empty());
    }

    #[test]
    fn nonempty_stays_nonempty_any_target() {
        let mut m = CharacterMask::empty(0, 5, 7);
        m.set(2, 6, true);
        for th in 1..=6 {
            for tw in 1..=9 {
                let (out, _) = interp_mask(&m, (th, tw)).unwrap();
                assert!(!out.is_mask_empty(), "vanished at {th}x{tw}");
            }
        }
    }

    #[test]
    fn overlap_majority_and_tie() {
        // 4x2 source, two identities; low cell (0,0) at 2x1 covers rows 0-1
        let a = mask_from(5, &[&[1, 1], &[1, 0], &[0, 0], &[0, 0]]); // 3 cells up top
        let b = mask_from(2, &[&[0, 0], &[0, 1], &[0, 0], &[0, 0]]); // 1 cell
        let target = (2, 1);
        let (ia, _) = interp_mask(&a, target).unwrap();
        let (ib, _) = interp_mask(&b, target).unwrap();
        let ca = coverage_counts(&a, target);
        let cb = coverage_counts(&b, target);
        let resolved = resolve_overlaps(&[ia, ib], &[ca, cb]).unwrap();
        assert_eq!(resolved[0].grid()[0], 1, "3-cell identity wins");
        assert_eq!(resolved[1].grid()[0], 0);

        // exact tie 2 vs 2 between identities 5 and 2 goes to 2
        let a = mask_from(5, &[&[1, 0], &[1, 0], &[0, 0], &[0, 0]]);
        let b = mask_from(2, &[&[0, 1], &[0, 1], &[0, 0], &[0, 0]]);
        let (ia, _) = interp_mask(&a, target).unwrap();
        let (ib, _) = interp_mask(&b, target).unwrap();
        let ca = coverage_counts(&a, target);
        let cb = coverage_counts(&b, target);
        let resolved = resolve_overlaps(&[ia, ib], &[ca, cb]).unwrap();
        assert_eq!(resolved[0].grid()[0], 0);
        assert_eq!(resolved[1].grid()[0], 1, "tie goes to identity 2");
    }

    #[test]
    fn non_overlapping_unchanged() {
        let a = mask_from(0, &[&[1, 0], &[0, 0]]);
        let b = mask_from(1, &[&[0, 0], &[0, 1]]);
        let ca = coverage_counts(&a, (2, 2));
        let cb = coverage_counts(&b, (2, 2));
        let resolved = resolve_overlaps(&[a.clone(), b.clone()], &[ca, cb]).unwrap();
        assert_eq!(resolved[0], a);
        assert_eq!(resolved[1], b);
    }

    #[test]
    fn downsampled_masks_are_disjoint() {
        // adjacent strips at 8x8 downsampled to 2x2 must stay disjoint
        let mut a = CharacterMask::empty(0, 8, 8);
        let mut b = CharacterMask::empty(1, 8, 8);
        for y in 0..8 {
            for x in 0..3 {
                a.set(y, x, true);
            }
            for x in 3..6 {
                b.set(y, x, true);
            }
        }
        let out = downsample_masks(&[a, b], (2, 2)).unwrap();
        for cell in 0..4 {
            assert!(out[0].grid()[cell] + out[1].grid()[cell] <= 1);
        }
        assert!(!out[0].is_mask_empty() && !out[1].is_mask_empty());
    }

    #[test]
    fn centroid_ordering_helper() {
        let left = mask_from(7, &[&[1, 1, 0, 0]]);
        let right = mask_from(3, &[&[0, 0, 1, 1]]);
        assert!(left.centroid_x().unwrap() < right.centroid_x().unwrap());
        assert_eq!(CharacterMask::empty(0, 2, 2).centroid_x(), None);
    }
}
