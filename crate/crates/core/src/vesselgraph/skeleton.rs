use crate::raster::{Grid, Pixel, NEIGHBORS_8};

/// One-pixel-wide thinning of a vessel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    mask: Grid<bool>,
    degree: Grid<u8>,
}

impl Skeleton {
    fn from_mask(mask: Grid<bool>) -> Self {
        let degree = Grid::from_fn(mask.width(), mask.height(), |x, y| {
            if !*mask.get(x, y) {
                return 0;
            }
            let p = Pixel::new(x as i64, y as i64);
            NEIGHBORS_8
                .iter()
                .filter(|(dx, dy)| mask.on(Pixel::new(p.x + dx, p.y + dy)))
                .count() as u8
        });
        Self { mask, degree }
    }

    pub fn mask(&self) -> &Grid<bool> {
        &self.mask
    }

    pub fn contains(&self, p: Pixel) -> bool {
        self.mask.on(p)
    }

    /// Number of 8-neighbours of `p` that are skeleton pixels (0 off-skeleton).
    pub fn degree(&self, p: Pixel) -> u8 {
        self.degree.at(p).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.mask.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.mask
            .iter_xy()
            .filter(|(_, _, &on)| on)
            .map(|(x, y, _)| Pixel::new(x as i64, y as i64))
    }

    /// Top-left corners of fully occupied 2×2 blocks.
    pub fn thick_blocks(&self) -> Vec<Pixel> {
        let (w, h) = self.mask.dims();
        let mut out = Vec::new();
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                if *self.mask.get(x, y)
                    && *self.mask.get(x + 1, y)
                    && *self.mask.get(x, y + 1)
                    && *self.mask.get(x + 1, y + 1)
                {
                    out.push(Pixel::new(x as i64, y as i64));
                }
            }
        }
        out
    }
}

/// Zhang–Suen thinning with topology-safe deletion.
///
/// Each sub-iteration marks pixels with the classic Zhang–Suen conditions on
/// a snapshot and then deletes them one at a time, re-checking against the
/// live image that the pixel is still a simple, non-end point (Yokoi
/// 8-connectivity number of 1, at least two neighbours). Once the Zhang–Suen
/// passes stall, a cleanup pass removes simple, non-end pixels from remaining
/// 2×2 blocks and thinning resumes.
/// The loop stops at a fixed point, so thinning a skeleton returns it
/// unchanged and the number of 8-connected components is kept.
pub fn skeletonize(mask: &Grid<bool>) -> Skeleton {
    let mut img = mask.clone();
    let (w, h) = img.dims();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let marked: Vec<Pixel> = (0..h)
                .flat_map(|y| (0..w).map(move |x| Pixel::new(x as i64, y as i64)))
                .filter(|&p| img.on(p) && zhang_suen_marks(&img, p, pass))
                .collect();
            for p in marked {
                if deletable(&img, p) {
                    img.set(p.x as usize, p.y as usize, false);
                    changed = true;
                }
            }
        }
        if changed {
            continue;
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let block = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
                if !block.iter().all(|&(bx, by)| *img.get(bx, by)) {
                    continue;
                }
                for (bx, by) in block {
                    let p = Pixel::new(bx as i64, by as i64);
                    if deletable(&img, p) {
                        img.set(bx, by, false);
                        changed = true;
                        break;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Skeleton::from_mask(img)
}

fn neighbors(img: &Grid<bool>, p: Pixel) -> [bool; 8] {
    NEIGHBORS_8.map(|(dx, dy)| img.on(Pixel::new(p.x + dx, p.y + dy)))
}

fn zhang_suen_marks(img: &Grid<bool>, p: Pixel, pass: usize) -> bool {
    let n = neighbors(img, p);
    let b = n.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = n;
    if pass == 0 {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

fn deletable(img: &Grid<bool>, p: Pixel) -> bool {
    let n = neighbors(img, p);
    n.iter().filter(|&&v| v).count() >= 2 && yokoi_8(&n) == 1
}

/// Yokoi connectivity number for 8-connected foreground; a pixel is simple
/// (deleting it changes no topology) exactly when this is 1.
fn yokoi_8(n: &[bool; 8]) -> i32 {
    // Reorder from N,NE,E,SE,S,SW,W,NW to E,NE,N,NW,W,SW,S,SE (counter-clockwise from east).
    let order = [2, 1, 0, 7, 6, 5, 4, 3];
    let inv: Vec<i32> = order.iter().map(|&i| i32::from(!n[i])).collect();
    (0..4)
        .map(|j| {
            let k = 2 * j;
            inv[k] - inv[k] * inv[(k + 1) % 8] * inv[(k + 2) % 8]
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(mask: &mut Grid<bool>, x0: usize, y0: usize, x1: usize, y1: usize) {
        for y in y0..y1 {
            for x in x0..x1 {
                mask.set(x, y, true);
            }
        }
    }

    #[test]
    fn empty_mask_gives_empty_skeleton() {
        assert!(skeletonize(&Grid::new(16, 16, false)).is_empty());
    }

    #[test]
    fn yokoi_counts() {
        // Isolated pixel and interior pixel are not simple; an end of a line is.
        assert_eq!(yokoi_8(&[false; 8]), 0);
        assert_eq!(yokoi_8(&[true; 8]), 0);
        let mut end = [false; 8];
        end[2] = true;
        assert_eq!(yokoi_8(&end), 1);
        // Middle of a vertical line joins two otherwise separate pieces.
        let mut mid = [false; 8];
        mid[0] = true;
        mid[4] = true;
        assert_eq!(yokoi_8(&mid), 2);
    }

    #[test]
    fn keeps_two_by_two_square_connected() {
        let mut m = Grid::new(6, 6, false);
        rect(&mut m, 2, 2, 4, 4);
        let s = skeletonize(&m);
        assert_eq!(s.mask().components_8(), 1);
        assert!(s.thick_blocks().is_empty());
    }

    #[test]
    fn five_pixel_bar_thins_to_a_row() {
        let mut m = Grid::new(40, 15, false);
        rect(&mut m, 5, 5, 35, 10);
        let s = skeletonize(&m);
        let pixels: Vec<Pixel> = s.pixels().collect();
        // One pixel per column, consecutive columns, rows near the bar axis.
        let xs: Vec<i64> = pixels.iter().map(|p| p.x).collect();
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), xs.len(), "{pixels:?}");
        assert_eq!(sorted.len() as i64, sorted[sorted.len() - 1] - sorted[0] + 1);
        assert!((5..=7).contains(&sorted[0]) && (32..=36).contains(&sorted[sorted.len() - 1]));
        assert!(pixels.iter().all(|p| (p.y - 7).abs() <= 2));
        assert_eq!(s.mask().components_8(), 1);
    }

    #[test]
    fn plus_of_wide_bars_has_one_degree_four_node() {
        let mut m = Grid::new(41, 41, false);
        rect(&mut m, 18, 2, 23, 39);
        rect(&mut m, 2, 18, 39, 23);
        let s = skeletonize(&m);
        let nodes: Vec<Pixel> = s.pixels().filter(|&p| s.degree(p) >= 4).collect();
        assert!(!nodes.is_empty());
        let c = Pixel::new(20, 20);
        assert!(nodes.iter().all(|p| (p.x - c.x).abs() <= 1 && (p.y - c.y).abs() <= 1), "{nodes:?}");
    }

    #[test]
    fn degree_counts_neighbours() {
        let mut m = Grid::new(7, 7, false);
        rect(&mut m, 3, 0, 4, 7);
        rect(&mut m, 0, 3, 7, 4);
        let s = skeletonize(&m);
        assert_eq!(s.degree(Pixel::new(3, 3)), 4);
        assert_eq!(s.degree(Pixel::new(0, 0)), 0);
    }
}
