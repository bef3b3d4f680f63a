use super::{AVMap, PixelClass};
use crate::error::{Error, Result};
use crate::raster::Grid;

/// Reconciles a raw artery/vein classification with the vessel segmentation.
///
/// Non-vessel pixels become background. A vessel pixel left unlabelled takes
/// the majority label among the labelled vessel pixels at minimal Euclidean
/// distance from it, ties going to artery. Votes are read from the raw map
/// only, so the result does not depend on visiting order.
pub fn refine_av_map(raw_av: &AVMap, vessel_mask: &Grid<bool>) -> Result<AVMap> {
    if raw_av.labels.dims() != vessel_mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: raw_av.labels.dims(),
            actual: vessel_mask.dims(),
        });
    }
    let (w, h) = vessel_mask.dims();
    // A vote source is a vessel pixel carrying an A/V label.
    let source = Grid::from_fn(w, h, |x, y| {
        if *vessel_mask.get(x, y) {
            *raw_av.labels.get(x, y)
        } else {
            PixelClass::Background
        }
    });
    let labels = Grid::from_fn(w, h, |x, y| {
        if !*vessel_mask.get(x, y) {
            return PixelClass::Background;
        }
        match *source.get(x, y) {
            PixelClass::Background => nearest_majority(&source, x, y),
            c => c,
        }
    });
    Ok(AVMap {
        labels,
        vessel_mask: vessel_mask.clone(),
    })
}

fn nearest_majority(source: &Grid<PixelClass>, x: usize, y: usize) -> PixelClass {
    let (w, h) = source.dims();
    let (x, y) = (x as i64, y as i64);
    let max_k = w.max(h) as i64;
    let mut best = i64::MAX;
    let (mut arteries, mut veins) = (0usize, 0usize);
    for k in 1..=max_k {
        // Every pixel on the Chebyshev ring k is at squared distance >= k^2.
        if k * k > best {
            break;
        }
        for_ring(x, y, k, |px, py| {
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                return;
            }
            let c = *source.get(px as usize, py as usize);
            if c == PixelClass::Background {
                return;
            }
            let d2 = (px - x).pow(2) + (py - y).pow(2);
            if d2 < best {
                best = d2;
                arteries = 0;
                veins = 0;
            }
            if d2 == best {
                match c {
                    PixelClass::Artery => arteries += 1,
                    PixelClass::Vein => veins += 1,
                    PixelClass::Background => {}
                }
            }
        });
    }
    if arteries + veins == 0 {
        PixelClass::Background
    } else if arteries >= veins {
        PixelClass::Artery
    } else {
        PixelClass::Vein
    }
}

fn for_ring(cx: i64, cy: i64, k: i64, mut f: impl FnMut(i64, i64)) {
    for dx in -k..=k {
        f(cx + dx, cy - k);
        f(cx + dx, cy + k);
    }
    for dy in (-k + 1)..k {
        f(cx - k, cy + dy);
        f(cx + k, cy + dy);
    }
}
