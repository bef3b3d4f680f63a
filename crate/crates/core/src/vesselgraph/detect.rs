use serde::{Deserialize, Serialize};

use super::{AVMap, Patch, PixelClass, Skeleton};
use crate::raster::{Pixel, NEIGHBORS_8};
use crate::synthgen::render_patch;

/// Optic-cup exclusion disc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CupZone {
    pub center: Pixel,
    pub radius: f64,
}

impl CupZone {
    /// `true` when `p` lies within the cup radius (inclusive).
    pub fn contains(&self, p: Pixel) -> bool {
        p.dist(self.center) <= self.radius
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.x as f64;
        let dy = y - self.center.y as f64;
        (dx * dx + dy * dy).sqrt() <= self.radius
    }
}

/// Detection knobs. Distances are in pixels at the canvas they were built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    /// Maximum distance between an artery/vein contact pixel and a skeleton
    /// crossing node.
    pub node_radius: f64,
    /// Chebyshev radius of the ring on which skeleton branches are counted.
    pub ring_radius: i64,
    /// Contact pixels closer than this are merged into one candidate.
    pub merge_distance: f64,
    pub patch_size: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self::for_canvas(512, 64)
    }
}

impl DetectParams {
    /// Defaults for a canvas `width` pixels wide; distances scale linearly
    /// from their 512-pixel values.
    pub fn for_canvas(width: usize, patch_size: usize) -> Self {
        let s = width as f64 / 512.0;
        Self {
            node_radius: 5.0 * s,
            ring_radius: (10.0 * s).round().max(2.0) as i64,
            merge_distance: 10.0 * s,
            patch_size,
        }
    }
}

/// A detected crossing location with its patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingCandidate {
    pub center: Pixel,
    pub in_cup_zone: bool,
    /// Largest branch count among the skeleton crossing nodes supporting
    /// this candidate.
    pub skeleton_degree: usize,
    /// Number of artery/vein contact pixels merged into the candidate.
    pub support: usize,
    pub patch: Patch,
}

/// Number of distinct skeleton branches crossing the square ring of
/// Chebyshev radius `ring` around `p`.
pub fn branch_degree(skel: &Skeleton, p: Pixel, ring: i64) -> usize {
    if ring <= 0 {
        return skel.degree(p) as usize;
    }
    let ring_px = square_ring(p, ring);
    let on: Vec<bool> = ring_px.iter().map(|&q| skel.contains(q)).collect();
    let n = on.len();
    if on.iter().all(|&v| v) {
        return 1;
    }
    // Count runs of consecutive on-pixels, cyclically.
    (0..n).filter(|&i| on[i] && !on[(i + n - 1) % n]).count()
}

fn square_ring(c: Pixel, k: i64) -> Vec<Pixel> {
    let mut out = Vec::with_capacity(8 * k as usize);
    for dx in -k..k {
        out.push(Pixel::new(c.x + dx, c.y - k));
    }
    for dy in -k..k {
        out.push(Pixel::new(c.x + k, c.y + dy));
    }
    for dx in (-k + 1..=k).rev() {
        out.push(Pixel::new(c.x + dx, c.y + k));
    }
    for dy in (-k + 1..=k).rev() {
        out.push(Pixel::new(c.x - k, c.y + dy));
    }
    out
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Finds crossing candidates on a refined A/V map.
///
/// A contact pixel is an artery pixel 8-adjacent to a vein pixel, outside the
/// cup zone, with a skeleton crossing node (a junction pixel whose ring shows
/// at least four branches) within `node_radius`. Contact pixels are grouped
/// by single linkage at `merge_distance`, and groups that lean on the same
/// crossing node (nodes within `ring_radius` of each other) are joined; every group yields one candidate at its
/// centroid. Results are sorted by `(y, x)`.
pub fn detect_crossing_candidates(
    map: &AVMap,
    skel: &Skeleton,
    cup: CupZone,
    params: &DetectParams,
) -> Vec<CrossingCandidate> {
    let nodes: Vec<(Pixel, usize)> = skel
        .pixels()
        .filter(|&q| skel.degree(q) >= 3)
        .filter_map(|q| {
            let d = branch_degree(skel, q, params.ring_radius);
            (d >= 4).then_some((q, d))
        })
        .collect();
    if nodes.is_empty() {
        return Vec::new();
    }

    let r2 = params.node_radius * params.node_radius;
    let mut contacts: Vec<(Pixel, Vec<usize>)> = Vec::new();
    for (x, y, &c) in map.labels.iter_xy() {
        if c != PixelClass::Artery {
            continue;
        }
        let p = Pixel::new(x as i64, y as i64);
        let touches_vein = NEIGHBORS_8
            .iter()
            .any(|(dx, dy)| map.class_at(Pixel::new(p.x + dx, p.y + dy)) == PixelClass::Vein);
        if !touches_vein || cup.contains(p) {
            continue;
        }
        let near: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, (q, _))| (q.dist2(p) as f64) <= r2)
            .map(|(i, _)| i)
            .collect();
        if !near.is_empty() {
            contacts.push((p, near));
        }
    }

    // Union-find over contacts followed by nodes.
    let nc = contacts.len();
    let mut uf = UnionFind::new(nc + nodes.len());
    let d2 = params.merge_distance * params.merge_distance;
    for i in 0..nc {
        for j in (i + 1)..nc {
            if (contacts[i].0.dist2(contacts[j].0) as f64) <= d2 {
                uf.union(i, j);
            }
        }
        for &k in &contacts[i].1 {
            uf.union(i, nc + k);
        }
    }
    // Nodes of one crossing sit inside each other's branch ring.
    let ring2 = (params.ring_radius * params.ring_radius) as f64;
    for a in 0..nodes.len() {
        for b in (a + 1)..nodes.len() {
            if (nodes[a].0.dist2(nodes[b].0) as f64) <= ring2 {
                uf.union(nc + a, nc + b);
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..nc {
        groups.entry(uf.find(i)).or_default().push(i);
    }

    let mut out: Vec<CrossingCandidate> = groups
        .values()
        .filter_map(|members| {
            let n = members.len() as f64;
            let sx: f64 = members.iter().map(|&i| contacts[i].0.x as f64).sum();
            let sy: f64 = members.iter().map(|&i| contacts[i].0.y as f64).sum();
            let center = Pixel::new((sx / n).round() as i64, (sy / n).round() as i64);
            if cup.contains(center) {
                return None;
            }
            let degree = members
                .iter()
                .flat_map(|&i| contacts[i].1.iter().map(|&k| nodes[k].1))
                .max()
                .unwrap_or(0);
            Some(CrossingCandidate {
                center,
                in_cup_zone: false,
                skeleton_degree: degree,
                support: members.len(),
                patch: render_patch(map, center, params.patch_size),
            })
        })
        .collect();
    out.sort_by_key(|c| (c.center.y, c.center.x));
    out
}

/// One patch per candidate outside the cup zone, centred on it and padded
/// with background at the canvas border.
pub fn extract_patches(source: &AVMap, candidates: &[CrossingCandidate], size: usize) -> Vec<Patch> {
    candidates
        .iter()
        .filter(|c| !c.in_cup_zone)
        .map(|c| render_patch(source, c.center, size))
        .collect()
}
