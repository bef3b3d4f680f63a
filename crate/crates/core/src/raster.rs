//! Dense 2-D rasters and integer pixel coordinates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Integer pixel coordinate. `x` grows to the right, `y` grows downwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub x: i64,
    pub y: i64,
}

impl Pixel {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Pixel) -> i64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Pixel) -> f64 {
        (self.dist2(other) as f64).sqrt()
    }
}

/// Offsets of the 8-neighbourhood, clockwise starting north (P2..P9 in the
/// usual thinning notation).
pub const NEIGHBORS_8: [(i64, i64); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

/// Row-major raster of `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value at `p`, or `None` outside the raster.
    pub fn at(&self, p: Pixel) -> Option<&T> {
        self.contains(p).then(|| self.get(p.x as usize, p.y as usize))
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Iterates `(x, y, &value)` in row-major order.
    pub fn iter_xy(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i % w, i / w, v))
    }
}

impl<T: Clone> Grid<T> {
    /// `size.0 × size.1` window whose top-left corner is `origin`; cells
    /// outside the raster take `fill`.
    pub fn crop(&self, origin: Pixel, size: (usize, usize), fill: T) -> Grid<T> {
        Grid::from_fn(size.0, size.1, |x, y| {
            self.at(Pixel::new(origin.x + x as i64, origin.y + y as i64))
                .cloned()
                .unwrap_or_else(|| fill.clone())
        })
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `true` at `p`; outside the raster is `false`.
    pub fn on(&self, p: Pixel) -> bool {
        self.at(p).copied().unwrap_or(false)
    }

    /// Number of 8-connected components of `true` cells.
    pub fn components_8(&self) -> usize {
        let mut seen = Grid::new(self.width, self.height, false);
        let mut count = 0;
        let mut stack = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !*self.get(x, y) || *seen.get(x, y) {
                    continue;
                }
                count += 1;
                seen.set(x, y, true);
                stack.push(Pixel::new(x as i64, y as i64));
                while let Some(p) = stack.pop() {
                    for (dx, dy) in NEIGHBORS_8 {
                        let q = Pixel::new(p.x + dx, p.y + dy);
                        if self.on(q) && !seen.on(q) {
                            seen.set(q.x as usize, q.y as usize, true);
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }
}

/// 8-bit RGB raster.
pub type RgbImage = Grid<[u8; 3]>;

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let flat: Vec<u8> = img.data().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, flat)
        .expect("buffer length matches dimensions");
    crate::error::create_file(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads any PNG as 8-bit RGB.
pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data).expect("decoded buffer matches dimensions"))
}

/// Maps values in `[0, 1]` to a blue-to-red ramp.
pub fn heat_to_rgb(heat: &Grid<f64>) -> RgbImage {
    heat.map(|&v| {
        let v = v.clamp(0.0, 1.0);
        let r = (255.0 * v.min(0.5) * 2.0).round() as u8;
        let b = (255.0 * (1.0 - v).min(0.5) * 2.0).round() as u8;
        let g = (255.0 * (1.0 - (2.0 * v - 1.0).abs())).round() as u8;
        [r, g, b]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let g: RgbImage = Grid::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 70, 9]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        save_png(&g, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), g);
    }

    #[test]
    fn crop_pads_outside() {
        let g = Grid::from_fn(4, 4, |x, y| (x + 10 * y) as i32);
        let c = g.crop(Pixel::new(-1, -1), (3, 3), -7);
        assert_eq!(c.data(), &[-7, -7, -7, -7, 0, 1, -7, 10, 11]);
    }

    #[test]
    fn counts_diagonal_as_connected() {
        let mut g = Grid::new(5, 5, false);
        g.set(0, 0, true);
        g.set(1, 1, true);
        g.set(4, 4, true);
        assert_eq!(g.components_8(), 2);
    }
}
