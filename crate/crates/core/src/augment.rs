//! Stochastic training-time augmentation of RGB patches.
//!
//! Eleven operators run in a fixed order, each independently with its own
//! probability. Geometric operators resample bilinearly (labels by nearest
//! neighbour) and fill uncovered area with the background colour.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, RgbImage};
use crate::synthgen::BACKGROUND_RGB;
use crate::vesselgraph::{Patch, PixelClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    VerticalFlip,
    HorizontalFlip,
    CropPad,
    Scale,
    Translate,
    Rotate,
    Shear,
    Blur,
    Noise,
    FreqNoise,
    Color,
}

impl Operator {
    /// Application order.
    pub const ALL: [Operator; 11] = [
        Self::VerticalFlip,
        Self::HorizontalFlip,
        Self::CropPad,
        Self::Scale,
        Self::Translate,
        Self::Rotate,
        Self::Shear,
        Self::Blur,
        Self::Noise,
        Self::FreqNoise,
        Self::Color,
    ];

    /// The operator's key in [`AugmentConfig`].
    pub fn key(self) -> &'static str {
        match self {
            Self::VerticalFlip => "vertical_flip",
            Self::HorizontalFlip => "horizontal_flip",
            Self::CropPad => "crop_pad",
            Self::Scale => "scale",
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Shear => "shear",
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::FreqNoise => "freq_noise",
            Self::Color => "color",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub p: f64,
}

/// Each side is cropped (positive) or padded (negative) by up to
/// `max_fraction` of the patch size, then the result is resized back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPad {
    pub p: f64,
    pub max_fraction: f64,
}

/// Zoom about the centre by a factor drawn from `range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub p: f64,
    pub range: (f64, f64),
}

/// Shift by up to `max_fraction` of the size on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Translate {
    pub p: f64,
    pub max_fraction: f64,
}

/// Angle in degrees drawn from `degrees`, about the centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotate {
    pub p: f64,
    pub degrees: (f64, f64),
}

/// Horizontal shear angle in degrees drawn from `degrees`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shear {
    pub p: f64,
    pub degrees: (f64, f64),
}

/// Gaussian blur with σ (pixels) drawn from `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blur {
    pub p: f64,
    pub sigma: (f64, f64),
}

/// Per-pixel Gaussian noise with standard deviation (0–255 scale) drawn
/// from `std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub p: f64,
    pub std: (f64, f64),
}

/// Band-limited noise: a sum of `components` plane waves whose spatial
/// frequencies lie between `min_cycles` and `max_cycles` cycles per patch,
/// with random orientation and phase, scaled so the peak amplitude is at
/// most `amplitude` (0–255 scale). Added equally to all channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqNoise {
    pub p: f64,
    pub amplitude: f64,
    pub min_cycles: f64,
    pub max_cycles: f64,
    pub components: usize,
}

/// Hue rotation up to ±`hue_degrees` and saturation scaling by up to
/// ±`saturation` (relative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub p: f64,
    pub hue_degrees: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub vertical_flip: Flip,
    pub horizontal_flip: Flip,
    pub crop_pad: CropPad,
    pub scale: Scale,
    pub translate: Translate,
    pub rotate: Rotate,
    pub shear: Shear,
    pub blur: Blur,
    pub noise: Noise,
    pub freq_noise: FreqNoise,
    pub color: Color,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = 0.5;
        Self {
            vertical_flip: Flip { p },
            horizontal_flip: Flip { p },
            crop_pad: CropPad { p, max_fraction: 0.08 },
            scale: Scale { p, range: (0.9, 1.1) },
            translate: Translate { p, max_fraction: 0.06 },
            rotate: Rotate { p, degrees: (-25.0, 25.0) },
            shear: Shear { p, degrees: (-10.0, 10.0) },
            blur: Blur { p, sigma: (0.0, 0.8) },
            noise: Noise { p, std: (0.0, 6.0) },
            freq_noise: FreqNoise {
                p,
                amplitude: 10.0,
                min_cycles: 1.0,
                max_cycles: 6.0,
                components: 4,
            },
            color: Color {
                p,
                hue_degrees: 8.0,
                saturation: 0.15,
            },
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every operator off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        for op in Operator::ALL {
            *c.probability_mut(op) = 0.0;
        }
        c
    }

    /// Only `op`, always.
    pub fn only(op: Operator) -> Self {
        let mut c = Self::disabled();
        *c.probability_mut(op) = 1.0;
        c
    }

    pub fn probability(&self, op: Operator) -> f64 {
        match op {
            Operator::VerticalFlip => self.vertical_flip.p,
            Operator::HorizontalFlip => self.horizontal_flip.p,
            Operator::CropPad => self.crop_pad.p,
            Operator::Scale => self.scale.p,
            Operator::Translate => self.translate.p,
            Operator::Rotate => self.rotate.p,
            Operator::Shear => self.shear.p,
            Operator::Blur => self.blur.p,
            Operator::Noise => self.noise.p,
            Operator::FreqNoise => self.freq_noise.p,
            Operator::Color => self.color.p,
        }
    }

    pub fn probability_mut(&mut self, op: Operator) -> &mut f64 {
        match op {
            Operator::VerticalFlip => &mut self.vertical_flip.p,
            Operator::HorizontalFlip => &mut self.horizontal_flip.p,
            Operator::CropPad => &mut self.crop_pad.p,
            Operator::Scale => &mut self.scale.p,
            Operator::Translate => &mut self.translate.p,
            Operator::Rotate => &mut self.rotate.p,
            Operator::Shear => &mut self.shear.p,
            Operator::Blur => &mut self.blur.p,
            Operator::Noise => &mut self.noise.p,
            Operator::FreqNoise => &mut self.freq_noise.p,
            Operator::Color => &mut self.color.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("augment: {msg}")));
        for op in Operator::ALL {
            let p = self.probability(op);
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{op:?} probability {p} outside [0, 1]"));
            }
        }
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !ordered(self.scale.range) || self.scale.range.0 <= 0.0 {
            return bad(format!("scale range {:?} must be positive", self.scale.range));
        }
        if !ordered(self.blur.sigma) || self.blur.sigma.0 < 0.0 {
            return bad(format!("blur sigma {:?} must be >= 0", self.blur.sigma));
        }
        if !ordered(self.noise.std) || self.noise.std.0 < 0.0 {
            return bad(format!("noise std {:?} must be >= 0", self.noise.std));
        }
        if !ordered(self.rotate.degrees) || !ordered(self.shear.degrees) {
            return bad("rotate/shear ranges must be ordered".into());
        }
        if self.shear.degrees.0.abs() >= 90.0 || self.shear.degrees.1.abs() >= 90.0 {
            return bad("shear must stay below 90 degrees".into());
        }
        if !(0.0..0.5).contains(&self.crop_pad.max_fraction) || !(0.0..1.0).contains(&self.translate.max_fraction)
        {
            return bad("crop/translate fractions out of range".into());
        }
        let f = &self.freq_noise;
        if f.amplitude < 0.0 || f.min_cycles < 0.0 || f.min_cycles > f.max_cycles {
            return bad("freq_noise parameters out of range".into());
        }
        Ok(())
    }
}

/// Sum of the operator probabilities, the expected number of operators
/// applied to one patch.
pub fn expected_operator_count(cfg: &AugmentConfig) -> f64 {
    Operator::ALL.iter().map(|&op| cfg.probability(op)).sum()
}

/// Independent random stream for one sample of one epoch.
pub fn sample_stream(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x1_0000_0000).wrapping_add(index));
    rng
}

/// Working copy: three float planes plus labels.
struct Work {
    w: usize,
    h: usize,
    rgb: [Vec<f32>; 3],
    labels: Grid<PixelClass>,
}

impl Work {
    fn from_patch(p: &Patch) -> Self {
        let (w, h) = p.rgb.dims();
        let plane = |c: usize| p.rgb.data().iter().map(|px| px[c] as f32).collect();
        Self {
            w,
            h,
            rgb: [plane(0), plane(1), plane(2)],
            labels: p.labels.clone(),
        }
    }

    fn into_patch(self, origin: crate::raster::Pixel) -> Patch {
        let Work { w, h, rgb, labels } = self;
        let q = |v: f32| v.round().clamp(0.0, 255.0) as u8;
        let data = (0..w * h).map(|i| [q(rgb[0][i]), q(rgb[1][i]), q(rgb[2][i])]).collect();
        Patch {
            origin,
            labels,
            rgb: RgbImage::from_vec(w, h, data).expect("same size"),
        }
    }

    /// Resamples through `src`, which maps an output pixel to its source
    /// position.
    fn warp(&mut self, src: impl Fn(f64, f64) -> (f64, f64)) {
        let (w, h) = (self.w, self.h);
        let mut rgb = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
        let mut labels = Grid::new(w, h, PixelClass::Background);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = src(x as f64, y as f64);
                let (sx, sy) = (snap(sx), snap(sy));
                let i = y * w + x;
                for c in 0..3 {
                    rgb[c][i] = bilinear(&self.rgb[c], w, h, sx, sy, BACKGROUND_RGB[c] as f32);
                }
                let (nx, ny) = (sx.round(), sy.round());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    labels.set(x, y, *self.labels.get(nx as usize, ny as usize));
                }
            }
        }
        self.rgb = rgb;
        self.labels = labels;
    }

    fn center(&self) -> (f64, f64) {
        ((self.w as f64 - 1.0) / 2.0, (self.h as f64 - 1.0) / 2.0)
    }
}

/// Removes floating-point residue so exact integer positions stay exact.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64, fill: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            fill
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

fn gaussian_blur(work: &mut Work, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (work.w as isize, work.h as isize);
    for plane in work.rgb.iter_mut() {
        let mut tmp = vec![0f32; plane.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[(y * w + (x + k as isize - radius).clamp(0, w - 1)) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[((y + k as isize - radius).clamp(0, h - 1) * w + x) as usize])
                    .sum();
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Applies the operator pool to `patch`, returning the result and the
/// operators that fired, in order.
pub fn augment_logged(patch: &Patch, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Patch, Vec<Operator>) {
    let mut work = Work::from_patch(patch);
    let mut applied = Vec::new();
    let (wf, hf) = (work.w as f64, work.h as f64);
    for op in Operator::ALL {
        let p = cfg.probability(op);
        if p <= 0.0 || !rng.gen_bool(p.min(1.0)) {
            continue;
        }
        applied.push(op);
        let (cx, cy) = work.center();
        match op {
            Operator::VerticalFlip => work.warp(|x, y| (x, hf - 1.0 - y)),
            Operator::HorizontalFlip => work.warp(|x, y| (wf - 1.0 - x, y)),
            Operator::CropPad => {
                let m = cfg.crop_pad.max_fraction;
                let mut side = |len: f64| uniform(rng, (-m, m)) * len;
                let (l, r, t, b) = (side(wf), side(wf), side(hf), side(hf));
                let sx = (wf - l - r) / wf;
                let sy = (hf - t - b) / hf;
                work.warp(|x, y| (l + (x + 0.5) * sx - 0.5, t + (y + 0.5) * sy - 0.5));
            }
            Operator::Scale => {
                let s = uniform(rng, cfg.scale.range);
                work.warp(|x, y| (cx + (x - cx) / s, cy + (y - cy) / s));
            }
            Operator::Translate => {
                let m = cfg.translate.max_fraction;
                let tx = (uniform(rng, (-m, m)) * wf).round();
                let ty = (uniform(rng, (-m, m)) * hf).round();
                work.warp(|x, y| (x - tx, y - ty));
            }
            Operator::Rotate => {
                let a = uniform(rng, cfg.rotate.degrees) * PI / 180.0;
                let (s, c) = a.sin_cos();
                work.warp(|x, y| {
                    let (dx, dy) = (x - cx, y - cy);
                    (cx + c * dx + s * dy, cy - s * dx + c * dy)
                });
            }
            Operator::Shear => {
                let k = (uniform(rng, cfg.shear.degrees) * PI / 180.0).tan();
                work.warp(|x, y| (x - k * (y - cy), y));
            }
            Operator::Blur => {
                let sigma = uniform(rng, cfg.blur.sigma);
                gaussian_blur(&mut work, sigma);
            }
            Operator::Noise => {
                let std = uniform(rng, cfg.noise.std);
                if std > 0.0 {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for plane in work.rgb.iter_mut() {
                        for v in plane.iter_mut() {
                            *v += normal.sample(rng) as f32;
                        }
                    }
                }
            }
            Operator::FreqNoise => {
                let f = cfg.freq_noise;
                let n = f.components.max(1);
                let waves: Vec<(f64, f64, f64, f64)> = (0..n)
                    .map(|_| {
                        let cycles = uniform(rng, (f.min_cycles, f.max_cycles));
                        let theta = rng.gen_range(0.0..PI);
                        let phase = rng.gen_range(0.0..2.0 * PI);
                        let amp = rng.gen_range(0.0..=1.0) * f.amplitude / n as f64;
                        let k = 2.0 * PI * cycles / wf.max(hf);
                        (k * theta.cos(), k * theta.sin(), phase, amp)
                    })
                    .collect();
                for y in 0..work.h {
                    for x in 0..work.w {
                        let v: f64 = waves
                            .iter()
                            .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
                            .sum();
                        for plane in work.rgb.iter_mut() {
                            plane[y * work.w + x] += v as f32;
                        }
                    }
                }
            }
            Operator::Color => {
                let dh = uniform(rng, (-cfg.color.hue_degrees, cfg.color.hue_degrees)) as f32;
                let ds = 1.0 + uniform(rng, (-cfg.color.saturation, cfg.color.saturation)) as f32;
                for i in 0..work.w * work.h {
                    let clamp = |v: f32| v.clamp(0.0, 255.0);
                    let (r, g, b) = (clamp(work.rgb[0][i]), clamp(work.rgb[1][i]), clamp(work.rgb[2][i]));
                    let (h, s, v) = rgb_to_hsv(r, g, b);
                    let (r, g, b) = hsv_to_rgb(h + dh, (s * ds).clamp(0.0, 1.0), v);
                    work.rgb[0][i] = r;
                    work.rgb[1][i] = g;
                    work.rgb[2][i] = b;
                }
            }
        }
    }
    (work.into_patch(patch.origin), applied)
}

/// Applies the operator pool to `patch`. Output dimensions equal input
/// dimensions; the result depends only on `cfg` and the stream state.
pub fn augment(patch: &Patch, cfg: &AugmentConfig, rng: &mut impl Rng) -> Patch {
    augment_logged(patch, cfg, rng).0
}
