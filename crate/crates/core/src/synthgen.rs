//! Procedural artery/vein scenes with known crossings and severity grades.
//!
//! Arteries are drawn as cubic Bézier graphs `y = f(x)` spanning the canvas
//! left to right and veins as `x = g(y)` spanning it top to bottom. Slopes are
//! capped below one, so every artery meets every vein exactly once at a clean
//! transversal crossing, and vessels of the same kind never touch.
//!
//! Severity follows Scheie's grading as venular caliber narrowing next to the
//! overlying artery:
//!
//! | grade    | rendering                                         |
//! |----------|---------------------------------------------------|
//! | none     | full caliber                                      |
//! | mild     | both sides taper to [`MILD_CALIBER`]              |
//! | moderate | one side narrows to [`NARROWED_CALIBER`]          |
//! | severe   | both sides narrow to [`NARROWED_CALIBER`]         |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Pixel, RgbImage};
use crate::vesselgraph::{AVMap, CupZone, Patch, PixelClass};

/// Relative vein caliber next to the crossing for a mild grade.
pub const MILD_CALIBER: f64 = 0.72;
/// Relative vein caliber on a narrowed side (moderate and severe grades).
pub const NARROWED_CALIBER: f64 = 0.42;

/// Patient-reported counts per grade (none, mild, moderate, severe) used for
/// the default class priors.
pub const CLINICAL_GRADE_COUNTS: [u64; 4] = [1177, 816, 457, 57];

const MAX_PLACEMENT_ATTEMPTS: usize = 400;
const MAX_SLOPE: f64 = 0.35;

/// Arteriolosclerosis severity grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    None,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::None,
        Severity::Mild,
        Severity::Moderate,
        Severity::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::None => "none",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

/// Which vessel is drawn on top at a crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverVessel {
    Artery,
    Vein,
}

/// Knobs for one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas_size: (usize, usize),
    pub n_arteries: usize,
    pub n_veins: usize,
    /// Arteries take the lower half of the range, veins the upper half.
    pub vessel_width_range: (f64, f64),
    pub cup_center: Pixel,
    pub cup_radius: f64,
    /// Prior over (none, mild, moderate, severe) for artery-over crossings.
    pub severity_priors: [f64; 4],
    /// Probability that the artery runs above the vein at a crossing.
    pub artery_over_probability: f64,
    pub examinee_id: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let total: u64 = CLINICAL_GRADE_COUNTS.iter().sum();
        Self {
            seed: 0,
            canvas_size: (512, 512),
            n_arteries: 2,
            n_veins: 2,
            vessel_width_range: (5.0, 11.0),
            cup_center: Pixel::new(96, 256),
            cup_radius: 40.0,
            severity_priors: CLINICAL_GRADE_COUNTS.map(|c| c as f64 / total as f64),
            artery_over_probability: 0.6,
            examinee_id: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSceneSpec(m));
        let sum: f64 = self.severity_priors.iter().sum();
        if self.severity_priors.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!(
                "severity_priors must be non-negative and sum to 1, got {:?}",
                self.severity_priors
            ));
        }
        let (lo, hi) = self.vessel_width_range;
        if !(lo >= 2.0) || lo > hi {
            return bad(format!(
                "vessel_width_range must satisfy 2 <= min <= max, got ({lo}, {hi})"
            ));
        }
        if !(0.0..=1.0).contains(&self.artery_over_probability) {
            return bad("artery_over_probability must lie in [0, 1]".into());
        }
        if self.cup_radius < 0.0 {
            return bad("cup_radius must be non-negative".into());
        }
        Ok(())
    }

    pub fn cup(&self) -> CupZone {
        CupZone {
            center: self.cup_center,
            radius: self.cup_radius,
        }
    }

    fn margin(&self) -> f64 {
        (self.vessel_width_range.1 * 3.0).max(24.0)
    }

    fn min_gap(&self) -> f64 {
        self.vessel_width_range.1 * 4.0 + 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VesselKind {
    Artery,
    Vein,
}

/// Cubic Bézier graph: for arteries `y = B(x / width)`, for veins
/// `x = B(y / height)`, with Bernstein coefficients `control`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselCurve {
    pub kind: VesselKind,
    pub control: [f64; 4],
    pub width: f64,
    /// Length of the parameter axis (canvas width for arteries, height for veins).
    pub span: f64,
}

impl VesselCurve {
    /// Cross coordinate at axial coordinate `a`.
    pub fn eval(&self, a: f64) -> f64 {
        let t = (a / self.span).clamp(0.0, 1.0);
        let u = 1.0 - t;
        let [p0, p1, p2, p3] = self.control;
        u * u * u * p0 + 3.0 * u * u * t * p1 + 3.0 * u * t * t * p2 + t * t * t * p3
    }

    /// d(cross)/d(axial).
    pub fn slope(&self, a: f64) -> f64 {
        let t = (a / self.span).clamp(0.0, 1.0);
        let u = 1.0 - t;
        let [p0, p1, p2, p3] = self.control;
        3.0 * (u * u * (p1 - p0) + 2.0 * u * t * (p2 - p1) + t * t * (p3 - p2)) / self.span
    }

    /// Point in canvas coordinates at axial coordinate `a`.
    pub fn point(&self, a: f64) -> (f64, f64) {
        match self.kind {
            VesselKind::Artery => (a, self.eval(a)),
            VesselKind::Vein => (self.eval(a), a),
        }
    }

    /// Unit tangent in canvas coordinates.
    pub fn tangent(&self, a: f64) -> (f64, f64) {
        let s = self.slope(a);
        let n = (1.0 + s * s).sqrt();
        match self.kind {
            VesselKind::Artery => (1.0 / n, s / n),
            VesselKind::Vein => (s / n, 1.0 / n),
        }
    }

    fn max_abs_slope(&self) -> f64 {
        (0..=64)
            .map(|i| self.slope(self.span * i as f64 / 64.0).abs())
            .fold(0.0, f64::max)
    }
}

/// One artery/vein crossing known by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub position: Pixel,
    /// Sub-pixel intersection of the two centre lines.
    pub exact: (f64, f64),
    pub over_vessel: OverVessel,
    /// Defined only when the artery runs over the vein.
    pub severity: Option<Severity>,
    pub artery: usize,
    pub vein: usize,
    /// Sign of the narrowed side for moderate grades (+1 below, -1 above the artery).
    pub narrowed_side: i8,
    pub in_cup_zone: bool,
}

/// Construction ground truth for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub examinee_id: u64,
    pub canvas_size: (usize, usize),
    pub cup: CupZone,
    pub crossings: Vec<Crossing>,
    pub vessels: Vec<VesselCurve>,
}

impl GroundTruth {
    pub fn arteries(&self) -> impl Iterator<Item = &VesselCurve> {
        self.vessels.iter().filter(|v| v.kind == VesselKind::Artery)
    }

    pub fn veins(&self) -> impl Iterator<Item = &VesselCurve> {
        self.vessels.iter().filter(|v| v.kind == VesselKind::Vein)
    }
}

/// Generates a clean A/V map and its ground truth. Identical specs produce
/// identical outputs.
pub fn generate_scene(spec: &SceneSpec) -> Result<(AVMap, GroundTruth)> {
    spec.validate()?;
    let (w, h) = spec.canvas_size;
    let margin = spec.margin();
    let gap = spec.min_gap();
    for (count, extent, what) in [(spec.n_arteries, h, "arteries"), (spec.n_veins, w, "veins")] {
        let usable = extent as f64 - 2.0 * margin;
        if count > 0 && usable < count as f64 * gap {
            return Err(Error::Generation(format!(
                "canvas {w}x{h} too small for {count} {what}: need {:.0} px of usable extent \
                 ({gap:.0} px per vessel plus {margin:.0} px margins), have {usable:.0}",
                count as f64 * gap
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let arteries = sample_family(&mut rng, spec, VesselKind::Artery);
        let veins = sample_family(&mut rng, spec, VesselKind::Vein);
        if let Some(crossings) = place_crossings(spec, &arteries, &veins) {
            placed = Some((arteries, veins, crossings));
            break;
        }
    }
    let Some((arteries, veins, geometry)) = placed else {
        return Err(Error::Generation(format!(
            "could not place {} arteries and {} veins with {gap:.0} px separation and \
             cup keep-out on a {w}x{h} canvas after {MAX_PLACEMENT_ATTEMPTS} attempts",
            spec.n_arteries, spec.n_veins
        )));
    };

    let cdf: Vec<f64> = spec
        .severity_priors
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let cup = spec.cup();
    let crossings: Vec<Crossing> = geometry
        .into_iter()
        .map(|(ai, vi, (x, y))| {
            // Three draws per crossing regardless of outcome keep geometry and
            // grades aligned across different priors.
            let u_over: f64 = rng.gen();
            let u_grade: f64 = rng.gen();
            let side_below: bool = rng.gen();
            let over_vessel = if u_over < spec.artery_over_probability {
                OverVessel::Artery
            } else {
                OverVessel::Vein
            };
            let grade = cdf
                .iter()
                .position(|&c| u_grade < c)
                .and_then(Severity::from_index)
                .unwrap_or_else(|| {
                    // Floating slack at the top of the CDF: last class with mass.
                    let i = spec.severity_priors.iter().rposition(|&p| p > 0.0).unwrap_or(0);
                    Severity::ALL[i]
                });
            let position = Pixel::new(x.floor() as i64, y.floor() as i64);
            Crossing {
                position,
                exact: (x, y),
                over_vessel,
                severity: (over_vessel == OverVessel::Artery).then_some(grade),
                artery: ai,
                vein: vi,
                narrowed_side: if side_below { 1 } else { -1 },
                in_cup_zone: cup.contains_point(x, y),
            }
        })
        .collect();

    let labels = rasterize(spec, &arteries, &veins, &crossings);
    let truth = GroundTruth {
        seed: spec.seed,
        examinee_id: spec.examinee_id,
        canvas_size: spec.canvas_size,
        cup,
        crossings,
        vessels: arteries.into_iter().chain(veins).collect(),
    };
    Ok((AVMap::from_labels(labels), truth))
}

fn sample_family(rng: &mut ChaCha8Rng, spec: &SceneSpec, kind: VesselKind) -> Vec<VesselCurve> {
    let (w, h) = spec.canvas_size;
    let (count, span, extent) = match kind {
        VesselKind::Artery => (spec.n_arteries, w as f64, h as f64),
        VesselKind::Vein => (spec.n_veins, h as f64, w as f64),
    };
    let (lo, hi) = spec.vessel_width_range;
    let mid = 0.5 * (lo + hi);
    let (wlo, whi) = match kind {
        VesselKind::Artery => (lo, mid),
        VesselKind::Vein => (mid, hi),
    };
    let margin = spec.margin();
    let band = (extent - 2.0 * margin) / count.max(1) as f64;
    let amp = (0.35 * band).min(0.08 * span);
    (0..count)
        .map(|i| {
            let center = margin + (i as f64 + 0.5) * band + rng.gen_range(-0.15..=0.15) * band;
            let mut control = [0.0; 4];
            for c in &mut control {
                *c = (center + rng.gen_range(-amp..=amp)).clamp(margin, extent - margin);
            }
            let width = if whi > wlo { rng.gen_range(wlo..=whi) } else { wlo };
            VesselCurve {
                kind,
                control,
                width,
                span,
            }
        })
        .collect()
}

type CrossingGeometry = (usize, usize, (f64, f64));

fn place_crossings(
    spec: &SceneSpec,
    arteries: &[VesselCurve],
    veins: &[VesselCurve],
) -> Option<Vec<CrossingGeometry>> {
    if arteries
        .iter()
        .chain(veins)
        .any(|c| c.max_abs_slope() > MAX_SLOPE)
    {
        return None;
    }
    let gap = spec.min_gap();
    for family in [arteries, veins] {
        for (i, a) in family.iter().enumerate() {
            for b in &family[i + 1..] {
                let closest = (0..=128)
                    .map(|k| {
                        let t = a.span * k as f64 / 128.0;
                        (a.eval(t) - b.eval(t)).abs()
                    })
                    .fold(f64::INFINITY, f64::min);
                if closest < gap {
                    return None;
                }
            }
        }
    }
    let cup = spec.cup();
    let keep_out = 3.0 * spec.vessel_width_range.1;
    let mut out = Vec::new();
    for (ai, a) in arteries.iter().enumerate() {
        for (vi, v) in veins.iter().enumerate() {
            let (x, y) = intersect(a, v);
            let d = ((x - cup.center.x as f64).powi(2) + (y - cup.center.y as f64).powi(2)).sqrt();
            if (d - cup.radius).abs() < keep_out {
                return None;
            }
            out.push((ai, vi, (x, y)));
        }
    }
    Some(out)
}

/// Intersection of `y = f(x)` and `x = g(y)`: the unique root of
/// `g(f(x)) - x`, which is strictly decreasing because both slopes are below 1.
fn intersect(artery: &VesselCurve, vein: &VesselCurve) -> (f64, f64) {
    let h = |x: f64| vein.eval(artery.eval(x)) - x;
    let (mut lo, mut hi) = (0.0, artery.span);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    (x, artery.eval(x))
}

fn stamp(labels: &mut Grid<PixelClass>, cx: f64, cy: f64, radius: f64, class: PixelClass) {
    let (w, h) = labels.dims();
    let r2 = radius * radius;
    let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((cy + radius + 1.0).ceil().max(0.0) as usize).min(h);
    for py in y0..y1 {
        for px in x0..x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r2 {
                labels.set(px, py, class);
            }
        }
    }
}

/// Caliber multiplier of a vein at signed distance `t` (positive towards
/// larger `y`) from an artery-over crossing.
fn narrowing(
    grade: Severity,
    narrowed_side: i8,
    t: f64,
    footprint: f64,
    vein_width: f64,
) -> f64 {
    let side = if t >= 0.0 { 1 } else { -1 };
    let depth = match grade {
        Severity::None => return 1.0,
        Severity::Mild => MILD_CALIBER,
        Severity::Moderate if side == narrowed_side => NARROWED_CALIBER,
        Severity::Moderate => return 1.0,
        Severity::Severe => NARROWED_CALIBER,
    };
    let plateau = footprint + 0.8 * vein_width;
    let taper = 1.6 * vein_width;
    let d = t.abs();
    if d <= plateau {
        depth
    } else if d >= plateau + taper {
        1.0
    } else {
        depth + (1.0 - depth) * (d - plateau) / taper
    }
}

/// Half-length of the artery's footprint measured along the vein.
fn artery_footprint(artery: &VesselCurve, vein: &VesselCurve, at: (f64, f64)) -> f64 {
    let (ax, ay) = artery.tangent(at.0);
    let (vx, vy) = vein.tangent(at.1);
    let sin = (ax * vy - ay * vx).abs().max(0.2);
    0.5 * artery.width / sin
}

const SAMPLE_STEP: f64 = 0.25;

fn rasterize(
    spec: &SceneSpec,
    arteries: &[VesselCurve],
    veins: &[VesselCurve],
    crossings: &[Crossing],
) -> Grid<PixelClass> {
    let (w, h) = spec.canvas_size;
    let mut labels = Grid::new(w, h, PixelClass::Background);
    let steps = |span: f64| (span / SAMPLE_STEP).ceil() as usize;

    for (vi, vein) in veins.iter().enumerate() {
        let local: Vec<(&Crossing, f64)> = crossings
            .iter()
            .filter(|c| c.vein == vi && c.over_vessel == OverVessel::Artery)
            .map(|c| (c, artery_footprint(&arteries[c.artery], vein, c.exact)))
            .collect();
        for k in 0..=steps(vein.span) {
            let a = k as f64 * SAMPLE_STEP;
            let (x, y) = vein.point(a);
            let factor = local
                .iter()
                .map(|(c, foot)| {
                    let (cx, cy) = c.exact;
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    let t = if y >= cy { d } else { -d };
                    narrowing(c.severity.unwrap_or(Severity::None), c.narrowed_side, t, *foot, vein.width)
                })
                .fold(1.0, f64::min);
            stamp(&mut labels, x, y, 0.5 * vein.width * factor, PixelClass::Vein);
        }
    }
    for artery in arteries {
        for k in 0..=steps(artery.span) {
            let (x, y) = artery.point(k as f64 * SAMPLE_STEP);
            stamp(&mut labels, x, y, 0.5 * artery.width, PixelClass::Artery);
        }
    }
    for c in crossings.iter().filter(|c| c.over_vessel == OverVessel::Vein) {
        let vein = &veins[c.vein];
        let reach = 2.0 * artery_footprint(&arteries[c.artery], vein, c.exact) + vein.width;
        let (cx, cy) = c.exact;
        let a0 = ((cy - reach).max(0.0) / SAMPLE_STEP).floor() as usize;
        let a1 = ((cy + reach).min(vein.span) / SAMPLE_STEP).ceil() as usize;
        for k in a0..=a1 {
            let (x, y) = vein.point(k as f64 * SAMPLE_STEP);
            if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() <= reach {
                stamp(&mut labels, x, y, 0.5 * vein.width, PixelClass::Vein);
            }
        }
    }
    labels
}

/// Smallest horizontal vein run (in pixels) measured on rows within
/// `reach` of crossing `index`, following the vein centre line. Rows where
/// the vein centre is hidden under the artery are skipped.
pub fn vein_caliber_near(map: &AVMap, truth: &GroundTruth, index: usize, reach: f64) -> Option<usize> {
    let c = truth.crossings.get(index)?;
    let vein = truth.veins().nth(c.vein)?;
    let cy = c.exact.1;
    let w = map.width() as i64;
    let mut best: Option<usize> = None;
    let y0 = (cy - reach).floor() as i64;
    let y1 = (cy + reach).ceil() as i64;
    for y in y0..=y1 {
        if y < 0 || y >= map.height() as i64 {
            continue;
        }
        let x = vein.eval(y as f64 + 0.5).floor() as i64;
        if map.class_at(Pixel::new(x, y)) != PixelClass::Vein {
            continue;
        }
        let mut l = x;
        while l > 0 && map.class_at(Pixel::new(l - 1, y)) == PixelClass::Vein {
            l -= 1;
        }
        let mut r = x;
        while r + 1 < w && map.class_at(Pixel::new(r + 1, y)) == PixelClass::Vein {
            r += 1;
        }
        let run = (r - l + 1) as usize;
        best = Some(best.map_or(run, |b| b.min(run)));
    }
    best
}

/// Simulates an imperfect A/V pixel classifier: a fraction `rate` of vessel
/// pixels lose their label, and `rate / 10` of background pixels receive a
/// random one. The vessel mask is left exact.
pub fn corrupt_labels(map: &AVMap, rate: f64, seed: u64) -> AVMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe_15c0_ffee);
    let labels = map.labels.map(|&c| {
        let u: f64 = rng.gen();
        let pick: bool = rng.gen();
        if c.is_vessel() {
            if u < rate {
                PixelClass::Background
            } else {
                c
            }
        } else if u < rate / 10.0 {
            if pick {
                PixelClass::Artery
            } else {
                PixelClass::Vein
            }
        } else {
            c
        }
    });
    AVMap {
        labels,
        vessel_mask: map.vessel_mask.clone(),
    }
}

/// Base fundus background colour, also used to pad patches beyond the canvas.
pub const BACKGROUND_RGB: [u8; 3] = [196, 98, 52];
const ARTERY_RGB: [f64; 3] = [214.0, 58.0, 42.0];
const VEIN_RGB: [f64; 3] = [118.0, 26.0, 44.0];

fn hash2(x: i64, y: i64) -> u64 {
    let mut z = (x as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise(x: i64, y: i64) -> f64 {
    (hash2(x, y) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Shaded colour of canvas pixel `p`. A pure function of the map and the
/// coordinate, so crops agree with a full-canvas rendering.
fn shade(map: &AVMap, p: Pixel) -> [u8; 3] {
    let fx = p.x as f64;
    let fy = p.y as f64;
    let field = 0.5 * (fx * 0.021).sin() * (fy * 0.017).cos() + 0.5 * ((fx + fy) * 0.009).sin();
    let grain = noise(p.x, p.y);
    let bg = [
        BACKGROUND_RGB[0] as f64 + 14.0 * field + 10.0 * grain,
        BACKGROUND_RGB[1] as f64 + 9.0 * field + 8.0 * grain,
        BACKGROUND_RGB[2] as f64 + 5.0 * field + 6.0 * grain,
    ];
    let class = map.class_at(p);
    let rgb = match class {
        PixelClass::Background => bg,
        PixelClass::Artery | PixelClass::Vein => {
            let base = if class == PixelClass::Artery {
                ARTERY_RGB
            } else {
                VEIN_RGB
            };
            // Fraction of the 5x5 window with the same class darkens the core
            // and softens the rim.
            let mut same = 0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    if map.class_at(Pixel::new(p.x + dx, p.y + dy)) == class {
                        same += 1;
                    }
                }
            }
            let core = same as f64 / 25.0;
            let mix = 0.55 + 0.45 * core;
            let mut out = [0.0; 3];
            for i in 0..3 {
                out[i] = mix * base[i] + (1.0 - mix) * bg[i] + 8.0 * grain;
            }
            out
        }
    };
    rgb.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// `size × size` crop centred at `center` (top-left at `center - size / 2`)
/// with labels and shaded RGB; area beyond the canvas is background.
pub fn render_patch(map: &AVMap, center: Pixel, size: usize) -> Patch {
    let origin = Patch::origin_for(center, size);
    let labels = map
        .labels
        .crop(origin, (size, size), PixelClass::Background);
    let rgb = Grid::from_fn(size, size, |x, y| {
        let p = Pixel::new(origin.x + x as i64, origin.y + y as i64);
        if map.labels.contains(p) {
            shade(map, p)
        } else {
            BACKGROUND_RGB
        }
    });
    Patch {
        origin,
        labels,
        rgb,
    }
}

/// Full-canvas shaded rendering.
pub fn render_scene_rgb(map: &AVMap) -> RgbImage {
    Grid::from_fn(map.width(), map.height(), |x, y| {
        shade(map, Pixel::new(x as i64, y as i64))
    })
}
