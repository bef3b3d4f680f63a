//! Crossing-candidate detection on artery/vein vessel maps.
//!
//! The stages mirror the preprocessing half of the grading pipeline:
//!
//! 1. [`refine_av_map`] cleans a raw artery/vein pixel classification with the
//!    (more reliable) binary vessel segmentation.
//! 2. [`skeletonize`] thins the vessel mask to a 1-pixel-wide skeleton.
//! 3. [`detect_crossing_candidates`] finds artery pixels touching vein pixels
//!    near a skeleton crossing node, drops the optic cup zone and merges the
//!    surviving pixels into one candidate per crossing.
//! 4. [`extract_patches`] cuts fixed-size patches centred on the candidates.

mod detect;
mod refine;
mod skeleton;

pub use detect::{
    branch_degree, detect_crossing_candidates, extract_patches, CrossingCandidate, CupZone,
    DetectParams,
};
pub use refine::refine_av_map;
pub use skeleton::{skeletonize, Skeleton};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Pixel, RgbImage};

/// Per-pixel vessel class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PixelClass {
    #[default]
    Background,
    Artery,
    Vein,
}

impl PixelClass {
    /// Palette used for label rasters on disk: background black, artery red,
    /// vein blue.
    pub fn palette(self) -> [u8; 3] {
        match self {
            PixelClass::Background => [0, 0, 0],
            PixelClass::Artery => [255, 0, 0],
            PixelClass::Vein => [0, 0, 255],
        }
    }

    /// Inverse of [`PixelClass::palette`]. Pixels that are neither pure red
    /// nor pure blue decode by their dominant channel; dark pixels are
    /// background.
    pub fn from_rgb(rgb: [u8; 3]) -> Self {
        let [r, _, b] = rgb;
        if r < 128 && b < 128 {
            PixelClass::Background
        } else if r >= b {
            PixelClass::Artery
        } else {
            PixelClass::Vein
        }
    }

    pub fn is_vessel(self) -> bool {
        self != PixelClass::Background
    }
}

/// Artery/vein map: per-pixel labels plus the binary vessel segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AVMap {
    pub labels: Grid<PixelClass>,
    pub vessel_mask: Grid<bool>,
}

impl AVMap {
    pub fn new(labels: Grid<PixelClass>, vessel_mask: Grid<bool>) -> Result<Self> {
        if labels.dims() != vessel_mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: labels.dims(),
                actual: vessel_mask.dims(),
            });
        }
        Ok(Self {
            labels,
            vessel_mask,
        })
    }

    /// Map whose vessel mask is exactly the labelled pixels.
    pub fn from_labels(labels: Grid<PixelClass>) -> Self {
        let vessel_mask = labels.map(|c| c.is_vessel());
        Self {
            labels,
            vessel_mask,
        }
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn class_at(&self, p: Pixel) -> PixelClass {
        self.labels.at(p).copied().unwrap_or_default()
    }

    /// `true` when every labelled pixel is also a vessel pixel.
    pub fn is_consistent(&self) -> bool {
        self.labels
            .data()
            .iter()
            .zip(self.vessel_mask.data())
            .all(|(c, &v)| !c.is_vessel() || v)
    }

    /// Label raster rendered with [`PixelClass::palette`].
    pub fn to_palette_image(&self) -> RgbImage {
        self.labels.map(|c| c.palette())
    }

    /// Decodes a palette image; the vessel mask is every non-background pixel.
    pub fn from_palette_image(img: &RgbImage) -> Self {
        Self::from_labels(img.map(|&rgb| PixelClass::from_rgb(rgb)))
    }
}

/// Square image patch cut from a scene, with both the label crop and the
/// shaded RGB rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    /// Canvas coordinate of the patch's top-left pixel.
    pub origin: Pixel,
    pub labels: Grid<PixelClass>,
    pub rgb: RgbImage,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.labels.width()
    }

    /// Top-left corner for a `size`-wide window centred at `center`
    /// (`center - size / 2`, integer floor).
    pub fn origin_for(center: Pixel, size: usize) -> Pixel {
        let half = (size / 2) as i64;
        Pixel::new(center.x - half, center.y - half)
    }
}
