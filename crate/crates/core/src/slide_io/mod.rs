//! Slides, dataset manifests and the synthetic phantom generator.

mod manifest;
mod phantom;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::TILE_PX;

pub use manifest::{load_manifest, CaseRecord, DatasetManifest};
pub use phantom::{
    generate_phantom, load_truth, phantom_cases, render_phantom_slide, PhantomCase, PhantomSlide, PhantomSpec,
    PHANTOM_ANNOTATION_MARGIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    MetPos,
    MetNeg,
}

impl Label {
    pub fn is_pos(self) -> bool {
        self == Label::MetPos
    }

    /// Binary encoding used for training targets and on the wire.
    pub fn as_bit(self) -> u8 {
        match self {
            Label::MetPos => 1,
            Label::MetNeg => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Label::MetPos),
            0 => Some(Label::MetNeg),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::MetPos => "MetPos",
            Label::MetNeg => "MetNeg",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "MetPos" => Ok(Label::MetPos),
            "MetNeg" => Ok(Label::MetNeg),
            other => Err(other.to_string()),
        }
    }
}

/// A slide-like raster with its physical sampling and case label.
#[derive(Clone, Debug)]
pub struct Slide {
    pub id: String,
    pub pixels: RgbImage,
    pub pitch_um: f64,
    pub label: Label,
    pub annotation: Option<Mask>,
}

impl Slide {
    pub fn new(
        id: impl Into<String>,
        pixels: RgbImage,
        pitch_um: f64,
        label: Label,
        annotation: Option<Mask>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidSlide {
            id: id.clone(),
            reason,
        };
        if pixels.width() < TILE_PX || pixels.height() < TILE_PX {
            return Err(invalid(format!(
                "{}x{} is smaller than one {TILE_PX}px tile",
                pixels.width(),
                pixels.height()
            )));
        }
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(invalid(format!("pitch_um {pitch_um} must be positive")));
        }
        if let Some(mask) = &annotation {
            if mask.dims() != pixels.dimensions() {
                return Err(invalid(format!(
                    "annotation {:?} does not match pixels {:?}",
                    mask.dims(),
                    pixels.dimensions()
                )));
            }
        }
        Ok(Self {
            id,
            pixels,
            pitch_um,
            label,
            annotation,
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}
