//! Tissue masking (annotation AND Otsu) and non-overlapping tile sampling.

use std::fmt;
use std::path::Path;

use image::RgbImage;
use num::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_to_string};
use crate::raster::Mask;
use crate::seeds::stream;
use crate::slide_io::Slide;
use crate::TILE_PX;

/// Fraction of a tile's pixels that must lie inside the tissue mask.
pub const MIN_TILE_COVERAGE: f64 = 0.9;

/// Rejection-sampling budget per requested tile.
pub const ATTEMPTS_PER_TILE: usize = 50;

/// Which information-ablation transform produced a tile's pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformTag {
    None,
    Rfl(f64),
    Mfl(u32),
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformTag::None => f.write_str("none"),
            TransformTag::Rfl(factor) => write!(f, "rfl({factor})"),
            TransformTag::Mfl(crop) => write!(f, "mfl({crop})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub pixels: RgbImage,
    pub pitch_um: f64,
    pub transform: TransformTag,
}

impl Tile {
    /// Wraps a 224x224 raster; panics on any other size.
    pub fn new(slide_id: impl Into<String>, x: u32, y: u32, pixels: RgbImage, pitch_um: f64) -> Self {
        assert_eq!(
            pixels.dimensions(),
            (TILE_PX, TILE_PX),
            "tiles are {TILE_PX}x{TILE_PX}"
        );
        Self {
            slide_id: slide_id.into(),
            x,
            y,
            pixels,
            pitch_um,
            transform: TransformTag::None,
        }
    }

    /// Cuts the tile with top-left `(x, y)` out of a slide.
    pub fn from_slide(slide: &Slide, x: u32, y: u32) -> Self {
        let view = image::imageops::crop_imm(&slide.pixels, x, y, TILE_PX, TILE_PX).to_image();
        Self::new(slide.id.clone(), x, y, view, slide.pitch_um)
    }

    pub fn with_pixels(&self, pixels: RgbImage, transform: TransformTag) -> Self {
        assert_eq!(pixels.dimensions(), (TILE_PX, TILE_PX));
        Self {
            slide_id: self.slide_id.clone(),
            x: self.x,
            y: self.y,
            pixels,
            pitch_um: self.pitch_um,
            transform,
        }
    }

    /// Stable identifier used in score dumps and on the wire.
    pub fn key(&self) -> String {
        format!("{}@{},{}:{}", self.slide_id, self.x, self.y, self.transform)
    }
}

#[derive(Clone, Debug)]
pub struct TissueMask {
    pub mask: Mask,
    pub threshold: u8,
}

/// Integer luma, `(299 R + 587 G + 114 B) / 1000`.
#[inline]
pub fn luma(p: [u8; 3]) -> u8 {
    ((299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2])) / 1000) as u8
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Returns the level `t` maximizing the between-class variance when the
/// classes are `[0, t]` and `[t + 1, 255]`; ties resolve to the smallest `t`.
/// Comparisons are exact: with `n0`, `s0` the count and first moment up to
/// `t`, the variance is proportional to `(s0 N - S n0)^2 / (n0 n1)`.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    if histogram.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u128 = histogram.iter().map(|&c| u128::from(c)).sum();
    let moment: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * u128::from(c))
        .sum();

    let mut best: Option<(u8, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (t, &c) in histogram.iter().enumerate().take(255) {
        n0 += u128::from(c);
        s0 += t as u128 * u128::from(c);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (a, b) = (s0 * total, moment * n0);
        let diff = BigUint::from(a.abs_diff(b));
        let num = &diff * &diff;
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t).ok_or(Error::DegenerateHistogram)
}

/// Tissue = annotated AND darker-or-equal to the Otsu level of the annotated
/// region's luma histogram. A missing annotation counts as the full frame.
pub fn build_tissue_mask(slide: &Slide) -> Result<TissueMask> {
    let (w, h) = slide.pixels.dimensions();
    let full;
    let annotation = match &slide.annotation {
        Some(a) => a,
        None => {
            full = Mask::new(w, h, true);
            &full
        }
    };
    let mut hist = [0u64; 256];
    for (px, &inside) in slide.pixels.pixels().zip(annotation.bits()) {
        if inside {
            hist[luma(px.0) as usize] += 1;
        }
    }
    let threshold = otsu_threshold(&hist)?;
    let bits = slide
        .pixels
        .pixels()
        .zip(annotation.bits())
        .map(|(px, &inside)| inside && luma(px.0) <= threshold)
        .collect();
    Ok(TissueMask {
        mask: Mask::from_bits(w, h, bits),
        threshold,
    })
}

fn coverage_ok(ii: &crate::raster::IntegralMask, x: u32, y: u32) -> bool {
    let need = (MIN_TILE_COVERAGE * f64::from(TILE_PX * TILE_PX)).ceil() as u64;
    ii.count_in(x, y, TILE_PX, TILE_PX) >= need
}

/// Rejection-samples `n` pairwise-disjoint tile positions, each at least 90%
/// inside the mask, within `50 n` draws.
pub fn sample_positions(mask: &Mask, n: usize, seed: u64) -> Result<Vec<(u32, u32)>> {
    let (w, h) = mask.dims();
    let insufficient = |placed| Error::InsufficientTissue {
        placed,
        requested: n,
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    if w < TILE_PX || h < TILE_PX {
        return Err(insufficient(0));
    }
    let ii = mask.integral();
    let mut rng = stream(seed);
    let (bucket_cols, bucket_rows) = (w.div_ceil(TILE_PX) as usize, h.div_ceil(TILE_PX) as usize);
    let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); bucket_cols * bucket_rows];
    let mut placed = Vec::with_capacity(n);

    for _ in 0..n.saturating_mul(ATTEMPTS_PER_TILE) {
        let x = rng.random_range(0..=w - TILE_PX);
        let y = rng.random_range(0..=h - TILE_PX);
        let (bx, by) = ((x / TILE_PX) as usize, (y / TILE_PX) as usize);
        let collides = (by.saturating_sub(1)..=(by + 1).min(bucket_rows - 1)).any(|yy| {
            (bx.saturating_sub(1)..=(bx + 1).min(bucket_cols - 1)).any(|xx| {
                buckets[yy * bucket_cols + xx]
                    .iter()
                    .any(|&(px, py)| px.abs_diff(x) < TILE_PX && py.abs_diff(y) < TILE_PX)
            })
        });
        if collides || !coverage_ok(&ii, x, y) {
            continue;
        }
        buckets[by * bucket_cols + bx].push((x, y));
        placed.push((x, y));
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(insufficient(placed.len()))
}

pub fn sample_tiles(mask: &TissueMask, slide: &Slide, n: usize, seed: u64) -> Result<Vec<Tile>> {
    assert_eq!(mask.mask.dims(), slide.pixels.dimensions(), "mask/slide dims");
    if n == 0 {
        return Err(Error::InsufficientTissue {
            placed: 0,
            requested: 0,
        });
    }
    Ok(sample_positions(&mask.mask, n, seed)?
        .into_iter()
        .map(|(x, y)| Tile::from_slide(slide, x, y))
        .collect())
}

/// Top-left corners of the aligned non-overlapping grid cells that satisfy
/// the coverage rule, in row-major order.
pub fn grid_positions(mask: &Mask) -> Vec<(u32, u32)> {
    let ii = mask.integral();
    let (cols, rows) = (mask.width() / TILE_PX, mask.height() / TILE_PX);
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * TILE_PX, r * TILE_PX);
            if coverage_ok(&ii, x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
}

/// Tile coordinate dump, `slide_id,x,y`.
pub fn write_tile_coords(path: &Path, coords: &[TileCoord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in coords {
        w.serialize(c).expect("csv into memory");
    }
    atomic_write(path, &w.into_inner().expect("csv flush"))
}

pub fn read_tile_coords(path: &Path) -> Result<Vec<TileCoord>> {
    let text = read_to_string(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::MalformedArtifact {
            what: "tile coordinate csv",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
