//! Per-tile length-scale sensitivity maps.
//!
//! Each grid tile is pushed through a sub-ladder of levels, scored by the
//! model trained for each level, and the signed correctness (score toward
//! the true class) is regressed on length by least squares. Slopes are
//! normalized per slide by the largest magnitude.

use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_to_string};
use crate::predictor::{ModelHandle, TileScorer};
use crate::raster::Mask;
use crate::scalar::{cast, Float};
use crate::scale_transforms::{apply_rfl, Axis, LevelLadder};
use crate::slide_io::{Label, Slide};
use crate::stain_norm::{normalize_to_reference, REFERENCE_BASIS};
use crate::tiling::{grid_positions, Tile};
use crate::TILE_PX;

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const REGION_K: usize = 5;
/// Overlay thumbnail pixels per 224 px grid cell.
pub const OVERLAY_CELL_PX: u32 = 16;
pub const WARM: [u8; 3] = [255, 140, 0];
pub const COOL: [u8; 3] = [30, 100, 255];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeCell {
    pub col: usize,
    pub row: usize,
    pub x: u32,
    pub y: u32,
    pub raw_slope: f64,
    pub norm_slope: f64,
    pub correct: bool,
    pub sensitive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeMap {
    pub slide_id: String,
    pub axis: Axis,
    pub epsilon: f64,
    pub cols: usize,
    pub rows: usize,
    /// Side of one cell in slide pixels.
    pub cell_px: u32,
    /// Populated cells in row-major order.
    pub cells: Vec<SlopeCell>,
}

/// Least-squares slope of `ys` on `xs`; 0 when x has no spread.
pub fn least_squares_slope<T: Float>(xs: &[T], ys: &[T]) -> T {
    assert_eq!(xs.len(), ys.len(), "x and y lengths");
    let n: T = cast(xs.len() as f64);
    if xs.is_empty() {
        return T::zero();
    }
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (x, y) in xs.iter().zip(ys) {
        sxy += (*x - mx) * (*y - my);
        sxx += (*x - mx) * (*x - mx);
    }
    if sxx == T::zero() {
        T::zero()
    } else {
        sxy / sxx
    }
}

/// Score toward the true class.
pub fn signed_correctness(score: f64, label: Label) -> f64 {
    if label.is_pos() {
        score
    } else {
        1.0 - score
    }
}

/// Levels used for per-tile slopes: every level from the first (identity
/// for RFL, smallest crop for MFL) up to the characteristic length, at
/// least two. Past the break the matched models are near chance and pull
/// every tile toward 0.5, which hides which tiles carried the signal.
pub fn sub_ladder(ladder: &LevelLadder, characteristic_um: f64) -> Vec<usize> {
    let n = ladder.levels.iter().take_while(|l| l.length_um <= characteristic_um).count();
    (0..n.clamp(2, ladder.len().max(2))).collect()
}

fn check_models(ladder: &LevelLadder, models: &[ModelHandle]) -> Result<()> {
    if models.len() != ladder.len() {
        return Err(Error::LadderModelMismatch(format!(
            "{} models for a {}-level ladder",
            models.len(),
            ladder.len()
        )));
    }
    for (i, m) in models.iter().enumerate() {
        if m.level.is_some_and(|l| l != i) || m.axis.is_some_and(|a| a != ladder.axis) {
            return Err(Error::LadderModelMismatch(format!(
                "model {} sits at ladder position {i} but was trained for {:?} level {:?}",
                m.id, m.axis, m.level
            )));
        }
    }
    Ok(())
}

/// Raw slope for one tile. `models` holds one model per ladder level.
pub fn tile_slope(
    scorer: &dyn TileScorer,
    tile: &Tile,
    ladder: &LevelLadder,
    models: &[ModelHandle],
    levels: &[usize],
    label: Label,
) -> Result<f64> {
    check_models(ladder, models)?;
    let mut xs = Vec::with_capacity(levels.len());
    let mut ys = Vec::with_capacity(levels.len());
    for &l in levels {
        let t = ladder.apply(l, tile)?;
        xs.push(ladder.level(l)?.length_um);
        ys.push(signed_correctness(scorer.score(&models[l], &t)?, label));
    }
    Ok(least_squares_slope(&xs, &ys))
}

/// Fills `norm_slope` and `sensitive` from the raw slopes.
pub fn normalize_cells(cells: &mut [SlopeCell], epsilon: f64) {
    let max = cells.iter().map(|c| c.raw_slope.abs()).fold(0.0, f64::max);
    for c in cells {
        c.norm_slope = if max > 0.0 { c.raw_slope / max } else { 0.0 };
        c.sensitive = c.norm_slope.abs() >= epsilon;
    }
}

pub struct MapRequest<'a> {
    pub slide: &'a Slide,
    pub mask: &'a Mask,
    pub ladder: &'a LevelLadder,
    /// One model per ladder level.
    pub models: &'a [ModelHandle],
    pub levels: &'a [usize],
    pub epsilon: f64,
    pub threshold: f64,
    pub stain_norm: bool,
}

pub fn build_slope_map(scorer: &dyn TileScorer, req: &MapRequest<'_>) -> Result<SlopeMap> {
    check_models(req.ladder, req.models)?;
    let identity = &req.models[req.ladder.identity_index()];
    let label = req.slide.label;
    let mut cells = grid_positions(req.mask)
        .par_iter()
        .map(|&(x, y)| -> Result<SlopeCell> {
            let mut tile = Tile::from_slide(req.slide, x, y);
            if req.stain_norm {
                if let Ok(t) = normalize_to_reference(&tile, &REFERENCE_BASIS) {
                    tile = t;
                }
            }
            let raw_slope = tile_slope(scorer, &tile, req.ladder, req.models, req.levels, label)?;
            let correct = (scorer.score(identity, &tile)? >= req.threshold) == label.is_pos();
            Ok(SlopeCell {
                col: (x / TILE_PX) as usize,
                row: (y / TILE_PX) as usize,
                x,
                y,
                raw_slope,
                norm_slope: 0.0,
                correct,
                sensitive: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_cells(&mut cells, req.epsilon);
    Ok(SlopeMap {
        slide_id: req.slide.id.clone(),
        axis: req.ladder.axis,
        epsilon: req.epsilon,
        cols: (req.slide.width() / TILE_PX) as usize,
        rows: (req.slide.height() / TILE_PX) as usize,
        cell_px: TILE_PX,
        cells,
    })
}

/// Merges `k x k` blocks of cells: raw slope = mean of populated members,
/// correctness = strict majority, then renormalized.
pub fn concat_regional_map(map: &SlopeMap, k: usize) -> Result<SlopeMap> {
    if k == 0 || map.cols < k || map.rows < k {
        return Err(Error::GridTooSmall {
            cols: map.cols,
            rows: map.rows,
            k,
        });
    }
    let (rc, rr) = (map.cols.div_ceil(k), map.rows.div_ceil(k));
    let mut sum = vec![0.0; rc * rr];
    let mut count = vec![0usize; rc * rr];
    let mut correct = vec![0usize; rc * rr];
    for c in &map.cells {
        let i = (c.row / k) * rc + c.col / k;
        sum[i] += c.raw_slope;
        count[i] += 1;
        correct[i] += usize::from(c.correct);
    }
    let side = map.cell_px * k as u32;
    let mut cells: Vec<SlopeCell> = (0..rc * rr)
        .filter(|&i| count[i] > 0)
        .map(|i| {
            let (col, row) = (i % rc, i / rc);
            SlopeCell {
                col,
                row,
                x: col as u32 * side,
                y: row as u32 * side,
                raw_slope: sum[i] / count[i] as f64,
                norm_slope: 0.0,
                correct: correct[i] * 2 > count[i],
                sensitive: false,
            }
        })
        .collect();
    normalize_cells(&mut cells, map.epsilon);
    Ok(SlopeMap {
        slide_id: map.slide_id.clone(),
        axis: map.axis,
        epsilon: map.epsilon,
        cols: rc,
        rows: rr,
        cell_px: side,
        cells,
    })
}

/// Box-averaged thumbnail at `OVERLAY_CELL_PX` pixels per 224 px.
pub fn thumbnail(slide: &Slide) -> RgbImage {
    let step = TILE_PX / OVERLAY_CELL_PX;
    let (w, h) = (slide.width() / step, slide.height() / step);
    RgbImage::from_fn(w, h, |tx, ty| {
        let mut acc = [0u32; 3];
        for y in ty * step..(ty + 1) * step {
            for x in tx * step..(tx + 1) * step {
                let p = slide.pixels.get_pixel(x, y).0;
                for c in 0..3 {
                    acc[c] += u32::from(p[c]);
                }
            }
        }
        let n = step * step;
        Rgb(acc.map(|a| ((a + n / 2) / n) as u8))
    })
}

/// Warm over sensitive correct cells, cool over sensitive incorrect ones,
/// untouched elsewhere; alpha is |normalized slope|.
pub fn render_overlay(slide: &Slide, map: &SlopeMap) -> RgbImage {
    let mut img = thumbnail(slide);
    let step = TILE_PX / OVERLAY_CELL_PX;
    for c in map.cells.iter().filter(|c| c.sensitive) {
        let colour = if c.correct { WARM } else { COOL };
        let a = c.norm_slope.abs().min(1.0);
        let (x0, y0) = (c.x / step, c.y / step);
        let (x1, y1) = (((c.x + map.cell_px) / step).min(img.width()), ((c.y + map.cell_px) / step).min(img.height()));
        for y in y0..y1 {
            for x in x0..x1 {
                let p = img.get_pixel_mut(x, y);
                for ch in 0..3 {
                    let v = (1.0 - a) * f64::from(p.0[ch]) + a * f64::from(colour[ch]);
                    p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    img
}

/// (original, RFL-degraded, difference + 128) for one tile.
pub fn residual_detail(tile: &Tile, f_char: f64) -> Result<(RgbImage, RgbImage, RgbImage)> {
    let degraded = apply_rfl(tile, f_char)?;
    let diff = RgbImage::from_fn(TILE_PX, TILE_PX, |x, y| {
        let (a, b) = (tile.pixels.get_pixel(x, y).0, degraded.pixels.get_pixel(x, y).0);
        Rgb(std::array::from_fn(|c| (128 + i32::from(a[c]) - i32::from(b[c])).clamp(0, 255) as u8))
    });
    Ok((tile.pixels.clone(), degraded.pixels, diff))
}

#[derive(Serialize, Deserialize)]
struct Row {
    slide_id: String,
    axis: Axis,
    x: u32,
    y: u32,
    raw_slope: f64,
    norm_slope: f64,
    correct: bool,
    sensitive: bool,
}

pub fn slopemap_csv(maps: &[SlopeMap]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in maps {
        for c in &m.cells {
            w.serialize(Row {
                slide_id: m.slide_id.clone(),
                axis: m.axis,
                x: c.x,
                y: c.y,
                raw_slope: c.raw_slope,
                norm_slope: c.norm_slope,
                correct: c.correct,
                sensitive: c.sensitive,
            })
            .expect("in-memory csv");
        }
    }
    if maps.iter().all(|m| m.cells.is_empty()) {
        return "slide_id,axis,x,y,raw_slope,norm_slope,correct,sensitive\n".into();
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

pub fn write_slopemap_csv(path: &Path, maps: &[SlopeMap]) -> Result<()> {
    atomic_write(path, slopemap_csv(maps).as_bytes())
}

/// Rows of a slopemap CSV as (slide_id, axis, cell) triples.
pub fn read_slopemap_csv(path: &Path) -> Result<Vec<(String, Axis, SlopeCell)>> {
    let text = read_to_string(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize::<Row>()
        .map(|r| {
            let r = r.map_err(|e| Error::MalformedArtifact {
                what: "slopemap csv",
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            Ok((
                r.slide_id,
                r.axis,
                SlopeCell {
                    col: (r.x / TILE_PX) as usize,
                    row: (r.y / TILE_PX) as usize,
                    x: r.x,
                    y: r.y,
                    raw_slope: r.raw_slope,
                    norm_slope: r.norm_slope,
                    correct: r.correct,
                    sensitive: r.sensitive,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(col: usize, row: usize, raw: f64, correct: bool) -> SlopeCell {
        SlopeCell {
            col,
            row,
            x: col as u32 * TILE_PX,
            y: row as u32 * TILE_PX,
            raw_slope: raw,
            norm_slope: 0.0,
            correct,
            sensitive: false,
        }
    }

    fn map_of(cols: usize, rows: usize, f: impl Fn(usize, usize) -> f64) -> SlopeMap {
        let mut cells: Vec<SlopeCell> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c, r)))
            .map(|(c, r)| cell(c, r, f(c, r), (c + r) % 3 != 0))
            .collect();
        normalize_cells(&mut cells, DEFAULT_EPSILON);
        SlopeMap {
            slide_id: "s".into(),
            axis: Axis::Rfl,
            epsilon: DEFAULT_EPSILON,
            cols,
            rows,
            cell_px: TILE_PX,
            cells,
        }
    }

    #[test]
    fn least_squares_examples() {
        let xs: Vec<f64> = (0..5).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.9 - 0.1 * x).collect();
        assert!((least_squares_slope(&xs, &ys) + 0.1).abs() < 1e-12);
        assert_eq!(least_squares_slope(&xs, &[0.7; 5]), 0.0);
        let xf: Vec<f32> = xs.iter().map(|&x| x as f32).collect();
        let yf: Vec<f32> = ys.iter().map(|&y| y as f32).collect();
        assert!((least_squares_slope(&xf, &yf) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn decreasing_correctness_gives_negative_slope() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let scores = [0.9, 0.8, 0.6, 0.55];
        let y: Vec<f64> = scores.iter().map(|&s| signed_correctness(s, Label::MetPos)).collect();
        assert!(least_squares_slope(&xs, &y) < 0.0);
        let y: Vec<f64> = scores.iter().map(|&s| signed_correctness(1.0 - s, Label::MetNeg)).collect();
        assert!(least_squares_slope(&xs, &y) < 0.0);
    }

    #[test]
    fn one_nonzero_cell_normalizes_to_unit() {
        let m = map_of(4, 3, |c, r| if (c, r) == (2, 1) { -0.03 } else { 0.0 });
        for c in &m.cells {
            if (c.col, c.row) == (2, 1) {
                assert_eq!(c.norm_slope, -1.0);
                assert!(c.sensitive);
            } else {
                assert_eq!(c.norm_slope, 0.0);
                assert!(!c.sensitive);
            }
        }
        let z = map_of(3, 3, |_, _| 0.0);
        assert!(z.cells.iter().all(|c| c.norm_slope == 0.0 && !c.sensitive));
    }

    #[test]
    fn regional_means_are_exact() {
        let m = map_of(10, 10, |c, r| (c * 10 + r) as f64 / 64.0);
        let g = concat_regional_map(&m, 5).unwrap();
        assert_eq!((g.cols, g.rows, g.cells.len()), (2, 2, 4));
        for region in &g.cells {
            let members: Vec<f64> = m
                .cells
                .iter()
                .filter(|c| c.col / 5 == region.col && c.row / 5 == region.row)
                .map(|c| c.raw_slope)
                .collect();
            assert_eq!(members.len(), 25);
            assert_eq!(region.raw_slope, members.iter().sum::<f64>() / 25.0);
        }
        let max = g.cells.iter().map(|c| c.norm_slope.abs()).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn identical_cells_merge_to_sign() {
        let g = concat_regional_map(&map_of(5, 5, |_, _| -0.2), 5).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.cells[0].norm_slope, -1.0);
        assert!(matches!(
            concat_regional_map(&map_of(4, 6, |_, _| 1.0), 5),
            Err(Error::GridTooSmall { cols: 4, rows: 6, k: 5 })
        ));
    }

    #[test]
    fn sub_ladder_stops_at_characteristic_length() {
        let r = crate::scale_transforms::rfl_ladder(0.51, 18).unwrap();
        let s = sub_ladder(&r, 5.1);
        let last = *s.last().unwrap();
        assert_eq!(s[0], 0);
        assert!(r.levels[last].length_um <= 5.1);
        assert!(r.levels[last + 1].length_um > 5.1);
        let m = crate::scale_transforms::mfl_ladder(0.51, 12).unwrap();
        let s = sub_ladder(&m, 41.0);
        assert!(m.levels[*s.last().unwrap()].length_um <= 41.0);
        assert_eq!(sub_ladder(&r, 0.1), vec![0, 1]);
    }

    #[test]
    fn residual_detail_identity_is_mid_gray() {
        let t = Tile::new("t", 0, 0, RgbImage::from_fn(TILE_PX, TILE_PX, |x, y| Rgb([(x ^ y) as u8, 7, 200])), 0.5);
        let (_, _, d) = residual_detail(&t, 1.0).unwrap();
        assert!(d.pixels().all(|p| p.0 == [128; 3]));
    }
}
