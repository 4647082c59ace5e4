//! Synthetic phantom slides with known discriminative length-scales.
//!
//! Tissue is rendered in stain-concentration space (two stains, fixed
//! absorption vectors) and converted to RGB through Beer-Lambert. Both classes
//! share the same non-discriminative structure (density noise plus a
//! stain-ratio mixing field); MetPos slides additionally carry
//!
//! * a sinusoidal plaid of period `micro_period_um` on the hematoxylin
//!   channel (fine texture, removed once the resolvable length exceeds it),
//! * a two-tone Voronoi patchwork of mean cell diameter `macro_scale_um`
//!   (only visible once the field of view spans a cell boundary),
//! * an optional red shift of `color_shift` of full scale.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CaseRecord, DatasetManifest, Label, Slide};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_gray_png, write_rgb_png};
use crate::raster::Mask;
use crate::seeds::{derive_seed, key_id, mix64, stream, unit};
use crate::TILE_PX;

/// Annotation rectangle inset, as a fraction of the slide side.
pub const PHANTOM_ANNOTATION_MARGIN: f64 = 0.05;

/// Hematoxylin and eosin optical-density directions (R, G, B).
const HEMATOXYLIN_OD: [f64; 3] = [0.650, 0.704, 0.286];
const EOSIN_OD: [f64; 3] = [0.072, 0.990, 0.105];
const HEMATOXYLIN_DENSITY: f64 = 0.55;
const EOSIN_DENSITY: f64 = 0.35;
const DETAIL_NOISE: f64 = 0.06;
const EOSIN_NOISE: f64 = 0.15;
/// Stain-ratio mixing amplitude. The eosin counter-shift keeps the luma
/// optical density roughly constant, so mixing shows up in hue, not in gray.
const MIXING: f64 = 0.6;
const MIXING_SPACING_PX: f64 = 24.0;
const GLASS_LEVEL: f64 = 242.0;
const WHITE_NOISE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub name: String,
    pub n_cases_pos: usize,
    pub n_cases_neg: usize,
    pub micro_period_um: f64,
    pub macro_scale_um: f64,
    /// Per-class red offset, fraction of full scale, in [0, 0.05].
    pub color_shift: f64,
    pub tissue_fraction: f64,
    pub seed: u64,
    pub pitch_um: f64,
    pub slide_px: u32,
    /// Relative hematoxylin modulation of the plaid; 0 disables the texture.
    pub texture_amplitude: f64,
    /// Relative density step between patchwork tones; 0 disables it.
    pub macro_contrast: f64,
    /// Fraction of the tissue that carries the MetPos components.
    pub texture_coverage: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            name: "phantom".into(),
            n_cases_pos: 6,
            n_cases_neg: 6,
            micro_period_um: 4.0,
            macro_scale_um: 40.0,
            color_shift: 0.0,
            tissue_fraction: 0.6,
            seed: 0,
            pitch_um: 0.51,
            slide_px: 4480,
            texture_amplitude: 0.10,
            macro_contrast: 0.25,
            texture_coverage: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::InvalidSpec { field, reason });
        if self.n_cases_pos == 0 || self.n_cases_neg == 0 {
            return bad("n_cases", "need at least one case per class".into());
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return bad("pitch_um", format!("{} must be positive", self.pitch_um));
        }
        if self.slide_px < TILE_PX {
            return bad("slide_px", format!("{} is smaller than a tile", self.slide_px));
        }
        if !(self.micro_period_um >= 2.0 * self.pitch_um) {
            return bad(
                "micro_period_um",
                format!(
                    "{} is below twice the pixel pitch ({})",
                    self.micro_period_um,
                    2.0 * self.pitch_um
                ),
            );
        }
        let extent = self.slide_px as f64 * self.pitch_um;
        if !(self.macro_scale_um > 0.0 && self.macro_scale_um <= extent) {
            return bad(
                "macro_scale_um",
                format!("{} must be in (0, {extent}]", self.macro_scale_um),
            );
        }
        if !(0.0..=0.05).contains(&self.color_shift) {
            return bad("color_shift", format!("{} not in [0, 0.05]", self.color_shift));
        }
        if !(self.tissue_fraction > 0.0 && self.tissue_fraction <= 1.0) {
            return bad(
                "tissue_fraction",
                format!("{} not in (0, 1]", self.tissue_fraction),
            );
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return bad(
                "texture_amplitude",
                format!("{} not in [0, 0.5]", self.texture_amplitude),
            );
        }
        if !(0.0..=0.5).contains(&self.macro_contrast) {
            return bad(
                "macro_contrast",
                format!("{} not in [0, 0.5]", self.macro_contrast),
            );
        }
        if !(self.texture_coverage > 0.0 && self.texture_coverage <= 1.0) {
            return bad(
                "texture_coverage",
                format!("{} not in (0, 1]", self.texture_coverage),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhantomCase {
    pub id: String,
    pub label: Label,
}

/// Case list in manifest order: all MetPos cases, then all MetNeg cases.
pub fn phantom_cases(spec: &PhantomSpec) -> Vec<PhantomCase> {
    let pos = (0..spec.n_cases_pos).map(|i| PhantomCase {
        id: format!("pos{i:03}"),
        label: Label::MetPos,
    });
    let neg = (0..spec.n_cases_neg).map(|i| PhantomCase {
        id: format!("neg{i:03}"),
        label: Label::MetNeg,
    });
    pos.chain(neg).collect()
}

/// A rendered slide plus the generator's ground truth.
#[derive(Clone, Debug)]
pub struct PhantomSlide {
    pub slide: Slide,
    pub tissue: Mask,
    /// Pixels carrying the MetPos components (empty for MetNeg slides).
    pub texture: Mask,
}

struct ValueNoise {
    spacing: f64,
    cols: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(seed: u64, width: u32, height: u32, spacing: f64) -> Self {
        let cols = (width as f64 / spacing).ceil() as usize + 2;
        let rows = (height as f64 / spacing).ceil() as usize + 2;
        let mut rng = stream(seed);
        let values = (0..cols * rows)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        Self {
            spacing,
            cols,
            values,
        }
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.spacing;
        let gy = y / self.spacing;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let v = |i: usize, j: usize| f64::from(self.values[j * self.cols + i]);
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Jittered-grid Voronoi patchwork with a +-1 tone per cell.
struct Patchwork {
    spacing: f64,
    seed: u64,
}

impl Patchwork {
    fn site(&self, i: i64, j: i64) -> (f64, f64, f64) {
        let h = mix64(self.seed ^ mix64((i as u64) << 32 ^ (j as u64 & 0xFFFF_FFFF)));
        let (u, v) = (unit(h), unit(mix64(h)));
        let tone = if mix64(h ^ 0x5EED) & 1 == 0 { -1.0 } else { 1.0 };
        ((i as f64 + u) * self.spacing, (j as f64 + v) * self.spacing, tone)
    }

    #[inline]
    fn tone(&self, x: f64, y: f64) -> f64 {
        let ci = (x / self.spacing).floor() as i64;
        let cj = (y / self.spacing).floor() as i64;
        let mut best = (f64::INFINITY, 0.0);
        for dj in -1..=1 {
            for di in -1..=1 {
                let (sx, sy, tone) = self.site(ci + di, cj + dj);
                let d = (sx - x).powi(2) + (sy - y).powi(2);
                if d < best.0 {
                    best = (d, tone);
                }
            }
        }
        best.1
    }
}

fn unit_vec(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Threshold such that `fraction` of the sampled field values lie at or
/// above it.
fn upper_quantile(mut samples: Vec<f64>, fraction: f64) -> f64 {
    if fraction >= 1.0 || samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let k = ((1.0 - fraction) * samples.len() as f64).round() as usize;
    let k = k.min(samples.len() - 1);
    let (_, v, _) = samples.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

/// Renders one phantom slide; deterministic in (spec, case id).
pub fn render_phantom_slide(spec: &PhantomSpec, case: &PhantomCase) -> Result<PhantomSlide> {
    spec.validate()?;
    let side = spec.slide_px;
    let sidef = side as f64;
    let slide_seed = derive_seed(spec.seed, "phantom/slide", &[key_id(&case.id)]);
    let sub = |purpose: &str| derive_seed(slide_seed, purpose, &[]);
    let pos = case.label.is_pos();

    let margin = (sidef * PHANTOM_ANNOTATION_MARGIN).round() as u32;
    let in_annotation =
        |x: u32, y: u32| x >= margin && y >= margin && x < side - margin && y < side - margin;

    let tissue_a = ValueNoise::new(sub("tissue/a"), side, side, sidef / 5.0);
    let tissue_b = ValueNoise::new(sub("tissue/b"), side, side, sidef / 11.0);
    let tissue_field = |x: f64, y: f64| tissue_a.sample(x, y) + 0.5 * tissue_b.sample(x, y);
    let coverage_noise = ValueNoise::new(sub("coverage"), side, side, sidef / 7.0);
    let detail_a = ValueNoise::new(sub("detail/a"), side, side, 16.0);
    let detail_b = ValueNoise::new(sub("detail/b"), side, side, 48.0);
    let eosin_noise = ValueNoise::new(sub("eosin"), side, side, 30.0);
    let mixing = ValueNoise::new(sub("mixing"), side, side, MIXING_SPACING_PX);
    let patchwork = Patchwork {
        spacing: spec.macro_scale_um / spec.pitch_um,
        seed: sub("patchwork"),
    };

    // Quantile thresholds from a 4-px subsample; the fields vary on scales of
    // hundreds of pixels, so the subsample pins the area fraction closely.
    let step = 4;
    let mut annot_samples = Vec::new();
    for y in (margin..side - margin).step_by(step) {
        for x in (margin..side - margin).step_by(step) {
            annot_samples.push(tissue_field(x as f64, y as f64));
        }
    }
    let tissue_thr = upper_quantile(annot_samples, spec.tissue_fraction);
    let coverage_thr = if spec.texture_coverage >= 1.0 {
        f64::NEG_INFINITY
    } else {
        let mut s = Vec::new();
        for y in (margin..side - margin).step_by(step) {
            for x in (margin..side - margin).step_by(step) {
                if tissue_field(x as f64, y as f64) >= tissue_thr {
                    s.push(coverage_noise.sample(x as f64, y as f64));
                }
            }
        }
        upper_quantile(s, spec.texture_coverage)
    };

    let mut rng = stream(sub("plaid"));
    let (phase_x, phase_y): (f64, f64) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let period_px = spec.micro_period_um / spec.pitch_um;
    let plaid_x: Vec<f64> = (0..side)
        .map(|x| (TAU * x as f64 / period_px + phase_x).sin())
        .collect();
    let plaid_y: Vec<f64> = (0..side)
        .map(|y| (TAU * y as f64 / period_px + phase_y).sin())
        .collect();

    let h_od = unit_vec(HEMATOXYLIN_OD);
    let e_od = unit_vec(EOSIN_OD);
    let luma = |v: [f64; 3]| 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
    let counter_shift = luma(h_od) / luma(e_od);
    let red_shift = if pos { spec.color_shift * 255.0 } else { 0.0 };
    let noise_seed = sub("white");
    let w = side as usize;

    let mut raw = vec![0u8; w * w * 3];
    let mut tissue_bits = vec![false; w * w];
    let mut texture_bits = vec![false; w * w];
    raw.par_chunks_mut(w * 3)
        .zip(tissue_bits.par_chunks_mut(w))
        .zip(texture_bits.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((row, tissue_row), texture_row))| {
            let yf = y as f64;
            for x in 0..w {
                let xf = x as f64;
                let idx = (y * w + x) as u64;
                let in_tissue = tissue_field(xf, yf) >= tissue_thr;
                let mut rgb = [GLASS_LEVEL; 3];
                if in_tissue {
                    tissue_row[x] = true;
                    let marked = pos && coverage_noise.sample(xf, yf) >= coverage_thr;
                    texture_row[x] = marked;
                    let detail = 0.5 * (detail_a.sample(xf, yf) + detail_b.sample(xf, yf));
                    let mut h = HEMATOXYLIN_DENSITY * (1.0 + DETAIL_NOISE * detail);
                    let mut e = EOSIN_DENSITY * (1.0 + EOSIN_NOISE * eosin_noise.sample(xf, yf));
                    let shift = HEMATOXYLIN_DENSITY * MIXING * mixing.sample(xf, yf);
                    h += shift;
                    e = (e - counter_shift * shift).max(0.0);
                    if marked {
                        if spec.macro_contrast > 0.0 {
                            let tone = 1.0 + spec.macro_contrast * patchwork.tone(xf, yf);
                            h *= tone;
                            e *= tone;
                        }
                        if spec.texture_amplitude > 0.0 {
                            let plaid = 0.5 * (plaid_x[x] + plaid_y[y]);
                            h *= 1.0 + spec.texture_amplitude * plaid;
                        }
                    }
                    for c in 0..3 {
                        let od = h * h_od[c] + e * e_od[c];
                        rgb[c] = 256.0 * 10f64.powf(-od) - 1.0;
                    }
                    rgb[0] += red_shift;
                }
                for c in 0..3 {
                    let n = (unit(mix64(noise_seed ^ (idx * 3 + c as u64))) * 2.0 - 1.0) * WHITE_NOISE;
                    row[x * 3 + c] = (rgb[c] + n).round().clamp(0.0, 255.0) as u8;
                }
            }
        });

    let pixels = RgbImage::from_raw(side, side, raw).expect("phantom raster dims");
    let annotation = Mask::from_fn(side, side, in_annotation);
    let slide = Slide::new(case.id.clone(), pixels, spec.pitch_um, case.label, Some(annotation))?;
    Ok(PhantomSlide {
        slide,
        tissue: Mask::from_bits(side, side, tissue_bits),
        texture: Mask::from_bits(side, side, texture_bits),
    })
}

pub(crate) fn truth_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id}_tissue.png")),
        dir.join(format!("{id}_texture.png")),
    )
}

/// Renders every case of `spec` into `out_dir` and writes `manifest.tsv`
/// plus `phantom.json`. Per case: `<id>.png` (slide), `<id>_annot.png`
/// (annotation mask), `<id>_tissue.png` and `<id>_texture.png` (truth).
pub fn generate_phantom(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cases = phantom_cases(spec);
    let records = cases
        .par_iter()
        .map(|case| {
            let rendered = render_phantom_slide(spec, case)?;
            let slide_name = format!("{}.png", case.id);
            let mask_name = format!("{}_annot.png", case.id);
            write_rgb_png(&out_dir.join(&slide_name), &rendered.slide.pixels)?;
            let annotation = rendered.slide.annotation.as_ref().expect("phantom annotation");
            write_gray_png(&out_dir.join(&mask_name), &annotation.to_gray())?;
            let (tissue_path, texture_path) = truth_paths(out_dir, &case.id);
            write_gray_png(&tissue_path, &rendered.tissue.to_gray())?;
            write_gray_png(&texture_path, &rendered.texture.to_gray())?;
            Ok(CaseRecord {
                id: case.id.clone(),
                slide_path: PathBuf::from(slide_name),
                mask_path: Some(PathBuf::from(mask_name)),
                label: case.label,
                pitch_um: spec.pitch_um,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        seed: spec.seed,
        cases: records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    atomic_write(&out_dir.join("phantom.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Loads the generator's truth masks for a case written by
/// [`generate_phantom`].
pub fn load_truth(dir: &Path, id: &str) -> Result<(Mask, Mask)> {
    let (t, x) = truth_paths(dir, id);
    Ok((
        Mask::from_gray(&crate::fsutil::read_gray_png(&t)?),
        Mask::from_gray(&crate::fsutil::read_gray_png(&x)?),
    ))
}
