//! Two-stain colour normalization in optical-density space.
//!
//! Stain directions come from a plane fit: the two leading principal axes of
//! the stained pixels' optical densities span the stain plane, and the 1st /
//! 99th percentile projection angles inside that plane give the two stain
//! vectors. Normalization re-expresses each pixel's concentrations in the
//! reference basis after matching the per-stain 99th percentiles; the part of
//! the optical density outside the source plane is carried over unchanged.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::Tile;

/// Pixels whose optical-density norm is below this are treated as glass.
pub const OD_FLOOR: f64 = 0.15;

/// Minimum fraction of stained pixels for basis estimation.
pub const MIN_STAINED_FRACTION: f64 = 0.01;

const ANGLE_PERCENTILE: f64 = 0.01;
const MAX_CONC_PERCENTILE: f64 = 0.99;

/// `-log10((v + 1) / 256)` per channel.
#[inline]
pub fn optical_density(p: [u8; 3]) -> [f64; 3] {
    p.map(|v| -((f64::from(v) + 1.0) / 256.0).log10())
}

#[inline]
pub fn od_to_rgb(od: [f64; 3]) -> [u8; 3] {
    od.map(|d| (256.0 * 10f64.powf(-d) - 1.0).round().clamp(0.0, 255.0) as u8)
}

#[inline]
fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    /// 99th-percentile concentration of (hematoxylin, eosin).
    pub max_concentration: [f64; 2],
}

/// Reference appearance, fitted once to [`reference_tile`] and frozen.
pub const REFERENCE_BASIS: StainBasis = StainBasis {
    hematoxylin: [0.627785, 0.731076, 0.267234],
    eosin: [0.260496, 0.952959, 0.154952],
    max_concentration: [0.880611, 0.858589],
};

impl StainBasis {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("hematoxylin", self.hematoxylin), ("eosin", self.eosin)] {
            if (norm3(v) - 1.0).abs() > 1e-4 || v.iter().any(|&c| c < 0.0 || !c.is_finite()) {
                return Err(Error::DegenerateStainBasis(format!(
                    "{name} vector {v:?} is not a non-negative unit vector"
                )));
            }
        }
        let angle = self.angle_deg();
        if !(angle > 10.0 && angle < 170.0) {
            return Err(Error::DegenerateStainBasis(format!(
                "stain vectors are {angle:.2} degrees apart"
            )));
        }
        if self.max_concentration.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::DegenerateStainBasis(format!(
                "max concentrations {:?} must be positive",
                self.max_concentration
            )));
        }
        Ok(())
    }

    pub fn angle_deg(&self) -> f64 {
        dot3(self.hematoxylin, self.eosin).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Least-squares (hematoxylin, eosin) concentrations for one pixel.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        let (h, e) = (self.hematoxylin, self.eosin);
        let (hh, ee, he) = (dot3(h, h), dot3(e, e), dot3(h, e));
        let (ho, eo) = (dot3(h, od), dot3(e, od));
        let det = hh * ee - he * he;
        [(ee * ho - he * eo) / det, (hh * eo - he * ho) / det]
    }

    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        std::array::from_fn(|i| c[0] * self.hematoxylin[i] + c[1] * self.eosin[i])
    }

    /// Config encoding: six vector components then two max concentrations.
    pub fn to_config_value(&self) -> String {
        let mut parts: Vec<String> = Vec::with_capacity(8);
        parts.extend(self.hematoxylin.iter().map(|v| format!("{v:.6}")));
        parts.extend(self.eosin.iter().map(|v| format!("{v:.6}")));
        parts.extend(self.max_concentration.iter().map(|v| format!("{v:.6}")));
        parts.join(" ")
    }

    pub fn parse_config_value(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::InvalidConfig {
            key: "stain_reference".into(),
            reason,
        };
        let nums = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 8 {
            return Err(bad(format!("expected 8 numbers, found {}", nums.len())));
        }
        let unit = |v: [f64; 3]| {
            let n = norm3(v);
            v.map(|c| c / n)
        };
        let basis = StainBasis {
            hematoxylin: unit([nums[0], nums[1], nums[2]]),
            eosin: unit([nums[3], nums[4], nums[5]]),
            max_concentration: [nums[6], nums[7]],
        };
        basis.validate().map_err(|e| bad(e.to_string()))?;
        Ok(basis)
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

pub fn estimate_stain_basis(tile: &Tile) -> Result<StainBasis> {
    let ods: Vec<[f64; 3]> = tile
        .pixels
        .pixels()
        .map(|p| optical_density(p.0))
        .filter(|od| norm3(*od) > OD_FLOOR)
        .collect();
    let total = (tile.pixels.width() * tile.pixels.height()) as usize;
    if (ods.len() as f64) < MIN_STAINED_FRACTION * total as f64 || ods.len() < 3 {
        return Err(Error::NoStainSignal {
            stained: ods.len(),
            total,
        });
    }

    let n = ods.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|i| ods.iter().map(|o| o[i]).sum::<f64>() / n);
    let mut cov = Matrix3::<f64>::zeros();
    for od in &ods {
        let d = Vector3::new(od[0] - mean[0], od[1] - mean[1], od[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[k]);
        [c[0], c[1], c[2]]
    };
    let mut v1 = axis(0);
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|c| -c);
    }
    let v2 = axis(1);

    let mut angles: Vec<f64> = ods.iter().map(|od| dot3(*od, v2).atan2(dot3(*od, v1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, ANGLE_PERCENTILE);
    let hi = percentile(&angles, 1.0 - ANGLE_PERCENTILE);
    let direction = |phi: f64| -> [f64; 3] {
        let v: [f64; 3] = std::array::from_fn(|i| (phi.cos() * v1[i] + phi.sin() * v2[i]).max(0.0));
        let n = norm3(v);
        v.map(|c| c / n)
    };
    let (a, b) = (direction(lo), direction(hi));
    if a.iter().chain(&b).any(|c| !c.is_finite()) {
        return Err(Error::DegenerateStainBasis(
            "stain plane has no non-negative directions".into(),
        ));
    }
    // Hematoxylin absorbs more red than eosin, so it renders bluer.
    let (hematoxylin, eosin) = if a[0] >= b[0] { (a, b) } else { (b, a) };

    let mut basis = StainBasis {
        hematoxylin,
        eosin,
        max_concentration: [1.0, 1.0],
    };
    let mut ch = Vec::with_capacity(ods.len());
    let mut ce = Vec::with_capacity(ods.len());
    for od in &ods {
        let c = basis.concentrations(*od);
        ch.push(c[0]);
        ce.push(c[1]);
    }
    ch.sort_by(f64::total_cmp);
    ce.sort_by(f64::total_cmp);
    basis.max_concentration = [
        percentile(&ch, MAX_CONC_PERCENTILE),
        percentile(&ce, MAX_CONC_PERCENTILE),
    ];
    basis.validate()?;
    Ok(basis)
}

/// Re-renders `tile` from the `source` basis into the `reference` basis.
/// Pixels under the optical-density floor pass through untouched.
pub fn normalize_tile(tile: &Tile, source: &StainBasis, reference: &StainBasis) -> Tile {
    let scale = [
        reference.max_concentration[0] / source.max_concentration[0],
        reference.max_concentration[1] / source.max_concentration[1],
    ];
    let mut out = tile.pixels.clone();
    for px in out.pixels_mut() {
        let od = optical_density(px.0);
        if norm3(od) < OD_FLOOR {
            continue;
        }
        let c = source.concentrations(od);
        let fitted = source.mix(c);
        let c2 = [c[0] * scale[0], c[1] * scale[1]];
        let rebuilt = reference.mix(c2);
        let od2: [f64; 3] = std::array::from_fn(|i| rebuilt[i] + od[i] - fitted[i]);
        px.0 = od_to_rgb(od2);
    }
    tile.with_pixels(out, tile.transform)
}

/// Estimates the tile's own basis and normalizes it to `reference`.
pub fn normalize_to_reference(tile: &Tile, reference: &StainBasis) -> Result<Tile> {
    let source = estimate_stain_basis(tile)?;
    Ok(normalize_tile(tile, &source, reference))
}

/// The fixed tile [`REFERENCE_BASIS`] was fitted to: the centre tile of a
/// 448 px MetNeg phantom slide with full tissue coverage.
pub fn reference_tile() -> Tile {
    use crate::slide_io::{phantom_cases, render_phantom_slide, PhantomSpec};
    let spec = PhantomSpec {
        name: "stain-reference".into(),
        n_cases_pos: 1,
        n_cases_neg: 1,
        tissue_fraction: 1.0,
        slide_px: 448,
        seed: 0x5EED_5A1E,
        ..PhantomSpec::default()
    };
    let case = phantom_cases(&spec)
        .into_iter()
        .find(|c| !c.label.is_pos())
        .expect("negative case");
    let rendered = render_phantom_slide(&spec, &case).expect("reference phantom renders");
    Tile::from_slide(&rendered.slide, 112, 112)
}
