//! RFL degradation and MFL restriction, plus the level ladders.
//!
//! RFL: the tile is band-limited to an `n x n` raster (`n = max(2,
//! round(224 / f))`) and interpolated back bilinearly. The reduction is an
//! ideal Fourier resampler rather than a box average: a box kernel leaks a
//! grating above the new Nyquist limit into the output at several percent of
//! its energy, which breaks the "nothing finer than the RFL survives" reading
//! of the ladder.
//!
//! MFL: centre crop `c x c`, bilinear upsample to 224.

use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_to_string};
use crate::tiling::{Tile, TransformTag};
use crate::TILE_PX;

pub const RFL_DEFAULT_LEVELS: usize = 18;
pub const MFL_DEFAULT_LEVELS: usize = 12;
pub const RFL_MAX_FACTOR: f64 = 30.0;
pub const MFL_MIN_CROP: u32 = 5;

const N: usize = TILE_PX as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Rfl,
    Mfl,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Rfl => "rfl",
            Axis::Mfl => "mfl",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rfl" => Ok(Axis::Rfl),
            "mfl" => Ok(Axis::Mfl),
            other => Err(Error::InvalidConfig {
                key: "axis".into(),
                reason: format!("unknown axis {other:?} (expected rfl or mfl)"),
            }),
        }
    }
}

pub fn rfl_length_um(pitch_um: f64, factor: f64) -> f64 {
    2.0 * pitch_um * factor
}

pub fn mfl_length_um(pitch_um: f64, crop: u32) -> f64 {
    f64::from(crop) * pitch_um
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub index: usize,
    /// Downsample factor (RFL) or crop side in pixels (MFL).
    pub control: f64,
    pub length_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLadder {
    pub axis: Axis,
    pub pitch_um: f64,
    pub levels: Vec<Level>,
}

impl LevelLadder {
    pub fn new(axis: Axis, pitch_um: f64, n_levels: usize) -> Result<Self> {
        match axis {
            Axis::Rfl => rfl_ladder(pitch_um, n_levels),
            Axis::Mfl => mfl_ladder(pitch_um, n_levels),
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the no-op level: smallest RFL or largest MFL.
    pub fn identity_index(&self) -> usize {
        match self.axis {
            Axis::Rfl => 0,
            Axis::Mfl => self.levels.len() - 1,
        }
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.length_um).collect()
    }

    pub fn level(&self, index: usize) -> Result<&Level> {
        self.levels.get(index).ok_or_else(|| Error::InvalidSpec {
            field: "level",
            reason: format!("level {index} outside a {}-level ladder", self.levels.len()),
        })
    }

    pub fn apply(&self, index: usize, tile: &Tile) -> Result<Tile> {
        let level = self.level(index)?;
        match self.axis {
            Axis::Rfl => apply_rfl(tile, level.control),
            Axis::Mfl => apply_mfl(tile, level.control as u32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSpec {
            field: "ladder",
            reason,
        };
        if self.levels.len() < 2 {
            return Err(bad(format!("{} levels; need at least 2", self.levels.len())));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.index != i {
                return Err(bad(format!("level at position {i} has index {}", l.index)));
            }
            let ok = match self.axis {
                Axis::Rfl => l.control >= 1.0,
                Axis::Mfl => l.control.fract() == 0.0 && (1.0..=f64::from(TILE_PX)).contains(&l.control),
            };
            if !ok {
                return Err(bad(format!("level {i} has invalid control {}", l.control)));
            }
        }
        if self.levels.windows(2).any(|w| w[1].length_um <= w[0].length_um) {
            return Err(bad("lengths are not strictly increasing".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "index", "control", "length_um"]).expect("in-memory csv");
        for l in &self.levels {
            w.write_record([
                self.axis.to_string(),
                l.index.to_string(),
                l.control.to_string(),
                l.length_um.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }

    /// Reads a ladder CSV. The pitch is recovered from the first level.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let malformed = |reason: String| Error::MalformedArtifact {
            what: "ladder csv",
            path: path.to_path_buf(),
            reason,
        };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut axis = None;
        let mut levels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| malformed(e.to_string()))?;
            if rec.len() != 4 {
                return Err(malformed(format!("expected 4 fields, found {}", rec.len())));
            }
            let a: Axis = rec[0].parse().map_err(|e: Error| malformed(e.to_string()))?;
            if axis.is_some_and(|prev| prev != a) {
                return Err(malformed("mixed axes".into()));
            }
            axis = Some(a);
            let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(format!("bad number {s:?}")));
            levels.push(Level {
                index: rec[1].parse().map_err(|_| malformed(format!("bad index {:?}", &rec[1])))?,
                control: num(&rec[2])?,
                length_um: num(&rec[3])?,
            });
        }
        let axis = axis.ok_or_else(|| malformed("no levels".into()))?;
        let first = levels[0];
        let pitch_um = match axis {
            Axis::Rfl => first.length_um / (2.0 * first.control),
            Axis::Mfl => first.length_um / first.control,
        };
        let ladder = LevelLadder {
            axis,
            pitch_um,
            levels,
        };
        ladder.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(ladder)
    }
}

fn check_ladder_args(pitch_um: f64, n_levels: usize) -> Result<()> {
    if !(pitch_um > 0.0 && pitch_um.is_finite()) {
        return Err(Error::InvalidSpec {
            field: "pitch_um",
            reason: format!("{pitch_um} is not a positive length"),
        });
    }
    if n_levels < 2 {
        return Err(Error::InvalidSpec {
            field: "n_levels",
            reason: format!("{n_levels} levels; need at least 2"),
        });
    }
    Ok(())
}

/// Factors `30^(i / (n - 1))`; endpoints are exactly 1 and 30.
pub fn rfl_ladder(pitch_um: f64, n_levels: usize) -> Result<LevelLadder> {
    check_ladder_args(pitch_um, n_levels)?;
    let last = n_levels - 1;
    let levels = (0..n_levels)
        .map(|i| {
            let f = match i {
                0 => 1.0,
                i if i == last => RFL_MAX_FACTOR,
                i => RFL_MAX_FACTOR.powf(i as f64 / last as f64),
            };
            Level {
                index: i,
                control: f,
                length_um: rfl_length_um(pitch_um, f),
            }
        })
        .collect();
    Ok(LevelLadder {
        axis: Axis::Rfl,
        pitch_um,
        levels,
    })
}

/// Crops `round(5 * (224/5)^(i / (n - 1)))`, bumped where rounding would
/// repeat a size so the ladder stays strictly increasing.
pub fn mfl_ladder(pitch_um: f64, n_levels: usize) -> Result<LevelLadder> {
    check_ladder_args(pitch_um, n_levels)?;
    let span = (TILE_PX - MFL_MIN_CROP + 1) as usize;
    if n_levels > span {
        return Err(Error::InvalidSpec {
            field: "n_levels",
            reason: format!("{n_levels} MFL levels; at most {span} distinct crops exist"),
        });
    }
    let last = n_levels - 1;
    let ratio = f64::from(TILE_PX) / f64::from(MFL_MIN_CROP);
    let mut crops: Vec<u32> = (0..n_levels)
        .map(|i| (f64::from(MFL_MIN_CROP) * ratio.powf(i as f64 / last as f64)).round() as u32)
        .collect();
    crops[0] = MFL_MIN_CROP;
    crops[last] = TILE_PX;
    for i in 1..n_levels {
        crops[i] = crops[i].max(crops[i - 1] + 1);
    }
    // Bumps can overrun the top; walk back down from 224.
    for i in (0..last).rev() {
        crops[i] = crops[i].min(crops[i + 1] - 1);
    }
    let levels = crops
        .iter()
        .enumerate()
        .map(|(i, &c)| Level {
            index: i,
            control: f64::from(c),
            length_um: mfl_length_um(pitch_um, c),
        })
        .collect();
    Ok(LevelLadder {
        axis: Axis::Mfl,
        pitch_um,
        levels,
    })
}

/// Side of the intermediate raster for factor `f` (round half up, floor 2).
pub fn rfl_intermediate_side(f: f64) -> usize {
    ((N as f64 / f + 0.5).floor() as usize).max(2)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(N), p.plan_fft_inverse(n))
    })
}

/// Band-limited resampling of a 224-sample line onto `n` samples whose
/// centres sit at `(j + 0.5) * 224 / n - 0.5`. Keeps `|k| <= (n - 1) / 2`.
struct LineResampler {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    phase: Vec<Complex<f64>>,
    spec: Vec<Complex<f64>>,
    out: Vec<Complex<f64>>,
}

impl LineResampler {
    fn new(n: usize) -> Self {
        let (fwd, inv) = plans(n);
        let kmax = (n - 1) / 2;
        let delta = N as f64 / (2.0 * n as f64) - 0.5;
        let phase = (0..=kmax)
            .map(|k| Complex::from_polar(1.0, std::f64::consts::TAU * k as f64 * delta / N as f64))
            .collect();
        Self {
            n,
            fwd,
            inv,
            phase,
            spec: vec![Complex::default(); N],
            out: vec![Complex::default(); n],
        }
    }

    fn run(&mut self, line: impl Iterator<Item = f64>, dst: &mut [f64]) {
        for (s, v) in self.spec.iter_mut().zip(line) {
            *s = Complex::new(v, 0.0);
        }
        self.fwd.process(&mut self.spec);
        self.out.fill(Complex::default());
        self.out[0] = self.spec[0];
        for k in 1..self.phase.len() {
            self.out[k] = self.spec[k] * self.phase[k];
            self.out[self.n - k] = self.spec[N - k] * self.phase[k].conj();
        }
        self.inv.process(&mut self.out);
        for (d, o) in dst.iter_mut().zip(&self.out) {
            *d = o.re / N as f64;
        }
    }
}

/// Bilinear taps for mapping `dst` pixel centres onto `src` pixel centres.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsample of an `n x n` plane (row-major) to 224 x 224.
fn bilinear_plane(src: &[f64], n: usize) -> Vec<f64> {
    let taps = bilinear_taps(n, N);
    let mut rows = vec![0.0; n * N];
    for y in 0..n {
        let line = &src[y * n..(y + 1) * n];
        for (x, &(i0, i1, t)) in taps.iter().enumerate() {
            rows[y * N + x] = line[i0] * (1.0 - t) + line[i1] * t;
        }
    }
    let mut out = vec![0.0; N * N];
    for (y, &(j0, j1, t)) in taps.iter().enumerate() {
        for x in 0..N {
            out[y * N + x] = rows[j0 * N + x] * (1.0 - t) + rows[j1 * N + x] * t;
        }
    }
    out
}

fn planes_to_image(planes: &[Vec<f64>; 3]) -> RgbImage {
    RgbImage::from_fn(TILE_PX, TILE_PX, |x, y| {
        let i = (y * TILE_PX + x) as usize;
        Rgb(std::array::from_fn(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

pub fn apply_rfl(tile: &Tile, f: f64) -> Result<Tile> {
    if !(f >= 1.0 && f.is_finite()) {
        return Err(Error::InvalidFactor(f));
    }
    if f == 1.0 {
        return Ok(tile.with_pixels(tile.pixels.clone(), TransformTag::Rfl(f)));
    }
    let n = rfl_intermediate_side(f);
    let mut rs = LineResampler::new(n);
    let planes: [Vec<f64>; 3] = std::array::from_fn(|c| {
        let raw = tile.pixels.as_raw();
        let mut half = vec![0.0; N * n];
        for y in 0..N {
            let row = (0..N).map(|x| f64::from(raw[(y * N + x) * 3 + c]));
            rs.run(row, &mut half[y * n..(y + 1) * n]);
        }
        let mut small = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for x in 0..n {
            rs.run((0..N).map(|y| half[y * n + x]), &mut col);
            for (y, v) in col.iter().enumerate() {
                small[y * n + x] = *v;
            }
        }
        bilinear_plane(&small, n)
    });
    Ok(tile.with_pixels(planes_to_image(&planes), TransformTag::Rfl(f)))
}

pub fn apply_mfl(tile: &Tile, crop: u32) -> Result<Tile> {
    if !(1..=TILE_PX).contains(&crop) {
        return Err(Error::InvalidCrop(crop));
    }
    if crop == TILE_PX {
        return Ok(tile.with_pixels(tile.pixels.clone(), TransformTag::Mfl(crop)));
    }
    let c = crop as usize;
    let off = (N - c) / 2;
    let raw = tile.pixels.as_raw();
    let planes: [Vec<f64>; 3] = std::array::from_fn(|ch| {
        let mut src = vec![0.0; c * c];
        for y in 0..c {
            for x in 0..c {
                src[y * c + x] = f64::from(raw[((y + off) * N + x + off) * 3 + ch]);
            }
        }
        bilinear_plane(&src, c)
    });
    Ok(tile.with_pixels(planes_to_image(&planes), TransformTag::Mfl(crop)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile_from(f: impl Fn(u32, u32) -> [u8; 3]) -> Tile {
        Tile::new("t", 0, 0, RgbImage::from_fn(TILE_PX, TILE_PX, |x, y| Rgb(f(x, y))), 0.51)
    }

    #[test]
    fn rfl_ladder_endpoints() {
        let l = rfl_ladder(0.51, 18).unwrap();
        assert_eq!(l.levels[0].control, 1.0);
        assert_eq!(l.levels[17].control, 30.0);
        assert!((l.levels[0].length_um - 1.02).abs() < 1e-12);
        assert!((l.levels[17].length_um - 30.6).abs() < 1e-12);
        let two = rfl_ladder(0.51, 2).unwrap();
        assert_eq!(two.levels.iter().map(|l| l.control).collect::<Vec<_>>(), [1.0, 30.0]);
        l.validate().unwrap();
    }

    #[test]
    fn mfl_ladder_endpoints() {
        let l = mfl_ladder(0.51, 12).unwrap();
        assert_eq!(l.levels[0].control, 5.0);
        assert_eq!(l.levels[11].control, 224.0);
        assert!((l.levels[0].length_um - 2.55).abs() < 1e-12);
        assert!((l.levels[11].length_um - 114.24).abs() < 1e-9);
        assert_eq!(l.identity_index(), 11);
        l.validate().unwrap();
        assert!(mfl_ladder(0.51, 221).is_err());
        mfl_ladder(0.51, 220).unwrap().validate().unwrap();
    }

    #[test]
    fn ladder_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for axis in [Axis::Rfl, Axis::Mfl] {
            let l = LevelLadder::new(axis, 0.51, 7).unwrap();
            let p = dir.path().join(format!("{axis}.csv"));
            l.write_csv(&p).unwrap();
            let back = LevelLadder::read_csv(&p).unwrap();
            assert_eq!(back.axis, axis);
            assert_eq!(back.levels, l.levels);
        }
        let text = rfl_ladder(0.51, 2).unwrap().to_csv();
        assert!(text.starts_with("axis,index,control,length_um\n"));
    }

    #[test]
    fn bad_controls_are_rejected() {
        let t = tile_from(|_, _| [1, 2, 3]);
        assert!(matches!(apply_rfl(&t, 0.5), Err(Error::InvalidFactor(_))));
        assert!(matches!(apply_mfl(&t, 0), Err(Error::InvalidCrop(0))));
        assert!(matches!(apply_mfl(&t, 225), Err(Error::InvalidCrop(225))));
    }

    #[test]
    fn intermediate_side_rounds_half_up() {
        assert_eq!(rfl_intermediate_side(30.0), 7);
        assert_eq!(rfl_intermediate_side(4.0), 56);
        assert_eq!(rfl_intermediate_side(1000.0), 2);
        // 224 / 64 = 3.5 rounds up.
        assert_eq!(rfl_intermediate_side(64.0), 4);
    }

    #[test]
    fn grating_above_cutoff_is_removed() {
        let t = tile_from(|x, _| {
            let v = 128.0 + 100.0 * (std::f64::consts::TAU * f64::from(x) / 4.0).sin();
            [v.round() as u8; 3]
        });
        let out = apply_rfl(&t, 4.0).unwrap();
        let row: Vec<f64> = (0..TILE_PX).map(|x| f64::from(out.pixels.get_pixel(x, 100).0[0])).collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        assert!(row.iter().all(|v| (v - mean).abs() <= 1.0), "grating survived");
    }

    #[test]
    fn mfl_crop_is_centred() {
        // A single bright pixel at the tile centre must stay at the centre.
        let t = tile_from(|x, y| if (x, y) == (112, 112) { [255; 3] } else { [0; 3] });
        let out = apply_mfl(&t, 4).unwrap();
        let centre = out.pixels.get_pixel(112, 112).0[0];
        assert!(centre > 0);
        assert_eq!(out.pixels.get_pixel(0, 0).0[0], 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn constant_tiles_are_fixed_points(v in any::<[u8; 3]>(), f in 1.0f64..40.0, c in 1u32..=224) {
            let t = tile_from(|_, _| v);
            prop_assert_eq!(&apply_rfl(&t, f).unwrap().pixels, &t.pixels);
            prop_assert_eq!(&apply_mfl(&t, c).unwrap().pixels, &t.pixels);
        }

        #[test]
        fn identity_levels_are_bit_exact(seed in any::<u64>()) {
            let t = tile_from(|x, y| {
                let h = crate::seeds::mix64(seed ^ u64::from(y * TILE_PX + x));
                [h as u8, (h >> 8) as u8, (h >> 16) as u8]
            });
            let r = apply_rfl(&t, 1.0).unwrap();
            let m = apply_mfl(&t, 224).unwrap();
            prop_assert_eq!(&r.pixels, &t.pixels);
            prop_assert_eq!(&m.pixels, &t.pixels);
            prop_assert_eq!(r.transform, TransformTag::Rfl(1.0));
            prop_assert_eq!(m.transform, TransformTag::Mfl(224));
        }
    }
}
