//! Fixed tile features for the built-in scorer.
//!
//! Layout (22 values): per-channel mean and variance of RGB in [0, 1]
//! (R, G, B means then variances), followed by 16 log band energies of the
//! mean-subtracted gray tile: 4 radial bands x 4 orientation sectors, band
//! major. Bands are in cycles per tile: [1, 4), [4, 16), [16, 64), [64, inf).
//! Sectors are centred on 0, 45, 90 and 135 degrees (each +-22.5).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Mutex;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::tiling::Tile;
use crate::TILE_PX;

pub const N_FEATURES: usize = 22;
pub const BAND_EDGES: [f64; 4] = [1.0, 4.0, 16.0, 64.0];
const N: usize = TILE_PX as usize;
const LOG_FLOOR: f64 = 1e-8;

pub type Features = [f64; N_FEATURES];

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Band index (0..4) for a radial frequency, or `None` for DC.
pub fn band_of(radius: f64) -> Option<usize> {
    if radius < BAND_EDGES[0] {
        return None;
    }
    Some(BAND_EDGES.iter().rposition(|&e| radius >= e).unwrap_or(0))
}

/// Orientation sector (0..4) of frequency vector `(kx, ky)`.
pub fn sector_of(kx: f64, ky: f64) -> usize {
    let mut deg = ky.atan2(kx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    ((deg / 45.0).round() as usize) % 4
}

fn signed(k: usize) -> f64 {
    if k < N / 2 {
        k as f64
    } else {
        k as f64 - N as f64
    }
}

/// Power per (band, sector), normalized so the total equals the gray
/// variance.
pub fn band_energies(gray: &[f64]) -> [[f64; 4]; 4] {
    assert_eq!(gray.len(), N * N);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    let mut buf: Vec<Complex<f64>> = gray.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(N));
    for row in buf.chunks_mut(N) {
        fft.process(row);
    }
    let mut col = vec![Complex::default(); N];
    let mut out = [[0.0; 4]; 4];
    let norm = (N * N * N * N) as f64;
    for x in 0..N {
        for y in 0..N {
            col[y] = buf[y * N + x];
        }
        fft.process(&mut col);
        let kx = signed(x);
        for (y, v) in col.iter().enumerate() {
            let ky = signed(y);
            if let Some(b) = band_of(kx.hypot(ky)) {
                out[b][sector_of(kx, ky)] += v.norm_sqr() / norm;
            }
        }
    }
    out
}

pub fn gray_plane(tile: &Tile) -> Vec<f64> {
    tile.pixels
        .pixels()
        .map(|p| (0.299 * f64::from(p.0[0]) + 0.587 * f64::from(p.0[1]) + 0.114 * f64::from(p.0[2])) / 255.0)
        .collect()
}

pub fn tile_features(tile: &Tile) -> Features {
    let mut f = [0.0; N_FEATURES];
    let n = f64::from(TILE_PX * TILE_PX);
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for p in tile.pixels.pixels() {
        for c in 0..3 {
            let v = f64::from(p.0[c]) / 255.0;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    for c in 0..3 {
        let m = sum[c] / n;
        f[c] = m;
        f[3 + c] = (sq[c] / n - m * m).max(0.0);
    }
    let bands = band_energies(&gray_plane(tile));
    for (b, row) in bands.iter().enumerate() {
        for (s, e) in row.iter().enumerate() {
            f[6 + b * 4 + s] = (LOG_FLOOR + e).ln();
        }
    }
    f
}

const CACHE_LIMIT: usize = 200_000;

/// Content-addressed feature cache; safe to share between threads.
#[derive(Default)]
pub struct FeatureCache {
    map: Mutex<HashMap<[u8; 32], Features>>,
}

impl FeatureCache {
    pub fn features(&self, tile: &Tile) -> Features {
        let key: [u8; 32] = Sha256::digest(tile.pixels.as_raw()).into();
        if let Some(f) = self.map.lock().expect("feature cache").get(&key) {
            return *f;
        }
        let f = tile_features(tile);
        let mut map = self.map.lock().expect("feature cache");
        if map.len() >= CACHE_LIMIT {
            map.clear();
        }
        map.insert(key, f);
        f
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("feature cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use std::f64::consts::TAU;

    fn grating(cycles: f64, vertical: bool) -> Tile {
        Tile::new(
            "g",
            0,
            0,
            RgbImage::from_fn(TILE_PX, TILE_PX, |x, y| {
                let t = if vertical { y } else { x };
                let v = 128.0 + 90.0 * (TAU * cycles * f64::from(t) / N as f64).sin();
                Rgb([v.round() as u8; 3])
            }),
            0.5,
        )
    }

    #[test]
    fn band_and_sector_edges() {
        assert_eq!(band_of(0.0), None);
        assert_eq!(band_of(1.0), Some(0));
        assert_eq!(band_of(3.99), Some(0));
        assert_eq!(band_of(4.0), Some(1));
        assert_eq!(band_of(63.9), Some(2));
        assert_eq!(band_of(158.0), Some(3));
        assert_eq!(sector_of(1.0, 0.0), 0);
        assert_eq!(sector_of(-1.0, 0.0), 0);
        assert_eq!(sector_of(1.0, 1.0), 1);
        assert_eq!(sector_of(0.0, 1.0), 2);
        assert_eq!(sector_of(0.0, -1.0), 2);
        assert_eq!(sector_of(-1.0, 1.0), 3);
    }

    #[test]
    fn grating_energy_lands_in_its_band_and_sector() {
        // 28 cycles per tile along x: band [16, 64), sector 0.
        let e = band_energies(&gray_plane(&grating(28.0, false)));
        let total: f64 = e.iter().flatten().sum();
        assert!(e[2][0] / total > 0.99);
        let e = band_energies(&gray_plane(&grating(8.0, true)));
        let total: f64 = e.iter().flatten().sum();
        assert!(e[1][2] / total > 0.99);
    }

    #[test]
    fn band_energies_sum_to_gray_variance() {
        let t = grating(10.0, false);
        let g = gray_plane(&t);
        let m = g.iter().sum::<f64>() / g.len() as f64;
        let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64;
        let total: f64 = band_energies(&g).iter().flatten().sum();
        assert!((total - var).abs() < 1e-12 * var.max(1.0));
    }

    #[test]
    fn constant_tile_has_floor_band_features() {
        let t = Tile::new("c", 0, 0, RgbImage::from_pixel(TILE_PX, TILE_PX, Rgb([51, 102, 204])), 0.5);
        let f = tile_features(&t);
        assert!((f[0] - 0.2).abs() < 1e-12 && (f[2] - 0.8).abs() < 1e-12);
        assert!(f[3..6].iter().all(|v| v.abs() < 1e-12));
        assert!(f[6..].iter().all(|v| (v - LOG_FLOOR.ln()).abs() < 1e-6));
    }

    #[test]
    fn cache_returns_identical_features() {
        let cache = FeatureCache::default();
        let t = grating(5.0, true);
        assert_eq!(cache.features(&t), tile_features(&t));
        assert_eq!(cache.features(&t), tile_features(&t));
        assert_eq!(cache.len(), 1);
    }
}
