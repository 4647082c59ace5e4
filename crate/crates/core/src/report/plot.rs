//! Accuracy-versus-length plots drawn with a tiny built-in rasterizer, so
//! the PNG bytes depend only on the data.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::breakpoint_fit::PiecewiseFit;
use crate::error::Result;
use crate::fsutil::{encode_rgb_png, write_rgb_png};

pub const PLOT_W: u32 = 640;
pub const PLOT_H: u32 = 400;

const LEFT: i64 = 70;
const RIGHT: i64 = 20;
const TOP: i64 = 20;
const BOTTOM: i64 = 50;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const FOLD: Rgb<u8> = Rgb([150, 150, 150]);
const MEAN: Rgb<u8> = Rgb([20, 80, 200]);
const FIT: Rgb<u8> = Rgb([210, 40, 30]);

/// 3x5 glyphs, one row per byte, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'u' => [0b000, 0b000, 0b101, 0b101, 0b111],
        'm' => [0b000, 0b000, 0b111, 0b111, 0b101],
        ' ' => [0; 5],
        _ => return None,
    })
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && x < i64::from(PLOT_W) && y < i64::from(PLOT_H) {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    /// Integer line with a square pen of side `pen`.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), pen: i64, c: Rgb<u8>, dash: Option<i64>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            if dash.is_some_and(|d| (i / d) % 2 == 1) {
                continue;
            }
            let x = x0 + ((x1 - x0) * i + steps / 2).div_euclid(steps);
            let y = y0 + ((y1 - y0) * i + steps / 2).div_euclid(steps);
            self.rect(x - pen / 2, y - pen / 2, pen, pen, c);
        }
    }

    /// Text at scale 2 with its top-left corner at (x, y).
    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            let Some(g) = glyph(ch) else { continue };
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        self.rect(x + i as i64 * 8 + col * 2, y + row as i64 * 2, 2, 2, c);
                    }
                }
            }
        }
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 8 - 2
}

/// Shortest decimal label for a tick value.
fn label(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

struct Axes {
    log_x: bool,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let log_x = xs.iter().all(|&x| x > 0.0);
        let tx = |x: f64| if log_x { x.log10() } else { x };
        let (mut x0, mut x1) = bounds(xs.iter().map(|&x| tx(x)));
        let (mut y0, mut y1) = bounds(ys.iter().copied());
        let px = (x1 - x0) * 0.05;
        let py = (y1 - y0) * 0.08;
        x0 -= px;
        x1 += px;
        y0 -= py;
        y1 += py;
        Self { log_x, x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> i64 {
        let t = if self.log_x { x.log10() } else { x };
        let w = i64::from(PLOT_W) - LEFT - RIGHT;
        LEFT + ((t - self.x0) / (self.x1 - self.x0) * w as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let h = i64::from(PLOT_H) - TOP - BOTTOM;
        TOP + h - ((y - self.y0) / (self.y1 - self.y0) * h as f64).round() as i64
    }

    fn x_ticks(&self) -> Vec<f64> {
        if self.log_x {
            let mut t = Vec::new();
            let (lo, hi) = (self.x0.floor() as i32, self.x1.ceil() as i32);
            for e in lo..=hi {
                for m in [1.0, 2.0, 5.0] {
                    let v = m * 10f64.powi(e);
                    if v.log10() >= self.x0 && v.log10() <= self.x1 {
                        t.push(v);
                    }
                }
            }
            t
        } else {
            linear_ticks(self.x0, self.x1)
        }
    }
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 8.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

/// Per-fold points as (x, y), the mean curve, and an optional fit. Without a
/// fit the plot is scatter and mean line only.
pub fn render_curve(folds: &[(f64, f64)], mean: &[(f64, f64)], fit: Option<&PiecewiseFit<f64>>) -> RgbImage {
    let xs: Vec<f64> = folds.iter().chain(mean).map(|p| p.0).collect();
    let ys: Vec<f64> = folds.iter().chain(mean).map(|p| p.1).collect();
    let ax = Axes::fit(&xs, &ys);
    let mut c = Canvas {
        img: RgbImage::from_pixel(PLOT_W, PLOT_H, WHITE),
    };
    let (bx0, bx1) = (LEFT, i64::from(PLOT_W) - RIGHT);
    let (by0, by1) = (TOP, i64::from(PLOT_H) - BOTTOM);

    for t in ax.x_ticks() {
        let x = ax.px(t);
        c.line((x, by0), (x, by1), 1, GRID, None);
        c.line((x, by1), (x, by1 + 5), 1, INK, None);
        let s = label(t);
        c.text(x - text_width(&s) / 2, by1 + 10, &s, INK);
    }
    for t in linear_ticks(ax.y0, ax.y1) {
        let y = ax.py(t);
        c.line((bx0, y), (bx1, y), 1, GRID, None);
        c.line((bx0 - 5, y), (bx0, y), 1, INK, None);
        let s = label(t);
        c.text(bx0 - 10 - text_width(&s), y - 5, &s, INK);
    }
    c.line((bx0, by0), (bx0, by1), 1, INK, None);
    c.line((bx0, by1), (bx1, by1), 1, INK, None);
    c.text(bx1 - text_width("um"), by1 + 30, "um", INK);

    for &(x, y) in folds {
        c.rect(ax.px(x) - 2, ax.py(y) - 2, 5, 5, FOLD);
    }
    for w in mean.windows(2) {
        c.line((ax.px(w[0].0), ax.py(w[0].1)), (ax.px(w[1].0), ax.py(w[1].1)), 2, MEAN, None);
    }
    for &(x, y) in mean {
        c.rect(ax.px(x) - 3, ax.py(y) - 3, 7, 7, MEAN);
    }

    if let Some(f) = fit {
        let (lo, hi) = bounds(xs.iter().copied());
        // Segments are straight in x, so sample them densely for a log axis.
        let segment = |c: &mut Canvas, a: f64, b: f64, line: &crate::breakpoint_fit::LineFit<f64>| {
            const N: usize = 64;
            let at = |i: usize| {
                let t = i as f64 / N as f64;
                if ax.log_x {
                    10f64.powf(a.log10() + t * (b.log10() - a.log10()))
                } else {
                    a + t * (b - a)
                }
            };
            for i in 0..N {
                let (x0, x1) = (at(i), at(i + 1));
                c.line((ax.px(x0), ax.py(line.eval(&x0))), (ax.px(x1), ax.py(line.eval(&x1))), 2, FIT, None);
            }
        };
        segment(&mut c, lo, f.break_x, &f.left);
        segment(&mut c, f.break_x, hi, &f.right);
        let bx = ax.px(f.break_x);
        c.line((bx, by0), (bx, by1), 1, FIT, Some(4));
        let s = label(f.break_x);
        c.text(bx + 6, by0 + 4, &s, FIT);
    }
    c.img
}

pub fn curve_png(folds: &[(f64, f64)], mean: &[(f64, f64)], fit: Option<&PiecewiseFit<f64>>) -> Vec<u8> {
    encode_rgb_png(&render_curve(folds, mean, fit))
}

pub fn write_curve_png(path: &Path, folds: &[(f64, f64)], mean: &[(f64, f64)], fit: Option<&PiecewiseFit<f64>>) -> Result<()> {
    write_rgb_png(path, &render_curve(folds, mean, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::breakpoint_fit::{fit_piecewise, kink_fixture};
    use crate::seeds::sha256_hex;

    #[test]
    fn kink_plot_marks_the_break() {
        let pts = kink_fixture();
        let fit = fit_piecewise(&pts).unwrap();
        let img = render_curve(&[], &pts, Some(&fit));
        assert_eq!(img.dimensions(), (PLOT_W, PLOT_H));
        let ax = Axes::fit(&pts.iter().map(|p| p.0).collect::<Vec<_>>(), &pts.iter().map(|p| p.1).collect::<Vec<_>>());
        let bx = ax.px(fit.break_x) as u32;
        let marker = (TOP as u32..PLOT_H - BOTTOM as u32).filter(|&y| *img.get_pixel(bx, y) == FIT).count();
        assert!(marker > 100, "dashed break marker, {marker} px");
    }

    #[test]
    fn no_fit_means_no_fit_colour() {
        let pts = kink_fixture();
        let img = render_curve(&pts, &pts, None);
        assert!(img.pixels().all(|p| *p != FIT));
        assert!(img.pixels().any(|p| *p == MEAN));
    }

    #[test]
    fn golden_bytes() {
        let pts = kink_fixture();
        let fit = fit_piecewise(&pts).unwrap();
        let folds: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, y + 0.25)).collect();
        let png = curve_png(&folds, &pts, Some(&fit));
        assert_eq!(sha256_hex(&png), GOLDEN);
    }

    // Frozen after checking the rendered image by eye.
    const GOLDEN: &str = "ac4d74dd75cef57bfd61468411f37225bf80bef6e08b20a2db3bb0e224a9d437";

    #[test]
    fn tick_labels() {
        assert_eq!(label(0.5), "0.5");
        assert_eq!(label(10.0), "10");
        assert_eq!(label(-0.0), "0");
        assert_eq!(linear_ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
    }
}
