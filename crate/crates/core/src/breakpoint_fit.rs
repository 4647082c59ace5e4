//! Exact L1 line and two-segment fits.
//!
//! An L1-optimal line through points with at least two distinct x passes
//! through two of the points, so enumerating every pair line is exact. The
//! two-segment fit tries a break at the midpoint between each pair of
//! consecutive distinct x values and fits both sides independently (the
//! segments need not meet). Everything is generic over [`Real`], so the same
//! code runs on `f64` and on `BigRational`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit<T> {
    pub slope: T,
    pub intercept: T,
    /// Sum of absolute residuals.
    pub residual: T,
}

impl<T: Real> LineFit<T> {
    pub fn eval(&self, x: &T) -> T {
        self.slope.clone() * x.clone() + self.intercept.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T> {
    pub break_x: T,
    pub residual: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFit<T> {
    pub break_x: T,
    pub left: LineFit<T>,
    pub right: LineFit<T>,
    pub residual_l1: T,
    /// Residual of the best single L1 line over all points.
    pub single_line_residual: T,
    pub candidates_examined: usize,
    pub candidates: Vec<Candidate<T>>,
}

impl<T: Real> PiecewiseFit<T> {
    pub fn eval(&self, x: &T) -> T {
        if *x <= self.break_x {
            self.left.eval(x)
        } else {
            self.right.eval(x)
        }
    }
}

fn l1_residual<T: Real>(points: &[(T, T)], slope: &T, intercept: &T) -> T {
    points.iter().fold(T::zero(), |acc, (x, y)| {
        acc + (y.clone() - slope.clone() * x.clone() - intercept.clone()).abs()
    })
}

/// `a` is preferred over `b`: smaller residual, then smaller |slope|, then
/// smaller intercept.
fn better<T: Real>(a: &LineFit<T>, b: &LineFit<T>) -> bool {
    if a.residual != b.residual {
        return a.residual < b.residual;
    }
    let (sa, sb) = (a.slope.abs(), b.slope.abs());
    if sa != sb {
        return sa < sb;
    }
    a.intercept < b.intercept
}

pub fn fit_l1_line<T: Real>(points: &[(T, T)]) -> Result<LineFit<T>> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let mut best: Option<LineFit<T>> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (xi, yi) = &points[i];
            let (xj, yj) = &points[j];
            if xi == xj {
                continue;
            }
            let slope = (yj.clone() - yi.clone()) / (xj.clone() - xi.clone());
            let intercept = yi.clone() - slope.clone() * xi.clone();
            let residual = l1_residual(points, &slope, &intercept);
            let cand = LineFit {
                slope,
                intercept,
                residual,
            };
            if best.as_ref().is_none_or(|b| better(&cand, b)) {
                best = Some(cand);
            }
        }
    }
    best.ok_or(Error::DegenerateX)
}

fn distinct_x<T: Real>(points: &[(T, T)]) -> bool {
    points.iter().any(|(x, _)| *x != points[0].0)
}

pub fn fit_piecewise<T: Real>(points: &[(T, T)]) -> Result<PiecewiseFit<T>> {
    if points.len() < 4 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("x values are ordered"));
    let single = fit_l1_line(&pts)?;

    let mut best: Option<(T, LineFit<T>, LineFit<T>, T)> = None;
    let mut candidates = Vec::new();
    for i in 2..=pts.len() - 2 {
        if pts[i - 1].0 == pts[i].0 {
            continue;
        }
        let (left, right) = pts.split_at(i);
        if !distinct_x(left) || !distinct_x(right) {
            continue;
        }
        let lf = fit_l1_line(left)?;
        let rf = fit_l1_line(right)?;
        let total = lf.residual.clone() + rf.residual.clone();
        let break_x = (pts[i - 1].0.clone() + pts[i].0.clone()) / T::two();
        candidates.push(Candidate {
            break_x: break_x.clone(),
            residual: total.clone(),
        });
        if best.as_ref().is_none_or(|b| total < b.3) {
            best = Some((break_x, lf, rf, total));
        }
    }
    let (break_x, left, right, residual_l1) = best.ok_or(Error::InsufficientPoints(points.len()))?;
    Ok(PiecewiseFit {
        break_x,
        left,
        right,
        residual_l1,
        single_line_residual: single.residual,
        candidates_examined: candidates.len(),
        candidates,
    })
}

impl PiecewiseFit<num::BigRational> {
    /// Lossy projection for reporting.
    pub fn to_f64(&self) -> PiecewiseFit<f64> {
        let f = |v: &num::BigRational| v.to_f64_lossy();
        let line = |l: &LineFit<num::BigRational>| LineFit {
            slope: f(&l.slope),
            intercept: f(&l.intercept),
            residual: f(&l.residual),
        };
        PiecewiseFit {
            break_x: f(&self.break_x),
            left: line(&self.left),
            right: line(&self.right),
            residual_l1: f(&self.residual_l1),
            single_line_residual: f(&self.single_line_residual),
            candidates_examined: self.candidates_examined,
            candidates: self
                .candidates
                .iter()
                .map(|c| Candidate {
                    break_x: f(&c.break_x),
                    residual: f(&c.residual),
                })
                .collect(),
        }
    }
}

/// The frozen kink fixture: `y = 10 - 2x` for `x <= 5`, `y = 0.5 - 0.1x`
/// above, at `x = 1..=9`.
pub fn kink_fixture() -> Vec<(f64, f64)> {
    (1..=9)
        .map(|x| {
            let x = f64::from(x);
            (x, if x <= 5.0 { 10.0 - 2.0 * x } else { 0.5 - 0.1 * x })
        })
        .collect()
}
