//! CSV and JSON artifacts with matching readers.
//!
//! Floats are written in shortest round-trip form, so reading an artifact
//! back reproduces the in-memory values bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::breakpoint_fit::{Candidate, LineFit, PiecewiseFit};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_to_string};
use crate::scale_transforms::Axis;
use crate::slide_io::Label;
use crate::sweep::{LevelStatus, ScoreRow, SweepResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAccuracyRow {
    pub axis: Axis,
    pub level_index: usize,
    pub length_um: f64,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub axis: Axis,
    pub level_index: usize,
    pub length_um: f64,
    /// Empty for failed levels.
    pub mean_accuracy: Option<f64>,
    /// `ok` or `failed`.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScoreCsvRow {
    level_index: usize,
    fold: usize,
    slide_id: String,
    x: u32,
    y: u32,
    label: Label,
    score: f64,
}

/// The persisted form of a two-segment fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub axis: Option<Axis>,
    /// Characteristic length in microns when fitted to a sweep.
    pub break_x: f64,
    pub left: LineFit<f64>,
    pub right: LineFit<f64>,
    pub residual_l1: f64,
    pub single_line_residual: f64,
    pub candidates_examined: usize,
    pub candidates: Vec<Candidate<f64>>,
    /// The (x, y) points that were fitted.
    pub points: Vec<(f64, f64)>,
}

impl FitArtifact {
    pub fn new(axis: Option<Axis>, fit: &PiecewiseFit<f64>, points: &[(f64, f64)]) -> Self {
        Self {
            axis,
            break_x: fit.break_x,
            left: fit.left.clone(),
            right: fit.right.clone(),
            residual_l1: fit.residual_l1,
            single_line_residual: fit.single_line_residual,
            candidates_examined: fit.candidates_examined,
            candidates: fit.candidates.clone(),
            points: points.to_vec(),
        }
    }

    pub fn to_fit(&self) -> PiecewiseFit<f64> {
        PiecewiseFit {
            break_x: self.break_x,
            left: self.left.clone(),
            right: self.right.clone(),
            residual_l1: self.residual_l1,
            single_line_residual: self.single_line_residual,
            candidates_examined: self.candidates_examined,
            candidates: self.candidates.clone(),
        }
    }
}

fn to_csv<R: Serialize>(header: &str, rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv");
    format!("{header}\n{body}")
}

fn read_csv<R: DeserializeOwned>(path: &Path, what: &'static str, header: &str) -> Result<Vec<R>> {
    let text = read_to_string(path)?;
    let bad = |reason: String| Error::MalformedArtifact {
        what,
        path: path.to_path_buf(),
        reason,
    };
    let first = text.lines().next().unwrap_or("");
    if first.trim_end() != header {
        return Err(bad(format!("expected header {header:?}, found {first:?}")));
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(|e| bad(e.to_string()))).collect()
}

pub const SWEEP_HEADER: &str = "axis,level_index,length_um,fold,accuracy";
pub const SWEEP_MEAN_HEADER: &str = "axis,level_index,length_um,mean_accuracy,status";
pub const SCORES_HEADER: &str = "level_index,fold,slide_id,x,y,label,score";

pub fn sweep_rows(result: &SweepResult) -> Vec<FoldAccuracyRow> {
    result
        .levels
        .iter()
        .flat_map(|l| {
            l.fold_accuracy.iter().enumerate().map(move |(fold, &accuracy)| FoldAccuracyRow {
                axis: result.axis,
                level_index: l.index,
                length_um: l.length_um,
                fold,
                accuracy,
            })
        })
        .collect()
}

pub fn mean_rows(result: &SweepResult) -> Vec<MeanRow> {
    result
        .levels
        .iter()
        .map(|l| MeanRow {
            axis: result.axis,
            level_index: l.index,
            length_um: l.length_um,
            mean_accuracy: l.mean_accuracy,
            status: match l.status {
                LevelStatus::Ok => "ok".into(),
                LevelStatus::Failed(_) => "failed".into(),
            },
        })
        .collect()
}

pub fn sweep_csv(result: &SweepResult) -> String {
    to_csv(SWEEP_HEADER, sweep_rows(result))
}

pub fn sweep_mean_csv(result: &SweepResult) -> String {
    to_csv(SWEEP_MEAN_HEADER, mean_rows(result))
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    to_csv(
        SCORES_HEADER,
        rows.iter().map(|r| ScoreCsvRow {
            level_index: r.level_index,
            fold: r.fold,
            slide_id: r.slide_id.clone(),
            x: r.x,
            y: r.y,
            label: r.label,
            score: r.score,
        }),
    )
}

pub fn fit_json(fit: &FitArtifact) -> String {
    let mut s = serde_json::to_string_pretty(fit).expect("fit serializes");
    s.push('\n');
    s
}

pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    atomic_write(path, sweep_csv(result).as_bytes())
}

pub fn write_sweep_mean_csv(path: &Path, result: &SweepResult) -> Result<()> {
    atomic_write(path, sweep_mean_csv(result).as_bytes())
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    atomic_write(path, scores_csv(rows).as_bytes())
}

pub fn write_fit_json(path: &Path, fit: &FitArtifact) -> Result<()> {
    atomic_write(path, fit_json(fit).as_bytes())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<FoldAccuracyRow>> {
    read_csv(path, "sweep csv", SWEEP_HEADER)
}

pub fn read_sweep_mean_csv(path: &Path) -> Result<Vec<MeanRow>> {
    read_csv(path, "sweep mean csv", SWEEP_MEAN_HEADER)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let rows: Vec<ScoreCsvRow> = read_csv(path, "scores csv", SCORES_HEADER)?;
    Ok(rows
        .into_iter()
        .map(|r| ScoreRow {
            level_index: r.level_index,
            fold: r.fold,
            slide_id: r.slide_id,
            x: r.x,
            y: r.y,
            label: r.label,
            score: r.score,
        })
        .collect())
}

pub fn read_fit_json(path: &Path) -> Result<FitArtifact> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::MalformedArtifact {
        what: "fit json",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Points for a curve fit from a CSV with either `x,y` columns or the
/// `length_um,mean_accuracy` columns of a sweep mean file. Failed levels
/// (empty mean) are skipped.
pub fn read_curve_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = read_to_string(path)?;
    let bad = |reason: String| Error::MalformedArtifact {
        what: "curve csv",
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (xi, yi) = match (col("x"), col("y"), col("length_um"), col("mean_accuracy")) {
        (Some(x), Some(y), _, _) => (x, y),
        (_, _, Some(x), Some(y)) => (x, y),
        _ => return Err(bad("need columns x,y or length_um,mean_accuracy".into())),
    };
    let mut pts = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let (xs, ys) = (rec.get(xi).unwrap_or("").trim(), rec.get(yi).unwrap_or("").trim());
        if ys.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("row {}: {s:?} is not a finite number", n + 2)))
        };
        pts.push((parse(xs)?, parse(ys)?));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pts)
}
