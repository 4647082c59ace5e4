//! End-to-end runs: sweeps, fits, curves and slope maps bundled under one
//! output directory with a digest index.
//!
//! Layout, per selected axis `A`:
//! `A/ladder.csv`, `A/sweep.csv`, `A/sweep_mean.csv`, `A/scores.csv`,
//! `A/fit.json`, `A/curve.png`, `A/slopemap.csv`, `A/maps/*.png` and
//! `A/checkpoints/*.json`; plus `run.conf` and `index.md` at the top.

pub mod artifacts;
pub mod config;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::breakpoint_fit::fit_piecewise;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::predictor::{make_scorer, TileScorer};
use crate::scale_transforms::{Axis, LevelLadder};
use crate::seeds::sha256_hex;
use crate::slide_io::{load_manifest, DatasetManifest, Label};
use crate::slope_map::{
    build_slope_map, concat_regional_map, render_overlay, residual_detail, sub_ladder,
    MapRequest, SlopeMap, REGION_K,
};
use crate::sweep::{make_splits, prepare_cohort, run_sweep, Cohort, SplitPlan, SweepResult};
use crate::tiling::{build_tissue_mask, Tile};

pub use artifacts::FitArtifact;
pub use config::{MapSlides, RunConfig};

/// Minimum completed levels for a two-segment fit.
pub const MIN_FIT_LEVELS: usize = 4;

#[derive(Clone, Debug)]
pub struct AxisReport {
    pub sweep: SweepResult,
    pub fit: Option<FitArtifact>,
    /// Length used to pick the slope-map sub-ladder.
    pub characteristic_um: f64,
    pub maps: Vec<SlopeMap>,
}

#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub out: PathBuf,
    pub axes: Vec<AxisReport>,
    /// (path relative to `out`, SHA-256) in path order.
    pub digests: Vec<(String, String)>,
    pub stain_fallbacks: usize,
}

/// All cases of a manifest must share one pixel pitch; ladders are built
/// from it.
pub fn manifest_pitch(manifest: &DatasetManifest) -> Result<f64> {
    let first = manifest.cases.first().ok_or_else(|| Error::InvalidConfig {
        key: "manifest".into(),
        reason: "manifest has no cases".into(),
    })?;
    if let Some(c) = manifest.cases.iter().find(|c| c.pitch_um != first.pitch_um) {
        return Err(Error::InvalidConfig {
            key: "manifest".into(),
            reason: format!("mixed pixel pitch: {} has {} um, {} has {} um", first.id, first.pitch_um, c.id, c.pitch_um),
        });
    }
    Ok(first.pitch_um)
}

/// Fits the mean curve when enough levels completed.
pub fn fit_sweep(sweep: &SweepResult) -> Result<Option<FitArtifact>> {
    let pts = sweep.mean_curve();
    if pts.len() < MIN_FIT_LEVELS {
        return Ok(None);
    }
    let fit = fit_piecewise(&pts)?;
    Ok(Some(FitArtifact::new(Some(sweep.axis), &fit, &pts)))
}

/// Slides to map: explicit ids, or the first MetPos and MetNeg test cases
/// of fold 0.
fn map_slide_ids(cfg: &RunConfig, manifest: &DatasetManifest, splits: &SplitPlan) -> Result<Vec<String>> {
    match &cfg.map_slides {
        MapSlides::None => Ok(vec![]),
        MapSlides::Ids(ids) => {
            for id in ids {
                if manifest.case(id).is_none() {
                    return Err(Error::InvalidConfig {
                        key: "map_slides".into(),
                        reason: format!("no case {id:?} in the manifest"),
                    });
                }
            }
            Ok(ids.clone())
        }
        MapSlides::Auto => {
            let test = &splits.folds[0].test;
            let first = |label: Label| {
                test.iter()
                    .find(|id| manifest.case(id).is_some_and(|c| c.label == label))
                    .cloned()
            };
            Ok([first(Label::MetPos), first(Label::MetNeg)].into_iter().flatten().collect())
        }
    }
}

fn curve_points(sweep: &SweepResult) -> Vec<(f64, f64)> {
    sweep
        .levels
        .iter()
        .flat_map(|l| l.fold_accuracy.iter().map(move |&a| (l.length_um, a)))
        .collect()
}

struct Writer {
    out: PathBuf,
    digests: Vec<(String, String)>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.out.join(rel), bytes)?;
        self.digests.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn put_png(&mut self, rel: &str, img: &image::RgbImage) -> Result<()> {
        self.put(rel, &crate::fsutil::encode_rgb_png(img))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_axis(
    cfg: &RunConfig,
    axis: Axis,
    manifest: &DatasetManifest,
    cohort: &Cohort,
    splits: &SplitPlan,
    pitch: f64,
    scorer: &dyn TileScorer,
    w: &mut Writer,
) -> Result<AxisReport> {
    let ladder = LevelLadder::new(axis, pitch, cfg.levels_for(axis))?;
    let dir = axis.to_string();
    let sweep = run_sweep(
        cohort,
        splits,
        &ladder,
        scorer,
        &cfg.sweep_config(),
        Some(&w.out.join(&dir).join("checkpoints")),
    )?;
    w.put(&format!("{dir}/ladder.csv"), ladder.to_csv().as_bytes())?;
    w.put(&format!("{dir}/sweep.csv"), artifacts::sweep_csv(&sweep).as_bytes())?;
    w.put(&format!("{dir}/sweep_mean.csv"), artifacts::sweep_mean_csv(&sweep).as_bytes())?;
    w.put(&format!("{dir}/scores.csv"), artifacts::scores_csv(&sweep.scores).as_bytes())?;

    let fit = fit_sweep(&sweep)?;
    if let Some(f) = &fit {
        w.put(&format!("{dir}/fit.json"), artifacts::fit_json(f).as_bytes())?;
    }
    let curve = plot::render_curve(&curve_points(&sweep), &sweep.mean_curve(), fit.as_ref().map(|f| f.to_fit()).as_ref());
    w.put_png(&format!("{dir}/curve.png"), &curve)?;

    let characteristic_um = match axis {
        Axis::Rfl => cfg.characteristic_rfl_um,
        Axis::Mfl => cfg.characteristic_mfl_um,
    }
    .or(fit.as_ref().map(|f| f.break_x))
    .unwrap_or(ladder.levels[ladder.len() / 2].length_um);

    let mut maps = Vec::new();
    let ids = map_slide_ids(cfg, manifest, splits)?;
    if !ids.is_empty() {
        sweep.require_complete()?;
        let levels = sub_ladder(&ladder, characteristic_um);
        for id in &ids {
            let case = manifest.case(id).expect("ids checked against the manifest");
            let slide = manifest.load_slide(case)?;
            let mask = build_tissue_mask(&slide)?;
            // Models from the fold that held this slide out, when there is one.
            let fold = splits.test_fold_of(id).unwrap_or(0);
            let models = sweep.fold_models(fold)?;
            let map = build_slope_map(
                scorer,
                &MapRequest {
                    slide: &slide,
                    mask: &mask.mask,
                    ladder: &ladder,
                    models: &models,
                    levels: &levels,
                    epsilon: cfg.epsilon,
                    threshold: cfg.scorer.threshold,
                    stain_norm: cfg.stain_norm,
                },
            )?;
            w.put_png(&format!("{dir}/maps/{id}_overlay.png"), &render_overlay(&slide, &map))?;
            if let Ok(regional) = concat_regional_map(&map, REGION_K) {
                w.put_png(&format!("{dir}/maps/{id}_regional.png"), &render_overlay(&slide, &regional))?;
            }
            if axis == Axis::Rfl {
                let top = map
                    .cells
                    .iter()
                    .filter(|c| c.sensitive)
                    .fold(None::<&crate::slope_map::SlopeCell>, |best, c| match best {
                        Some(b) if b.norm_slope.abs() >= c.norm_slope.abs() => Some(b),
                        _ => Some(c),
                    });
                if let Some(c) = top {
                    let tile = Tile::from_slide(&slide, c.x, c.y);
                    let f = (characteristic_um / (2.0 * pitch)).max(1.0);
                    let (orig, degraded, diff) = residual_detail(&tile, f)?;
                    let stem = format!("{dir}/maps/{id}_residual_{}_{}", c.x, c.y);
                    w.put_png(&format!("{stem}_original.png"), &orig)?;
                    w.put_png(&format!("{stem}_degraded.png"), &degraded)?;
                    w.put_png(&format!("{stem}_difference.png"), &diff)?;
                }
            }
            maps.push(map);
        }
    }
    w.put(&format!("{dir}/slopemap.csv"), crate::slope_map::slopemap_csv(&maps).as_bytes())?;
    Ok(AxisReport {
        sweep,
        fit,
        characteristic_um,
        maps,
    })
}

fn index_md(summary: &ReportSummary) -> String {
    let mut s = String::from("# Run index\n\n");
    for a in &summary.axes {
        let _ = write!(s, "- {}: {} levels", a.sweep.axis, a.sweep.levels.len());
        match &a.fit {
            Some(f) => {
                let _ = write!(s, ", break {:.3} um", f.break_x);
            }
            None => s.push_str(", no fit"),
        }
        let failed = a.sweep.failed_levels();
        if !failed.is_empty() {
            let _ = write!(s, ", failed levels {failed:?}");
        }
        s.push('\n');
    }
    s.push_str("\n| file | sha256 |\n|---|---|\n");
    for (p, d) in &summary.digests {
        let _ = writeln!(s, "| {p} | {d} |");
    }
    s
}

fn run_report_inner(cfg: &RunConfig, scorer: &dyn TileScorer) -> Result<ReportSummary> {
    let manifest = load_manifest(&cfg.manifest)?;
    let pitch = manifest_pitch(&manifest)?;
    let splits = make_splits(&manifest, cfg.seed)?;
    let cohort = prepare_cohort(&manifest, &cfg.sweep_config())?;
    let mut w = Writer {
        out: cfg.out.clone(),
        digests: Vec::new(),
    };
    // The output directory is not part of the run, so it stays out of the
    // recorded config; two runs into different directories index the same.
    let conf: String = cfg.to_text().lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect();
    w.put("run.conf", conf.as_bytes())?;
    let mut axes = Vec::new();
    for &axis in &cfg.axes {
        axes.push(run_axis(cfg, axis, &manifest, &cohort, &splits, pitch, scorer, &mut w)?);
    }
    w.digests.sort();
    let summary = ReportSummary {
        out: cfg.out.clone(),
        axes,
        digests: w.digests,
        stain_fallbacks: cohort.stain_fallbacks,
    };
    atomic_write(&cfg.out.join("index.md"), index_md(&summary).as_bytes())?;
    Ok(summary)
}

/// Runs every selected axis with `scorer`, honouring `cfg.jobs`.
pub fn run_report_with(cfg: &RunConfig, scorer: &dyn TileScorer) -> Result<ReportSummary> {
    cfg.validate()?;
    with_jobs(cfg.jobs, || run_report_inner(cfg, scorer))
}

pub fn run_report(cfg: &RunConfig) -> Result<ReportSummary> {
    cfg.validate()?;
    let scorer = make_scorer(&cfg.scorer.kind)?;
    run_report_with(cfg, scorer.as_ref())
}

/// Runs `f` on a pool capped at `jobs` threads, or on the global pool.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig {
                key: "jobs".into(),
                reason: e.to_string(),
            })?
            .install(f),
    }
}

/// Digest of every CSV file listed in a summary, for run-to-run comparison.
pub fn csv_digests(summary: &ReportSummary) -> Vec<(String, String)> {
    summary.digests.iter().filter(|(p, _)| p.ends_with(".csv")).cloned().collect()
}

pub fn out_path(out: &Path, axis: Axis, file: &str) -> PathBuf {
    out.join(axis.to_string()).join(file)
}
