//! Threefold length-scale sweeps: one fresh model per (level, fold).
//!
//! Tiles are sampled once per case and reused across levels and folds, so
//! the only thing that changes between levels is the transform. Levels run
//! in order; the tile transforms and the folds inside a level run in
//! parallel. Every job seed derives from the root seed, so thread scheduling
//! never reaches the results.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_to_string};
use crate::predictor::{evaluate_model, ModelHandle, ScorerConfig, TileScorer};
use crate::scale_transforms::{Axis, LevelLadder};
use crate::seeds::{derive_seed, key_id, stream};
use crate::slide_io::{DatasetManifest, Label};
use crate::stain_norm::{normalize_to_reference, REFERENCE_BASIS};
use crate::tiling::{build_tissue_mask, sample_tiles, Tile};

pub const FOLDS: usize = 3;
pub const MIN_CASES_PER_CLASS: usize = 6;
/// Per-class test size at full cohort scale (20 MetPos + 20 MetNeg).
pub const MAX_TEST_PER_CLASS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// The fold whose test set holds `case_id`, if any.
    pub fn test_fold_of(&self, case_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.test.iter().any(|id| id == case_id))
    }
}

/// Three class-balanced, pairwise-disjoint test sets of `t` cases per class,
/// `t = min(20, floor(min(n_pos, n_neg) / 3))`; each fold trains on
/// everything outside its test set.
pub fn make_splits(manifest: &DatasetManifest, seed: u64) -> Result<SplitPlan> {
    let mut pos: Vec<&str> = Vec::new();
    let mut neg: Vec<&str> = Vec::new();
    for c in &manifest.cases {
        if c.label.is_pos() {
            pos.push(&c.id);
        } else {
            neg.push(&c.id);
        }
    }
    if pos.len() < MIN_CASES_PER_CLASS || neg.len() < MIN_CASES_PER_CLASS {
        return Err(Error::CohortTooSmall {
            pos: pos.len(),
            neg: neg.len(),
        });
    }
    let mut rng = stream(derive_seed(seed, "splits", &[]));
    pos.sort_unstable();
    neg.sort_unstable();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let t = MAX_TEST_PER_CLASS.min(pos.len().min(neg.len()) / FOLDS);
    let folds = (0..FOLDS)
        .map(|k| {
            let test: Vec<String> = pos[k * t..(k + 1) * t]
                .iter()
                .chain(&neg[k * t..(k + 1) * t])
                .map(|s| s.to_string())
                .collect();
            let held: HashSet<&str> = test.iter().map(String::as_str).collect();
            let train = manifest
                .cases
                .iter()
                .map(|c| c.id.as_str())
                .filter(|id| !held.contains(id))
                .map(str::to_string)
                .collect();
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan { seed, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seed: u64,
    pub tiles_per_case: usize,
    pub scorer: ScorerConfig,
    /// Normalize every sampled tile to the reference stain basis. Off by
    /// default: per-tile percentile matching rescales stain density by
    /// content, which turns texture into a class-dependent colour shift that
    /// survives every RFL level.
    pub stain_norm: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tiles_per_case: 50,
            scorer: ScorerConfig::default(),
            stain_norm: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseTiles {
    pub id: String,
    pub label: Label,
    pub tiles: Vec<Tile>,
}

/// Sampled (and optionally stain-normalized) tiles for every case.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub cases: Vec<CaseTiles>,
    /// Tiles left unnormalized because they carried no stain signal.
    pub stain_fallbacks: usize,
}

impl Cohort {
    fn gather(&self, ids: &[String], tiles: &[Vec<Tile>]) -> (Vec<Tile>, Vec<Label>) {
        let mut t = Vec::new();
        let mut l = Vec::new();
        for id in ids {
            let i = self.cases.iter().position(|c| &c.id == id).expect("split ids come from the cohort");
            t.extend(tiles[i].iter().cloned());
            l.extend(std::iter::repeat_n(self.cases[i].label, tiles[i].len()));
        }
        (t, l)
    }
}

pub fn tile_seed(root: u64, case_id: &str) -> u64 {
    derive_seed(root, "tiles", &[key_id(case_id)])
}

pub fn prepare_cohort(manifest: &DatasetManifest, config: &SweepConfig) -> Result<Cohort> {
    let prepared = manifest
        .cases
        .par_iter()
        .map(|case| -> Result<(CaseTiles, usize)> {
            let slide = manifest.load_slide(case)?;
            let mask = build_tissue_mask(&slide)?;
            let tiles = sample_tiles(&mask, &slide, config.tiles_per_case, tile_seed(config.seed, &case.id))?;
            let mut fallbacks = 0;
            let tiles = if config.stain_norm {
                tiles
                    .into_iter()
                    .map(|t| match normalize_to_reference(&t, &REFERENCE_BASIS) {
                        Ok(n) => n,
                        Err(_) => {
                            fallbacks += 1;
                            t
                        }
                    })
                    .collect()
            } else {
                tiles
            };
            Ok((
                CaseTiles {
                    id: case.id.clone(),
                    label: case.label,
                    tiles,
                },
                fallbacks,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let stain_fallbacks = prepared.iter().map(|(_, f)| f).sum();
    Ok(Cohort {
        cases: prepared.into_iter().map(|(c, _)| c).collect(),
        stain_fallbacks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum LevelStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub index: usize,
    pub control: f64,
    pub length_um: f64,
    pub status: LevelStatus,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub test_tiles: Vec<usize>,
    pub models: Vec<ModelHandle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub level_index: usize,
    pub fold: usize,
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub label: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub seed: u64,
    pub tiles_per_case: usize,
    pub ladder: LevelLadder,
    pub splits: SplitPlan,
    pub levels: Vec<LevelRecord>,
    pub scores: Vec<ScoreRow>,
}

impl SweepResult {
    pub fn failed_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .filter(|l| l.status != LevelStatus::Ok)
            .map(|l| l.index)
            .collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        let failed = self.failed_levels();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::PartialSweep { levels: failed })
        }
    }

    /// (length_um, mean accuracy) for every completed level.
    pub fn mean_curve(&self) -> Vec<(f64, f64)> {
        self.levels
            .iter()
            .filter_map(|l| l.mean_accuracy.map(|m| (l.length_um, m)))
            .collect()
    }

    /// One model per level for `fold`, in ladder order.
    pub fn fold_models(&self, fold: usize) -> Result<Vec<ModelHandle>> {
        self.require_complete()?;
        Ok(self.levels.iter().map(|l| l.models[fold].clone()).collect())
    }

    pub fn level(&self, index: usize) -> Option<&LevelRecord> {
        self.levels.iter().find(|l| l.index == index)
    }
}

/// No-op levels share a seed key so RFL and MFL sweeps train the same
/// identity-level models.
fn job_seed(root: u64, ladder: &LevelLadder, level: usize, fold: usize) -> u64 {
    let identity = match ladder.axis {
        Axis::Rfl => ladder.levels[level].control == 1.0,
        Axis::Mfl => ladder.levels[level].control == f64::from(crate::TILE_PX),
    };
    if identity {
        derive_seed(root, "train/identity", &[fold as u64])
    } else {
        let axis = match ladder.axis {
            Axis::Rfl => 0,
            Axis::Mfl => 1,
        };
        derive_seed(root, "train", &[axis, level as u64, fold as u64])
    }
}

pub fn model_id(axis: Axis, level: usize, fold: usize) -> String {
    format!("{axis}-L{level:02}-F{fold}")
}

struct FoldOutcome {
    accuracy: f64,
    test_tiles: usize,
    model: ModelHandle,
    rows: Vec<ScoreRow>,
}

fn run_fold(
    cohort: &Cohort,
    transformed: &[Vec<Tile>],
    fold: &Fold,
    fold_index: usize,
    ladder: &LevelLadder,
    level: usize,
    scorer: &dyn TileScorer,
    config: &SweepConfig,
) -> Result<FoldOutcome> {
    let (train_tiles, train_labels) = cohort.gather(&fold.train, transformed);
    let (test_tiles, test_labels) = cohort.gather(&fold.test, transformed);
    let scorer_cfg = ScorerConfig {
        seed: job_seed(config.seed, ladder, level, fold_index),
        ..config.scorer.clone()
    };
    let model = scorer
        .train(&model_id(ladder.axis, level, fold_index), &train_tiles, &train_labels, &scorer_cfg)?
        .for_level(ladder.axis, level);
    let (accuracy, scores) = evaluate_model(scorer, &model, &test_tiles, &test_labels, scorer_cfg.threshold)?;
    let rows = test_tiles
        .iter()
        .zip(&test_labels)
        .zip(&scores)
        .map(|((t, l), s)| ScoreRow {
            level_index: level,
            fold: fold_index,
            slide_id: t.slide_id.clone(),
            x: t.x,
            y: t.y,
            label: *l,
            score: *s,
        })
        .collect();
    Ok(FoldOutcome {
        accuracy,
        test_tiles: test_tiles.len(),
        model,
        rows,
    })
}

fn run_level(
    cohort: &Cohort,
    splits: &SplitPlan,
    ladder: &LevelLadder,
    level: usize,
    scorer: &dyn TileScorer,
    config: &SweepConfig,
) -> Result<(Vec<FoldOutcome>, Vec<ScoreRow>)> {
    let transformed: Vec<Vec<Tile>> = cohort
        .cases
        .par_iter()
        .map(|c| c.tiles.par_iter().map(|t| ladder.apply(level, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let outcomes: Vec<FoldOutcome> = splits
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| run_fold(cohort, &transformed, fold, k, ladder, level, scorer, config))
        .collect::<Result<_>>()?;
    let rows = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    Ok((outcomes, rows))
}

pub fn run_sweep(
    cohort: &Cohort,
    splits: &SplitPlan,
    ladder: &LevelLadder,
    scorer: &dyn TileScorer,
    config: &SweepConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<SweepResult> {
    if ladder.is_empty() {
        return Err(Error::InvalidSpec {
            field: "ladder",
            reason: "no levels".into(),
        });
    }
    config.scorer.validate()?;
    let mut result = SweepResult {
        axis: ladder.axis,
        seed: config.seed,
        tiles_per_case: config.tiles_per_case,
        ladder: ladder.clone(),
        splits: splits.clone(),
        levels: Vec::with_capacity(ladder.len()),
        scores: Vec::new(),
    };
    for (i, lvl) in ladder.levels.iter().enumerate() {
        let mut record = LevelRecord {
            index: i,
            control: lvl.control,
            length_um: lvl.length_um,
            status: LevelStatus::Ok,
            fold_accuracy: Vec::new(),
            mean_accuracy: None,
            test_tiles: Vec::new(),
            models: Vec::new(),
        };
        let mut rows = Vec::new();
        match run_level(cohort, splits, ladder, i, scorer, config) {
            Ok((outcomes, r)) => {
                record.fold_accuracy = outcomes.iter().map(|o| o.accuracy).collect();
                record.test_tiles = outcomes.iter().map(|o| o.test_tiles).collect();
                record.mean_accuracy = Some(record.fold_accuracy.iter().sum::<f64>() / record.fold_accuracy.len() as f64);
                record.models = outcomes.into_iter().map(|o| o.model).collect();
                rows = r;
            }
            Err(e) => record.status = LevelStatus::Failed(e.to_string()),
        }
        if let Some(dir) = checkpoint_dir {
            write_checkpoint(dir, ladder.axis, &record, &rows)?;
        }
        result.scores.extend(rows);
        result.levels.push(record);
    }
    Ok(result)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    axis: Axis,
    record: LevelRecord,
    scores: Vec<ScoreRow>,
}

fn checkpoint_path(dir: &Path, axis: Axis, level: usize) -> std::path::PathBuf {
    dir.join(format!("{axis}_level_{level:02}.json"))
}

fn write_checkpoint(dir: &Path, axis: Axis, record: &LevelRecord, scores: &[ScoreRow]) -> Result<()> {
    let cp = Checkpoint {
        axis,
        record: record.clone(),
        scores: scores.to_vec(),
    };
    atomic_write(
        &checkpoint_path(dir, axis, record.index),
        serde_json::to_string(&cp).expect("checkpoint serializes").as_bytes(),
    )
}

/// Reads back a per-level checkpoint written during a sweep.
pub fn read_checkpoint(dir: &Path, axis: Axis, level: usize) -> Result<(LevelRecord, Vec<ScoreRow>)> {
    let path = checkpoint_path(dir, axis, level);
    let text = read_to_string(&path)?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::MalformedArtifact {
        what: "sweep checkpoint",
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok((cp.record, cp.scores))
}
