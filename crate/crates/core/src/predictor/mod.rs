//! Tile scoring contract: a built-in trainable scorer and a client for
//! external scorers speaking newline-delimited JSON.

mod builtin;
mod external;
pub mod features;
pub mod logistic;
pub mod protocol;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use builtin::BuiltinScorer;
pub use external::{Endpoint, ExternalScorer};
pub use features::{tile_features, FeatureCache, Features, N_FEATURES};
pub use logistic::{BatchRecord, LogisticModel, TrainParams};

use crate::error::{Error, Result};
use crate::scale_transforms::Axis;
use crate::slide_io::Label;
use crate::tiling::Tile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Builtin,
    External(String),
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerKind::Builtin => f.write_str("builtin"),
            ScorerKind::External(addr) => write!(f, "external={addr}"),
        }
    }
}

impl FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "builtin" {
            return Ok(ScorerKind::Builtin);
        }
        match s.strip_prefix("external=") {
            Some(addr) if !addr.is_empty() => {
                Endpoint::parse(addr)?;
                Ok(ScorerKind::External(addr.to_string()))
            }
            _ => Err(Error::InvalidScorerConfig(format!(
                "scorer {s:?}: expected builtin or external=ADDR"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub threshold: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Builtin,
            seed: 0,
            epochs: 200,
            batch_size: 200,
            learning_rate: 0.5,
            l2: 1e-3,
            threshold: 0.5,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScorerConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie strictly between 0 and 1", self.threshold));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 {} must be non-negative", self.l2));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2: self.l2,
        }
    }
}

/// A trained model as seen by callers; the parameters stay with the scorer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub id: String,
    pub axis: Option<Axis>,
    pub level: Option<usize>,
    pub seed: u64,
    pub digest: String,
}

impl ModelHandle {
    pub fn for_level(mut self, axis: Axis, level: usize) -> Self {
        self.axis = Some(axis);
        self.level = Some(level);
        self
    }
}

/// Anything that can train per-level models and score tiles with them.
/// Scoring is read-only; implementations handle their own locking.
pub trait TileScorer: Send + Sync {
    fn train(&self, model_id: &str, tiles: &[Tile], labels: &[Label], config: &ScorerConfig) -> Result<ModelHandle>;

    fn score(&self, model: &ModelHandle, tile: &Tile) -> Result<f64>;

    fn score_batch(&self, model: &ModelHandle, tiles: &[Tile]) -> Result<Vec<f64>> {
        tiles.iter().map(|t| self.score(model, t)).collect()
    }
}

pub fn make_scorer(kind: &ScorerKind) -> Result<Box<dyn TileScorer>> {
    Ok(match kind {
        ScorerKind::Builtin => Box::new(BuiltinScorer::new()),
        ScorerKind::External(addr) => Box::new(ExternalScorer::new(Endpoint::parse(addr)?)),
    })
}

/// Fraction of tiles with `(score >= threshold) == (label == MetPos)`.
pub fn evaluate_accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels");
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == l.is_pos())
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Scores `tiles` and returns (accuracy, per-tile scores).
pub fn evaluate_model(
    scorer: &dyn TileScorer,
    model: &ModelHandle,
    tiles: &[Tile],
    labels: &[Label],
    threshold: f64,
) -> Result<(f64, Vec<f64>)> {
    if tiles.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let scores = scorer.score_batch(model, tiles)?;
    Ok((evaluate_accuracy(&scores, labels, threshold)?, scores))
}
