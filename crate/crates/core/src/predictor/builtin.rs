use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::features::FeatureCache;
use super::logistic::{BatchRecord, LogisticModel};
use super::{ModelHandle, ScorerConfig, TileScorer, N_FEATURES};
use crate::error::{Error, Result};
use crate::slide_io::Label;
use crate::tiling::Tile;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Stored {
    handle: ModelHandle,
    model: LogisticModel<f64>,
    #[serde(skip)]
    batches: Vec<BatchRecord>,
}

/// Logistic scorer over [`tile_features`](super::tile_features).
#[derive(Default)]
pub struct BuiltinScorer {
    models: RwLock<HashMap<String, Arc<Stored>>>,
    cache: FeatureCache,
}

impl BuiltinScorer {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, id: &str) -> Result<Arc<Stored>> {
        self.models
            .read()
            .expect("model table")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    fn insert(&self, stored: Stored) -> ModelHandle {
        let handle = stored.handle.clone();
        self.models
            .write()
            .expect("model table")
            .insert(handle.id.clone(), Arc::new(stored));
        handle
    }

    /// Registers a zero-parameter model (every score is exactly 0.5).
    pub fn register_untrained(&self, model_id: &str) -> ModelHandle {
        let model = LogisticModel::zero(N_FEATURES);
        self.insert(Stored {
            handle: ModelHandle {
                id: model_id.to_string(),
                axis: None,
                level: None,
                seed: 0,
                digest: model.digest(),
            },
            model,
            batches: Vec::new(),
        })
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.models.read().expect("model table").contains_key(model_id)
    }

    /// Class composition of every batch the model was trained with.
    pub fn batch_log(&self, model: &ModelHandle) -> Result<Vec<BatchRecord>> {
        Ok(self.get(&model.id)?.batches.clone())
    }

    pub fn parameters(&self, model: &ModelHandle) -> Result<LogisticModel<f64>> {
        Ok(self.get(&model.id)?.model.clone())
    }

    pub fn export_model(&self, model: &ModelHandle) -> Result<String> {
        let stored = self.get(&model.id)?;
        Ok(serde_json::to_string(&*stored).expect("model serializes"))
    }

    pub fn import_model(&self, json: &str) -> Result<ModelHandle> {
        let stored: Stored = serde_json::from_str(json).map_err(|e| Error::Protocol {
            code: "BAD_MODEL".into(),
            message: e.to_string(),
        })?;
        if stored.model.dim() != N_FEATURES || stored.model.digest() != stored.handle.digest {
            return Err(Error::Protocol {
                code: "BAD_MODEL".into(),
                message: format!("model {} does not match its digest", stored.handle.id),
            });
        }
        Ok(self.insert(stored))
    }

    pub fn features(&self, tile: &Tile) -> super::Features {
        self.cache.features(tile)
    }
}

impl TileScorer for BuiltinScorer {
    fn train(&self, model_id: &str, tiles: &[Tile], labels: &[Label], config: &ScorerConfig) -> Result<ModelHandle> {
        config.validate()?;
        assert_eq!(tiles.len(), labels.len(), "tiles and labels");
        let x: Vec<Vec<f64>> = tiles.iter().map(|t| self.cache.features(t).to_vec()).collect();
        let y: Vec<bool> = labels.iter().map(|l| l.is_pos()).collect();
        let (model, batches) = LogisticModel::<f64>::fit(&x, &y, &config.train_params())?;
        Ok(self.insert(Stored {
            handle: ModelHandle {
                id: model_id.to_string(),
                axis: None,
                level: None,
                seed: config.seed,
                digest: model.digest(),
            },
            model,
            batches,
        }))
    }

    fn score(&self, model: &ModelHandle, tile: &Tile) -> Result<f64> {
        let stored = self.get(&model.id)?;
        Ok(stored.model.predict(&self.cache.features(tile)))
    }

    fn score_batch(&self, model: &ModelHandle, tiles: &[Tile]) -> Result<Vec<f64>> {
        let stored = self.get(&model.id)?;
        Ok(tiles.iter().map(|t| stored.model.predict(&self.cache.features(t))).collect())
    }
}
