//! Newline-delimited JSON scorer protocol.
//!
//! One JSON object per line in each direction. Requests carry an `op` field
//! first: `train`, `score` or `ping`. Tiles travel as base64 of row-major
//! RGB8. Replies:
//!
//! * ping: `{"ok":true}`
//! * train: `{"ok":true,"model_id":s}`
//! * score: `{"model_id":s,"tile_id":s,"score":x}`
//! * any failure: `{"error":code,"message":s}`

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BuiltinScorer, ScorerConfig, TileScorer};
use crate::error::Error;
use crate::slide_io::Label;
use crate::tiling::Tile;
use crate::TILE_PX;

pub const BAD_JSON: &str = "BAD_JSON";
pub const BAD_REQUEST: &str = "BAD_REQUEST";
pub const UNKNOWN_MODEL: &str = "UNKNOWN_MODEL";
pub const SHAPE_MISMATCH: &str = "SHAPE_MISMATCH";
pub const TRAIN_FAILED: &str = "TRAIN_FAILED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTile {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
    pub w: u32,
    pub h: u32,
    pub rgb_b64: String,
}

impl WireTile {
    pub fn encode(tile: &Tile, label: Option<Label>) -> Self {
        Self {
            id: tile.key(),
            label: label.map(|l| l.as_bit()),
            w: tile.pixels.width(),
            h: tile.pixels.height(),
            rgb_b64: STANDARD.encode(tile.pixels.as_raw()),
        }
    }

    /// Decodes to a tile, checking shape and payload length.
    pub fn decode(&self) -> Result<Tile, (&'static str, String)> {
        if (self.w, self.h) != (TILE_PX, TILE_PX) {
            return Err((
                SHAPE_MISMATCH,
                format!("tile {} is {}x{}; expected {TILE_PX}x{TILE_PX}", self.id, self.w, self.h),
            ));
        }
        let raw = STANDARD
            .decode(&self.rgb_b64)
            .map_err(|e| (BAD_REQUEST, format!("tile {}: bad base64: {e}", self.id)))?;
        let expect = (TILE_PX * TILE_PX * 3) as usize;
        if raw.len() != expect {
            return Err((
                SHAPE_MISMATCH,
                format!("tile {} carries {} bytes; expected {expect}", self.id, raw.len()),
            ));
        }
        let img = RgbImage::from_raw(TILE_PX, TILE_PX, raw).expect("length checked");
        Ok(Tile::new(self.id.clone(), 0, 0, img, 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Train {
        model_id: String,
        tiles: Vec<WireTile>,
        config: Value,
    },
    Score {
        model_id: String,
        tile: WireTile,
    },
    Ping,
}

impl Request {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("request serializes");
        s.push('\n');
        s
    }
}

/// Wire form of the training options the built-in scorer understands.
pub fn config_to_wire(config: &ScorerConfig) -> Value {
    serde_json::json!({
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "l2": config.l2,
        "threshold": config.threshold,
    })
}

fn config_from_wire(v: &Value) -> Result<ScorerConfig, String> {
    let mut cfg = ScorerConfig::default();
    let obj = match v {
        Value::Object(o) => o,
        Value::Null => return Ok(cfg),
        _ => return Err("config must be an object".into()),
    };
    let uint = |k: &str| -> Result<Option<u64>, String> {
        obj.get(k)
            .map(|v| v.as_u64().ok_or_else(|| format!("config.{k} must be a non-negative integer")))
            .transpose()
    };
    let real = |k: &str| -> Result<Option<f64>, String> {
        obj.get(k)
            .map(|v| v.as_f64().ok_or_else(|| format!("config.{k} must be a number")))
            .transpose()
    };
    if let Some(v) = uint("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = uint("epochs")? {
        cfg.epochs = v as usize;
    }
    if let Some(v) = uint("batch_size")? {
        cfg.batch_size = v as usize;
    }
    if let Some(v) = real("learning_rate")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = real("l2")? {
        cfg.l2 = v;
    }
    if let Some(v) = real("threshold")? {
        cfg.threshold = v;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn error_reply(code: &str, message: impl Into<String>) -> Value {
    serde_json::json!({ "error": code, "message": message.into() })
}

/// Handles one request line against a built-in scorer.
pub fn handle_line(line: &str, scorer: &BuiltinScorer) -> Value {
    let value: Value = match serde_json::from_str(line) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => return error_reply(BAD_JSON, "request must be a JSON object"),
        Err(e) => return error_reply(BAD_JSON, e.to_string()),
    };
    let req: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return error_reply(BAD_REQUEST, e.to_string()),
    };
    match req {
        Request::Ping => serde_json::json!({ "ok": true }),
        Request::Score { model_id, tile } => {
            let decoded = match tile.decode() {
                Ok(t) => t,
                Err((code, msg)) => return error_reply(code, msg),
            };
            let handle = super::ModelHandle {
                id: model_id.clone(),
                axis: None,
                level: None,
                seed: 0,
                digest: String::new(),
            };
            match scorer.score(&handle, &decoded) {
                Ok(score) => serde_json::json!({ "model_id": model_id, "tile_id": tile.id, "score": score }),
                Err(Error::UnknownModel(id)) => error_reply(UNKNOWN_MODEL, format!("no model {id:?}")),
                Err(e) => error_reply(BAD_REQUEST, e.to_string()),
            }
        }
        Request::Train { model_id, tiles, config } => {
            let cfg = match config_from_wire(&config) {
                Ok(c) => c,
                Err(m) => return error_reply(BAD_REQUEST, m),
            };
            let mut decoded = Vec::with_capacity(tiles.len());
            let mut labels = Vec::with_capacity(tiles.len());
            for t in &tiles {
                let label = match t.label.map(|b| (b, Label::from_bit(b))) {
                    Some((_, Some(l))) => l,
                    Some((b, None)) => return error_reply(BAD_REQUEST, format!("tile {}: label {b} is not 0 or 1", t.id)),
                    None => return error_reply(BAD_REQUEST, format!("tile {}: training tiles need a label", t.id)),
                };
                match t.decode() {
                    Ok(d) => decoded.push(d),
                    Err((code, msg)) => return error_reply(code, msg),
                }
                labels.push(label);
            }
            if decoded.is_empty() {
                return error_reply(BAD_REQUEST, "no training tiles");
            }
            match scorer.train(&model_id, &decoded, &labels, &cfg) {
                Ok(h) => serde_json::json!({ "ok": true, "model_id": h.id }),
                Err(e) => error_reply(TRAIN_FAILED, e.to_string()),
            }
        }
    }
}

/// Serves requests line by line until EOF. Malformed input gets an error
/// object; only I/O failures end the loop early.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, scorer: &BuiltinScorer) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(&line, scorer);
        serde_json::to_writer(&mut writer, &reply)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: &Value) -> &str {
        v["error"].as_str().unwrap_or("")
    }

    #[test]
    fn ping_and_bad_json() {
        let s = BuiltinScorer::new();
        assert_eq!(handle_line(r#"{"op":"ping"}"#, &s), serde_json::json!({"ok": true}));
        assert_eq!(code(&handle_line("{nope", &s)), BAD_JSON);
        assert_eq!(code(&handle_line("[1,2]", &s)), BAD_JSON);
        assert_eq!(code(&handle_line(r#"{"op":"dance"}"#, &s)), BAD_REQUEST);
        assert_eq!(code(&handle_line(r#"{"op":"score"}"#, &s)), BAD_REQUEST);
    }

    #[test]
    fn request_serializes_op_first() {
        let line = Request::Ping.to_line();
        assert_eq!(line, "{\"op\":\"ping\"}\n");
        let t = Tile::new("s", 0, 0, RgbImage::new(TILE_PX, TILE_PX), 0.5);
        let line = Request::Score {
            model_id: "m".into(),
            tile: WireTile::encode(&t, None),
        }
        .to_line();
        assert!(line.starts_with("{\"op\":\"score\",\"model_id\":\"m\",\"tile\":{\"id\":"));
        assert!(!line.contains("label"));
    }

    #[test]
    fn small_tile_is_shape_mismatch() {
        let s = BuiltinScorer::new();
        s.register_untrained("m");
        let req = serde_json::json!({
            "op": "score", "model_id": "m",
            "tile": {"id": "t", "w": 100, "h": 100, "rgb_b64": STANDARD.encode(vec![0u8; 30000])}
        });
        assert_eq!(code(&handle_line(&req.to_string(), &s)), SHAPE_MISMATCH);
    }

    #[test]
    fn unknown_model_and_untrained_score() {
        let s = BuiltinScorer::new();
        let t = Tile::new("s", 0, 0, RgbImage::from_pixel(TILE_PX, TILE_PX, image::Rgb([128; 3])), 0.5);
        let line = Request::Score {
            model_id: "m".into(),
            tile: WireTile::encode(&t, None),
        }
        .to_line();
        assert_eq!(code(&handle_line(&line, &s)), UNKNOWN_MODEL);
        s.register_untrained("m");
        let reply = handle_line(&line, &s);
        assert_eq!(reply["score"].as_f64(), Some(0.5));
        assert_eq!(reply["tile_id"].as_str(), Some(t.key().as_str()));
    }

    #[test]
    fn serve_answers_every_line() {
        let s = BuiltinScorer::new();
        let input = "{\"op\":\"ping\"}\n\ngarbage\n{\"op\":\"ping\"}\n";
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &s).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "{\"ok\":true}");
        assert!(lines[1].contains(BAD_JSON));
    }
}
