//! Run configuration: one UTF-8 `key = value` file; command-line flags are
//! applied on top with [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::read_to_string;
use crate::predictor::{ScorerConfig, ScorerKind};
use crate::scale_transforms::{Axis, MFL_DEFAULT_LEVELS, RFL_DEFAULT_LEVELS};
use crate::slope_map::DEFAULT_EPSILON;
use crate::stain_norm::{StainBasis, REFERENCE_BASIS};
use crate::sweep::SweepConfig;

/// Which slides get slope maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MapSlides {
    /// One MetPos and one MetNeg case from the first test fold.
    Auto,
    None,
    Ids(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub axes: Vec<Axis>,
    pub rfl_levels: usize,
    pub mfl_levels: usize,
    pub tiles_per_case: usize,
    pub seed: u64,
    pub scorer: ScorerConfig,
    pub epsilon: f64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub stain_norm: bool,
    pub stain_reference: StainBasis,
    pub map_slides: MapSlides,
    /// Overrides the fitted break when choosing the slope-map sub-ladder.
    pub characteristic_rfl_um: Option<f64>,
    pub characteristic_mfl_um: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            axes: vec![Axis::Rfl, Axis::Mfl],
            rfl_levels: RFL_DEFAULT_LEVELS,
            mfl_levels: MFL_DEFAULT_LEVELS,
            tiles_per_case: 50,
            seed: 0,
            scorer: ScorerConfig::default(),
            epsilon: DEFAULT_EPSILON,
            jobs: None,
            out: PathBuf::from("out"),
            stain_norm: false,
            stain_reference: REFERENCE_BASIS,
            map_slides: MapSlides::Auto,
            characteristic_rfl_um: None,
            characteristic_mfl_um: None,
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(key, format!("{v:?} is not a valid number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(invalid(key, format!("{v:?} is not a boolean"))),
    }
}

fn parse_length(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        return Ok(None);
    }
    let x: f64 = parse_num(key, v)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(invalid(key, "must be a positive length in microns"));
    }
    Ok(Some(x))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                invalid(&format!("line {}", n + 1), format!("expected key = value, got {raw:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        for p in [&mut cfg.manifest, &mut cfg.out] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "axis" => {
                self.axes = match v {
                    "both" => vec![Axis::Rfl, Axis::Mfl],
                    other => vec![other.parse()?],
                }
            }
            "levels" => {
                let n: usize = parse_num(key, v)?;
                for axis in self.axes.clone() {
                    match axis {
                        Axis::Rfl => self.rfl_levels = n,
                        Axis::Mfl => self.mfl_levels = n,
                    }
                }
            }
            "rfl_levels" => self.rfl_levels = parse_num(key, v)?,
            "mfl_levels" => self.mfl_levels = parse_num(key, v)?,
            "tiles_per_case" => self.tiles_per_case = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "scorer" => self.scorer.kind = v.parse::<ScorerKind>()?,
            "epochs" => self.scorer.epochs = parse_num(key, v)?,
            "batch_size" => self.scorer.batch_size = parse_num(key, v)?,
            "learning_rate" => self.scorer.learning_rate = parse_num(key, v)?,
            "l2" => self.scorer.l2 = parse_num(key, v)?,
            "threshold" => self.scorer.threshold = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "jobs" => {
                let j: usize = parse_num(key, v)?;
                self.jobs = (j > 0).then_some(j);
            }
            "stain_norm" => self.stain_norm = parse_bool(key, v)?,
            "stain_reference" => self.stain_reference = StainBasis::parse_config_value(v)?,
            "map_slides" => {
                self.map_slides = match v {
                    "auto" => MapSlides::Auto,
                    "none" | "" => MapSlides::None,
                    ids => MapSlides::Ids(ids.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
                }
            }
            "characteristic_rfl_um" => self.characteristic_rfl_um = parse_length(key, v)?,
            "characteristic_mfl_um" => self.characteristic_mfl_um = parse_length(key, v)?,
            other => return Err(invalid(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.manifest.as_os_str().is_empty() {
            return Err(invalid("manifest", "no manifest given"));
        }
        if !self.manifest.is_file() {
            return Err(Error::MissingFile(self.manifest.clone()));
        }
        if self.axes.is_empty() {
            return Err(invalid("axis", "no axis selected"));
        }
        if self.rfl_levels < 2 || self.mfl_levels < 2 {
            return Err(invalid("levels", "need at least 2 levels per axis"));
        }
        if self.tiles_per_case == 0 {
            return Err(invalid("tiles_per_case", "must be at least 1"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(invalid("epsilon", format!("{} is outside [0, 1]", self.epsilon)));
        }
        self.scorer.validate()
    }

    pub fn levels_for(&self, axis: Axis) -> usize {
        match axis {
            Axis::Rfl => self.rfl_levels,
            Axis::Mfl => self.mfl_levels,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            seed: self.seed,
            tiles_per_case: self.tiles_per_case,
            scorer: self.scorer.clone(),
            stain_norm: self.stain_norm,
        }
    }

    /// Canonical text form; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let axis = if self.axes.len() == 2 {
            "both".to_string()
        } else {
            self.axes[0].to_string()
        };
        let maps = match &self.map_slides {
            MapSlides::Auto => "auto".to_string(),
            MapSlides::None => "none".to_string(),
            MapSlides::Ids(ids) => ids.join(","),
        };
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        let _ = writeln!(s, "manifest = {}", self.manifest.display());
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "axis = {axis}");
        let _ = writeln!(s, "rfl_levels = {}", self.rfl_levels);
        let _ = writeln!(s, "mfl_levels = {}", self.mfl_levels);
        let _ = writeln!(s, "tiles_per_case = {}", self.tiles_per_case);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "scorer = {}", self.scorer.kind);
        let _ = writeln!(s, "epochs = {}", self.scorer.epochs);
        let _ = writeln!(s, "batch_size = {}", self.scorer.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.scorer.learning_rate);
        let _ = writeln!(s, "l2 = {}", self.scorer.l2);
        let _ = writeln!(s, "threshold = {}", self.scorer.threshold);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "jobs = {}", self.jobs.unwrap_or(0));
        let _ = writeln!(s, "stain_norm = {}", self.stain_norm);
        let _ = writeln!(s, "stain_reference = {}", self.stain_reference.to_config_value());
        let _ = writeln!(s, "map_slides = {maps}");
        let _ = writeln!(s, "characteristic_rfl_um = {}", opt(self.characteristic_rfl_um));
        let _ = writeln!(s, "characteristic_mfl_um = {}", opt(self.characteristic_mfl_um));
        s
    }
}
