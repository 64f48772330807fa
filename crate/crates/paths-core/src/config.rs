//! Run configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PathsError, Result};

/// Which context pathways are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Both,
    HierarchicalOnly,
    SlideLevelOnly,
    Neither,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] = [
        ContextMode::Neither,
        ContextMode::HierarchicalOnly,
        ContextMode::SlideLevelOnly,
        ContextMode::Both,
    ];

    pub fn hierarchical(self) -> bool {
        matches!(self, ContextMode::Both | ContextMode::HierarchicalOnly)
    }

    pub fn slide_level(self) -> bool {
        matches!(self, ContextMode::Both | ContextMode::SlideLevelOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::Both => "both",
            ContextMode::HierarchicalOnly => "hierarchical_only",
            ContextMode::SlideLevelOnly => "slide_level_only",
            ContextMode::Neither => "neither",
        }
    }
}

impl FromStr for ContextMode {
    type Err = PathsError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "both" => ContextMode::Both,
            "hierarchical_only" => ContextMode::HierarchicalOnly,
            "slide_level_only" => ContextMode::SlideLevelOnly,
            "neither" => ContextMode::Neither,
            other => {
                return Err(PathsError::InvalidConfig(format!(
                    "unknown context mode `{other}`"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Learned,
    Random,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Learned => "learned",
            SelectionMode::Random => "random",
        }
    }
}

impl FromStr for SelectionMode {
    type Err = PathsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(SelectionMode::Learned),
            "random" => Ok(SelectionMode::Random),
            other => Err(PathsError::InvalidConfig(format!(
                "unknown selection mode `{other}`"
            ))),
        }
    }
}

/// One cell of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub context: ContextMode,
    pub selection: SelectionMode,
}

impl Default for AblationMode {
    fn default() -> Self {
        AblationMode {
            context: ContextMode::Both,
            selection: SelectionMode::Learned,
        }
    }
}

impl AblationMode {
    pub fn new(context: ContextMode, selection: SelectionMode) -> Self {
        AblationMode { context, selection }
    }

    pub fn is_identity(self) -> bool {
        self == AblationMode::default()
    }

    pub fn label(self) -> String {
        format!("{}/{}", self.context.as_str(), self.selection.as_str())
    }
}

/// Coordinates fed to the 2D positional encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Raw patch-grid indices at the patch's own level.
    PerLevel,
    /// Indices rescaled to the finest level's grid, shared across levels.
    SlideAbsolute,
}

impl FromStr for PositionMode {
    type Err = PathsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_level" => Ok(PositionMode::PerLevel),
            "slide_absolute" => Ok(PositionMode::SlideAbsolute),
            other => Err(PathsError::InvalidConfig(format!(
                "unknown position mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Patches retained per level by the top-K filter.
    pub k: usize,
    /// Magnification ratio between consecutive levels.
    pub m: usize,
    /// Number of levels.
    pub n: usize,
    /// Magnification of the coarsest level.
    pub m1: f64,
    /// Patch side in pixels.
    pub s: usize,
    /// Number of survival buckets.
    pub b: usize,
    pub loss_alpha: f64,
    pub d: usize,
    pub w: usize,
    pub h: usize,
    pub h_imp: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub min_tissue_fraction: f64,
    pub seed: u64,
    pub position_mode: PositionMode,
    pub ablation: AblationMode,
}

impl Default for PathsConfig {
    /// Reference training hyperparameters with desk-scale network widths.
    fn default() -> Self {
        PathsConfig {
            k: 20,
            m: 2,
            n: 5,
            m1: 0.625,
            s: 256,
            b: 4,
            loss_alpha: 0.6,
            d: 32,
            w: 64,
            h: 64,
            h_imp: 64,
            layers: 2,
            heads: 4,
            lr: 2e-5,
            batch_size: 32,
            epochs: 40,
            min_tissue_fraction: 0.1,
            seed: 0,
            position_mode: PositionMode::PerLevel,
            ablation: AblationMode::default(),
        }
    }
}

impl PathsConfig {
    /// Reference network widths for 1024-dimensional patch embeddings.
    pub fn full_width() -> Self {
        PathsConfig {
            d: 1024,
            w: 128,
            h: 256,
            h_imp: 128,
            ..PathsConfig::default()
        }
    }

    /// Small profile that trains in minutes on a laptop.
    pub fn desk() -> Self {
        PathsConfig {
            k: 5,
            n: 3,
            m1: 2.5,
            s: 16,
            d: 32,
            lr: 1e-3,
            batch_size: 8,
            epochs: 15,
            ..PathsConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PathsError::InvalidConfig(msg));
        if self.k == 0 {
            return bad("K must be positive".into());
        }
        if self.m < 2 {
            return bad(format!("M must be at least 2, got {}", self.m));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.m1 > 0.0) {
            return bad(format!("m1 must be positive, got {}", self.m1));
        }
        if self.s < 8 {
            return bad(format!("patch size must be at least 8, got {}", self.s));
        }
        if self.b == 0 {
            return bad("b must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return bad(format!("loss_alpha must lie in [0,1], got {}", self.loss_alpha));
        }
        if self.d == 0 || self.h == 0 || self.h_imp == 0 {
            return bad("d, h and h_imp must be positive".into());
        }
        if self.w == 0 || !self.w.is_multiple_of(4) {
            return bad(format!("w must be a positive multiple of 4, got {}", self.w));
        }
        if self.heads == 0 || !self.w.is_multiple_of(self.heads) {
            return bad(format!("w={} not divisible by heads={}", self.w, self.heads));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return bad(format!(
                "min_tissue_fraction must lie in [0,1], got {}",
                self.min_tissue_fraction
            ));
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. Keys not listed here are errors.
    pub fn parse_ini(text: &str) -> Result<Self> {
        let mut cfg = PathsConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PathsError::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| PathsError::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PathsError::io(path, e))?;
        Self::parse_ini(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse `{value}` for key `{key}`"))
        }
        match key {
            "K" | "k" => self.k = num(key, value)?,
            "M" | "m" => self.m = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "m1" => self.m1 = num(key, value)?,
            "s" | "patch_size" => self.s = num(key, value)?,
            "b" => self.b = num(key, value)?,
            "loss_alpha" => self.loss_alpha = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "w" => self.w = num(key, value)?,
            "h" => self.h = num(key, value)?,
            "h_imp" => self.h_imp = num(key, value)?,
            "L" | "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "min_tissue_fraction" => self.min_tissue_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "position_mode" => self.position_mode = value.parse().map_err(|e: PathsError| e.to_string())?,
            "context" => self.ablation.context = value.parse().map_err(|e: PathsError| e.to_string())?,
            "selection" => {
                self.ablation.selection = value.parse().map_err(|e: PathsError| e.to_string())?
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let pos = match self.position_mode {
            PositionMode::PerLevel => "per_level",
            PositionMode::SlideAbsolute => "slide_absolute",
        };
        let _ = writeln!(out, "K = {}", self.k);
        let _ = writeln!(out, "M = {}", self.m);
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "m1 = {}", self.m1);
        let _ = writeln!(out, "s = {}", self.s);
        let _ = writeln!(out, "b = {}", self.b);
        let _ = writeln!(out, "loss_alpha = {}", self.loss_alpha);
        let _ = writeln!(out, "d = {}", self.d);
        let _ = writeln!(out, "w = {}", self.w);
        let _ = writeln!(out, "h = {}", self.h);
        let _ = writeln!(out, "h_imp = {}", self.h_imp);
        let _ = writeln!(out, "L = {}", self.layers);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "min_tissue_fraction = {}", self.min_tissue_fraction);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "position_mode = {pos}");
        let _ = writeln!(out, "context = {}", self.ablation.context.as_str());
        let _ = writeln!(out, "selection = {}", self.ablation.selection.as_str());
        out
    }

    /// Upper bound on patches selected at any level after the first.
    pub fn selection_bound(&self) -> usize {
        self.m * self.m * self.k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = PathsConfig::default();
        assert_eq!((c.k, c.m, c.n, c.s, c.b), (20, 2, 5, 256, 4));
        assert_eq!(c.m1, 0.625);
        assert_eq!(c.loss_alpha, 0.6);
        assert_eq!(c.lr, 2e-5);
        assert_eq!((c.batch_size, c.epochs), (32, 40));
        assert_eq!(c.selection_bound(), 80);
        let p = PathsConfig::full_width();
        assert_eq!((p.w, p.heads, p.layers, p.h_imp, p.h), (128, 4, 2, 128, 256));
    }

    #[test]
    fn ini_round_trip() {
        let mut c = PathsConfig::desk();
        c.ablation = AblationMode::new(ContextMode::SlideLevelOnly, SelectionMode::Random);
        c.seed = 99;
        let back = PathsConfig::parse_ini(&c.to_ini()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = PathsConfig::parse_ini("K = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn comments_and_sections_ignored() {
        let c = PathsConfig::parse_ini("[model]\n# comment\nK = 7 ; trailing\n").unwrap();
        assert_eq!(c.k, 7);
    }

    #[test]
    fn validation_rejects_bad_widths() {
        let mut c = PathsConfig {
            w: 30,
            ..PathsConfig::default()
        };
        assert!(c.validate().is_err());
        c.w = 64;
        c.k = 0;
        assert!(c.validate().is_err());
    }
}
