//! Flat `key = value` configuration.
//!
//! Blank lines and everything after `#` are ignored. `sequence` may repeat;
//! each occurrence appends one input directory. Relative sequence paths in a
//! file resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshing::DEFAULT_RESOLUTION;
use crate::registration::RegressorConfig;
use crate::segmentation::default_k_range;

pub const DEFAULT_CLUSTERS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub clusters: usize,
    /// Bounds on the part count; unset bounds come from `default_k_range`.
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub regressor: RegressorConfig,
    pub mesh_resolution: usize,
    /// Position weight in the correlation distance; `None` uses pi / diagonal.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub no_pos: bool,
    pub no_ori: bool,
    pub sequences: Vec<PathBuf>,
    /// Sequences registered at once.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: "robot".into(),
            clusters: DEFAULT_CLUSTERS,
            k_min: None,
            k_max: None,
            regressor: RegressorConfig::default(),
            mesh_resolution: DEFAULT_RESOLUTION,
            alpha: None,
            seed: 0,
            no_pos: false,
            no_ori: false,
            sequences: Vec::new(),
            jobs: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl PipelineConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let r = &mut self.regressor;
        match key {
            "name" => self.name = value.to_string(),
            "clusters" => self.clusters = parse(key, value)?,
            "k_min" => self.k_min = Some(parse(key, value)?),
            "k_max" => self.k_max = Some(parse(key, value)?),
            "mesh_resolution" => self.mesh_resolution = parse(key, value)?,
            "alpha" => self.alpha = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "no_pos" => self.no_pos = parse_bool(key, value)?,
            "no_ori" => self.no_ori = parse_bool(key, value)?,
            "sequence" => self.sequences.push(PathBuf::from(value)),
            "jobs" => self.jobs = parse(key, value)?,
            "hidden_width" => r.hidden_width = parse(key, value)?,
            "encoder_layers" => r.encoder_layers = parse(key, value)?,
            "pe_bands" => r.pe_bands = parse(key, value)?,
            "rotation" => r.rotation_repr = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "lr_step" => r.lr_step = parse(key, value)?,
            "lr_anchor" => r.lr_anchor = parse(key, value)?,
            "lr_direct" => r.lr_direct = parse(key, value)?,
            "max_iters" => r.max_iters = parse(key, value)?,
            "patience" => r.patience = parse(key, value)?,
            "optimizer" => r.mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "anchor" => r.use_anchor = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` text; sequence paths resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "sequence" {
                if let Some(base) = base {
                    self.sequences.push(base.join(value));
                    continue;
                }
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text, path.parent())?;
        Ok(cfg)
    }

    pub fn k_range(&self) -> (usize, usize) {
        let (lo, hi) = default_k_range(self.clusters);
        (self.k_min.unwrap_or(lo), self.k_max.unwrap_or(hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Config("at least one sequence is required".into()));
        }
        if self.clusters < 3 {
            return Err(Error::Config(format!("clusters must be at least 3, got {}", self.clusters)));
        }
        let (lo, hi) = self.k_range();
        if lo < 2 || hi < lo || hi >= self.clusters {
            return Err(Error::Config(format!("k range ({lo}, {hi}) must satisfy 2 <= min <= max < clusters")));
        }
        if self.mesh_resolution < 8 {
            return Err(Error::Config("mesh_resolution must be at least 8".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::Config("alpha must be positive".into()));
            }
        }
        if self.no_pos && self.no_ori {
            return Err(Error::Config("no_pos and no_ori cannot both be set".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.regressor.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::{OptimizerMode, RotationRepr};

    #[test]
    fn parses_documented_grammar() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "# comment\nclusters = 16\n\nseed=7 # trailing\nsequence = a\nsequence = b\nk_min = 2\nk_max = 5\noptimizer = direct\nrotation = rot6d\nanchor = false\n",
            Some(Path::new("/data")),
        )
        .unwrap();
        assert_eq!(cfg.clusters, 16);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sequences, vec![PathBuf::from("/data/a"), PathBuf::from("/data/b")]);
        assert_eq!(cfg.k_range(), (2, 5));
        assert_eq!(cfg.regressor.mode, OptimizerMode::Direct);
        assert_eq!(cfg.regressor.rotation_repr, RotationRepr::Rot6d);
        assert!(!cfg.regressor.use_anchor);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.apply_text("clusters 16", None).is_err());
        assert!(cfg.apply_text("bogus = 1", None).is_err());
        assert!(cfg.apply_text("clusters = many", None).is_err());
        assert!(cfg.validate().is_err());
        cfg.sequences.push("x".into());
        cfg.validate().unwrap();
        cfg.k_max = Some(40);
        assert!(cfg.validate().is_err());
    }
}
