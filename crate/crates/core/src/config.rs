//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};

use crate::conditioning::ConditionSpec;
use crate::data::{parse_list, read_key_values, NormMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::shift::ShiftMode;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Fractions of `iterations` at which the learning rate halves.
    pub lr_milestones: Vec<f64>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub model: ModelConfig,
    pub seed: u64,
    pub grad_clip: f64,
    pub log_every: usize,
    /// `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub dequantize: bool,
    pub normalize: NormMode,
    pub heldout_fraction: f64,
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            base_lr: 5e-5,
            lr_milestones: vec![0.5, 0.75, 0.9, 0.95],
            batch_size: 8,
            patch_size: 16,
            model: ModelConfig {
                hidden: 64,
                ..ModelConfig::default()
            },
            seed: 0,
            grad_clip: 100.0,
            log_every: 100,
            checkpoint_every: 0,
            dequantize: true,
            normalize: NormMode::Mean,
            heldout_fraction: 0.2,
            corpus: None,
            out_dir: None,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "iterations",
    "base_lr",
    "lr_milestones",
    "batch_size",
    "patch_size",
    "channels",
    "levels",
    "steps",
    "hidden",
    "shift_mode",
    "cond_down_factor",
    "cond_noise_sigma",
    "cond_disabled",
    "seed",
    "grad_clip",
    "log_every",
    "checkpoint_every",
    "dequantize",
    "normalize",
    "heldout_fraction",
    "corpus",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected true or false, got '{v}'"))),
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "lr_milestones" => {
                self.lr_milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    parse_list(v).map_err(|_| Error::Config(format!("key '{key}': bad list '{v}'")))?
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "channels" => self.model.channels = parse(key, v)?,
            "levels" => self.model.levels = parse(key, v)?,
            "steps" => self.model.steps = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "shift_mode" => self.model.shift_mode = v.parse()?,
            "cond_down_factor" => self.model.cond.down_factor = parse(key, v)?,
            "cond_noise_sigma" => self.model.cond.noise_sigma = parse(key, v)?,
            "cond_disabled" => self.model.cond.disabled = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dequantize" => self.dequantize = parse_bool(key, v)?,
            "normalize" => self.normalize = v.parse()?,
            "heldout_fraction" => self.heldout_fraction = parse(key, v)?,
            "corpus" => self.corpus = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("key '{k}' given twice")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs = read_key_values(path).map_err(|e| match e {
            Error::Format(m) => Error::Config(m),
            other => other,
        })?;
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch_size and patch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        let ok = self.lr_milestones.iter().all(|&m| m > 0.0 && m < 1.0)
            && self.lr_milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "lr_milestones must be strictly increasing in (0,1), got {:?}",
                self.lr_milestones
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config("heldout_fraction must be in (0,1)".into()));
        }
        self.model.check_patch(self.patch_size, self.patch_size)
    }

    /// `key=value` lines for every key, parseable by [`TrainConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let list = self.lr_milestones.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
        let mut out: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("base_lr", format!("{:?}", self.base_lr)),
            ("lr_milestones", list),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels", m.channels.to_string()),
            ("levels", m.levels.to_string()),
            ("steps", m.steps.to_string()),
            ("hidden", m.hidden.to_string()),
            ("shift_mode", m.shift_mode.to_string()),
            ("cond_down_factor", m.cond.down_factor.to_string()),
            ("cond_noise_sigma", format!("{:?}", m.cond.noise_sigma)),
            ("cond_disabled", m.cond.disabled.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dequantize", self.dequantize.to_string()),
            ("normalize", self.normalize.to_string()),
            ("heldout_fraction", format!("{:?}", self.heldout_fraction)),
        ];
        if let Some(p) = &self.corpus {
            out.push(("corpus", p.display().to_string()));
        }
        if let Some(p) = &self.out_dir {
            out.push(("out_dir", p.display().to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Keys that fix the parameter layout.
    pub fn architecture(&self) -> String {
        let m = &self.model;
        format!(
            "channels={} levels={} steps={} hidden={} shift_mode={} cond_disabled={} seed={}",
            m.channels, m.levels, m.steps, m.hidden, m.shift_mode, m.cond.disabled, self.seed
        )
    }
}

/// Single-actnorm model over scalar data.
pub fn scalar_config() -> ModelConfig {
    ModelConfig {
        channels: 1,
        levels: 0,
        steps: 0,
        hidden: 0,
        shift_mode: ShiftMode::Full,
        cond: ConditionSpec::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("shift_mode", "diagonal").unwrap();
        cfg.set("lr_milestones", "0.3,0.6").unwrap();
        cfg.set("corpus", "/tmp/c").unwrap();
        let back = TrainConfig::from_pairs(&cfg.to_pairs()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_pairs().len(), KEYS.len() - 1);
    }

    #[test]
    fn unknown_key_named() {
        let err = TrainConfig::from_pairs(&[("itterations".into(), "5".into())]).unwrap_err();
        assert!(err.to_string().contains("itterations"));
    }

    #[test]
    fn milestones_checked() {
        let err = TrainConfig::from_pairs(&[("lr_milestones".into(), "0.5,0.4".into())]);
        assert!(err.is_err());
    }
}
