//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys and
//! malformed values are errors. Keys left out keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Components, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training images; a synthetic set is generated when absent.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_dir: None,
            test_dir: None,
            n_train: 512,
            n_test: 128,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn located(e: Error, at: impl std::fmt::Display) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{at}: {m}")),
        other => Error::Config(format!("{at}: {other}")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let tr = &mut self.train;
        match key {
            "img_size" => enc.img_size = value(key, raw)?,
            "patch_size" => enc.patch_size = value(key, raw)?,
            "embed_dim" => enc.embed_dim = value(key, raw)?,
            "depths" => enc.depths = list(key, raw)?,
            "heads" => enc.heads = list(key, raw)?,
            "window" => enc.window = value(key, raw)?,
            "mlp_ratio" => enc.mlp_ratio = value(key, raw)?,
            "decoder_dim" => self.model.decoder_dim = value(key, raw)?,
            "da_heads" => self.model.da_heads = value(key, raw)?,
            "ablate" => self.model.components = raw.parse::<Components>()?,
            "lr" => tr.learning_rate = value(key, raw)?,
            "momentum" => tr.momentum = value(key, raw)?,
            "weight_decay" => tr.weight_decay = value(key, raw)?,
            "iterations" => tr.iterations = value(key, raw)?,
            "batch_size" => tr.batch_size = value(key, raw)?,
            "hflip" => tr.hflip = value(key, raw)?,
            "seed" => tr.seed = value(key, raw)?,
            "log_every" => tr.log_every = value(key, raw)?,
            "train_dir" => self.train_dir = Some(PathBuf::from(raw)),
            "test_dir" => self.test_dir = Some(PathBuf::from(raw)),
            "n_train" => self.n_train = value(key, raw)?,
            "n_test" => self.n_test = value(key, raw)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", no + 1)));
            }
            cfg.set(key, raw).map_err(|e| located(e, format_args!("line {}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| located(e, path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let enc = &self.model.encoder;
        let tr = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("img_size", enc.img_size.to_string());
        kv("patch_size", enc.patch_size.to_string());
        kv("embed_dim", enc.embed_dim.to_string());
        kv("depths", join(&enc.depths));
        kv("heads", join(&enc.heads));
        kv("window", enc.window.to_string());
        kv("mlp_ratio", format!("{:?}", enc.mlp_ratio));
        kv("decoder_dim", self.model.decoder_dim.to_string());
        kv("da_heads", self.model.da_heads.to_string());
        kv("ablate", self.model.components.to_string());
        kv("lr", format!("{:?}", tr.learning_rate));
        kv("momentum", format!("{:?}", tr.momentum));
        kv("weight_decay", format!("{:?}", tr.weight_decay));
        kv("iterations", tr.iterations.to_string());
        kv("batch_size", tr.batch_size.to_string());
        kv("hflip", tr.hflip.to_string());
        kv("seed", tr.seed.to_string());
        kv("log_every", tr.log_every.to_string());
        if let Some(p) = &self.train_dir {
            kv("train_dir", p.display().to_string());
        }
        if let Some(p) = &self.test_dir {
            kv("test_dir", p.display().to_string());
        }
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn values_and_comments() {
        let cfg = RunConfig::parse("# toy run\nseed = 3  # override\nablate = ds,da\ndepths = 2, 2, 2, 2\nlr=0.01\n").unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert!(!cfg.model.components.ds && !cfg.model.components.da && cfg.model.components.mla);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "colour = red",
            "seed = -1",
            "seed 3",
            "seed = 1\nseed = 2",
            "window = 3",
            "lr = -1",
            "hflip = maybe",
            "ablate = crf",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
