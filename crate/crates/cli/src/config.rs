//! Flat run configuration: key = value file, `#` comments, every key
//! overridable by a flag of the same name. Flag overrides win; the effective
//! configuration is echoed into the output directory as `resolved_config`
//! and feeding that file back reproduces the run.

use std::path::{Path, PathBuf};

use labelnoise::data::DataFormat;
use labelnoise::model::RepMode;
use labelnoise::noise::{MatchMode, NoiseKind, NoiseSpec};
use labelnoise::training::{sub_seed, DataSpec, Mode, TrainConfig};

use crate::CliError;

/// Noise selector for a training run; `none` consumes the input labels
/// as-is (e.g. a pre-injected TSV).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseChoice {
    None,
    Random,
    Token,
    Length,
}

impl std::str::FromStr for NoiseChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(NoiseChoice::None),
            "random" => Ok(NoiseChoice::Random),
            "token" => Ok(NoiseChoice::Token),
            "length" => Ok(NoiseChoice::Length),
            other => Err(format!("unknown noise kind {other:?}")),
        }
    }
}

impl std::fmt::Display for NoiseChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseChoice::None => "none",
            NoiseChoice::Random => "random",
            NoiseChoice::Token => "token",
            NoiseChoice::Length => "length",
        })
    }
}

/// The full flat key set of a training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub train_format: DataFormat,
    pub test_path: Option<PathBuf>,
    pub test_format: Option<DataFormat>,
    pub val_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub min_freq: usize,
    pub embeddings_path: Option<PathBuf>,
    pub noise: NoiseChoice,
    pub level: f64,
    pub tokens: Vec<String>,
    pub match_mode: MatchMode,
    pub t0: usize,
    pub epochs: usize,
    pub beta: f64,
    pub mode: Mode,
    pub rep_mode: RepMode,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            train_path: None,
            train_format: DataFormat::Trec,
            test_path: None,
            test_format: None,
            val_path: None,
            val_fraction: 0.0923,
            min_freq: 1,
            embeddings_path: None,
            noise: NoiseChoice::None,
            level: 0.0,
            tokens: Vec::new(),
            match_mode: MatchMode::StartsWith,
            t0: t.t0,
            epochs: t.epochs,
            beta: t.beta,
            mode: t.mode,
            rep_mode: t.rep_mode,
            lr: t.lr,
            batch_size: t.batch_size,
            dropout: t.dropout,
            embedding_dim: t.embedding_dim,
            hidden_dim: t.hidden_dim,
            eval_every: t.eval_every,
            seed: t.seed,
            out_dir: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("bad value for {key}: {e}")))
}

impl RunConfig {
    /// Applies one key = value assignment. Unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "train_format" => self.train_format = parse_as(key, value)?,
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "test_format" => self.test_format = Some(parse_as(key, value)?),
            "val_path" => self.val_path = Some(PathBuf::from(value)),
            "val_fraction" => self.val_fraction = parse_as(key, value)?,
            "min_freq" => self.min_freq = parse_as(key, value)?,
            "embeddings_path" => self.embeddings_path = Some(PathBuf::from(value)),
            "noise" => self.noise = parse_as(key, value)?,
            "level" => self.level = parse_as(key, value)?,
            "tokens" => {
                self.tokens = value
                    .split(',')
                    .filter(|t| !t.is_empty())
                    .map(|t| t.to_string())
                    .collect()
            }
            "match" => self.match_mode = parse_as(key, value)?,
            "t0" => self.t0 = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "beta" => self.beta = parse_as(key, value)?,
            "mode" => self.mode = parse_as(key, value)?,
            "rep_mode" => self.rep_mode = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "dropout" => self.dropout = parse_as(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_as(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_as(key, value)?,
            "eval_every" => self.eval_every = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Loads assignments from a key = value file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Serializes every effective key back out as a loadable config file.
    pub fn to_config_text(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut put = |key: &str, value: String| lines.push(format!("{key} = {value}"));
        if let Some(p) = &self.train_path {
            put("train_path", p.display().to_string());
        }
        put("train_format", self.train_format.to_string());
        if let Some(p) = &self.test_path {
            put("test_path", p.display().to_string());
        }
        if let Some(f) = &self.test_format {
            put("test_format", f.to_string());
        }
        if let Some(p) = &self.val_path {
            put("val_path", p.display().to_string());
        }
        put("val_fraction", self.val_fraction.to_string());
        put("min_freq", self.min_freq.to_string());
        if let Some(p) = &self.embeddings_path {
            put("embeddings_path", p.display().to_string());
        }
        put("noise", self.noise.to_string());
        put("level", self.level.to_string());
        put("tokens", self.tokens.join(","));
        put(
            "match",
            match self.match_mode {
                MatchMode::Contains => "contains".to_string(),
                MatchMode::StartsWith => "starts_with".to_string(),
            },
        );
        put("t0", self.t0.to_string());
        put("epochs", self.epochs.to_string());
        put("beta", self.beta.to_string());
        put("mode", self.mode.to_string());
        put("rep_mode", self.rep_mode.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("dropout", self.dropout.to_string());
        put("embedding_dim", self.embedding_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("eval_every", self.eval_every.to_string());
        put("seed", self.seed.to_string());
        if let Some(p) = &self.out_dir {
            put("out_dir", p.display().to_string());
        }
        lines.join("\n") + "\n"
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            t0: self.t0,
            epochs: self.epochs,
            beta: self.beta,
            mode: self.mode,
            rep_mode: self.rep_mode,
            lr: self.lr,
            batch_size: self.batch_size,
            dropout: self.dropout,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    /// Noise spec for a training run; the noise seed derives from the master
    /// seed so one flag pins the whole pipeline.
    pub fn noise_spec(&self) -> Result<Option<NoiseSpec>, CliError> {
        let kind = match self.noise {
            NoiseChoice::None => return Ok(None),
            NoiseChoice::Random => NoiseKind::Random,
            NoiseChoice::Token => NoiseKind::TokenConditional,
            NoiseChoice::Length => NoiseKind::LengthConditional,
        };
        if kind == NoiseKind::TokenConditional && self.tokens.is_empty() {
            return Err(usage("--noise token requires --tokens"));
        }
        Ok(Some(NoiseSpec {
            kind,
            level: self.level,
            trigger_tokens: self.tokens.clone(),
            match_mode: self.match_mode,
            seed: sub_seed(self.seed, "noise"),
        }))
    }

    pub fn data_spec(&self) -> Result<DataSpec, CliError> {
        let train_path = self
            .train_path
            .clone()
            .ok_or_else(|| usage("train_path is required"))?;
        let test_path = self
            .test_path
            .clone()
            .ok_or_else(|| usage("test_path is required"))?;
        Ok(DataSpec {
            train_path,
            train_format: self.train_format,
            test_path,
            test_format: self.test_format.unwrap_or(self.train_format),
            val_path: self.val_path.clone(),
            val_fraction: self.val_fraction,
            min_freq: self.min_freq,
            embeddings_path: self.embeddings_path.clone(),
        })
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.out_dir
            .clone()
            .ok_or_else(|| usage("out_dir is required"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_usage_error() {
        let mut config = RunConfig::default();
        assert!(matches!(
            config.set("bogus_key", "1"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn config_text_roundtrips() {
        let mut config = RunConfig::default();
        config.set("train_path", "data/train.label").unwrap();
        config.set("test_path", "data/test.label").unwrap();
        config.set("out_dir", "out").unwrap();
        config.set("noise", "token").unwrap();
        config.set("tokens", "AP,Reuters").unwrap();
        config.set("level", "0.4").unwrap();
        config.set("lr", "0.0005").unwrap();
        config.set("mode", "dn-hard").unwrap();
        let text = config.to_config_text();

        let mut reparsed = RunConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            reparsed.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(reparsed.to_config_text(), text);
    }

    #[test]
    fn token_noise_requires_tokens() {
        let mut config = RunConfig::default();
        config.set("noise", "token").unwrap();
        assert!(matches!(config.noise_spec(), Err(CliError::Usage(_))));
        config.set("tokens", "How,What").unwrap();
        let spec = config.noise_spec().unwrap().unwrap();
        assert_eq!(spec.trigger_tokens, vec!["How", "What"]);
    }
}
