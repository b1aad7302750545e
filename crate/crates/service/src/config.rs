//! Service configuration file.

use std::path::{Path, PathBuf};

use refineir::{Corpus, Error, Metric, Result};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Environment variable naming a config file; takes precedence over `--config`.
pub const CONFIG_ENV: &str = "REFINEIR_CONFIG";

/// Slider scale: the corpus median embedding norm, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Alpha {
    #[default]
    MedianNorm,
    Value(f64),
}

const MEDIAN_NORM: &str = "median_norm";

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::MedianNorm => s.serialize_str(MEDIAN_NORM),
            Alpha::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Value(v) => Ok(Alpha::Value(v)),
            Raw::Name(n) if n == MEDIAN_NORM => Ok(Alpha::MedianNorm),
            Raw::Name(n) => Err(de::Error::custom(format!(
                "alpha must be {MEDIAN_NORM:?} or a number, got {n:?}"
            ))),
        }
    }
}

impl Alpha {
    pub fn resolve(self, corpus: &Corpus) -> Result<f64> {
        match self {
            Alpha::MedianNorm => corpus.median_norm().ok_or(Error::EmptyCorpus),
            Alpha::Value(v) if v.is_finite() && v > 0.0 => Ok(v),
            Alpha::Value(v) => Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {v}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub page_size: usize,
    pub k: usize,
    pub metric: Metric,
    pub alpha: Alpha,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            page_size: refineir::knn::DEFAULT_PAGE_SIZE,
            k: refineir::knn::DEFAULT_K,
            metric: Metric::L2,
            alpha: Alpha::MedianNorm,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.page_size == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(
                "page_size and k must be positive".into(),
            ));
        }
        if let Alpha::Value(v) = self.alpha {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Malformed {
            line: e.line(),
            what: "config",
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Loads the file named by `REFINEIR_CONFIG` if set, else `path` if
    /// given, else the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match config_path(std::env::var_os(CONFIG_ENV).map(PathBuf::from), path) {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

fn config_path(env: Option<PathBuf>, flag: Option<&Path>) -> Option<PathBuf> {
    env.filter(|p| !p.as_os_str().is_empty())
        .or_else(|| flag.map(Path::to_path_buf))
}
