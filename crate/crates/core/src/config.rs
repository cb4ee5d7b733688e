//! Run configuration: a TOML file with `[h1]`, `[h2]`, `[migration]` and
//! `[cache]` tables plus top-level run settings.
//!
//! ```toml
//! mode = "tc"
//! seed = 7
//! trace = "pagerank.trace"
//! metrics = "out.csv"
//!
//! [h1]
//! young_size = "4MiB"
//! old_size = "12MiB"
//!
//! [h2]
//! size = "256MiB"
//! card_segment = "8KiB"
//! ```
//!
//! Sizes are integers or strings with a `B`, `K`, `KB`, `KiB`, `M`, `MB`,
//! `MiB`, `G`, `GB` or `GiB` suffix. All suffixes are powers of 1024.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HeapError, Result};
use crate::h1::H1Config;
use crate::h2::H2Config;
use crate::migration::{MigrationPolicy, WriteMode, WriteStrategy};
use crate::workload::RunMode;

pub const SEED_ENV: &str = "DUOHEAP_SEED";
pub const METRICS_ENV: &str = "DUOHEAP_METRICS";

/// Parses `"16MiB"`, `"512"`, `"4 K"` and the like.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return None,
    };
    n.checked_mul(mult)
}

pub(crate) fn de_size<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(n) => Ok(n),
        Raw::Str(s) => {
            parse_size(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid size {s:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    pub mode: WriteMode,
    #[serde(deserialize_with = "de_size")]
    pub buffer_size: u64,
    pub queue_depth: usize,
    pub writers: usize,
    pub policy: MigrationPolicy,
    /// Dirty H2 cards on scalar stores as well as reference stores.
    pub scalar_barrier: bool,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        let s = WriteStrategy::default();
        MigrationConfig {
            mode: s.mode,
            buffer_size: s.buffer_size,
            queue_depth: s.queue_depth,
            writers: s.writers,
            policy: MigrationPolicy::default(),
            scalar_barrier: true,
        }
    }
}

impl MigrationConfig {
    pub fn strategy(&self) -> WriteStrategy {
        WriteStrategy {
            mode: self.mode,
            buffer_size: self.buffer_size,
            queue_depth: self.queue_depth,
            writers: self.writers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// SD mode evicts once on-heap cached bytes exceed this fraction of H1.
    pub sd_fraction: f64,
    /// MO mode multiplies the old generation by this factor.
    pub mo_old_factor: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { sd_fraction: 0.5, mo_old_factor: 32 }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_metrics() -> PathBuf {
    PathBuf::from("metrics.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub trace: PathBuf,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub h1: H1Config,
    #[serde(default)]
    pub h2: H2Config,
    #[serde(default)]
    pub migration: MigrationConfig,
    #[serde(default)]
    pub cache: CacheConfig,
}

impl RuntimeConfig {
    pub fn with_trace(trace: impl Into<PathBuf>) -> Self {
        RuntimeConfig {
            mode: RunMode::default(),
            seed: default_seed(),
            trace: trace.into(),
            metrics: default_metrics(),
            run_id: None,
            h1: H1Config::default(),
            h2: H2Config::default(),
            migration: MigrationConfig::default(),
            cache: CacheConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RuntimeConfig = toml::from_str(text).map_err(|e| HeapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves and validates a config file. Relative `trace` and
    /// `metrics` paths are taken relative to the file's directory;
    /// `DUOHEAP_SEED` and `DUOHEAP_METRICS` override the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RuntimeConfig =
            toml::from_str(&text).map_err(|e| HeapError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if cfg.trace.is_relative() {
            cfg.trace = dir.join(&cfg.trace);
        }
        if cfg.metrics.is_relative() {
            cfg.metrics = dir.join(&cfg.metrics);
        }
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = lookup(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| HeapError::Config(format!("{SEED_ENV} ({s:?}) is not an unsigned integer")))?;
        }
        if let Some(p) = lookup(METRICS_ENV) {
            self.metrics = PathBuf::from(p);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.h1.validate()?;
        self.h2.validate()?;
        self.migration.strategy().validate()?;
        let f = self.cache.sd_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(HeapError::Config(format!("cache.sd_fraction ({f}) must be in (0, 1]")));
        }
        if self.cache.mo_old_factor == 0 {
            return Err(HeapError::Config("cache.mo_old_factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex digest of everything that affects the run's results. The output
    /// path and run id are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.metrics = PathBuf::new();
        c.run_id = None;
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
