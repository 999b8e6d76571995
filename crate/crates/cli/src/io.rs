use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ltdarts::train::{parse_grid, parse_kv, Mode, TrainConfig};

use crate::{UsageError, DATA_DIR_ENV};

/// Write through a temporary sibling and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(clap::Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, alias = "configs", value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Pairs from the file, then `mode` and `seed`, then `--set`.
    pub fn pairs(&self, mode: Option<Mode>, seed: Option<u64>) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_kv(&text).with_context(|| format!("in {}", path.display()))?);
        }
        if let Some(m) = mode {
            pairs.push(("run.mode".into(), m.name().into()));
        }
        if let Some(s) = seed {
            pairs.push(("run.seed".into(), s.to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let last = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        if last("data.source") == Some("cifar10") && last("data.dir").is_none() {
            if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
                pairs.insert(0, ("data.dir".into(), dir));
            }
        }
        Ok(pairs)
    }

    pub fn resolve(&self, mode: Option<Mode>, seed: Option<u64>) -> Result<TrainConfig> {
        Ok(TrainConfig::from_pairs(&self.pairs(mode, seed)?)?)
    }
}

/// A `start:stop:step` grid of mixing ratios.
#[derive(Clone, Debug)]
pub struct Grid(pub Vec<f64>);

pub fn grid_arg(s: &str) -> std::result::Result<Grid, String> {
    parse_grid(s).map(Grid).map_err(|e| e.to_string())
}

/// Comma-separated list of values.
#[derive(Clone, Debug)]
pub struct List<T>(pub Vec<T>);

pub fn list_arg<T: std::str::FromStr>(s: &str) -> std::result::Result<List<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<T>, String>>()
        .map(List)
}

/// `# config-hash: H` followed by the given CSV body.
pub fn with_hash(hash: &str, body: &str) -> String {
    format!("# config-hash: {hash}\n{body}")
}
