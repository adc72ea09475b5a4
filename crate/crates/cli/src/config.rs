//! Flat `key = value` run configuration. Command-line flags take
//! precedence over file values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const SEED_ENV: &str = "SEMTRACE_SEED";

/// Keys a config file may set.
pub const KEYS: &[&str] = &[
    "seed",
    "jobs",
    "corpus",
    "traces",
    "vocab",
    "pretrain_dir",
    "finetune_dir",
    "init",
    "checkpoint",
    "store",
    "report_dir",
    "sources",
    "min_size",
    "max_size",
    "ratio",
    "train_fraction",
    "variants",
    "max_pipeline",
    "passes",
    "traces_per_fn",
    "step_budget",
    "stack_size",
    "preset",
    "pretrain_epochs",
    "finetune_epochs",
    "batch_size",
    "pretrain_lr",
    "finetune_lr",
    "accum",
    "mask_percent",
    "heldout_fraction",
    "static_only",
    "margin",
    "test_pairs",
    "k",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                bail!("line {}: unknown key `{k}`", i + 1);
            }
            if values.insert(k.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: `{k}` set twice", i + 1);
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Settings::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "undeclared key {key}");
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key `{key}`: {e}")))
            .transpose()
    }

    /// The flag if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.file(key)?.unwrap_or(default)),
        }
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str, default: &str) -> Result<PathBuf> {
        self.pick(flag, key, PathBuf::from(default))
    }

    /// Seed from the flag, then the config file, then `SEMTRACE_SEED`,
    /// then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(s) = self.file("seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| anyhow!("{SEED_ENV}={v:?}: {e}")),
            Err(_) => Ok(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let s = Settings::parse("# run\nseed = 7\ntrain-fraction=0.25  # inline\n\n").unwrap();
        assert_eq!(s.file::<u64>("seed").unwrap(), Some(7));
        assert_eq!(s.file::<f64>("train_fraction").unwrap(), Some(0.25));
        assert_eq!(s.file::<usize>("sources").unwrap(), None);
    }

    #[test]
    fn flags_win() {
        let s = Settings::parse("sources = 40").unwrap();
        assert_eq!(s.pick(Some(3usize), "sources", 100).unwrap(), 3);
        assert_eq!(s.pick(None, "sources", 100).unwrap(), 40);
        assert_eq!(s.pick(None, "ratio", 5usize).unwrap(), 5);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Settings::parse("no equals sign").is_err());
        assert!(Settings::parse("colour = red").is_err());
        assert!(Settings::parse("seed = 1\nseed = 2").is_err());
        assert!(Settings::parse("seed = x").unwrap().file::<u64>("seed").is_err());
    }
}
