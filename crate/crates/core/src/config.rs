//! Run configuration: UTF-8 `key = value` lines with `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::BlockKind;
use crate::distill::{DEFAULT_BATCH, DEFAULT_LR, DEFAULT_MU};
use crate::error::{Error, Result};
use crate::networks::NetworkConfig;

pub const KEYS: [&str; 9] = [
    "resolution",
    "block_kind",
    "mu",
    "lr",
    "batch",
    "epochs",
    "seed",
    "dataset",
    "out",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub resolution: usize,
    pub block_kind: BlockKind,
    pub mu: f64,
    pub lr: f64,
    pub batch: usize,
    /// `None` lets each command pick its own default.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            resolution: 64,
            block_kind: BlockKind::CaRes,
            mu: DEFAULT_MU,
            lr: DEFAULT_LR,
            batch: DEFAULT_BATCH,
            epochs: None,
            seed: 0,
            dataset: None,
            out: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "resolution" => self.resolution = parse_value(key, value)?,
            "block_kind" => self.block_kind = value.parse()?,
            "mu" => {
                let mu: f64 = parse_value(key, value)?;
                if !(0.0..=1.0).contains(&mu) {
                    return Err(Error::Config(format!("mu {mu} outside [0, 1]")));
                }
                self.mu = mu;
            }
            "lr" => self.lr = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "seed" => self.seed = parse_value(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("invalid network config: ")
                ))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig::reference(self.resolution, self.block_kind);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "resolution = {}\nblock_kind = {}\nmu = {}\nlr = {}\nbatch = {}\nseed = {}\n",
            self.resolution, self.block_kind, self.mu, self.lr, self.batch, self.seed
        );
        if let Some(e) = self.epochs {
            s.push_str(&format!("epochs = {e}\n"));
        }
        if let Some(d) = &self.dataset {
            s.push_str(&format!("dataset = {}\n", d.display()));
        }
        if let Some(o) = &self.out {
            s.push_str(&format!("out = {}\n", o.display()));
        }
        s
    }
}
