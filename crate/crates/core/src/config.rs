//! `key = value` run configuration. Command-line flags override file values.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{DEFAULT_FF, DEFAULT_HEADS, DEFAULT_HIDDEN, DEFAULT_LAYERS, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::molora::{PoolConfig, DEFAULT_ALPHA, DEFAULT_EXPERTS, DEFAULT_RANK, DEFAULT_TOP_K};
use crate::train::{DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub multilingual: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub experts: usize,
    pub rank: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub embedding_site: bool,
    pub learning_rate: [f64; 3],
    pub epochs: [usize; 3],
    pub batch_size: [usize; 3],
    pub no_molora: bool,
    pub english_only_stage3: bool,
    pub languages: Vec<String>,
    pub fan_out: usize,
    pub max_rejection_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: None,
            multilingual: None,
            benchmark: None,
            out_dir: None,
            checkpoint: None,
            cache_dir: None,
            hidden_size: DEFAULT_HIDDEN,
            num_layers: DEFAULT_LAYERS,
            num_heads: DEFAULT_HEADS,
            ff_size: DEFAULT_FF,
            max_len: DEFAULT_MAX_LEN,
            experts: DEFAULT_EXPERTS,
            rank: DEFAULT_RANK,
            top_k: DEFAULT_TOP_K,
            alpha: DEFAULT_ALPHA,
            embedding_site: false,
            learning_rate: [DEFAULT_LEARNING_RATE; 3],
            epochs: [DEFAULT_EPOCHS; 3],
            batch_size: DEFAULT_BATCH,
            no_molora: false,
            english_only_stage3: false,
            languages: vec!["sa".into(), "sb".into()],
            fan_out: 4,
            max_rejection_rate: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn pool(&self) -> PoolConfig {
        PoolConfig {
            experts: self.experts,
            rank: self.rank,
            top_k: self.top_k,
            alpha: self.alpha,
            embedding_site: self.embedding_site,
        }
    }

    /// Applies one setting. Per-stage keys take a `.1`, `.2` or `.3` suffix;
    /// without one the value applies to every stage.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| if v == "-" { None } else { Some(PathBuf::from(v)) };
        let (base, stage) = match key.rsplit_once('.') {
            Some((b, s @ ("1" | "2" | "3"))) => (b, Some(s.parse::<usize>().expect("digit") - 1)),
            _ => (key, None),
        };
        let stages = stage.map_or(0..3, |s| s..s + 1);
        match base {
            "learning_rate" => {
                let v = parse(key, value)?;
                stages.for_each(|s| self.learning_rate[s] = v);
                return Ok(());
            }
            "epochs" => {
                let v = parse(key, value)?;
                stages.for_each(|s| self.epochs[s] = v);
                return Ok(());
            }
            "batch_size" => {
                let v = parse(key, value)?;
                stages.for_each(|s| self.batch_size[s] = v);
                return Ok(());
            }
            _ if stage.is_some() => return Err(Error::Config(format!("unknown setting {key:?}"))),
            _ => {}
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "corpus" => self.corpus = path(value),
            "multilingual" => self.multilingual = path(value),
            "benchmark" => self.benchmark = path(value),
            "out_dir" => self.out_dir = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "cache_dir" => self.cache_dir = path(value),
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "ff_size" => self.ff_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "experts" => self.experts = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "embedding_site" => self.embedding_site = parse_bool(key, value)?,
            "no_molora" => self.no_molora = parse_bool(key, value)?,
            "english_only_stage3" => self.english_only_stage3 = parse_bool(key, value)?,
            "languages" => {
                self.languages = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "fan_out" => self.fan_out = parse(key, value)?,
            "max_rejection_rate" => self.max_rejection_rate = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }
}

/// The effective configuration in the same `key = value` form it is read
/// from, one setting per line.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "corpus = {}", opt_path(&self.corpus))?;
        writeln!(f, "multilingual = {}", opt_path(&self.multilingual))?;
        writeln!(f, "benchmark = {}", opt_path(&self.benchmark))?;
        writeln!(f, "out_dir = {}", opt_path(&self.out_dir))?;
        writeln!(f, "checkpoint = {}", opt_path(&self.checkpoint))?;
        writeln!(f, "cache_dir = {}", opt_path(&self.cache_dir))?;
        writeln!(f, "hidden_size = {}", self.hidden_size)?;
        writeln!(f, "num_layers = {}", self.num_layers)?;
        writeln!(f, "num_heads = {}", self.num_heads)?;
        writeln!(f, "ff_size = {}", self.ff_size)?;
        writeln!(f, "max_len = {}", self.max_len)?;
        writeln!(f, "experts = {}", self.experts)?;
        writeln!(f, "rank = {}", self.rank)?;
        writeln!(f, "top_k = {}", self.top_k)?;
        writeln!(f, "alpha = {}", self.alpha)?;
        writeln!(f, "embedding_site = {}", self.embedding_site)?;
        for s in 0..3 {
            writeln!(f, "learning_rate.{} = {:e}", s + 1, self.learning_rate[s])?;
            writeln!(f, "epochs.{} = {}", s + 1, self.epochs[s])?;
            writeln!(f, "batch_size.{} = {}", s + 1, self.batch_size[s])?;
        }
        writeln!(f, "no_molora = {}", self.no_molora)?;
        writeln!(f, "english_only_stage3 = {}", self.english_only_stage3)?;
        writeln!(f, "languages = {}", self.languages.join(","))?;
        writeln!(f, "fan_out = {}", self.fan_out)?;
        writeln!(f, "max_rejection_rate = {}", self.max_rejection_rate)
    }
}
