//! Flat `key = value` config files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! are the [`TrainConfig`] field names with `lambda` split into
//! `lambda1`..`lambda4`. Unknown or repeated keys are errors. The resolved
//! config written next to every output uses the same format, so it can be fed
//! back in to reproduce a run.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Every accepted key, sorted.
pub const KEYS: [&str; 22] = [
    "batch_size",
    "context_len",
    "d_emb",
    "d_hid",
    "d_tok",
    "encoder_seed",
    "epochs",
    "eta",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lr",
    "lr_min",
    "momentum",
    "normalize_embeddings",
    "num_unknown",
    "prototype_mode",
    "seed",
    "tau",
    "vocab_seed",
    "weight_decay",
];

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Sets one key on `config`.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key {
        "batch_size" => config.batch_size = parsed(key, value)?,
        "context_len" => config.context_len = parsed(key, value)?,
        "d_emb" => config.d_emb = parsed(key, value)?,
        "d_hid" => config.d_hid = parsed(key, value)?,
        "d_tok" => config.d_tok = parsed(key, value)?,
        "encoder_seed" => config.encoder_seed = parsed(key, value)?,
        "epochs" => config.epochs = parsed(key, value)?,
        "eta" => config.eta = parsed(key, value)?,
        "lambda1" => config.lambda[0] = parsed(key, value)?,
        "lambda2" => config.lambda[1] = parsed(key, value)?,
        "lambda3" => config.lambda[2] = parsed(key, value)?,
        "lambda4" => config.lambda[3] = parsed(key, value)?,
        "lr" => config.lr = parsed(key, value)?,
        "lr_min" => config.lr_min = parsed(key, value)?,
        "momentum" => config.momentum = parsed(key, value)?,
        "normalize_embeddings" => config.normalize_embeddings = parsed(key, value)?,
        "num_unknown" => config.num_unknown = parsed(key, value)?,
        "prototype_mode" => config.prototype_mode = parsed(key, value)?,
        "seed" => config.seed = parsed(key, value)?,
        "tau" => config.tau = parsed(key, value)?,
        "vocab_seed" => config.vocab_seed = parsed(key, value)?,
        "weight_decay" => config.weight_decay = parsed(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Applies the settings in `text` on top of `base`.
pub fn parse_onto(base: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut config = base;
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_owned()) {
            return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
        }
        apply(&mut config, key, value)
            .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
    }
    Ok(config)
}

pub fn parse(text: &str) -> Result<TrainConfig> {
    parse_onto(TrainConfig::default(), text)
}

pub fn read(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Every key with its resolved value, plus the config hash as a comment.
pub fn render(config: &TrainConfig) -> String {
    let mut out = format!("# config_hash = {}\n", config.hash());
    for (k, v) in config.canonical_lines() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn write(config: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, render(config)).map_err(|e| Error::io(path, e))
}
