//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable naming the directory under which default outputs go.
pub const OUTPUT_ROOT_ENV: &str = "DSIN_OUTPUT_ROOT";
/// Name of the persisted, fully resolved configuration.
pub const RESOLVED_CONFIG: &str = "config.resolved";

type KeySpec = (&'static str, Option<&'static str>);

/// Keys every command accepts.
const COMMON: &[KeySpec] = &[("seed", Some("0")), ("output", Some(""))];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Predict,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::Report => "report",
        }
    }

    /// `(key, default)`; `None` marks a required key.
    fn keys(self) -> &'static [KeySpec] {
        const SYNTH: &[KeySpec] = &[
            ("labels", None),
            ("ratios", Some("0.3")),
            ("correlations", Some("")),
            ("background_correlation", Some("0")),
            ("glyph_noise", Some("0.1")),
            ("appearance_jitter", Some("1")),
            ("glyph_dropout", Some("0")),
            ("subjects", Some("6")),
            ("samples_per_subject", Some("50")),
            ("face_size", Some("224")),
            ("patch_size", Some("56")),
            ("include_face", Some("true")),
            ("burn_in", Some("100")),
        ];
        const MODEL: &[KeySpec] = &[
            ("data", None),
            ("folds", Some("3")),
            ("fold", Some("0")),
            ("stages", Some("1,2,3,4,5")),
            ("w_patch", Some("0.25")),
            ("w_fusion", Some("0.25")),
            ("w_structure", Some("0.5")),
            ("r", Some("0.005")),
            ("T", Some("10")),
            ("lr", Some("0.001")),
            ("batch_size", Some("64")),
            ("max_epochs", Some("200")),
            ("stage_max_epochs", Some("")),
            ("patience", Some("10")),
            ("stage_patience", Some("")),
            ("min_delta", Some("0.00001")),
            ("balancing", Some("true")),
            ("correction_factors", Some("true")),
            ("include_self", Some("true")),
            ("freeze_conv", Some("false")),
            ("conv_widths", Some("32,64,96,128")),
            ("lead_widths", Some("16,24")),
            ("fc_hidden", Some("256")),
            ("kernel", Some("3")),
            ("local_side", Some("56")),
            ("fusion_hidden", Some("64")),
            ("verbose", Some("false")),
        ];
        const EVAL: &[KeySpec] = &[
            ("data", None),
            ("checkpoint", None),
            ("folds", Some("3")),
            ("fold", Some("0")),
            ("split", Some("test")),
            ("tune_thresholds", Some("false")),
            ("grid", Some("")),
            ("batch_size", Some("64")),
        ];
        const PREDICT: &[KeySpec] = &[("data", None), ("checkpoint", None), ("batch_size", Some("64"))];
        const REPORT: &[KeySpec] = &[("input", None)];
        match self {
            Command::Synth => SYNTH,
            Command::Train => MODEL,
            Command::Eval => EVAL,
            Command::Predict => PREDICT,
            Command::Report => REPORT,
        }
    }

    fn default_of(self, key: &str) -> Option<Option<&'static str>> {
        COMMON
            .iter()
            .chain(self.keys())
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
    }

    fn all_keys(self) -> impl Iterator<Item = KeySpec> {
        COMMON.iter().chain(self.keys()).copied()
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("{origin}:{}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

/// The resolved key set of one command: file values, then overrides, then defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(command: Command, file: Vec<(String, String)>, overrides: Vec<(String, String)>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, v) in file.into_iter().chain(overrides) {
            if command.default_of(&k).is_none() {
                let known: Vec<&str> = command.all_keys().map(|(k, _)| k).collect();
                return Err(Error::Config(format!(
                    "unknown key `{k}` for `{command}`; known keys: {}",
                    known.join(", ")
                )));
            }
            values.insert(k, v);
        }
        for (k, default) in command.all_keys() {
            if values.contains_key(k) {
                continue;
            }
            match default {
                Some(d) => {
                    values.insert(k.to_owned(), d.to_owned());
                }
                None => return Err(Error::Config(format!("missing required key `{k}` for `{command}`"))),
            }
        }
        Ok(Self { command, values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key `{key}` is not defined for `{}`", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse {v:?}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(Error::Config(format!("key `{key}`: expected true/false, got {other:?}"))),
        }
    }

    /// Comma-separated list; empty text is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse item {s:?}")))
            })
            .collect()
    }

    /// The `output` key, or `$DSIN_OUTPUT_ROOT/<command>` (`runs/<command>` when unset).
    pub fn output_dir(&self) -> PathBuf {
        let v = self.raw("output");
        if !v.is_empty() {
            return PathBuf::from(v);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(self.command.name())
    }

    /// Sorted `key = value` lines, with the output directory made explicit.
    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved configuration of `{}`\n", self.command);
        for (k, v) in &self.values {
            let v = if k == "output" {
                self.output_dir().display().to_string()
            } else {
                v.clone()
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}
