//! Flat `key = value` configuration with command-line overrides.
//!
//! Each subcommand declares a schema of keys. Values are resolved in the
//! order default, config file, command line; the resolved map is what the
//! run manifest records and what `replay` feeds back in.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};

use crate::error::CliError;

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

/// Add one `--<key> <value>` flag per schema entry, plus `--config`.
pub fn command_with_keys(cmd: Command, schema: &'static [Key]) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; command-line flags override it"),
    );
    schema.iter().fold(cmd, |cmd, k| {
        let help = match k.default {
            Some(d) if !d.is_empty() => format!("{} [default: {d}]", k.help),
            Some(_) => k.help.to_string(),
            None => format!("{} (required)", k.help),
        };
        cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help))
    })
}

/// Parse a flat config file: `key = value` per line, `#` starts a comment.
pub fn parse_file(text: &str, schema: &[Key]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !schema.iter().any(|s| s.name == k) {
            return Err(CliError::Config(format!("config line {}: unknown key `{k}`", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("config line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Resolved settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(matches: &ArgMatches, schema: &[Key]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = schema
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        if let Some(path) = matches.get_one::<String>("config") {
            let text = std::fs::read_to_string(Path::new(path))
                .map_err(|e| CliError::Config(format!("cannot read config file {path}: {e}")))?;
            values.extend(parse_file(&text, schema)?);
        }
        for k in schema {
            if let Some(v) = matches.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        Self::from_map(values, schema)
    }

    /// Validate a complete map, e.g. one read back from a manifest.
    pub fn from_map(values: BTreeMap<String, String>, schema: &[Key]) -> Result<Self, CliError> {
        if let Some(k) = values.keys().find(|k| !schema.iter().any(|s| s.name == k.as_str())) {
            return Err(CliError::Config(format!("unknown key `{k}`")));
        }
        if let Some(k) = schema.iter().find(|k| !values.contains_key(k.name)) {
            return Err(CliError::Config(format!("missing required key `{}`", k.name)));
        }
        Ok(Self { values })
    }

    /// Replace one value (used to pin defaults resolved at run time).
    pub fn with(mut self, name: &str, value: String) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or("")
    }

    /// Empty values read as "not set".
    pub fn opt_str(&self, name: &str) -> Option<&str> {
        Some(self.str(name)).filter(|s| !s.is_empty())
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, CliError> {
        let raw = self.str(name);
        raw.parse()
            .map_err(|_| CliError::Config(format!("key `{name}`: cannot parse {raw:?}")))
    }

    pub fn opt<T: FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.opt_str(name) {
            None => Ok(None),
            Some(_) => self.get(name).map(Some),
        }
    }

    pub fn bool(&self, name: &str) -> Result<bool, CliError> {
        match self.str(name) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Config(format!("key `{name}`: expected true or false, got {other:?}"))),
        }
    }
}
