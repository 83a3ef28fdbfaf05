//! Resolved command configuration: named groups of [`Configurable`] structs
//! filled from defaults, then a config file, then `--set` overrides, then
//! dedicated flags.

use std::fmt::Write as _;
use std::path::Path;

use ecosim::scenarios::ecosystem::{EcosystemConfig, SweepConfig};
use ecosim::scenarios::latent_sat::{EmSettings, LatentSatConfig};
use ecosim::scenarios::porl::{PorlConfig, TrainConfig};
use ecosim::scenarios::toy::ToyConfig;
use ecosim::scenarios::Configurable;
use ecosim::Error;

/// Every section name a config file may use.
pub const SECTIONS: &[&str] = &["toy", "porl", "train", "latent_sat", "em", "ecosystem", "sweep"];

/// The configuration groups one command reads.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub toy: Option<ToyConfig>,
    pub porl: Option<PorlConfig>,
    pub train: Option<TrainConfig>,
    pub latent_sat: Option<LatentSatConfig>,
    pub em: Option<EmSettings>,
    pub ecosystem: Option<EcosystemConfig>,
    pub sweep: Option<SweepConfig>,
}

fn config_err(msg: String) -> Error {
    Error::Config(msg)
}

impl Settings {
    fn groups(&mut self) -> Vec<(&'static str, &mut dyn Configurable)> {
        let mut out: Vec<(&'static str, &mut dyn Configurable)> = Vec::new();
        if let Some(c) = self.toy.as_mut() {
            out.push(("toy", c));
        }
        if let Some(c) = self.porl.as_mut() {
            out.push(("porl", c));
        }
        if let Some(c) = self.train.as_mut() {
            out.push(("train", c));
        }
        if let Some(c) = self.latent_sat.as_mut() {
            out.push(("latent_sat", c));
        }
        if let Some(c) = self.em.as_mut() {
            out.push(("em", c));
        }
        if let Some(c) = self.ecosystem.as_mut() {
            out.push(("ecosystem", c));
        }
        if let Some(c) = self.sweep.as_mut() {
            out.push(("sweep", c));
        }
        out
    }

    /// Sets `key` (bare, or qualified as `section.key`) to `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let (section, bare) = match key.split_once('.') {
            Some((s, k)) => (Some(s.trim()), k.trim()),
            None => (None, key.trim()),
        };
        if let Some(s) = section {
            if !SECTIONS.contains(&s) {
                return Err(config_err(format!("unknown section `{s}`")));
            }
        }
        let mut groups = self.groups();
        let mut matched = false;
        for (name, group) in groups.iter_mut() {
            if section.is_some_and(|s| s != *name) {
                continue;
            }
            if group.entries().iter().any(|(k, _)| *k == bare) {
                group.set(bare, value)?;
                matched = true;
            }
        }
        match (matched, section) {
            (true, _) => Ok(()),
            // A section this command does not read is tolerated so one file
            // can serve every command.
            (false, Some(s)) if !groups.iter().any(|(n, _)| *n == s) => Ok(()),
            _ => Err(config_err(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `key = value` file with optional `[section]` headers.
    /// `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(format!("{}:{}: unknown section `{name}`", path.display(), i + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            let key = match &section {
                Some(s) => format!("{s}.{}", k.trim()),
                None => k.trim().to_string(),
            };
            self.set(&key, v.trim())
                .map_err(|e| config_err(format!("{}:{}: {}", path.display(), i + 1, strip(&e))))?;
        }
        Ok(())
    }

    /// Sets `key` in every group that has it; silently skips groups without.
    pub fn set_where_present(&mut self, key: &str, value: &str) -> Result<(), Error> {
        for (_, group) in self.groups() {
            if group.entries().iter().any(|(k, _)| *k == key) {
                group.set(key, value)?;
            }
        }
        Ok(())
    }

    pub fn validate(&mut self) -> Result<(), Error> {
        for (_, group) in self.groups() {
            group.validate()?;
        }
        Ok(())
    }

    /// The resolved configuration in config-file syntax.
    pub fn render(&mut self) -> String {
        let mut out = String::new();
        for (name, group) in self.groups() {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in group.entries() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// The message of a config error without its generic prefix.
pub fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
