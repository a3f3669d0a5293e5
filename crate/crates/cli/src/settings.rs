//! Flag, config-file and default resolution. Every value passes through
//! here as text so the run manifest can echo exactly what was used.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use coded_tof::scene::parse_key_values;

use crate::CliError;

pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let kv = parse_key_values(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            for (k, v) in kv {
                file.insert(normalize(&k), v);
            }
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn pick(&mut self, key: &str, flag: &Option<String>) -> Option<String> {
        let from_file = self.file.remove(key);
        flag.clone().or(from_file)
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for --{key}")))
    }

    pub fn get<T: FromStr>(&mut self, key: &str, flag: &Option<String>, default: &str) -> Result<T, CliError> {
        let raw = self.pick(key, flag).unwrap_or_else(|| default.to_string());
        let v = Self::parse(key, &raw)?;
        self.resolved.push((key.to_string(), raw));
        Ok(v)
    }

    pub fn optional<T: FromStr>(&mut self, key: &str, flag: &Option<String>) -> Result<Option<T>, CliError> {
        match self.pick(key, flag) {
            Some(raw) => {
                let v = Self::parse(key, &raw)?;
                self.resolved.push((key.to_string(), raw));
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn required<T: FromStr>(&mut self, key: &str, flag: &Option<String>) -> Result<T, CliError> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }

    /// Rejects config-file keys that no flag of this command consumed.
    pub fn finish(self) -> Result<Vec<(String, String)>, CliError> {
        if let Some(k) = self.file.keys().next() {
            return Err(CliError::Usage(format!("unknown config key `{k}` for this command")));
        }
        Ok(self.resolved)
    }
}

/// `on`/`off` style switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switch(pub bool);

impl FromStr for Switch {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "on" | "true" | "yes" | "1" => Ok(Switch(true)),
            "off" | "false" | "no" | "0" => Ok(Switch(false)),
            _ => Err(()),
        }
    }
}
