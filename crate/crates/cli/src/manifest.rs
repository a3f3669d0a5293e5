//! Run manifests. The resolved settings are written as plain `key = value`
//! lines and everything else as `#` comments, so a manifest can be passed
//! back with `--config` to repeat the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coded_tof::rng::GENERATOR_NAME;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| coded_tof::Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Vec<(String, String)>, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            config,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Hash of the resolved settings alone.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.config_lines().as_bytes())
    }

    fn config_lines(&self) -> String {
        self.config.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    pub fn render(&self) -> Result<String, CliError> {
        let mut s = String::new();
        let _ = writeln!(s, "# tool = coded-tof {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# command = {}", self.command);
        let _ = writeln!(s, "# generator = {GENERATOR_NAME}");
        let _ = writeln!(s, "# threads = {}", self.threads);
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let _ = writeln!(s, "# timestamp_unix = {stamp}");
        let _ = writeln!(s, "# config_sha256 = {}", self.config_hash());
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        for (label, paths) in [("input", &self.inputs), ("output", &self.outputs)] {
            for p in paths {
                let _ = writeln!(s, "# {label} {} sha256 {}", p.display(), file_hash(p)?);
            }
        }
        s.push_str(&self.config_lines());
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = self.render()?;
        std::fs::write(path, text).map_err(|e| coded_tof::Error::io(path, e).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coded_tof::scene::parse_key_values;

    #[test]
    fn manifest_parses_back_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.bin");
        std::fs::write(&out, b"abc").unwrap();
        let mut m = RunManifest::new("scene", vec![("seed".into(), "4".into()), ("size".into(), "64".into())], 2);
        m.outputs.push(out);
        let text = m.render().unwrap();
        assert!(text.contains("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"));
        let kv = parse_key_values(&text).unwrap();
        assert_eq!(kv.len(), 2);
        assert_eq!(kv["seed"], "4");
    }
}
