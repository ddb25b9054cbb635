//! Flat key-value configuration with flag overrides and metadata sidecars.
//!
//! Every run resolves its options into a single string map: values read
//! from a config file first, command-line flags layered on top, built-in
//! defaults filling the rest. The resolved map is echoed verbatim into a
//! `<output>.meta.json` sidecar next to each artifact, and that sidecar
//! is itself accepted by `--config`, so any artifact can be reproduced
//! bit-identically from its own metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Version stamp written into every metadata sidecar.
pub const ARTIFACT_VERSION: u32 = 1;

/// A command failure with its process exit code: usage errors exit 2,
/// computation errors exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Compute(String),
}

impl From<gcir::Error> for CliError {
    fn from(e: gcir::Error) -> Self {
        CliError::Compute(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Compute(e.to_string())
    }
}

/// Resolved option map. Values stay in string form until consumed, so a
/// value passed through a sidecar reproduces the original bit pattern.
#[derive(Debug, Default)]
pub struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Load from an optional config file. Accepts either a flat
    /// `key = value` text file (one pair per line, `#` comments) or a
    /// JSON metadata sidecar, recognized by a leading `{`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = ConfigMap::default();
        let Some(path) = path else {
            return Ok(cfg);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            cfg.load_sidecar(&text, path)?;
        } else {
            cfg.load_flat(&text, path)?;
        }
        Ok(cfg)
    }

    fn load_sidecar(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::Usage(format!("bad JSON config {}: {e}", path.display())))?;
        let object = match value.get("config") {
            Some(serde_json::Value::Object(m)) => m,
            _ => value.as_object().ok_or_else(|| {
                CliError::Usage(format!("config {} is not a JSON object", path.display()))
            })?,
        };
        for (k, v) in object {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            self.map.insert(k.clone(), s);
        }
        Ok(())
    }

    fn load_flat(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected key = value, got `{raw}`",
                    path.display(),
                    i + 1
                ))
            })?;
            self.map
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    // -- flag overrides (only applied when the flag was given) --

    pub fn set_f64(&mut self, key: &str, flag: Option<f64>) {
        if let Some(x) = flag {
            self.map.insert(key.to_string(), format!("{x:?}"));
        }
    }

    pub fn set_usize(&mut self, key: &str, flag: Option<usize>) {
        if let Some(x) = flag {
            self.map.insert(key.to_string(), x.to_string());
        }
    }

    pub fn set_u64(&mut self, key: &str, flag: Option<u64>) {
        if let Some(x) = flag {
            self.map.insert(key.to_string(), x.to_string());
        }
    }

    pub fn set_u8(&mut self, key: &str, flag: Option<u8>) {
        if let Some(x) = flag {
            self.map.insert(key.to_string(), x.to_string());
        }
    }

    pub fn set_str(&mut self, key: &str, flag: Option<&str>) {
        if let Some(s) = flag {
            self.map.insert(key.to_string(), s.to_string());
        }
    }

    pub fn set_path(&mut self, key: &str, flag: Option<&PathBuf>) {
        if let Some(p) = flag {
            self.map.insert(key.to_string(), p.display().to_string());
        }
    }

    /// Mark a switch true when given; absent switches leave any config
    /// file value in place.
    pub fn set_switch(&mut self, key: &str, on: bool) {
        if on {
            self.map.insert(key.to_string(), "true".to_string());
        }
    }

    /// Fill a default for a key not set by file or flag.
    pub fn fill(&mut self, key: &str, value: &str) {
        self.map
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    pub fn fill_f64(&mut self, key: &str, value: f64) {
        self.map
            .entry(key.to_string())
            .or_insert_with(|| format!("{value:?}"));
    }

    // -- typed getters --

    pub fn str_opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_req(&self, key: &str) -> Result<&str, CliError> {
        self.str_opt(key)
            .ok_or_else(|| CliError::Usage(format!("missing option `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        parse(key, self.str_req(key)?)
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.str_opt(key).map(|s| parse(key, s)).transpose()
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        parse(key, self.str_req(key)?)
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        parse(key, self.str_req(key)?)
    }

    pub fn u8(&self, key: &str) -> Result<u8, CliError> {
        parse(key, self.str_req(key)?)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        parse(key, self.str_req(key)?)
    }

    /// Comma-separated list of floats.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.str_req(key)?
            .split(',')
            .map(|s| parse(key, s.trim()))
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.str_req(key)?))
    }

    pub fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.str_opt(key).map(PathBuf::from)
    }

    /// The resolved map, echoed into metadata sidecars.
    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.map
    }
}

fn parse<T: std::str::FromStr>(key: &str, text: &str) -> Result<T, CliError> {
    text.parse()
        .map_err(|_| CliError::Usage(format!("option `{key}`: cannot parse `{text}`")))
}

/// Join comma-separated floats for list-valued options.
pub fn join_f64_list(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, x) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:?}");
    }
    out
}

/// Write an artifact and its `<path>.meta.json` sidecar carrying the
/// artifact version, the subcommand, and the full resolved config.
pub fn write_artifact(
    path: &Path,
    content: &str,
    command: &str,
    cfg: &ConfigMap,
) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| CliError::Compute(format!("cannot write {}: {e}", path.display())))?;
    let meta = serde_json::json!({
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "config": cfg.echo(),
    });
    let meta_path = PathBuf::from(format!("{}.meta.json", path.display()));
    let mut text = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::Compute(format!("cannot encode metadata: {e}")))?;
    text.push('\n');
    fs::write(&meta_path, text)
        .map_err(|e| CliError::Compute(format!("cannot write {}: {e}", meta_path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flat_file_parses_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "# reference parameters").unwrap();
        writeln!(f, "kappa = 5.0").unwrap();
        writeln!(f, "r0=0.04  # inline comment").unwrap();
        writeln!(f).unwrap();
        let mut cfg = ConfigMap::load(Some(&path)).unwrap();
        cfg.set_f64("r0", Some(0.03));
        cfg.fill_f64("theta", 0.03);
        assert_eq!(cfg.f64("kappa").unwrap(), 5.0);
        assert_eq!(cfg.f64("r0").unwrap(), 0.03);
        assert_eq!(cfg.f64("theta").unwrap(), 0.03);
    }

    #[test]
    fn sidecar_json_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv.meta.json");
        let text = r#"{"artifact_version":1,"command":"price","config":{"kappa":"5.0","eps":"0.01"}}"#;
        fs::write(&path, text).unwrap();
        let cfg = ConfigMap::load(Some(&path)).unwrap();
        assert_eq!(cfg.f64("kappa").unwrap(), 5.0);
        assert_eq!(cfg.f64("eps").unwrap(), 0.01);
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "kappa 5.0\n").unwrap();
        match ConfigMap::load(Some(&path)) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("line 1"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn float_echo_preserves_bits() {
        let mut cfg = ConfigMap::default();
        let x = 0.1 + 0.2; // not exactly 0.3
        cfg.set_f64("dt", Some(x));
        assert_eq!(cfg.f64("dt").unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn list_values_round_trip() {
        let mut cfg = ConfigMap::default();
        let eps = [1e-3, 4e-3, 1.6e-2];
        cfg.set_str("eps", Some(&join_f64_list(&eps)));
        assert_eq!(cfg.f64_list("eps").unwrap(), eps);
    }
}
