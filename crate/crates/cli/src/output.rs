//! Input digests, buffered outputs and the run manifest. Nothing touches
//! the output paths until [`Run::commit`], and every file lands through a
//! temp file plus rename.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

pub struct Run {
    command: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    pending: Vec<(PathBuf, Vec<u8>)>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    // Temp files are created 0600; outputs get ordinary file permissions.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Run {
    pub fn new(command: &str) -> Self {
        Run { command: command.to_string(), started: Instant::now(), inputs: BTreeMap::new(), pending: Vec::new() }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), genepair::sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))
    }

    pub fn output(&mut self, path: &Path, bytes: Vec<u8>) {
        self.pending.push((path.to_path_buf(), bytes));
    }

    /// Writes every pending output, then `<primary>.config.json` and
    /// `<primary>.run.json`.
    pub fn commit(self, primary: &Path, resolved: &Value) -> Result<(), CliError> {
        let config_bytes = serde_json::to_vec_pretty(resolved).expect("config serializes");
        let mut outputs = BTreeMap::new();
        for (path, bytes) in &self.pending {
            write_atomic(path, bytes)?;
            outputs.insert(path.display().to_string(), genepair::sha256_hex(bytes));
        }
        let config_path = with_suffix(primary, ".config.json");
        write_atomic(&config_path, &config_bytes)?;
        let manifest = RunManifest {
            tool: "genepair".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_digest: genepair::sha256_hex(&config_bytes),
            inputs: self.inputs,
            outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&with_suffix(primary, ".run.json"), &bytes)
    }
}
