//! Run manifests: the resolved configuration plus content digests of every
//! input and output, written next to each artifact.
//!
//! A manifest is itself a valid configuration file (the extra sections are
//! ignored on load), so `--config run.manifest.ini` reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest as _, Sha256};

use crate::config::ExperimentConfig;
use crate::store::{self, StoreResult};

/// Sections that belong to the manifest rather than to the configuration.
pub const MANIFEST_SECTIONS: [&str; 4] = ["manifest", "inputs", "outputs", "digests"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> StoreResult<String> {
    Ok(sha256_hex(&store::read_file(path)?))
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub outputs: Vec<(String, PathBuf, String)>,
    /// Named in-memory digests (model spec, parameter sets, vectors).
    pub digests: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.into(),
            args: args.to_vec(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> StoreResult<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((role.into(), path.to_path_buf(), digest));
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> StoreResult<()> {
        let digest = sha256_file(path)?;
        self.outputs.push((role.into(), path.to_path_buf(), digest));
        Ok(())
    }

    pub fn digest(&mut self, name: &str, value: u64) {
        self.digests.push((name.into(), format!("{value:016x}")));
    }

    pub fn render(&self, cfg: &ExperimentConfig) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "; deftx run manifest; usable as --config to reproduce the run");
        let _ = writeln!(o, "[manifest]");
        let _ = writeln!(o, "command = {}", self.command);
        let _ = writeln!(o, "args = {}", self.args.join(" "));
        let _ = writeln!(o, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(o, "format_version = {}", store::FORMAT_VERSION);
        let _ = writeln!(o, "overlap_denominator = support(a)");
        for (section, items) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            let _ = writeln!(o, "\n[{section}]");
            for (role, path, digest) in items {
                let _ = writeln!(o, "{role} = {}", path.display());
                let _ = writeln!(o, "{role}.sha256 = {digest}");
            }
        }
        let _ = writeln!(o, "\n[digests]");
        for (name, value) in &self.digests {
            let _ = writeln!(o, "{name} = {value}");
        }
        let _ = writeln!(o);
        o.push_str(&cfg.to_ini_string());
        o
    }

    /// Writes `<artifact>.manifest.ini` and returns its path.
    pub fn write_for(&self, artifact: &Path, cfg: &ExperimentConfig) -> StoreResult<PathBuf> {
        let path = manifest_path(artifact);
        store::write_atomic(&path, self.render(cfg).as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.ini");
    artifact.with_file_name(name)
}
