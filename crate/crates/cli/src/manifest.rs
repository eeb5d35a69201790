use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use quept::format::FORMAT_VERSION;
use quept::{CalibConfig, QuantSetup};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub model: PathBuf,
    pub model_sha256: String,
    pub calib: PathBuf,
    pub calib_sha256: String,
}

/// Fully resolved calibration run; re-running it reproduces every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub inputs: Inputs,
    pub setup: QuantSetup,
    pub config: CalibConfig,
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn new(model: &Path, calib: &Path, setup: QuantSetup, config: CalibConfig) -> anyhow::Result<Self> {
        let abs = |p: &Path| fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()));
        let (model, calib) = (abs(model)?, abs(calib)?);
        Ok(Self {
            format_version: FORMAT_VERSION,
            inputs: Inputs {
                model_sha256: file_sha256(&model)?,
                calib_sha256: file_sha256(&calib)?,
                model,
                calib,
            },
            setup,
            config,
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != FORMAT_VERSION {
            bail!("manifest version {} is not supported (expected {FORMAT_VERSION})", m.format_version);
        }
        Ok(m)
    }

    /// Fails if an input file changed since the manifest was written.
    pub fn verify_inputs(&self) -> anyhow::Result<()> {
        for (path, want) in [
            (&self.inputs.model, &self.inputs.model_sha256),
            (&self.inputs.calib, &self.inputs.calib_sha256),
        ] {
            if &file_sha256(path)? != want {
                bail!("{} changed since the manifest was written (sha256 mismatch)", path.display());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_change_detection() {
        let dir = tempfile::tempdir().unwrap();
        let (m, c) = (dir.path().join("m"), dir.path().join("c"));
        fs::write(&m, b"model").unwrap();
        fs::write(&c, b"calib").unwrap();
        let config = CalibConfig { merge: None, ..Default::default() };
        let manifest = RunManifest::new(&m, &c, QuantSetup::default(), config).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, manifest.to_toml().unwrap()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, manifest);
        back.verify_inputs().unwrap();
        fs::write(&c, b"other").unwrap();
        assert!(back.verify_inputs().is_err());
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m");
        fs::write(&m, b"x").unwrap();
        let mut manifest = RunManifest::new(&m, &m, QuantSetup::default(), CalibConfig::default()).unwrap();
        manifest.format_version = 99;
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, manifest.to_toml().unwrap()).unwrap();
        assert!(RunManifest::load(&path).is_err());
    }
}
