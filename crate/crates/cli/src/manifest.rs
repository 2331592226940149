//! Run manifests. A manifest sits next to every CSV or dataset the CLI
//! writes and records enough to rerun the command byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use spt_core::{Result, SptError};

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// `key=value` lines of the effective configuration.
    pub config: String,
    pub inputs_hash: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command: {}", self.command);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "inputs_sha256: {}", self.inputs_hash);
        for o in &self.outputs {
            let _ = writeln!(s, "output: {}", o.display());
        }
        s.push_str("[config]\n");
        s.push_str(&self.config);
        if !self.config.is_empty() && !self.config.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| io(path, e))
    }
}

/// Content hash over the named files, in the order given. Each file
/// contributes its name and a `blob <len>\0` framed body, so renames and
/// reorders change the digest.
pub fn hash_files(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| io(f, e))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file of `dir` except manifests, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.is_file() && path.file_name().is_some_and(|n| n != MANIFEST_NAME) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// `out.csv` → `out.csv.manifest`.
pub fn manifest_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn io(path: &Path, source: std::io::Error) -> SptError {
    SptError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content_and_name() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, "x").unwrap();
        std::fs::write(&b, "x").unwrap();
        let ha = hash_files(std::slice::from_ref(&a)).unwrap();
        assert_eq!(ha.len(), 64);
        assert_eq!(ha, hash_files(std::slice::from_ref(&a)).unwrap());
        assert_ne!(ha, hash_files(&[b]).unwrap());
        std::fs::write(&a, "y").unwrap();
        assert_ne!(ha, hash_files(&[a]).unwrap());
    }

    #[test]
    fn manifest_text_lists_outputs_and_config() {
        let m = RunManifest {
            command: "spt cost".into(),
            seed: 3,
            config: "B=1".into(),
            inputs_hash: "00".into(),
            outputs: vec![PathBuf::from("o.csv")],
        };
        assert_eq!(
            m.to_text(),
            "command: spt cost\nseed: 3\ninputs_sha256: 00\noutput: o.csv\n[config]\nB=1\n"
        );
        assert_eq!(manifest_for(Path::new("d/o.csv")), PathBuf::from("d/o.csv.manifest"));
    }
}
