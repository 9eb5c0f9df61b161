//! Run manifests, input hashing and `.partial` quarantine of outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Files that legitimately differ between identical runs.
const VOLATILE: [&str; 1] = ["timing.json"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Every option after defaults were applied.
    pub resolved: serde_json::Value,
    /// Input role -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let name = e.file_name().to_string_lossy().into_owned();
        if path.is_dir() {
            if !name.ends_with(".partial") {
                collect_files(root, &path, out)?;
            }
        } else if !VOLATILE.contains(&name.as_str()) {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over the sorted relative paths and contents of a file or tree.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_file() {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    } else {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(path.join(&rel))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn list_outputs(dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    Ok(files
        .into_iter()
        .map(|p| p.to_string_lossy().into_owned())
        .filter(|p| p != MANIFEST_FILE)
        .collect())
}

pub fn read_manifest(dir: &Path) -> Option<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Manifest for `command` before it runs; outputs are filled in afterwards.
pub fn plan(command: &str, resolved: serde_json::Value, inputs: &[(&str, &Path)], seed: Option<u64>) -> Result<RunManifest> {
    let mut hashes = BTreeMap::new();
    for (role, path) in inputs {
        if !path.exists() {
            bail!(lvq_core::Error::Invalid(format!("{role} input {} does not exist", path.display())));
        }
        hashes.insert(role.to_string(), hash_path(path)?);
    }
    Ok(RunManifest { command: command.into(), resolved, inputs: hashes, outputs: Vec::new(), seed })
}

/// True when `out` already holds the result of an identical invocation.
pub fn up_to_date(out: &Path, planned: &RunManifest) -> bool {
    read_manifest(out).is_some_and(|m| RunManifest { outputs: Vec::new(), ..m } == *planned)
}

pub fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    out.with_file_name(name)
}

/// Runs `body` in a staging directory and moves it to `out` only after it
/// succeeded; on failure the staging directory stays as `<out>.partial`.
pub fn staged(out: &Path, mut manifest: RunManifest, body: impl FnOnce(&Path) -> Result<()>) -> Result<bool> {
    if up_to_date(out, &manifest) {
        log::info!("{}: outputs in {} are up to date", manifest.command, out.display());
        return Ok(false);
    }
    if out.exists() && read_manifest(out).is_none() && fs::read_dir(out)?.next().is_some() {
        bail!(lvq_core::Error::Invalid(format!(
            "{} exists, is not empty and was not written by lvq; refusing to replace it",
            out.display()
        )));
    }
    let stage = partial_path(out);
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    body(&stage)?;
    manifest.outputs = list_outputs(&stage)?;
    write_manifest(&stage, &manifest)?;
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&stage, out)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_ignore_location_and_volatile_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::create_dir_all(d.join("x")).unwrap();
            fs::write(d.join("x/f.txt"), "hello").unwrap();
        }
        fs::write(a.path().join("x/timing.json"), "1.5").unwrap();
        assert_eq!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
        fs::write(b.path().join("x/g.txt"), "").unwrap();
        assert_ne!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
    }

    #[test]
    fn failed_body_is_quarantined() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("res");
        let m = plan("t", serde_json::json!({}), &[], None).unwrap();
        let err = staged(&out, m.clone(), |d| {
            fs::write(d.join("half.txt"), "x")?;
            bail!("boom")
        });
        assert!(err.is_err());
        assert!(!out.exists());
        assert!(root.path().join("res.partial/half.txt").is_file());
        assert!(staged(&out, m.clone(), |d| Ok(fs::write(d.join("ok.txt"), "y")?)).unwrap());
        assert!(!root.path().join("res.partial").exists());
        assert!(!staged(&out, m, |_| bail!("must not run")).unwrap());
    }
}
