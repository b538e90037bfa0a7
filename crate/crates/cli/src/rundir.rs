//! Output directories: exclusive lock, run configuration and the manifest
//! of content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nautilus::pipeline::ExperimentConfig;
use sha2::{Digest, Sha256};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCODER_FILE: &str = "vocoder.ckpt";
pub const PHONEMES_FILE: &str = "phonemes.txt";
const LOCK_FILE: &str = ".lock";

/// An output directory owned by this process until dropped.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| {
                format!(
                    "output directory {} is locked ({} exists)",
                    root.display(),
                    lock.display()
                )
            })?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Lists every file under the directory with its SHA-256.
    pub fn finish(self) -> Result<()> {
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files)?;
        files.sort();
        let mut text = String::new();
        for rel in files {
            if rel == LOCK_FILE || rel == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(self.root.join(&rel)).with_context(|| format!("hashing {rel}"))?;
            text.push_str(&format!("{}  {rel}\n", hex::encode(Sha256::digest(&bytes))));
        }
        self.write(MANIFEST_FILE, text.as_bytes())?;
        Ok(())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .expect("inside root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Configuration from a preset or file, then `--set` overrides, then the seed.
pub fn build_config(
    base: Option<&Path>,
    file: Option<&Path>,
    preset: &str,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = match base {
        Some(dir) => read_config(dir)?,
        None => ExperimentConfig::preset(preset)?,
    };
    if let Some(f) = file {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", f.display()))?;
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects key=value, got `{o}`");
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        cfg.stage.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(run: &Path) -> Result<ExperimentConfig> {
    let p = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("in {}", p.display()))
}
