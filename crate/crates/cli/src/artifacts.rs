//! Output directories: locking, hashed writes, manifests, image encoding.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use moesplat_core::scene::io;
use moesplat_core::ImageBuffer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.toml";
const LOCK: &str = ".lock";

/// One file written by a command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Machine-readable record of a command's outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<Entry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, path: &str) -> Option<&Entry> {
        self.files.iter().find(|e| e.path == path)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.files {
            let bytes = fs::read(dir.join(&e.path)).map_err(|err| CliError::io(dir.join(&e.path), err))?;
            if bytes.len() as u64 != e.bytes || sha256_hex(&bytes) != e.sha256 {
                return Err(CliError::Data(format!("{} does not match its manifest entry", e.path)));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// An output directory held exclusively by one command.
pub struct OutputDir {
    root: PathBuf,
    command: String,
    seed: u64,
    entries: Vec<Entry>,
    _lock: Lock,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl OutputDir {
    /// Creates the directory and takes its lockfile; fails if another
    /// command holds it.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Data(format!("{} is locked by another command ({})", root.display(), lock.display()))
            } else {
                CliError::io(&lock, e)
            }
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            seed,
            entries: Vec::new(),
            _lock: Lock(lock),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` and records it in the manifest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.entries.retain(|e| e.path != rel);
        self.entries.push(Entry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_str(&mut self, rel: &str, text: &str) -> Result<()> {
        self.write(rel, text.as_bytes())
    }

    /// Writes an image as an 8-bit PNG plus an exact float sidecar `.img`.
    pub fn write_image(&mut self, stem: &str, image: &ImageBuffer) -> Result<()> {
        self.write(&format!("{stem}.png"), &png_bytes(image)?)?;
        self.write(&format!("{stem}.img"), &io::encode_image(image)?)
    }

    /// Validates every written file against its hash and writes the
    /// manifest. Returns the manifest.
    pub fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: self.command.clone(),
            seed: self.seed,
            files: std::mem::take(&mut self.entries),
        };
        manifest.verify(&self.root)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        let path = self.root.join(MANIFEST);
        fs::write(&path, text.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

/// 8-bit PNG of a 1-, 3- or other-channel image; other channel counts are
/// written as grayscale of the first channel.
pub fn png_bytes(image: &ImageBuffer) -> Result<Vec<u8>> {
    let (h, w, c) = image.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = std::io::Cursor::new(Vec::new());
    let res = if c == 3 {
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = image.pixel(y as usize * w + x as usize);
            image::Rgb([q(p[0]), q(p[1]), q(p[2])])
        });
        buf.write_to(&mut out, image::ImageFormat::Png)
    } else {
        let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([q(image.get(y as usize, x as usize, 0))]));
        buf.write_to(&mut out, image::ImageFormat::Png)
    };
    res.map_err(|e| CliError::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Fails with a data error unless `path` exists.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing {what}: {}", path.display())))
    }
}

/// Opens a file for reading (used to check inputs before heavy work).
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}
