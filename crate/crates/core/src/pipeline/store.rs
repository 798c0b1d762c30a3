//! On-disk artifacts: atomic writes, the texture blob, and hash-stamped
//! JSON documents.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::TextureAtlas;

pub const TEXTURE_MAGIC: &[u8; 4] = b"TXA1";
const TEXTURE_HEADER: usize = 16;

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::MissingArtifact(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `TXA1`, width, height, reserved zero (all u32 LE), then RGB f32 LE texels.
pub fn texture_to_bytes(atlas: &TextureAtlas) -> Vec<u8> {
    let mut out = Vec::with_capacity(TEXTURE_HEADER + 4 * atlas.texels().len());
    out.extend_from_slice(TEXTURE_MAGIC);
    out.extend_from_slice(&(atlas.width() as u32).to_le_bytes());
    out.extend_from_slice(&(atlas.height() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in atlas.texels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn texture_from_bytes(bytes: &[u8], path: &str) -> Result<TextureAtlas> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_string(),
        message,
    };
    if bytes.len() < TEXTURE_HEADER || &bytes[..4] != TEXTURE_MAGIC {
        return Err(corrupt("missing TXA1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(4), word(8));
    let body = &bytes[TEXTURE_HEADER..];
    if body.len() != w * h * 3 * 4 {
        return Err(corrupt(format!(
            "{w}x{h} atlas needs {} bytes of texels, found {}",
            w * h * 12,
            body.len()
        )));
    }
    let texels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    TextureAtlas::new(w, h, texels).map_err(|e| corrupt(e.to_string()))
}

pub fn write_texture(path: &Path, atlas: &TextureAtlas) -> Result<()> {
    atomic_write(path, &texture_to_bytes(atlas))
}

pub fn read_texture(path: &Path) -> Result<TextureAtlas> {
    texture_from_bytes(&read_existing(path)?, &path.display().to_string())
}

pub fn read_existing(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingArtifact(path.display().to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

/// A JSON artifact stamped with the hash of the config that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub data: T,
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<()> {
    let doc = Stamped {
        config_hash: config_hash.to_string(),
        data: body,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Reads a stamped document, refusing one produced under a different hash.
pub fn read_json<T: DeserializeOwned>(path: &Path, expected_hash: &str) -> Result<T> {
    let bytes = read_existing(path)?;
    let doc: Stamped<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    check_hash(path, &doc.config_hash, expected_hash)?;
    Ok(doc.data)
}

pub fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn world_json(&self, env: u32) -> PathBuf {
        self.root.join(format!("world_{env}.json"))
    }

    pub fn world_texture(&self, env: u32) -> PathBuf {
        self.root.join(format!("world_{env}.txa"))
    }

    pub fn params(&self) -> PathBuf {
        self.root.join("params.bin")
    }

    pub fn competence(&self) -> PathBuf {
        self.root.join("competence.json")
    }

    pub fn instances(&self, mode: impl std::fmt::Display) -> PathBuf {
        self.root.join(format!("instances_{mode}.json"))
    }

    pub fn rejections(&self, mode: impl std::fmt::Display) -> PathBuf {
        self.root.join(format!("rejections_{mode}.json"))
    }

    pub fn attacked_texture(&self, mode: impl std::fmt::Display, id: u64) -> PathBuf {
        self.root.join("attacks").join(mode.to_string()).join(format!("{id}.txa"))
    }

    pub fn checkpoint_log(&self, mode: impl std::fmt::Display, id: u64) -> PathBuf {
        self.root.join("attacks").join(mode.to_string()).join(format!("{id}.json"))
    }

    pub fn evaluation(&self, mode: impl std::fmt::Display) -> PathBuf {
        self.root.join(format!("eval_{mode}.json"))
    }

    pub fn factors(&self, mode: impl std::fmt::Display) -> PathBuf {
        self.root.join(format!("factors_{mode}.csv"))
    }

    pub fn per_instance(&self, mode: impl std::fmt::Display) -> PathBuf {
        self.root.join(format!("per_instance_{mode}.csv"))
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_round_trip_is_bit_exact() {
        let texels: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 17.0).collect();
        let atlas = TextureAtlas::new(2, 3, texels).unwrap();
        let bytes = texture_to_bytes(&atlas);
        assert_eq!(&bytes[..4], b"TXA1");
        assert_eq!(bytes.len(), 16 + 18 * 4);
        assert_eq!(texture_from_bytes(&bytes, "t").unwrap(), atlas);
        assert!(texture_from_bytes(&bytes[..20], "t").is_err());
        assert!(texture_from_bytes(b"nope", "t").is_err());
    }

    #[test]
    fn stamped_json_refuses_other_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_json(&p, "abc", &vec![1, 2, 3]).unwrap();
        let v: Vec<i32> = read_json(&p, "abc").unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        assert!(matches!(read_json::<Vec<i32>>(&p, "xyz"), Err(Error::HashMismatch { .. })));
        assert!(matches!(
            read_json::<Vec<i32>>(&dir.path().join("missing.json"), "abc"),
            Err(Error::MissingArtifact(_))
        ));
    }
}
