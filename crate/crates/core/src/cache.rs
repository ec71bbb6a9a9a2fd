//! On-disk activation cache, enabled through the `BOXLENS_CACHE` directory.
//!
//! Entries are keyed by the model fingerprint, the exact input samples and the
//! requested layers, and store activations losslessly so cached and uncached
//! runs produce identical reports.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ActivationVolume, LayerKind};

pub const CACHE_ENV: &str = "BOXLENS_CACHE";
const MAGIC: &[u8; 8] = b"BXLACT01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationCache {
    dir: PathBuf,
}

impl ActivationCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ActivationCache { dir: dir.into() }
    }

    /// The cache named by `BOXLENS_CACHE`, if set and non-empty.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(Self::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(fingerprint: &str, image: &Image, layers: &[String]) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.as_bytes());
        h.update([0]);
        for d in [image.height(), image.width(), image.channels()] {
            h.update((d as u64).to_le_bytes());
        }
        for v in image.data() {
            h.update(v.to_le_bytes());
        }
        for l in layers {
            h.update((l.len() as u64).to_le_bytes());
            h.update(l.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.act"))
    }

    /// Cached volumes for `key`; unreadable or corrupt entries count as misses.
    pub fn load(&self, key: &str) -> Option<Vec<ActivationVolume>> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        match decode(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn store(&self, key: &str, volumes: &[ActivationVolume]) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = self.dir.join(format!("{key}.{}.tmp", std::process::id()));
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode(volumes)).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn encode(volumes: &[ActivationVolume]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend((volumes.len() as u64).to_le_bytes());
    for v in volumes {
        out.extend((v.layer_name.len() as u64).to_le_bytes());
        out.extend(v.layer_name.as_bytes());
        out.push(match v.kind {
            LayerKind::Convolutional => 0,
            LayerKind::Other => 1,
        });
        let (h, w, c) = v.data.dim();
        for d in [h, w, c] {
            out.extend((d as u64).to_le_bytes());
        }
        for x in v.data.iter() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8]) -> std::result::Result<Vec<ActivationVolume>, String> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err("bad magic".into());
    }
    let u64_ = |r: &mut &[u8]| -> std::result::Result<u64, String> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| e.to_string())?;
        Ok(u64::from_le_bytes(b))
    };
    let count = u64_(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u64_(&mut r)? as usize;
        if len > r.len() {
            return Err("truncated name".into());
        }
        let name = String::from_utf8(r[..len].to_vec()).map_err(|e| e.to_string())?;
        r = &r[len..];
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(|e| e.to_string())?;
        let kind = match kind[0] {
            0 => LayerKind::Convolutional,
            1 => LayerKind::Other,
            k => return Err(format!("bad layer kind {k}")),
        };
        let (h, w, c) = (u64_(&mut r)? as usize, u64_(&mut r)? as usize, u64_(&mut r)? as usize);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or("shape overflow")?;
        if n.checked_mul(8).is_none_or(|b| b > r.len()) {
            return Err("truncated data".into());
        }
        let data: Vec<f64> = r[..n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[n * 8..];
        let arr = Array3::from_shape_vec((h, w, c), data).map_err(|e| e.to_string())?;
        out.push(ActivationVolume::new(name, arr, kind).map_err(|e| e.to_string())?);
    }
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}
