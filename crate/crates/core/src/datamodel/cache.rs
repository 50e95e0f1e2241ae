//! Frozen text/image embedding cache.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "TACE"
//! version    u32      1
//! text_dim   u32
//! image_dim  u32
//! n_text     u32
//! n_image    u32
//! text rows  n_text  * text_dim  * f32
//! image rows n_image * image_dim * f32
//! key table  n_text text keys, then n_image image keys; each u32 length + UTF-8
//! ```
//!
//! Key order in the file is preserved in memory so that re-encoding a cache
//! reproduces the original bytes. A JSON form (`{"text": {key: [..]},
//! "image": {key: [..]}}`) is accepted for hand-written fixtures.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use crate::bytes::{put_str, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TACE";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
struct VectorTable {
    dim: usize,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl VectorTable {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, kind: &str, key: String, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("{kind} vector `{key}`"),
                expected: self.dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidRecord {
                id: key,
                reason: format!("non-finite {kind} vector"),
            });
        }
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateId(key));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(v);
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&[f32]> {
        self.index
            .get(key)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }
}

/// Raw (pre-projection, pre-normalization) outputs of the frozen text and
/// image encoders, addressed by candidate/view key.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    text: VectorTable,
    image: VectorTable,
}

impl EmbeddingCache {
    pub fn new(text_dim: usize, image_dim: usize) -> Result<Self> {
        if text_dim == 0 || image_dim == 0 {
            return Err(Error::InvalidConfig("cache dimensions must be positive".into()));
        }
        Ok(Self {
            text: VectorTable::new(text_dim),
            image: VectorTable::new(image_dim),
        })
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim
    }

    pub fn image_dim(&self) -> usize {
        self.image.dim
    }

    pub fn insert_text(&mut self, key: impl Into<String>, v: &[f32]) -> Result<()> {
        self.text.insert("text", key.into(), v)
    }

    pub fn insert_image(&mut self, key: impl Into<String>, v: &[f32]) -> Result<()> {
        self.image.insert("image", key.into(), v)
    }

    pub fn text(&self, key: &str) -> Option<&[f32]> {
        self.text.get(key)
    }

    pub fn image(&self, key: &str) -> Option<&[f32]> {
        self.image.get(key)
    }

    pub fn text_keys(&self) -> &[String] {
        &self.text.keys
    }

    pub fn image_keys(&self) -> &[String] {
        &self.image.keys
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.text.data.len() + self.image.data.len()));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.text.dim as u32,
            self.image.dim as u32,
            self.text.keys.len() as u32,
            self.image.keys.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self.text.data.iter().chain(&self.image.data) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for k in self.text.keys.iter().chain(&self.image.keys) {
            put_str(&mut out, k);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(MAGIC, "embedding cache")?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::corrupt(path, format!("unsupported version {version}")));
        }
        let text_dim = r.u32()? as usize;
        let image_dim = r.u32()? as usize;
        let n_text = r.u32()? as usize;
        let n_image = r.u32()? as usize;
        let text_vals = r.f32s(n_text * text_dim)?;
        let image_vals = r.f32s(n_image * image_dim)?;
        let text_keys = (0..n_text).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let image_keys = (0..n_image).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut cache = Self::new(text_dim, image_dim)?;
        for (i, k) in text_keys.into_iter().enumerate() {
            cache.insert_text(k, &text_vals[i * text_dim..(i + 1) * text_dim])?;
        }
        for (i, k) in image_keys.into_iter().enumerate() {
            cache.insert_image(k, &image_vals[i * image_dim..(i + 1) * image_dim])?;
        }
        Ok(cache)
    }

    fn from_json(bytes: &[u8], path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct JsonCache {
            text_dim: Option<usize>,
            image_dim: Option<usize>,
            text: BTreeMap<String, Vec<f32>>,
            image: BTreeMap<String, Vec<f32>>,
        }
        let parsed: JsonCache = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let first_len = |m: &BTreeMap<String, Vec<f32>>| m.values().next().map(Vec::len);
        let text_dim = parsed.text_dim.or(first_len(&parsed.text)).unwrap_or(1);
        let image_dim = parsed.image_dim.or(first_len(&parsed.image)).unwrap_or(1);
        let mut cache = Self::new(text_dim, image_dim)?;
        for (k, v) in parsed.text {
            cache.insert_text(k, &v)?;
        }
        for (k, v) in parsed.image {
            cache.insert_image(k, &v)?;
        }
        Ok(cache)
    }

    /// Reads a cache file, binary or JSON (detected by the magic bytes).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes, path)
        } else {
            Self::from_json(&bytes, path)
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
