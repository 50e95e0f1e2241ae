//! Shape records and the JSON-lines manifest format.
//!
//! The first line of a manifest file is a header object
//! `{"trialign_manifest": 1, "cache": "<path>"}`; every following non-empty
//! line is one shape record. Point clouds are stored inline (`points`: rows of
//! `[x, y, z, r, g, b]`), in a sidecar file (`points_file`), or, before
//! `prepare` has run, as a mesh reference (`mesh`). Relative paths resolve
//! against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::EmbeddingCache;
use super::mesh::{sample_surface_points, Mesh};
use super::points_file::{read_points_file, write_points_file};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 6]", into = "[f32; 6]")]
pub struct Point {
    pub xyz: [f32; 3],
    pub rgb: [f32; 3],
}

impl Point {
    pub fn new(xyz: [f32; 3], rgb: [f32; 3]) -> Self {
        Self { xyz, rgb }
    }
}

impl From<[f32; 6]> for Point {
    fn from(v: [f32; 6]) -> Self {
        Self {
            xyz: [v[0], v[1], v[2]],
            rgb: [v[3], v[4], v[5]],
        }
    }
}

impl From<Point> for [f32; 6] {
    fn from(p: Point) -> Self {
        [p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2]]
    }
}

/// Source category of a text candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextCategory {
    Raw,
    Caption,
    Retrieved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    #[serde(rename = "objaverse")]
    Objaverse,
    #[serde(rename = "shapenet")]
    ShapeNet,
    #[serde(rename = "3dfuture")]
    ThreeDFuture,
    #[serde(rename = "abo")]
    Abo,
    #[serde(rename = "synthetic")]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub points: Vec<Point>,
    /// Candidate keys into the cache's text table, grouped by source. A
    /// filtered-out raw text is an empty `Raw` list.
    pub text_candidates: BTreeMap<TextCategory, Vec<String>>,
    /// Keys into the cache's image table (renders, optionally a thumbnail).
    pub image_view_keys: Vec<String>,
    pub dataset_tag: DatasetTag,
}

impl ShapeRecord {
    pub fn has_text(&self) -> bool {
        self.text_candidates.values().any(|v| !v.is_empty())
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.points.is_empty() {
            return Err(bad("point cloud is empty"));
        }
        for p in &self.points {
            if p.xyz.iter().any(|c| !c.is_finite()) {
                return Err(bad("non-finite coordinate"));
            }
            if p.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(bad("color channel outside [0, 1]"));
            }
        }
        if self.image_view_keys.is_empty() {
            return Err(bad("no image view keys"));
        }
        Ok(())
    }

    fn check_keys(&self, cache: &EmbeddingCache) -> Result<()> {
        for key in self.text_candidates.values().flatten() {
            if cache.text(key).is_none() {
                return Err(Error::DanglingKey {
                    record: self.id.clone(),
                    kind: "text",
                    key: key.clone(),
                });
            }
        }
        for key in &self.image_view_keys {
            if cache.image(key).is_none() {
                return Err(Error::DanglingKey {
                    record: self.id.clone(),
                    kind: "image view",
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ShapeRecord>,
    pub cache_path: PathBuf,
    /// Class labels for evaluation sets, keyed by record id.
    pub split_labels: Option<BTreeMap<String, String>>,
}

impl DatasetManifest {
    /// Checks record invariants, id uniqueness and label keys.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidConfig("manifest has no records".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            r.validate()?;
        }
        if let Some(labels) = &self.split_labels {
            if let Some(id) = labels.keys().find(|id| !seen.contains(id.as_str())) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        Ok(())
    }

    /// Checks that every key referenced by a record resolves in `cache`.
    pub fn check_against(&self, cache: &EmbeddingCache) -> Result<()> {
        self.records.iter().try_for_each(|r| r.check_keys(cache))
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.split_labels.as_ref().and_then(|l| l.get(id)).map(String::as_str)
    }
}

/// A validated manifest together with the cache it references.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cache: EmbeddingCache,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, cache: EmbeddingCache) -> Result<Self> {
        manifest.validate()?;
        manifest.check_against(&cache)?;
        Ok(Self { manifest, cache })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    trialign_manifest: u32,
    cache: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct MeshRef {
    path: PathBuf,
    num_points: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mesh: Option<MeshRef>,
    #[serde(default)]
    text_candidates: BTreeMap<TextCategory, Vec<String>>,
    image_view_keys: Vec<String>,
    dataset_tag: DatasetTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// How mesh-referencing records are turned into point clouds at load time.
#[derive(Debug, Clone, Copy)]
pub struct MeshSampling {
    /// Overrides the per-record `num_points` when set.
    pub num_points: Option<usize>,
    pub seed: u64,
}

/// How point clouds are written by [`write_manifest`].
#[derive(Debug, Clone)]
pub enum PointStorage {
    Inline,
    /// One `<id>.pts` sidecar per record in the given directory.
    Sidecar(PathBuf),
}

/// Loads and eagerly validates a manifest and its embedding cache.
///
/// Records that still reference a mesh are rejected; see
/// [`load_manifest_with`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    load_manifest_with(path, None)
}

pub fn load_manifest_with(path: impl AsRef<Path>, meshes: Option<MeshSampling>) -> Result<Dataset> {
    load_manifest_opts(path, &LoadOptions { meshes, cache: None })
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub meshes: Option<MeshSampling>,
    /// Replaces the cache path named in the manifest header.
    pub cache: Option<PathBuf>,
}

pub fn load_manifest_opts(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Dataset> {
    let meshes = options.meshes;
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let loc = |line: usize| format!("{}:{}", path.display(), line + 1);

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header_line) = lines.next().ok_or_else(|| Error::Parse {
        location: path.display().to_string(),
        message: "empty manifest".into(),
    })?;
    let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        location: loc(hl),
        message: format!("bad header: {e}"),
    })?;
    if header.trialign_manifest != MANIFEST_VERSION {
        return Err(Error::Parse {
            location: loc(hl),
            message: format!("unsupported manifest version {}", header.trialign_manifest),
        });
    }

    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    for (ln, line) in lines {
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: loc(ln),
            message: e.to_string(),
        })?;
        let points = match (rec.points, rec.points_file, rec.mesh) {
            (Some(p), None, None) => p,
            (None, Some(f), None) => read_points_file(base.join(f))?,
            (None, None, Some(mesh)) => match meshes {
                Some(cfg) => {
                    let m = Mesh::read_obj(base.join(&mesh.path))?;
                    let n = cfg.num_points.unwrap_or(mesh.num_points);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &rec.id));
                    sample_surface_points(&m, n, &mut rng)?
                }
                None => {
                    return Err(Error::InvalidRecord {
                        id: rec.id,
                        reason: "references a mesh; run `prepare` to sample points".into(),
                    })
                }
            },
            _ => {
                return Err(Error::InvalidRecord {
                    id: rec.id,
                    reason: "exactly one of points, points_file, mesh is required".into(),
                })
            }
        };
        if let Some(l) = rec.label {
            labels.insert(rec.id.clone(), l);
        }
        records.push(ShapeRecord {
            id: rec.id,
            points,
            text_candidates: rec.text_candidates,
            image_view_keys: rec.image_view_keys,
            dataset_tag: rec.dataset_tag,
        });
    }

    let cache_path = options.cache.clone().unwrap_or_else(|| base.join(&header.cache));
    let manifest = DatasetManifest {
        records,
        cache_path: cache_path.clone(),
        split_labels: (!labels.is_empty()).then_some(labels),
    };
    manifest.validate()?;
    let cache = EmbeddingCache::read(&cache_path)?;
    manifest.check_against(&cache)?;
    Ok(Dataset { manifest, cache })
}

/// Writes `manifest` as JSON lines. The cache path is written relative to the
/// manifest's directory when it lies beneath it.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>, storage: &PointStorage) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> PathBuf {
        p.strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let to_json = |v: serde_json::Result<String>| {
        v.map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    };

    let mut out = String::new();
    let header = Header {
        trialign_manifest: MANIFEST_VERSION,
        cache: rel(&manifest.cache_path),
    };
    writeln!(out, "{}", to_json(serde_json::to_string(&header))?).unwrap();
    if let PointStorage::Sidecar(dir) = storage {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for r in &manifest.records {
        let (points, points_file) = match storage {
            PointStorage::Inline => (Some(r.points.clone()), None),
            PointStorage::Sidecar(dir) => {
                let f = dir.join(format!("{}.pts", sanitize(&r.id)));
                write_points_file(&f, &r.points)?;
                (None, Some(rel(&f)))
            }
        };
        let line = RecordLine {
            id: r.id.clone(),
            points,
            points_file,
            mesh: None,
            text_candidates: r.text_candidates.clone(),
            image_view_keys: r.image_view_keys.clone(),
            dataset_tag: r.dataset_tag,
            label: manifest.label_of(&r.id).map(str::to_string),
        };
        writeln!(out, "{}", to_json(serde_json::to_string(&line))?).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, view_key: &str) -> PathBuf {
        let mut cache = EmbeddingCache::new(2, 2).unwrap();
        cache.insert_text("t0", &[1.0, 0.0]).unwrap();
        cache.insert_text("t1", &[0.0, 1.0]).unwrap();
        cache.insert_image("v0", &[1.0, 1.0]).unwrap();
        cache.write(dir.join("cache.bin")).unwrap();
        let m = format!(
            concat!(
                "{{\"trialign_manifest\":1,\"cache\":\"cache.bin\"}}\n",
                "{{\"id\":\"a\",\"points\":[[0,0,0,0.5,0.5,0.5]],\"text_candidates\":{{\"raw\":[\"t0\"]}},",
                "\"image_view_keys\":[\"v0\"],\"dataset_tag\":\"synthetic\",\"label\":\"x\"}}\n",
                "{{\"id\":\"b\",\"points\":[[1,0,0,1,0,0]],\"text_candidates\":{{\"caption\":[\"t1\"]}},",
                "\"image_view_keys\":[\"{}\"],\"dataset_tag\":\"objaverse\"}}\n"
            ),
            view_key
        );
        let p = dir.join("m.jsonl");
        std::fs::write(&p, m).unwrap();
        p
    }

    #[test]
    fn loads_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_manifest(fixture(dir.path(), "v0")).unwrap();
        assert_eq!(ds.manifest.records.len(), 2);
        assert_eq!(ds.manifest.label_of("a"), Some("x"));
        assert_eq!(ds.manifest.records[1].dataset_tag, DatasetTag::Objaverse);
    }

    #[test]
    fn dangling_view_key_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(fixture(dir.path(), "v99")).unwrap_err();
        match err {
            Error::DanglingKey { record, key, .. } => {
                assert_eq!(record, "b");
                assert_eq!(key, "v99");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), "v0");
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"id\":\"b\"", "\"id\":\"a\"");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn unknown_category_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), "v0");
        let text = std::fs::read_to_string(&p).unwrap().replace("\"caption\"", "\"tags\"");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_manifest("/nonexistent/m.jsonl"), Err(Error::Io { .. })));
    }

    #[test]
    fn color_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), "v0");
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("[1,0,0,1,0,0]", "[1,0,0,1.5,0,0]");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::InvalidRecord { .. })));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_manifest(fixture(dir.path(), "v0")).unwrap();
        let out = dir.path().join("out.jsonl");
        write_manifest(&ds.manifest, &out, &PointStorage::Sidecar(dir.path().join("pts"))).unwrap();
        let back = load_manifest(&out).unwrap();
        assert_eq!(back.manifest, ds.manifest);
    }
}
