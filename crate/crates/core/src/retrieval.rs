//! Exact cosine retrieval over unit-norm shape embeddings, joint two-query
//! search, conditioning re-normalization and the JSON query service logic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{put_str, put_u32, ByteReader};
use crate::encoder::{Modality, ModelState};
use crate::error::{Error, Result};
use crate::linalg::{dot, normalized, Matrix};

/// Mean L2 norm expected by a 768-dimensional CLIP-conditioned generator.
pub fn default_conditioning_norm() -> f64 {
    0.5 * 768f64.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    rows: Matrix,
    metadata: Vec<serde_json::Value>,
    by_id: HashMap<String, usize>,
}

/// Builds an index; rows are normalized on ingest and keep insertion order.
pub fn build_index(
    entries: Vec<(String, Vec<f64>)>,
    mut metadata: BTreeMap<String, serde_json::Value>,
) -> Result<RetrievalIndex> {
    let dim = entries
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::InvalidConfig("index needs at least one embedding".into()))?;
    let mut ids = Vec::with_capacity(entries.len());
    let mut data = Vec::with_capacity(entries.len() * dim);
    let mut by_id = HashMap::with_capacity(entries.len());
    let mut meta = Vec::with_capacity(entries.len());
    for (id, v) in entries {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("embedding `{id}`"),
                expected: dim,
                found: v.len(),
            });
        }
        if by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let (unit, _) = normalized(&v, &format!("embedding `{id}`"))?;
        data.extend_from_slice(&unit);
        by_id.insert(id.clone(), ids.len());
        meta.push(metadata.remove(&id).unwrap_or(serde_json::Value::Null));
        ids.push(id);
    }
    let rows = Matrix::from_vec(ids.len(), dim, data)?;
    Ok(RetrievalIndex {
        ids,
        rows,
        metadata: meta,
        by_id,
    })
}

const INDEX_MAGIC: &[u8; 4] = b"TARI";
const INDEX_VERSION: u32 = 1;

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(|&i| self.rows.row(i))
    }

    pub fn metadata(&self, id: &str) -> Option<&serde_json::Value> {
        self.by_id.get(id).map(|&i| &self.metadata[i])
    }

    fn prepare(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "query vector".into(),
                expected: self.dim(),
                found: q.len(),
            });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query vector".into()));
        }
        Ok(normalized(q, "query vector")?.0)
    }

    fn top_k(&self, scores: Vec<f64>, k: usize) -> Vec<Hit> {
        let mut order: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering { b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)) };
        let k = k.min(order.len());
        if k == 0 {
            return Vec::new();
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, rank);
            order.truncate(k);
        }
        order.sort_unstable_by(rank);
        order
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect()
    }

    /// Top-`k` rows by cosine to `q`, descending; ties keep insertion order.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<Hit>> {
        let q = self.prepare(q)?;
        let scores = self.rows.iter_rows().map(|r| dot(r, &q)).collect();
        Ok(self.top_k(scores, k))
    }

    /// Top-`k` rows by `min(cos(row, a), cos(row, b))`.
    pub fn query_joint(&self, a: &[f64], b: &[f64], k: usize) -> Result<Vec<Hit>> {
        let a = self.prepare(a)?;
        let b = self.prepare(b)?;
        let scores = self.rows.iter_rows().map(|r| dot(r, &a).min(dot(r, &b))).collect();
        Ok(self.top_k(scores, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        for v in [INDEX_VERSION, self.len() as u32, self.dim() as u32] {
            put_u32(&mut out, v);
        }
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for x in self.rows.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let meta = serde_json::to_string(&self.metadata).expect("metadata serializes");
        put_str(&mut out, &meta);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(INDEX_MAGIC, "retrieval index")?;
        if r.u32()? != INDEX_VERSION {
            return Err(r.corrupt("unsupported index version"));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(n.checked_mul(dim).ok_or_else(|| r.corrupt("index too large"))?)?;
        let metadata: Vec<serde_json::Value> =
            serde_json::from_str(&r.string()?).map_err(|_| r.corrupt("bad metadata block"))?;
        r.finish()?;
        if metadata.len() != n {
            return Err(r.corrupt("metadata count mismatch"));
        }
        let mut by_id = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            rows: Matrix::from_vec(n, dim, data)?,
            metadata,
            by_id,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Rescales `v` to L2 norm `target_norm`.
pub fn renorm_for_conditioning(v: &[f64], target_norm: f64) -> Result<Vec<f64>> {
    if !(target_norm > 0.0 && target_norm.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "target norm must be positive, got {target_norm}"
        )));
    }
    let (unit, _) = normalized(v, "conditioning vector")?;
    Ok(unit.into_iter().map(|x| x * target_norm).collect())
}

/// One query input: an aligned-space vector, a stored shape, or a raw
/// text/image cache vector to be projected by the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_vector: Option<Vec<f32>>,
}

/// A bare JSON array is shorthand for `{"vector": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryTarget {
    Vector(Vec<f64>),
    Spec(TargetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    #[serde(flatten)]
    pub target: TargetSpec,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointQueryRequest {
    pub a: QueryTarget,
    pub b: QueryTarget,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceError {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

/// Query handling shared by the HTTP service and the CLI.
#[derive(Debug, Clone)]
pub struct QueryService {
    pub index: RetrievalIndex,
    /// Needed only for raw text/image queries.
    pub model: Option<ModelState>,
}

impl QueryService {
    pub fn new(index: RetrievalIndex, model: Option<ModelState>) -> Self {
        Self { index, model }
    }

    pub fn resolve(&self, target: &QueryTarget) -> Result<Vec<f64>, ServiceError> {
        let spec = match target {
            QueryTarget::Vector(v) => return Ok(v.clone()),
            QueryTarget::Spec(s) => s,
        };
        match (&spec.vector, &spec.shape_id, &spec.modality, &spec.raw_vector) {
            (Some(v), None, None, None) => Ok(v.clone()),
            (None, Some(id), None, None) => self
                .index
                .row_of(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::UnknownId(id.clone()).into()),
            (None, None, Some(m), Some(raw)) => {
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| ServiceError::new("no_model", "raw-vector queries need a loaded checkpoint"))?;
                Ok(model.project_raw(*m, raw)?.0)
            }
            _ => Err(ServiceError::new(
                "bad_request",
                "provide exactly one of `vector`, `shape_id`, or `modality` with `raw_vector`",
            )),
        }
    }

    fn check_k(k: usize) -> Result<(), ServiceError> {
        if k == 0 {
            Err(ServiceError::new("bad_request", "k must be at least 1"))
        } else {
            Ok(())
        }
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        Self::check_k(req.k)?;
        let q = self.resolve(&QueryTarget::Spec(req.target.clone()))?;
        Ok(QueryResponse {
            results: self.index.query(&q, req.k)?,
        })
    }

    pub fn query_joint(&self, req: &JointQueryRequest) -> Result<QueryResponse, ServiceError> {
        Self::check_k(req.k)?;
        let a = self.resolve(&req.a)?;
        let b = self.resolve(&req.b)?;
        Ok(QueryResponse {
            results: self.index.query_joint(&a, &b, req.k)?,
        })
    }
}
