//! Offline hard-negative mining: exact cosine kNN over shape embeddings,
//! seeded batch construction and the false-negative filter.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignloss::NegativeMask;
use crate::bytes::{put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::{dot, is_unit, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Seed shapes per batch (`s`).
    pub seeds: usize,
    /// Group size per seed, the seed included (`m`).
    pub neighbors_per_seed: usize,
    /// Neighbor-table depth (`k ≥ m`).
    pub knn_depth: usize,
    /// False-negative margin (`δ`).
    pub delta: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            seeds: 40,
            neighbors_per_seed: 5,
            knn_depth: 16,
            delta: 0.1,
        }
    }
}

impl MiningConfig {
    pub fn batch_size(&self) -> usize {
        self.seeds * self.neighbors_per_seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.neighbors_per_seed == 0 {
            return Err(Error::InvalidConfig("s and m must be at least 1".into()));
        }
        if self.knn_depth < self.neighbors_per_seed {
            return Err(Error::InvalidConfig(format!(
                "kNN depth {} is below m = {}",
                self.knn_depth, self.neighbors_per_seed
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// For each shape, its nearest neighbors by cosine similarity, most similar
/// first, ties broken by ascending id. A shape never lists itself.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    ids: Vec<String>,
    rows: Vec<Vec<Neighbor>>,
}

impl NeighborTable {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbors(&self, index: usize) -> &[Neighbor] {
        &self.rows[index]
    }

    /// Fixed row width, `min(k, n − 1)`.
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TABLE_MAGIC);
        for v in [TABLE_VERSION, self.ids.len() as u32, self.width() as u32] {
            put_u32(&mut out, v);
        }
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for nb in self.rows.iter().flatten() {
            out.extend_from_slice(&(nb.index as u32).to_le_bytes());
            out.extend_from_slice(&nb.similarity.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(TABLE_MAGIC, "neighbor table")?;
        if r.u32()? != TABLE_VERSION {
            return Err(r.corrupt("unsupported neighbor-table version"));
        }
        let n = r.u32()? as usize;
        let width = r.u32()? as usize;
        let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(width);
            for _ in 0..width {
                let index = r.u32()? as usize;
                let similarity = r.f64()?;
                if index >= n {
                    return Err(r.corrupt("neighbor index out of range"));
                }
                row.push(Neighbor { index, similarity });
            }
            rows.push(row);
        }
        r.finish()?;
        Ok(Self { ids, rows })
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

const TABLE_MAGIC: &[u8; 4] = b"TANT";
const TABLE_VERSION: u32 = 1;

/// Exact kNN under cosine similarity for unit-norm `embeddings` (row `i`
/// belongs to `ids[i]`). Queries run in parallel.
pub fn build_neighbor_table(ids: &[String], embeddings: &Matrix, k: usize) -> Result<NeighborTable> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewShapes {
            needed: 2,
            available: n,
        });
    }
    if embeddings.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "embedding rows vs ids".into(),
            expected: n,
            found: embeddings.rows(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(n);
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    for i in 0..n {
        if !is_unit(embeddings.row(i), 1e-6) {
            return Err(Error::NonUnitRow {
                matrix: "shape embeddings",
                row: i,
                norm: dot(embeddings.row(i), embeddings.row(i)).sqrt(),
            });
        }
    }
    let width = k.min(n - 1);
    let rank = |a: &Neighbor, b: &Neighbor| -> Ordering {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| ids[a.index].cmp(&ids[b.index]))
    };
    let rows = (0..n)
        .into_par_iter()
        .map(|q| {
            let query = embeddings.row(q);
            let mut all: Vec<Neighbor> = (0..n)
                .filter(|&j| j != q)
                .map(|j| Neighbor {
                    index: j,
                    similarity: dot(query, embeddings.row(j)),
                })
                .collect();
            if width < all.len() {
                all.select_nth_unstable_by(width - 1, rank);
                all.truncate(width);
            }
            all.sort_unstable_by(rank);
            all
        })
        .collect();
    Ok(NeighborTable {
        ids: ids.to_vec(),
        rows,
    })
}

/// Indices into a [`NeighborTable`] forming one training batch, with the
/// seed group of every position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub seed_of: Vec<usize>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every position in its own group (plain random batches).
    pub fn ungrouped(indices: Vec<usize>) -> Self {
        let seed_of = (0..indices.len()).collect();
        Self { indices, seed_of }
    }
}

/// Lazy uniform draws without replacement over `0..n`, skipping anything
/// already taken in the current batch.
struct Shuffler {
    order: Vec<usize>,
    cursor: usize,
}

impl Shuffler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: 0,
        }
    }

    fn reset(&mut self) {
        self.cursor = 0;
    }

    fn next_untaken<R: Rng + ?Sized>(&mut self, rng: &mut R, taken: &[bool]) -> Option<usize> {
        while self.cursor < self.order.len() {
            let pick = rng.random_range(self.cursor..self.order.len());
            self.order.swap(self.cursor, pick);
            let v = self.order[self.cursor];
            self.cursor += 1;
            if !taken[v] {
                return Some(v);
            }
        }
        None
    }
}

/// Builds `max(1, epoch_size / (s·m))` seeded batches.
///
/// Each group is a seed drawn uniformly among shapes not yet in the batch,
/// followed by its highest-ranked neighbors that are still free; when the
/// neighbor list runs out, uniformly random free shapes fill the group.
pub fn build_seeded_batches<R: Rng + ?Sized>(
    table: &NeighborTable,
    config: &MiningConfig,
    rng: &mut R,
    epoch_size: usize,
) -> Result<Vec<BatchPlan>> {
    config.validate()?;
    let n = table.len();
    let batch = config.batch_size();
    if batch > n {
        return Err(Error::TooFewShapes {
            needed: batch,
            available: n,
        });
    }
    let num_batches = (epoch_size / batch).max(1);
    let mut shuffler = Shuffler::new(n);
    let mut taken = vec![false; n];
    let mut plans = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        shuffler.reset();
        let mut indices = Vec::with_capacity(batch);
        let mut seed_of = Vec::with_capacity(batch);
        for group in 0..config.seeds {
            let seed = shuffler.next_untaken(rng, &taken).expect("s·m ≤ n");
            taken[seed] = true;
            indices.push(seed);
            seed_of.push(group);
            let mut members = 1;
            for nb in table.neighbors(seed) {
                if members == config.neighbors_per_seed {
                    break;
                }
                if !taken[nb.index] {
                    taken[nb.index] = true;
                    indices.push(nb.index);
                    seed_of.push(group);
                    members += 1;
                }
            }
            while members < config.neighbors_per_seed {
                let extra = shuffler.next_untaken(rng, &taken).expect("s·m ≤ n");
                taken[extra] = true;
                indices.push(extra);
                seed_of.push(group);
                members += 1;
            }
        }
        for &i in &indices {
            taken[i] = false;
        }
        plans.push(BatchPlan { indices, seed_of });
    }
    Ok(plans)
}

/// Within each seed group, excludes `j` from `i`'s negatives when
/// `HT_j · HI_i + δ > HT_i · HI_i`. Rows of `ht`/`hi` follow the plan order.
pub fn false_negative_mask(plan: &BatchPlan, ht: &Matrix, hi: &Matrix, delta: f64) -> Result<NegativeMask> {
    let n = plan.len();
    for (name, m) in [("HT", ht), ("HI", hi)] {
        if m.rows() != n {
            return Err(Error::DimensionMismatch {
                context: format!("{name} rows vs batch plan"),
                expected: n,
                found: m.rows(),
            });
        }
    }
    if ht.cols() != hi.cols() {
        return Err(Error::DimensionMismatch {
            context: "HT vs HI columns".into(),
            expected: ht.cols(),
            found: hi.cols(),
        });
    }
    let mut mask = NegativeMask::empty(n);
    for i in 0..n {
        let positive = dot(ht.row(i), hi.row(i));
        for j in 0..n {
            if i != j && plan.seed_of[i] == plan.seed_of[j] && dot(ht.row(j), hi.row(i)) + delta > positive {
                mask.exclude(i, j);
            }
        }
    }
    Ok(mask)
}
