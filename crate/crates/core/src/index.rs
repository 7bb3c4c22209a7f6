//! Exact top-k cosine search over encoded entities, with binary persistence
//! tied to the model that produced the rows.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, Kb};
use crate::error::{Error, Result};
use crate::math;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<S> {
    pub entity_id: String,
    pub score: S,
    /// 1-based position in the result list.
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct EntityIndex<S> {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<S>,
    model_checksum: String,
}

const MAGIC: &[u8; 4] = b"TIDX";
const VERSION: u32 = 1;
const UNIT_TOL: f64 = 1e-6;

/// Heap entry ordered so the *worst* candidate is at the top of a max-heap:
/// lower score is greater, and on equal scores the lexicographically larger
/// id is greater.
struct Worst<'a, S> {
    score: S,
    id: &'a str,
    idx: usize,
}

impl<S: Scalar> PartialEq for Worst<'_, S> {
    fn eq(&self, other: &Self) -> bool {
        self.score == other.score && self.id == other.id
    }
}
impl<S: Scalar> Eq for Worst<'_, S> {}
impl<S: Scalar> PartialOrd for Worst<'_, S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for Worst<'_, S> {
    fn cmp(&self, other: &Self) -> Ordering {
        match other.score.partial_cmp(&self.score).expect("finite scores") {
            Ordering::Equal => self.id.cmp(other.id),
            o => o,
        }
    }
}

impl<S: Scalar> EntityIndex<S> {
    /// Encodes every KB entity (in sorted id order) with the given encoder.
    /// Encoding is parallel; row order does not depend on thread count.
    pub fn build<F>(kb: &Kb, model_checksum: &str, encode: F) -> Self
    where
        F: Fn(&Entity) -> Vec<S> + Sync,
    {
        let entities: Vec<&Entity> = kb.values().collect();
        let encoded: Vec<Vec<S>> = entities.par_iter().map(|e| encode(e)).collect();
        let dim = encoded.first().map_or(0, |v| v.len());
        let mut ids = Vec::with_capacity(entities.len());
        let mut rows = Vec::with_capacity(entities.len() * dim);
        for (e, v) in entities.iter().zip(encoded) {
            debug_assert!((math::l2_norm(&v).to_f64().unwrap() - 1.0).abs() < UNIT_TOL);
            ids.push(e.id.clone());
            rows.extend(v);
        }
        EntityIndex { dim, ids, rows, model_checksum: model_checksum.to_string() }
    }

    pub fn from_rows(dim: usize, model_checksum: &str) -> Self {
        EntityIndex { dim, ids: Vec::new(), rows: Vec::new(), model_checksum: model_checksum.to_string() }
    }

    /// Appends one entity row (zero-shot entity addition).
    pub fn insert(&mut self, id: &str, row: &[S]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Index {
                path: String::new(),
                msg: format!("row dimension {} does not match index dimension {}", row.len(), self.dim),
            });
        }
        if (math::l2_norm(row).to_f64().unwrap() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Index { path: String::new(), msg: format!("row for `{id}` is not unit norm") });
        }
        if self.ids.iter().any(|x| x == id) {
            return Err(Error::Index { path: String::new(), msg: format!("duplicate entity id `{id}`") });
        }
        self.ids.push(id.to_string());
        self.rows.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_checksum(&self) -> &str {
        &self.model_checksum
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-k by dot product (cosine on unit vectors). Ties break toward
    /// the lexicographically smaller entity id; the result does not depend on
    /// row order.
    pub fn search(&self, query: &[S], k: usize) -> Vec<Candidate<S>> {
        assert!(k >= 1, "k must be at least 1");
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let mut heap: BinaryHeap<Worst<S>> = BinaryHeap::with_capacity(k + 1);
        for i in 0..self.ids.len() {
            let score = math::dot(self.row(i), query);
            let entry = Worst { score, id: &self.ids[i], idx: i };
            if heap.len() < k {
                heap.push(entry);
            } else if let Some(worst) = heap.peek() {
                // `entry < worst` means entry is a better candidate.
                if entry < *worst {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        // Ascending in the Worst order = best candidate first.
        let mut picked: Vec<Worst<S>> = heap.into_vec();
        picked.sort_by(|a, b| a.cmp(b));
        picked
            .into_iter()
            .enumerate()
            .map(|(r, w)| Candidate { entity_id: self.ids[w.idx].clone(), score: w.score, rank: r + 1 })
            .collect()
    }

    /// Full-sort reference implementation; search must agree with it exactly.
    pub fn search_naive(&self, query: &[S], k: usize) -> Vec<Candidate<S>> {
        let mut all: Vec<(S, &str, usize)> = (0..self.ids.len())
            .map(|i| (math::dot(self.row(i), query), self.ids[i].as_str(), i))
            .collect();
        all.sort_by(|a, b| match b.0.partial_cmp(&a.0).expect("finite scores") {
            Ordering::Equal => a.1.cmp(b.1),
            o => o,
        });
        all.truncate(k);
        all.into_iter()
            .enumerate()
            .map(|(r, (score, _, i))| Candidate { entity_id: self.ids[i].clone(), score, rank: r + 1 })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        write_str(&mut buf, &self.model_checksum);
        for id in &self.ids {
            write_str(&mut buf, id);
        }
        for v in &self.rows {
            buf.extend_from_slice(&v.to_f64().expect("scalar representable as f64").to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Loads an index. When `expected_model_checksum` is given and differs
    /// from the stored one, loading fails unless `force` is set.
    pub fn load(path: &Path, expected_model_checksum: Option<&str>, force: bool) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = &data[..];
        let bad = |msg: &str| Error::Index { path: path.display().to_string(), msg: msg.to_string() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not an index file (bad magic)"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let n = read_u64(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let model_checksum = read_str(&mut r).ok_or_else(|| bad("truncated checksum"))?;
        if let Some(expected) = expected_model_checksum {
            if expected != model_checksum && !force {
                return Err(Error::ChecksumMismatch {
                    index: model_checksum,
                    model: expected.to_string(),
                });
            }
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(read_str(&mut r).ok_or_else(|| bad("truncated id table"))?);
        }
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated rows"))?;
            rows.push(cast::<S>(f64::from_le_bytes(b)));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(EntityIndex { dim, ids, rows, model_checksum })
    }
}

/// True iff the gold id appears among the first min(n, len) candidates.
pub fn recall_at<S>(results: &[Candidate<S>], gold_id: &str, n: usize) -> bool {
    results.iter().take(n).any(|c| c.entity_id == gold_id)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Option<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).ok()?;
    String::from_utf8(b).ok()
}
