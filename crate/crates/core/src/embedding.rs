//! Word-embedding table loading, average pooling, and the learned category
//! embedder used by the entity encoder.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Params};
use crate::scalar::{cast, Scalar};

/// Frozen token → vector table (the retriever does not train these).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable<S> {
    dim: usize,
    table: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<S>)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (tok, v) in pairs {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "embedding for `{tok}` has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            table.entry(tok).or_insert(v);
        }
        Ok(EmbeddingTable { dim, table })
    }

    /// Seeded Gaussian fallback (sigma = 1/sqrt(dim)) for running without an
    /// embedding file.
    pub fn random_init<T: AsRef<str>>(tokens: impl IntoIterator<Item = T>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 1.0 / (dim as f64).sqrt();
        let mut table = BTreeMap::new();
        // Insert in sorted order so vectors do not depend on input order.
        let mut sorted: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        for tok in sorted {
            let v = math::Matrix::<S>::gaussian(1, dim, sigma, &mut rng);
            table.insert(tok, v.row(0).to_vec());
        }
        EmbeddingTable { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[S]> {
        self.table.get(token).map(|v| v.as_slice())
    }

    /// Arithmetic mean of in-vocabulary token vectors; out-of-vocabulary
    /// tokens are skipped; all-OOV or empty input gives the zero vector.
    pub fn avg_pool<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<S> {
        math::mean_of(self.dim, tokens.iter().filter_map(|t| self.get(t.as_ref())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (tok, v) in &self.table {
            out.push_str(tok);
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Loads a `token v1 .. vd` text table; a `.gz` extension selects gzip
/// decompression. Duplicate tokens keep the first occurrence.
pub fn load_embeddings<S: Scalar>(path: &Path) -> Result<EmbeddingTable<S>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = if path.extension().is_some_and(|e| e == "gz") {
        let mut s = String::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_string(&mut s)
            .map_err(|e| Error::io(path, e))?;
        s
    } else {
        String::from_utf8(raw).map_err(|e| Error::parse(path, 0, e.to_string()))?
    };

    let mut dim = None;
    let mut table: BTreeMap<String, Vec<S>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tok = parts.next().expect("non-empty line has a first field").to_string();
        let mut v = Vec::new();
        for p in parts {
            let x: f64 = p
                .parse()
                .map_err(|e| Error::parse(path, lineno, format!("bad float `{p}`: {e}")))?;
            if !x.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite value `{p}`")));
            }
            v.push(cast::<S>(x));
        }
        match dim {
            None => {
                if v.is_empty() {
                    return Err(Error::parse(path, lineno, "line has a token but no values"));
                }
                dim = Some(v.len());
            }
            Some(d) if v.len() != d => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("dimension {} does not match established dimension {d}", v.len()),
                ));
            }
            _ => {}
        }
        if table.contains_key(&tok) {
            log::warn!("{}:{lineno}: duplicate token `{tok}`, keeping first", path.display());
        } else {
            table.insert(tok, v);
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(path, 0, "empty embedding file"))?;
    Ok(EmbeddingTable { dim, table })
}

/// Trainable category-id → vector map. Unknown categories embed as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEmbedder<S> {
    dim_cat: usize,
    table: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> CategoryEmbedder<S> {
    /// One vector per category id, seeded uniform in [-1/sqrt(dim), 1/sqrt(dim)].
    pub fn new<T: AsRef<str>>(categories: impl IntoIterator<Item = T>, dim_cat: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim_cat as f64).sqrt();
        let mut sorted: Vec<String> = categories.into_iter().map(|c| c.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        let mut table = BTreeMap::new();
        for c in sorted {
            let v: Vec<S> = (0..dim_cat).map(|_| cast::<S>(rng.gen_range(-bound..=bound))).collect();
            table.insert(c, v);
        }
        CategoryEmbedder { dim_cat, table }
    }

    pub fn dim_cat(&self) -> usize {
        self.dim_cat
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Mean of known-category vectors; zero vector when none are known.
    pub fn embed<T: AsRef<str>>(&self, categories: impl IntoIterator<Item = T>) -> Vec<S> {
        let mut acc = vec![S::zero(); self.dim_cat];
        let mut n = 0usize;
        for c in categories {
            if let Some(v) = self.table.get(c.as_ref()) {
                math::add_assign(&mut acc, v);
                n += 1;
            }
        }
        if n > 0 {
            math::scale(&mut acc, S::one() / cast(n as f64));
        }
        acc
    }

    /// Scatters the gradient of `embed` back onto the known-category rows of
    /// `grad` (each gets d_out / n_known).
    pub fn embed_backward<T: AsRef<str>>(
        &self,
        categories: impl IntoIterator<Item = T> + Clone,
        d_out: &[S],
        grad: &mut Self,
    ) {
        let known: Vec<String> = categories
            .into_iter()
            .filter(|c| self.table.contains_key(c.as_ref()))
            .map(|c| c.as_ref().to_string())
            .collect();
        if known.is_empty() {
            return;
        }
        let w = S::one() / cast(known.len() as f64);
        for c in known {
            let row = grad.table.get_mut(&c).expect("grad mirrors model structure");
            math::add_scaled(row, d_out, w);
        }
    }
}

impl<S: Scalar> Params<S> for CategoryEmbedder<S> {
    fn param_count(&self) -> usize {
        self.table.len() * self.dim_cat
    }

    fn for_each_param(&self, f: &mut dyn FnMut(S)) {
        for v in self.table.values() {
            for &p in v {
                f(p);
            }
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S)) {
        for v in self.table.values_mut() {
            for p in v {
                f(p);
            }
        }
    }

    fn add_scaled_params(&mut self, other: &Self, c: S) {
        debug_assert_eq!(self.table.len(), other.table.len());
        for (v, w) in self.table.values_mut().zip(other.table.values()) {
            math::add_scaled(v, w, c);
        }
    }
}
