//! Product-embedding precompute, the on-disk embedding index and exact top-K
//! search over it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphstore::{read_u32, BipartiteGraph, ProductNode};
use crate::model::{encode_query, product_from_features, Architecture, ModelError, ModelParams, TextEncoder};
use crate::textcore::{tokenize, Vocab};

pub const INDEX_MAGIC: &[u8; 5] = b"MLGX1";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("empty index")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate product id '{0}'")]
    DuplicateId(String),
    #[error("unknown product '{0}'")]
    UnknownProduct(String),
    #[error("non-finite value in embedding for '{0}'")]
    NonFinite(String),
    #[error("not an index file")]
    BadMagic,
    #[error("unexpected end of index file")]
    Truncated,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for ServeError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ServeError::Truncated
        } else {
            ServeError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductEmbedding {
    pub id: String,
    pub language: String,
    pub vector: Vec<f32>,
}

fn node_embedding<E: TextEncoder<f32>>(
    id: &str,
    node: &ProductNode,
    vocab: &Vocab,
    encoder: &E,
    params: &ModelParams<f32>,
    query_features: &BTreeMap<&str, Vec<f32>>,
) -> Result<ProductEmbedding, ModelError> {
    let h_p = encoder.encode(&tokenize(&node.entry.text, vocab))?;
    let features: Vec<&Vec<f32>> = match params.arch {
        Architecture::Gcn => node.neighbors.iter().map(|n| &query_features[n.query.as_str()]).collect(),
        Architecture::TextOnly => Vec::new(),
    };
    Ok(ProductEmbedding {
        id: id.to_owned(),
        language: node.entry.language.clone(),
        vector: product_from_features(params, h_p, &features),
    })
}

/// Embeddings for `ids` (all products when `None`), sorted by id. Each distinct
/// neighbor query text is encoded once no matter how many products share it.
pub fn precompute_subset<E: TextEncoder<f32>>(
    graph: &BipartiteGraph,
    vocab: &Vocab,
    encoder: &E,
    params: &ModelParams<f32>,
    ids: Option<&BTreeSet<String>>,
) -> Result<Vec<ProductEmbedding>, ServeError> {
    let nodes: Vec<(&String, &ProductNode)> = match ids {
        None => graph.products.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                graph
                    .products
                    .get_key_value(id)
                    .ok_or_else(|| ServeError::UnknownProduct(id.clone()))
            })
            .collect::<Result<_, _>>()?,
    };
    let unique: BTreeSet<&str> = match params.arch {
        Architecture::Gcn => nodes
            .iter()
            .flat_map(|(_, n)| n.neighbors.iter().map(|q| q.query.as_str()))
            .collect(),
        Architecture::TextOnly => BTreeSet::new(),
    };
    let unique: Vec<&str> = unique.into_iter().collect();
    let features = unique
        .par_iter()
        .map(|q| encoder.encode(&tokenize(q, vocab)))
        .collect::<Result<Vec<_>, _>>()?;
    let query_features: BTreeMap<&str, Vec<f32>> = unique.into_iter().zip(features).collect();
    let out = nodes
        .par_iter()
        .map(|(id, node)| node_embedding(id, node, vocab, encoder, params, &query_features))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

pub fn precompute_embeddings(
    graph: &BipartiteGraph,
    vocab: &Vocab,
    params: &ModelParams<f32>,
) -> Result<Vec<ProductEmbedding>, ServeError> {
    precompute_subset(graph, vocab, params, params, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    #[default]
    Cosine,
    Inner,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScoreMode::Cosine),
            "inner" => Ok(ScoreMode::Inner),
            other => Err(format!("unknown score mode '{other}' (expected cosine or inner)")),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Cosine => "cosine",
            ScoreMode::Inner => "inner",
        })
    }
}

/// Immutable product matrix. Rows are sorted by product id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    languages: Vec<String>,
    row_language: Vec<u32>,
    vectors: Vec<f32>,
    dim: usize,
    normalized: bool,
    zero_rows: Vec<bool>,
    checkpoint_hash: String,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn build_index(mut entries: Vec<ProductEmbedding>, dim: usize, normalize: bool) -> Result<EmbeddingIndex, ServeError> {
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in entries.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(ServeError::DuplicateId(pair[0].id.clone()));
        }
    }
    let languages: Vec<String> = entries
        .iter()
        .map(|e| e.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut index = EmbeddingIndex {
        ids: Vec::with_capacity(entries.len()),
        row_language: Vec::with_capacity(entries.len()),
        vectors: Vec::with_capacity(entries.len() * dim),
        zero_rows: Vec::with_capacity(entries.len()),
        languages,
        dim,
        normalized: normalize,
        checkpoint_hash: String::new(),
    };
    for e in entries {
        if e.vector.len() != dim {
            return Err(ServeError::DimensionMismatch {
                expected: dim,
                found: e.vector.len(),
            });
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(ServeError::NonFinite(e.id));
        }
        let n = norm(&e.vector);
        index.zero_rows.push(n == 0.0);
        if normalize && n > 0.0 {
            index.vectors.extend(e.vector.iter().map(|&x| (f64::from(x) / n) as f32));
        } else {
            index.vectors.extend_from_slice(&e.vector);
        }
        let lang = index.languages.binary_search(&e.language).expect("language table built from entries");
        index.row_language.push(lang as u32);
        index.ids.push(e.id);
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub k: usize,
    pub hits: Vec<Hit>,
    /// The query embedding was zero; every score is 0 and hits are in id order.
    pub zero_query: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchOptions {
    pub score: ScoreMode,
    pub language: Option<String>,
    /// Scan partitions; 0 lets the thread pool decide.
    pub shards: usize,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn language(&self, row: usize) -> &str {
        &self.languages[self.row_language[row] as usize]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn is_zero_row(&self, row: usize) -> bool {
        self.zero_rows[row]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|p| p.as_str().cmp(id)).ok()
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn with_checkpoint_hash(mut self, hash: impl Into<String>) -> Self {
        self.checkpoint_hash = hash.into();
        self
    }

    pub fn entries(&self) -> Vec<ProductEmbedding> {
        (0..self.len())
            .map(|r| ProductEmbedding {
                id: self.ids[r].clone(),
                language: self.language(r).to_owned(),
                vector: self.row(r).to_vec(),
            })
            .collect()
    }

    fn score_row(&self, row: usize, query: &[f32], query_norm: f64, mode: ScoreMode) -> f64 {
        if self.zero_rows[row] {
            return 0.0;
        }
        let v = self.row(row);
        match mode {
            ScoreMode::Inner => dot64(v, query),
            ScoreMode::Cosine if self.normalized => dot64(v, query) / query_norm,
            ScoreMode::Cosine => dot64(v, query) / (norm(v) * query_norm),
        }
    }

    /// Exact top-K by score descending, ties by product id ascending.
    pub fn search_vector(&self, query: &[f32], k: usize, options: &SearchOptions) -> Result<SearchResult, ServeError> {
        if k == 0 {
            return Err(ServeError::ZeroK);
        }
        if self.is_empty() {
            return Err(ServeError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(ServeError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let allowed: Option<u32> = match &options.language {
            None => None,
            Some(l) => match self.languages.binary_search(l) {
                Ok(i) => Some(i as u32),
                Err(_) => {
                    return Ok(SearchResult {
                        k,
                        hits: Vec::new(),
                        zero_query: false,
                    })
                }
            },
        };
        let in_scope = |r: usize| allowed.is_none_or(|l| self.row_language[r] == l);
        let query_norm = norm(query);
        if query_norm == 0.0 {
            let hits = (0..self.len())
                .filter(|&r| in_scope(r))
                .take(k)
                .map(|r| Hit {
                    id: self.ids[r].clone(),
                    score: 0.0,
                })
                .collect();
            return Ok(SearchResult {
                k,
                hits,
                zero_query: true,
            });
        }

        let shards = if options.shards == 0 {
            rayon::current_num_threads()
        } else {
            options.shards
        };
        let shard_len = self.len().div_ceil(shards).max(1);
        // rows are in id order, so the row index breaks score ties by id
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let top_of = |mut scored: Vec<(f64, usize)>| {
            if scored.len() > k {
                scored.select_nth_unstable_by(k - 1, order);
                scored.truncate(k);
            }
            scored.sort_unstable_by(order);
            scored
        };
        let partial: Vec<Vec<(f64, usize)>> = (0..self.len())
            .step_by(shard_len)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + shard_len).min(self.len());
                top_of(
                    (start..end)
                        .filter(|&r| in_scope(r))
                        .map(|r| (self.score_row(r, query, query_norm, options.score), r))
                        .collect(),
                )
            })
            .collect();
        let merged = top_of(partial.into_iter().flatten().collect());
        Ok(SearchResult {
            k,
            hits: merged
                .into_iter()
                .map(|(score, r)| Hit {
                    id: self.ids[r].clone(),
                    score,
                })
                .collect(),
            zero_query: false,
        })
    }
}

pub fn search(
    query: &str,
    vocab: &Vocab,
    params: &ModelParams<f32>,
    index: &EmbeddingIndex,
    k: usize,
    options: &SearchOptions,
) -> Result<SearchResult, ServeError> {
    if params.dims().dim != index.dim() {
        return Err(ServeError::DimensionMismatch {
            expected: index.dim(),
            found: params.dims().dim,
        });
    }
    let x_q = encode_query(&tokenize(query, vocab), params)?;
    index.search_vector(&x_q, k, options)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    version: u32,
    n: usize,
    d: usize,
    normalized: bool,
    language_table: Vec<String>,
    row_language: Vec<u32>,
    checkpoint_hash: String,
}

/// Layout: magic `MLGX1`, u32 manifest length, JSON manifest, N u32-prefixed
/// UTF-8 ids, then N·d row-major little-endian f32.
pub fn save_index<W: Write>(index: &EmbeddingIndex, mut sink: W) -> Result<(), ServeError> {
    let manifest = IndexManifest {
        version: INDEX_VERSION,
        n: index.len(),
        d: index.dim,
        normalized: index.normalized,
        language_table: index.languages.clone(),
        row_language: index.row_language.clone(),
        checkpoint_hash: index.checkpoint_hash.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ServeError::Corrupt(e.to_string()))?;
    sink.write_all(INDEX_MAGIC)?;
    sink.write_all(&(json.len() as u32).to_le_bytes())?;
    sink.write_all(&json)?;
    for id in &index.ids {
        sink.write_all(&(id.len() as u32).to_le_bytes())?;
        sink.write_all(id.as_bytes())?;
    }
    let mut bytes = Vec::with_capacity(index.vectors.len() * 4);
    for x in &index.vectors {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

pub fn load_index<R: Read>(mut source: R) -> Result<EmbeddingIndex, ServeError> {
    let mut magic = [0u8; 5];
    source.read_exact(&mut magic).map_err(|_| ServeError::BadMagic)?;
    if &magic != INDEX_MAGIC {
        return Err(ServeError::BadMagic);
    }
    let mut json = vec![0u8; read_u32(&mut source)? as usize];
    source.read_exact(&mut json)?;
    let m: IndexManifest = serde_json::from_slice(&json).map_err(|e| ServeError::Corrupt(e.to_string()))?;
    if m.version != INDEX_VERSION {
        return Err(ServeError::Corrupt(format!("unsupported version {}", m.version)));
    }
    if m.row_language.len() != m.n || m.row_language.iter().any(|&l| l as usize >= m.language_table.len()) {
        return Err(ServeError::Corrupt("language table does not match rows".into()));
    }
    let mut ids = Vec::with_capacity(m.n);
    for _ in 0..m.n {
        let mut buf = vec![0u8; read_u32(&mut source)? as usize];
        source.read_exact(&mut buf)?;
        ids.push(String::from_utf8(buf).map_err(|_| ServeError::Corrupt("id is not UTF-8".into()))?);
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ServeError::Corrupt("ids are not sorted and unique".into()));
    }
    let mut bytes = vec![0u8; m.n * m.d * 4];
    source.read_exact(&mut bytes)?;
    let vectors: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
        .collect();
    let zero_rows = if m.d == 0 {
        vec![true; m.n]
    } else {
        vectors.chunks_exact(m.d).map(|r| norm(r) == 0.0).collect()
    };
    Ok(EmbeddingIndex {
        ids,
        languages: m.language_table,
        row_language: m.row_language,
        vectors,
        dim: m.d,
        normalized: m.normalized,
        zero_rows,
        checkpoint_hash: m.checkpoint_hash,
    })
}

/// Products whose embedding inputs differ between two graphs: new products,
/// changed descriptions or languages, and changed neighbor lists.
pub fn changed_products(old: &BipartiteGraph, new: &BipartiteGraph) -> BTreeSet<String> {
    new.products
        .iter()
        .filter(|(id, node)| old.products.get(*id) != Some(node))
        .map(|(id, _)| id.clone())
        .collect()
}

/// New index with the rows of `changed` recomputed against `graph`; other rows
/// are copied. Ids absent from the index are inserted.
pub fn incremental_update(
    index: &EmbeddingIndex,
    changed: &BTreeSet<String>,
    graph: &BipartiteGraph,
    vocab: &Vocab,
    params: &ModelParams<f32>,
) -> Result<EmbeddingIndex, ServeError> {
    if changed.is_empty() {
        return Ok(index.clone());
    }
    let fresh = precompute_subset(graph, vocab, params, params, Some(changed))?;
    // fresh rows are scaled here; copied rows already are, and rescaling a unit
    // row can move its last bit
    let fresh = build_index(fresh, index.dim, index.normalized)?.entries();
    let entries = index
        .entries()
        .into_iter()
        .filter(|e| !changed.contains(&e.id))
        .chain(fresh)
        .collect();
    let mut out = build_index(entries, index.dim, false)?;
    out.normalized = index.normalized;
    out.checkpoint_hash = index.checkpoint_hash.clone();
    Ok(out)
}
