//! Behavior-log ingestion and the query–product bipartite graph.
//!
//! Edges come from positive-signal records only. Each product keeps at most
//! `t_max` neighbor queries ranked by summed record count; the query→positives
//! map keeps every positive edge so negative sampling can exclude all of them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textcore::normalize;

pub const GRAPH_MAGIC: &[u8; 5] = b"MLGG1";
pub const DEFAULT_T_MAX: usize = 25;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("catalog line {line}: duplicate product_id '{product_id}'")]
    DuplicateProduct { line: usize, product_id: String },
    #[error("record references product '{0}' which is not in the catalog")]
    UnknownProduct(String),
    #[error("query '{query}' ({query_language}) links to product '{product_id}' ({product_language})")]
    LanguageMismatch {
        query: String,
        query_language: String,
        product_id: String,
        product_language: String,
    },
    #[error("not a graph file")]
    BadMagic,
    #[error("unexpected end of graph file")]
    Truncated,
    #[error("corrupt graph file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for GraphError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            GraphError::Truncated
        } else {
            GraphError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Impression,
    Click,
    Purchase,
}

impl Signal {
    pub fn as_str(self) -> &'static str {
        match self {
            Signal::Impression => "impression",
            Signal::Click => "click",
            Signal::Purchase => "purchase",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Signal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "impression" => Ok(Signal::Impression),
            "click" => Ok(Signal::Click),
            "purchase" => Ok(Signal::Purchase),
            other => Err(format!("unknown signal '{other}'")),
        }
    }
}

/// Signals that create graph edges. Impressions are never positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSignals {
    pub click: bool,
    pub purchase: bool,
}

impl PositiveSignals {
    pub fn contains(&self, signal: Signal) -> bool {
        match signal {
            Signal::Impression => false,
            Signal::Click => self.click,
            Signal::Purchase => self.purchase,
        }
    }
}

impl Default for PositiveSignals {
    fn default() -> Self {
        PositiveSignals {
            click: false,
            purchase: true,
        }
    }
}

impl FromStr for PositiveSignals {
    type Err = String;

    /// Comma-separated subset of `click,purchase`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = PositiveSignals {
            click: false,
            purchase: false,
        };
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token.parse::<Signal>()? {
                Signal::Click => out.click = true,
                Signal::Purchase => out.purchase = true,
                Signal::Impression => return Err("impression cannot be a positive signal".into()),
            }
        }
        if !out.click && !out.purchase {
            return Err("positive signal set is empty".into());
        }
        Ok(out)
    }
}

impl fmt::Display for PositiveSignals {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.click, self.purchase) {
            (true, true) => f.write_str("click,purchase"),
            (true, false) => f.write_str("click"),
            (false, true) => f.write_str("purchase"),
            (false, false) => f.write_str(""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub query: String,
    pub product_id: String,
    pub language: String,
    pub signal: Signal,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub product_id: String,
    pub language: String,
    pub text: String,
}

fn parse_log_line(line: &str, lineno: usize) -> Result<LogRecord, GraphError> {
    let err = |reason: String| GraphError::Parse { line: lineno, reason };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let query = normalize(fields[0]);
    if query.is_empty() {
        return Err(err("empty query".into()));
    }
    let product_id = fields[1].trim();
    if product_id.is_empty() {
        return Err(err("empty product_id".into()));
    }
    let language = fields[2].trim();
    if language.is_empty() {
        return Err(err("empty language".into()));
    }
    let signal = fields[3].trim().parse::<Signal>().map_err(err)?;
    let count: u32 = fields[4]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad count '{}'", fields[4])))?;
    if count == 0 {
        return Err(err("count must be at least 1".into()));
    }
    Ok(LogRecord {
        query,
        product_id: product_id.to_owned(),
        language: language.to_owned(),
        signal,
        count,
    })
}

/// Streaming reader over the logs TSV: `query \t product_id \t language \t signal \t count`.
pub struct LogReader<R> {
    lines: std::io::Lines<R>,
    lineno: usize,
}

impl<R: BufRead> LogReader<R> {
    pub fn new(source: R) -> Self {
        LogReader {
            lines: source.lines(),
            lineno: 0,
        }
    }
}

impl<R: BufRead> Iterator for LogReader<R> {
    type Item = Result<LogRecord, GraphError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.lineno += 1;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.is_empty() {
                continue;
            }
            return Some(parse_log_line(line, self.lineno));
        }
    }
}

pub fn ingest_logs<R: BufRead>(source: R) -> Result<Vec<LogRecord>, GraphError> {
    LogReader::new(source).collect()
}

/// Parse the catalog TSV: `product_id \t language \t description`.
pub fn ingest_catalog<R: BufRead>(source: R) -> Result<Vec<CatalogEntry>, GraphError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::Parse {
                line: lineno,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let product_id = fields[0].trim().to_owned();
        let language = fields[1].trim().to_owned();
        if product_id.is_empty() || language.is_empty() {
            return Err(GraphError::Parse {
                line: lineno,
                reason: "empty product_id or language".into(),
            });
        }
        if !seen.insert(product_id.clone()) {
            return Err(GraphError::DuplicateProduct {
                line: lineno,
                product_id,
            });
        }
        out.push(CatalogEntry {
            product_id,
            language,
            text: fields[2].to_owned(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub query: String,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductNode {
    pub entry: CatalogEntry,
    /// At most `t_max`, weight descending then query ascending.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LanguagePartition {
    pub products: Vec<String>,
    pub queries: Vec<String>,
}

/// Query identity: normalized text plus language.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryKey {
    pub query: String,
    pub language: String,
}

impl QueryKey {
    pub fn new(query: impl Into<String>, language: impl Into<String>) -> Self {
        QueryKey {
            query: query.into(),
            language: language.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub t_max: usize,
    pub products: BTreeMap<String, ProductNode>,
    /// Every positive edge, before the neighbor cap.
    pub queries: BTreeMap<QueryKey, BTreeSet<String>>,
    pub languages: BTreeMap<String, LanguagePartition>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub query: String,
    pub product_id: String,
    pub language: String,
}

impl BipartiteGraph {
    pub fn language_of(&self, product_id: &str) -> Option<&str> {
        self.products.get(product_id).map(|p| p.entry.language.as_str())
    }

    pub fn positives(&self, query: &str, language: &str) -> Option<&BTreeSet<String>> {
        // BTreeMap<QueryKey, _> needs an owned key for lookup
        self.queries.get(&QueryKey::new(query, language))
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    fn rebuild_partitions(&mut self) {
        let mut languages: BTreeMap<String, LanguagePartition> = BTreeMap::new();
        for (id, node) in &self.products {
            languages
                .entry(node.entry.language.clone())
                .or_default()
                .products
                .push(id.clone());
        }
        for key in self.queries.keys() {
            languages
                .entry(key.language.clone())
                .or_default()
                .queries
                .push(key.query.clone());
        }
        self.languages = languages;
    }

    /// One pair per capped neighbor edge, ordered by product id then neighbor rank.
    pub fn train_pairs(&self) -> Vec<TrainPair> {
        self.products
            .iter()
            .flat_map(|(id, node)| {
                node.neighbors.iter().map(move |n| TrainPair {
                    query: n.query.clone(),
                    product_id: id.clone(),
                    language: node.entry.language.clone(),
                })
            })
            .collect()
    }
}

pub fn build_graph(
    records: &[LogRecord],
    catalog: &[CatalogEntry],
    t_max: usize,
    positive_signals: &PositiveSignals,
) -> Result<BipartiteGraph, GraphError> {
    let mut products: BTreeMap<String, ProductNode> = catalog
        .iter()
        .map(|e| {
            (
                e.product_id.clone(),
                ProductNode {
                    entry: e.clone(),
                    neighbors: Vec::new(),
                },
            )
        })
        .collect();
    if products.len() != catalog.len() {
        let mut seen = BTreeSet::new();
        let dup = catalog
            .iter()
            .position(|e| !seen.insert(&e.product_id))
            .expect("length mismatch implies a duplicate");
        return Err(GraphError::DuplicateProduct {
            line: dup + 1,
            product_id: catalog[dup].product_id.clone(),
        });
    }

    let mut weights: HashMap<(String, String), u64> = HashMap::new();
    let mut queries: BTreeMap<QueryKey, BTreeSet<String>> = BTreeMap::new();
    for r in records.iter().filter(|r| positive_signals.contains(r.signal)) {
        let node = products
            .get(&r.product_id)
            .ok_or_else(|| GraphError::UnknownProduct(r.product_id.clone()))?;
        if node.entry.language != r.language {
            return Err(GraphError::LanguageMismatch {
                query: r.query.clone(),
                query_language: r.language.clone(),
                product_id: r.product_id.clone(),
                product_language: node.entry.language.clone(),
            });
        }
        let query = normalize(&r.query);
        *weights
            .entry((r.product_id.clone(), query.clone()))
            .or_default() += u64::from(r.count);
        queries
            .entry(QueryKey::new(query, r.language.clone()))
            .or_default()
            .insert(r.product_id.clone());
    }

    let mut edges: BTreeMap<String, Vec<Neighbor>> = BTreeMap::new();
    for ((product_id, query), weight) in weights {
        edges
            .entry(product_id)
            .or_default()
            .push(Neighbor { query, weight });
    }
    for (product_id, mut list) in edges {
        list.sort_by(|a, b| b.weight.cmp(&a.weight).then_with(|| a.query.cmp(&b.query)));
        list.truncate(t_max);
        products
            .get_mut(&product_id)
            .expect("edge products were validated")
            .neighbors = list;
    }

    let mut graph = BipartiteGraph {
        t_max,
        products,
        queries,
        languages: BTreeMap::new(),
    };
    graph.rebuild_partitions();
    Ok(graph)
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphManifest {
    version: u32,
    t_max: usize,
    products: usize,
    queries: usize,
    edges: usize,
    languages: BTreeMap<String, (usize, usize)>,
}

fn write_str<W: Write>(sink: &mut W, s: &str) -> std::io::Result<()> {
    sink.write_all(&(s.len() as u32).to_le_bytes())?;
    sink.write_all(s.as_bytes())
}

pub(crate) fn read_u32<R: Read>(source: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    source.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(source: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    source.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(source: &mut R) -> Result<String, GraphError> {
    let len = read_u32(source)? as usize;
    let mut buf = Vec::new();
    source.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(GraphError::Truncated);
    }
    String::from_utf8(buf).map_err(|_| GraphError::Corrupt("invalid UTF-8 string".into()))
}

/// Layout: magic `MLGG1`, u32 manifest length, JSON manifest, product block
/// (id, language, text, neighbor count, then query/weight pairs), query block
/// (query, language, positive count, product ids). Integers little-endian,
/// strings u32 length-prefixed UTF-8.
pub fn save_graph<W: Write>(graph: &BipartiteGraph, mut sink: W) -> Result<(), GraphError> {
    let manifest = GraphManifest {
        version: 1,
        t_max: graph.t_max,
        products: graph.products.len(),
        queries: graph.queries.len(),
        edges: graph.products.values().map(|p| p.neighbors.len()).sum(),
        languages: graph
            .languages
            .iter()
            .map(|(l, p)| (l.clone(), (p.products.len(), p.queries.len())))
            .collect(),
    };
    let manifest = serde_json::to_vec(&manifest).map_err(|e| GraphError::Corrupt(e.to_string()))?;
    sink.write_all(GRAPH_MAGIC)?;
    sink.write_all(&(manifest.len() as u32).to_le_bytes())?;
    sink.write_all(&manifest)?;
    for (id, node) in &graph.products {
        write_str(&mut sink, id)?;
        write_str(&mut sink, &node.entry.language)?;
        write_str(&mut sink, &node.entry.text)?;
        sink.write_all(&(node.neighbors.len() as u32).to_le_bytes())?;
        for n in &node.neighbors {
            write_str(&mut sink, &n.query)?;
            sink.write_all(&n.weight.to_le_bytes())?;
        }
    }
    for (key, positives) in &graph.queries {
        write_str(&mut sink, &key.query)?;
        write_str(&mut sink, &key.language)?;
        sink.write_all(&(positives.len() as u32).to_le_bytes())?;
        for p in positives {
            write_str(&mut sink, p)?;
        }
    }
    sink.flush()?;
    Ok(())
}

pub fn load_graph<R: Read>(mut source: R) -> Result<BipartiteGraph, GraphError> {
    let mut magic = [0u8; 5];
    source.read_exact(&mut magic)?;
    if &magic != GRAPH_MAGIC {
        return Err(GraphError::BadMagic);
    }
    let len = read_u32(&mut source)? as usize;
    let mut manifest = vec![0u8; len];
    source.read_exact(&mut manifest)?;
    let manifest: GraphManifest =
        serde_json::from_slice(&manifest).map_err(|e| GraphError::Corrupt(e.to_string()))?;
    if manifest.version != 1 {
        return Err(GraphError::Corrupt(format!("unsupported version {}", manifest.version)));
    }

    let mut products = BTreeMap::new();
    for _ in 0..manifest.products {
        let product_id = read_str(&mut source)?;
        let language = read_str(&mut source)?;
        let text = read_str(&mut source)?;
        let n = read_u32(&mut source)? as usize;
        if n > manifest.t_max {
            return Err(GraphError::Corrupt(format!("product '{product_id}' exceeds t_max")));
        }
        let mut neighbors = Vec::with_capacity(n);
        for _ in 0..n {
            let query = read_str(&mut source)?;
            let weight = read_u64(&mut source)?;
            neighbors.push(Neighbor { query, weight });
        }
        products.insert(
            product_id.clone(),
            ProductNode {
                entry: CatalogEntry {
                    product_id,
                    language,
                    text,
                },
                neighbors,
            },
        );
    }
    let mut queries = BTreeMap::new();
    for _ in 0..manifest.queries {
        let query = read_str(&mut source)?;
        let language = read_str(&mut source)?;
        let n = read_u32(&mut source)? as usize;
        let mut positives = BTreeSet::new();
        for _ in 0..n {
            positives.insert(read_str(&mut source)?);
        }
        queries.insert(QueryKey::new(query, language), positives);
    }
    if products.len() != manifest.products || queries.len() != manifest.queries {
        return Err(GraphError::Corrupt("duplicate keys".into()));
    }
    let mut graph = BipartiteGraph {
        t_max: manifest.t_max,
        products,
        queries,
        languages: BTreeMap::new(),
    };
    graph.rebuild_partitions();
    Ok(graph)
}
