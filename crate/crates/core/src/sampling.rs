//! Negative sampling (random, behavior, offline model-based, online model-based)
//! and the smoothed one-language-at-a-batch scheduler.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphstore::{BipartiteGraph, LogRecord, QueryKey, Signal};
use crate::model::{dot, encode_product, encode_query, ModelError, ModelParams, ProductRef, Triplet, TripletBatch};
use crate::textcore::{tokenize, TokenSeq, Vocab};

pub const DEFAULT_SMOOTHING: f64 = 0.7;
pub const DEFAULT_OFFLINE_WINDOW: (usize, usize) = (200, 1000);
pub const DEFAULT_OFFLINE_REFRESH: usize = 5000;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("language shares must be non-negative and sum to 1 (got sum {0})")]
    BadShares(f64),
    #[error("all language shares are zero")]
    AllZeroShares,
    #[error("smoothing exponent {0} outside [0, 1]")]
    BadSmoothing(f64),
    #[error("language '{0}' has no training pairs")]
    NoPairs(String),
    #[error("language '{0}' needs at least 2 products to draw negatives")]
    TooFewProducts(String),
    #[error("no negative candidate left for query '{0}'")]
    NoCandidates(String),
    #[error("online hard negatives need model parameters")]
    MissingParams,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    Random,
    Behavior,
    Offline,
    Online,
}

impl NegativeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeMode::Random => "random",
            NegativeMode::Behavior => "behavior",
            NegativeMode::Offline => "offline",
            NegativeMode::Online => "online",
        }
    }
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(NegativeMode::Random),
            "behavior" => Ok(NegativeMode::Behavior),
            "offline" => Ok(NegativeMode::Offline),
            "online" => Ok(NegativeMode::Online),
            other => Err(format!(
                "unknown negative mode '{other}' (expected random, behavior, offline or online)"
            )),
        }
    }
}

/// How languages are weighted and whether a batch may mix them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    UnweightSeparate,
    WeightMix,
    WeightSeparate,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::UnweightSeparate => "unweight-separate",
            FusionStrategy::WeightMix => "weight-mix",
            FusionStrategy::WeightSeparate => "weight-separate",
        }
    }

    pub fn is_mixed(self) -> bool {
        self == FusionStrategy::WeightMix
    }

    /// Smoothing exponent actually applied: unweighted sampling is S = 1.
    pub fn effective_smoothing(self, s: f64) -> f64 {
        match self {
            FusionStrategy::UnweightSeparate => 1.0,
            _ => s,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unweight-separate" => Ok(FusionStrategy::UnweightSeparate),
            "weight-mix" => Ok(FusionStrategy::WeightMix),
            "weight-separate" => Ok(FusionStrategy::WeightSeparate),
            other => Err(format!(
                "unknown fusion strategy '{other}' (expected unweight-separate, weight-mix or weight-separate)"
            )),
        }
    }
}

/// `p_l = share_l^S / Σ_m share_m^S`. Zero shares stay at zero probability.
pub fn language_weights(shares: &BTreeMap<String, f64>, s: f64) -> Result<BTreeMap<String, f64>, SamplingError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SamplingError::BadSmoothing(s));
    }
    let sum: f64 = shares.values().sum();
    if shares.values().any(|&x| x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 && sum != 0.0 {
        return Err(SamplingError::BadShares(sum));
    }
    let powered: BTreeMap<String, f64> = shares
        .iter()
        .map(|(l, &x)| (l.clone(), if x > 0.0 { x.powf(s) } else { 0.0 }))
        .collect();
    let norm: f64 = powered.values().sum();
    if norm == 0.0 {
        return Err(SamplingError::AllZeroShares);
    }
    Ok(powered.into_iter().map(|(l, x)| (l, x / norm)).collect())
}

#[derive(Debug, Clone)]
pub struct LanguageSchedule {
    languages: Vec<String>,
    raw_shares: Vec<f64>,
    smoothing: f64,
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl LanguageSchedule {
    pub fn new(shares: &BTreeMap<String, f64>, smoothing: f64) -> Result<Self, SamplingError> {
        let probs = language_weights(shares, smoothing)?;
        let probabilities: Vec<f64> = probs.values().copied().collect();
        let dist = WeightedIndex::new(&probabilities).map_err(|_| SamplingError::AllZeroShares)?;
        Ok(LanguageSchedule {
            languages: probs.keys().cloned().collect(),
            raw_shares: shares.values().copied().collect(),
            smoothing,
            probabilities,
            dist,
        })
    }

    /// Shares are each language's fraction of training pairs.
    pub fn from_data(data: &TrainingData, smoothing: f64) -> Result<Self, SamplingError> {
        let total = data.pairs.len() as f64;
        if total == 0.0 {
            return Err(SamplingError::AllZeroShares);
        }
        let shares: BTreeMap<String, f64> = data
            .pairs_by_language
            .iter()
            .map(|(l, pairs)| (l.clone(), pairs.len() as f64 / total))
            .collect();
        Self::new(&shares, smoothing)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn raw_shares(&self) -> &[f64] {
        &self.raw_shares
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn probabilities(&self) -> BTreeMap<&str, f64> {
        self.languages
            .iter()
            .map(String::as_str)
            .zip(self.probabilities.iter().copied())
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &str {
        &self.languages[self.dist.sample(rng)]
    }
}

/// Impressed products with no click or purchase for the same query.
pub fn behavior_negatives(records: &[LogRecord]) -> BTreeMap<QueryKey, BTreeSet<String>> {
    let mut impressed: BTreeMap<QueryKey, BTreeSet<String>> = BTreeMap::new();
    let mut engaged: BTreeSet<(QueryKey, String)> = BTreeSet::new();
    for r in records {
        let key = QueryKey::new(crate::textcore::normalize(&r.query), r.language.clone());
        match r.signal {
            Signal::Impression => {
                impressed.entry(key).or_default().insert(r.product_id.clone());
            }
            Signal::Click | Signal::Purchase => {
                engaged.insert((key, r.product_id.clone()));
            }
        }
    }
    for (key, products) in impressed.iter_mut() {
        products.retain(|p| !engaged.contains(&(key.clone(), p.clone())));
    }
    impressed
}

#[derive(Debug, Clone)]
pub struct ProductItem {
    pub id: String,
    pub language: String,
    pub tokens: Arc<ProductRef>,
}

#[derive(Debug, Clone)]
pub struct QueryItem {
    pub text: String,
    pub language: String,
    pub tokens: TokenSeq,
    /// Product indices of every known positive, sorted.
    pub positives: Vec<usize>,
    /// Behavior-based hard negatives (same language, never positive), sorted.
    pub behavior: Vec<usize>,
}

impl QueryItem {
    pub fn is_positive(&self, product: usize) -> bool {
        self.positives.binary_search(&product).is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct PairItem {
    pub query: usize,
    pub product: usize,
    /// Positive product as fed to the model (may omit this query as a neighbor).
    pub positive: Arc<ProductRef>,
}

/// Graph and log data tokenized and indexed for batch construction.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub products: Vec<ProductItem>,
    pub product_index: HashMap<String, usize>,
    pub products_by_language: BTreeMap<String, Vec<usize>>,
    pub queries: Vec<QueryItem>,
    pub query_index: HashMap<QueryKey, usize>,
    pub pairs: Vec<PairItem>,
    pub pairs_by_language: BTreeMap<String, Vec<usize>>,
}

impl TrainingData {
    /// `exclude_self_neighbor` drops a pair's own query from the positive
    /// product's neighbor list.
    pub fn new(graph: &BipartiteGraph, vocab: &Vocab, records: &[LogRecord], exclude_self_neighbor: bool) -> Self {
        let mut query_tokens: HashMap<&str, TokenSeq> = HashMap::new();
        for key in graph.queries.keys() {
            query_tokens
                .entry(key.query.as_str())
                .or_insert_with(|| tokenize(&key.query, vocab));
        }
        let mut products = Vec::with_capacity(graph.products.len());
        let mut product_index = HashMap::new();
        let mut products_by_language: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, (id, node)) in graph.products.iter().enumerate() {
            let neighbors = node
                .neighbors
                .iter()
                .map(|n| {
                    query_tokens
                        .get(n.query.as_str())
                        .cloned()
                        .unwrap_or_else(|| tokenize(&n.query, vocab))
                })
                .collect();
            products.push(ProductItem {
                id: id.clone(),
                language: node.entry.language.clone(),
                tokens: Arc::new(ProductRef {
                    description: tokenize(&node.entry.text, vocab),
                    neighbors,
                }),
            });
            product_index.insert(id.clone(), i);
            products_by_language
                .entry(node.entry.language.clone())
                .or_default()
                .push(i);
        }

        let behavior = behavior_negatives(records);
        let mut queries = Vec::with_capacity(graph.queries.len());
        let mut query_index = HashMap::new();
        for (i, (key, positives)) in graph.queries.iter().enumerate() {
            let positives: Vec<usize> = positives.iter().filter_map(|p| product_index.get(p).copied()).collect();
            let behavior: Vec<usize> = behavior
                .get(key)
                .into_iter()
                .flatten()
                .filter_map(|p| product_index.get(p).copied())
                .filter(|&p| products[p].language == key.language && positives.binary_search(&p).is_err())
                .collect();
            queries.push(QueryItem {
                text: key.query.clone(),
                language: key.language.clone(),
                tokens: query_tokens[key.query.as_str()].clone(),
                positives,
                behavior,
            });
            query_index.insert(key.clone(), i);
        }

        let mut pairs = Vec::new();
        let mut pairs_by_language: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for pair in graph.train_pairs() {
            let product = product_index[&pair.product_id];
            let query = query_index[&QueryKey::new(pair.query.clone(), pair.language.clone())];
            let full = &products[product].tokens;
            let positive = if exclude_self_neighbor {
                let node = &graph.products[&pair.product_id];
                let neighbors = node
                    .neighbors
                    .iter()
                    .zip(&full.neighbors)
                    .filter(|(n, _)| n.query != pair.query)
                    .map(|(_, t)| t.clone())
                    .collect();
                Arc::new(ProductRef {
                    description: full.description.clone(),
                    neighbors,
                })
            } else {
                Arc::clone(full)
            };
            pairs_by_language
                .entry(pair.language.clone())
                .or_default()
                .push(pairs.len());
            pairs.push(PairItem {
                query,
                product,
                positive,
            });
        }

        TrainingData {
            products,
            product_index,
            products_by_language,
            queries,
            query_index,
            pairs,
            pairs_by_language,
        }
    }

    /// Candidate products for a negative: the language partition, or the whole
    /// catalog for mixed batches.
    fn pool(&self, language: Option<&str>) -> Result<Pool<'_>, SamplingError> {
        match language {
            Some(l) => self
                .products_by_language
                .get(l)
                .map(|v| Pool::Subset(v))
                .ok_or_else(|| SamplingError::TooFewProducts(l.to_owned())),
            None => Ok(Pool::All(self.products.len())),
        }
    }
}

#[derive(Clone, Copy)]
enum Pool<'a> {
    Subset(&'a [usize]),
    All(usize),
}

impl Pool<'_> {
    fn len(&self) -> usize {
        match self {
            Pool::Subset(v) => v.len(),
            Pool::All(n) => *n,
        }
    }

    fn get(&self, i: usize) -> usize {
        match self {
            Pool::Subset(v) => v[i],
            Pool::All(_) => i,
        }
    }
}

/// Uniform product from the pool (language partition, or everything when
/// `language` is `None`) that is not a known positive of `query`.
pub fn sample_random_negative<R: Rng>(
    query: usize,
    language: Option<&str>,
    data: &TrainingData,
    rng: &mut R,
) -> Result<usize, SamplingError> {
    let q = &data.queries[query];
    let pool = data.pool(language)?;
    if pool.len() < 2 && language.is_some() {
        return Err(SamplingError::TooFewProducts(language.unwrap_or_default().to_owned()));
    }
    let excluded = q
        .positives
        .iter()
        .filter(|&&p| language.is_none_or(|l| data.products[p].language == l))
        .count();
    let eligible = pool.len() - excluded.min(pool.len());
    if eligible == 0 {
        return Err(SamplingError::NoCandidates(q.text.clone()));
    }
    // rejection sampling; the expected number of draws is pool/eligible
    for _ in 0..64 {
        let p = pool.get(rng.gen_range(0..pool.len()));
        if !q.is_positive(p) {
            return Ok(p);
        }
    }
    let nth = rng.gen_range(0..eligible);
    Ok((0..pool.len())
        .map(|i| pool.get(i))
        .filter(|&p| !q.is_positive(p))
        .nth(nth)
        .expect("eligible count is exact"))
}

/// For each query, the candidate index with the largest inner product among
/// candidates it may use; ties go to the lowest index. `None` when every
/// candidate is excluded.
pub fn hardest_candidates<F>(queries: &[Vec<f32>], candidates: &[Vec<f32>], allowed: F) -> Vec<Option<usize>>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, xq)| {
            let mut best: Option<(usize, f32)> = None;
            for (ci, xc) in candidates.iter().enumerate() {
                if !allowed(qi, ci) {
                    continue;
                }
                let s = dot(xq, xc);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((ci, s));
                }
            }
            best.map(|(ci, _)| ci)
        })
        .collect()
}

/// Online model-based hard negatives: embed the candidate pool and the
/// queries with the current parameters and pick each query's highest-scoring
/// non-positive candidate. Falls back to a random negative when a query has
/// no eligible candidate.
pub fn sample_online_hard_negatives<R: Rng>(
    queries: &[usize],
    candidates: &[usize],
    params: &ModelParams<f32>,
    data: &TrainingData,
    language: Option<&str>,
    rng: &mut R,
) -> Result<Vec<usize>, SamplingError> {
    let cand_emb = candidates
        .par_iter()
        .map(|&p| encode_product(&data.products[p].tokens, params))
        .collect::<Result<Vec<_>, _>>()?;
    let query_emb = queries
        .par_iter()
        .map(|&q| encode_query(&data.queries[q].tokens, params))
        .collect::<Result<Vec<_>, _>>()?;
    let picks = hardest_candidates(&query_emb, &cand_emb, |qi, ci| {
        !data.queries[queries[qi]].is_positive(candidates[ci])
    });
    picks
        .into_iter()
        .zip(queries)
        .map(|(pick, &q)| match pick {
            Some(ci) => Ok(candidates[ci]),
            None => sample_random_negative(q, language, data, rng),
        })
        .collect()
}

/// 1-based rank window over products sorted by score descending (ties by
/// product id), minus excluded products. Ranks are assigned before exclusion.
pub fn window_candidates(scored: &[(f32, &str)], window: (usize, usize), excluded: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .0
            .total_cmp(&scored[a].0)
            .then_with(|| scored[a].1.cmp(scored[b].1))
    });
    let (lo, hi) = (window.0.max(1), window.1.min(scored.len()));
    if lo > hi {
        return Vec::new();
    }
    order[lo - 1..hi].iter().copied().filter(|&i| !excluded(i)).collect()
}

/// Offline model-based hard negatives: for each training query rank its
/// language's products by inner product and sample `per_query` products
/// uniformly from ranks `window` (clipped to the catalog). Queries whose window
/// is empty after exclusion are absent from the map and fall back to random.
pub fn refresh_offline_hard_negatives<R: Rng>(
    params: &ModelParams<f32>,
    data: &TrainingData,
    window: (usize, usize),
    per_query: usize,
    rng: &mut R,
) -> Result<BTreeMap<QueryKey, Vec<String>>, SamplingError> {
    let product_emb = data
        .products
        .par_iter()
        .map(|p| encode_product(&p.tokens, params))
        .collect::<Result<Vec<_>, _>>()?;
    let mut train_queries: Vec<usize> = data.pairs.iter().map(|p| p.query).collect();
    train_queries.sort_unstable();
    train_queries.dedup();

    let windows = train_queries
        .par_iter()
        .map(|&qi| {
            let q = &data.queries[qi];
            let xq = encode_query(&q.tokens, params)?;
            let members = data
                .products_by_language
                .get(&q.language)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let scored: Vec<(f32, &str)> = members
                .iter()
                .map(|&p| (dot(&xq, &product_emb[p]), data.products[p].id.as_str()))
                .collect();
            let eligible = window_candidates(&scored, window, |i| q.is_positive(members[i]));
            Ok(eligible.into_iter().map(|i| members[i]).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, SamplingError>>()?;

    let mut out = BTreeMap::new();
    for (&qi, eligible) in train_queries.iter().zip(windows) {
        if eligible.is_empty() {
            continue;
        }
        let q = &data.queries[qi];
        let picks = (0..per_query)
            .map(|_| data.products[eligible[rng.gen_range(0..eligible.len())]].id.clone())
            .collect();
        out.insert(QueryKey::new(q.text.clone(), q.language.clone()), picks);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub fusion: FusionStrategy,
    /// Online candidate pool size; 0 means "same as the batch size".
    pub online_pool: usize,
    pub online_include_positives: bool,
    pub offline_window: (usize, usize),
    pub offline_per_query: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 64,
            fusion: FusionStrategy::WeightSeparate,
            online_pool: 0,
            online_include_positives: false,
            offline_window: DEFAULT_OFFLINE_WINDOW,
            offline_per_query: 10,
        }
    }
}

#[derive(Debug, Clone)]
struct PairStream {
    order: Vec<usize>,
    cursor: usize,
}

impl PairStream {
    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Seeded sampler state: the generator, per-language epoch cursors and the
/// current offline hard-negative map.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    streams: BTreeMap<String, PairStream>,
    offline: HashMap<usize, Vec<usize>>,
    refreshes: usize,
}

impl Sampler {
    pub fn new(config: SamplerConfig, data: &TrainingData, seed: u64) -> Result<Self, SamplingError> {
        if config.batch_size == 0 {
            return Err(SamplingError::ZeroBatch);
        }
        let streams = data
            .pairs_by_language
            .iter()
            .map(|(l, pairs)| {
                (
                    l.clone(),
                    PairStream {
                        order: pairs.clone(),
                        cursor: pairs.len(),
                    },
                )
            })
            .collect();
        Ok(Sampler {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            streams,
            offline: HashMap::new(),
            refreshes: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn refresh_offline(&mut self, params: &ModelParams<f32>, data: &TrainingData) -> Result<(), SamplingError> {
        let map = refresh_offline_hard_negatives(
            params,
            data,
            self.config.offline_window,
            self.config.offline_per_query,
            &mut self.rng,
        )?;
        self.offline = map
            .into_iter()
            .map(|(key, ids)| {
                (
                    data.query_index[&key],
                    ids.iter().map(|id| data.product_index[id]).collect(),
                )
            })
            .collect();
        self.refreshes += 1;
        Ok(())
    }

    fn next_pair(&mut self, language: &str) -> Result<usize, SamplingError> {
        let stream = self
            .streams
            .get_mut(language)
            .filter(|s| !s.order.is_empty())
            .ok_or_else(|| SamplingError::NoPairs(language.to_owned()))?;
        Ok(stream.next(&mut self.rng))
    }

    pub fn next_batch(
        &mut self,
        data: &TrainingData,
        schedule: &LanguageSchedule,
        mode: NegativeMode,
        params: Option<&ModelParams<f32>>,
    ) -> Result<TripletBatch, SamplingError> {
        let b = self.config.batch_size;
        let mixed = self.config.fusion.is_mixed();
        let language = if mixed {
            None
        } else {
            Some(schedule.sample(&mut self.rng).to_owned())
        };
        let mut pairs = Vec::with_capacity(b);
        for _ in 0..b {
            let l = match &language {
                Some(l) => l.clone(),
                None => schedule.sample(&mut self.rng).to_owned(),
            };
            pairs.push(self.next_pair(&l)?);
        }
        let lang = language.as_deref();
        if lang.is_some_and(|l| data.products_by_language.get(l).is_none_or(|v| v.len() < 2)) {
            return Err(SamplingError::TooFewProducts(language.clone().unwrap_or_default()));
        }

        let queries: Vec<usize> = pairs.iter().map(|&p| data.pairs[p].query).collect();
        let negatives: Vec<usize> = match mode {
            NegativeMode::Random => queries
                .iter()
                .map(|&q| sample_random_negative(q, lang, data, &mut self.rng))
                .collect::<Result<_, _>>()?,
            NegativeMode::Behavior => queries
                .iter()
                .map(|&q| {
                    let list = &data.queries[q].behavior;
                    if list.is_empty() {
                        sample_random_negative(q, lang, data, &mut self.rng)
                    } else {
                        Ok(list[self.rng.gen_range(0..list.len())])
                    }
                })
                .collect::<Result<_, _>>()?,
            NegativeMode::Offline => queries
                .iter()
                .map(|&q| match self.offline.get(&q).filter(|l| !l.is_empty()) {
                    Some(list) => Ok(list[self.rng.gen_range(0..list.len())]),
                    None => sample_random_negative(q, lang, data, &mut self.rng),
                })
                .collect::<Result<_, _>>()?,
            NegativeMode::Online => {
                let params = params.ok_or(SamplingError::MissingParams)?;
                let pool = data.pool(lang)?;
                let size = if self.config.online_pool == 0 { b } else { self.config.online_pool };
                let mut candidates: Vec<usize> = index::sample(&mut self.rng, pool.len(), size.min(pool.len()))
                    .into_iter()
                    .map(|i| pool.get(i))
                    .collect();
                if self.config.online_include_positives {
                    for &p in &pairs {
                        let prod = data.pairs[p].product;
                        if !candidates.contains(&prod) {
                            candidates.push(prod);
                        }
                    }
                }
                sample_online_hard_negatives(&queries, &candidates, params, data, lang, &mut self.rng)?
            }
        };

        let triplets = pairs
            .iter()
            .zip(negatives)
            .map(|(&p, neg)| {
                let pair = &data.pairs[p];
                let q = &data.queries[pair.query];
                Triplet {
                    query_text: q.text.clone(),
                    query: q.tokens.clone(),
                    positive_id: data.products[pair.product].id.clone(),
                    positive: Arc::clone(&pair.positive),
                    negative_id: data.products[neg].id.clone(),
                    negative: Arc::clone(&data.products[neg].tokens),
                }
            })
            .collect();
        Ok(TripletBatch { language, triplets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{build_graph, CatalogEntry, PositiveSignals};
    use crate::model::{Architecture, Dims};
    use crate::textcore::build_vocab;
    use proptest::prelude::*;

    fn shares(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(l, x)| (l.to_string(), *x)).collect()
    }

    #[test]
    fn smoothing_worked_example() {
        let w = language_weights(&shares(&[("en", 0.9), ("es", 0.1)]), 0.7).unwrap();
        let en = 0.9f64.powf(0.7) / (0.9f64.powf(0.7) + 0.1f64.powf(0.7));
        assert!((w["en"] - en).abs() < 1e-15);
        assert!((w["en"] - 0.8232).abs() < 1e-3);
        assert!((w["es"] - 0.1768).abs() < 1e-3);
    }

    #[test]
    fn smoothing_identity_and_symmetry() {
        let s = shares(&[("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        let w = language_weights(&s, 1.0).unwrap();
        for (l, x) in &s {
            assert!((w[l] - x).abs() < 1e-15);
        }
        let eq = shares(&[("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]);
        for s in [0.0, 0.3, 0.7, 1.0] {
            assert!(language_weights(&eq, s).unwrap().values().all(|&p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn smoothing_errors() {
        assert!(matches!(language_weights(&shares(&[("a", 0.0)]), 0.7), Err(SamplingError::AllZeroShares)));
        assert!(language_weights(&shares(&[("a", 0.5)]), 0.7).is_err());
        assert!(language_weights(&shares(&[("a", 1.0)]), 1.5).is_err());
        let w = language_weights(&shares(&[("a", 1.0), ("b", 0.0)]), 0.0).unwrap();
        assert_eq!(w["b"], 0.0);
    }

    proptest! {
        #[test]
        fn smoothing_is_monotone_and_lifts_the_minimum(raw in proptest::collection::vec(0.01f64..1.0, 2..6), s in 0.0f64..0.99) {
            let total: f64 = raw.iter().sum();
            let sh: BTreeMap<String, f64> = raw.iter().enumerate().map(|(i, x)| (format!("l{i}"), x / total)).collect();
            let w = language_weights(&sh, s).unwrap();
            prop_assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, xa) in &sh {
                for (b, xb) in &sh {
                    if xa < xb {
                        prop_assert!(w[a] <= w[b]);
                    }
                }
            }
            let (min_l, min_x) = sh.iter().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            let (_, max_x) = sh.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            if max_x - min_x > 1e-6 {
                prop_assert!(w[min_l] > *min_x);
            }
        }
    }

    #[test]
    fn behavior_negative_definition() {
        let r = |p: &str, s: Signal| LogRecord {
            query: "q".into(),
            product_id: p.into(),
            language: "en".into(),
            signal: s,
            count: 1,
        };
        let key = QueryKey::new("q", "en");
        let m = behavior_negatives(&[r("P1", Signal::Impression), r("P1", Signal::Click)]);
        assert!(m.get(&key).is_none_or(|s| s.is_empty()));
        let m = behavior_negatives(&[r("P1", Signal::Impression)]);
        assert_eq!(m[&key], BTreeSet::from(["P1".to_string()]));
        let m = behavior_negatives(&[r("P1", Signal::Impression), r("P2", Signal::Purchase)]);
        assert_eq!(m[&key], BTreeSet::from(["P1".to_string()]));
    }

    #[test]
    fn online_selection_worked_example() {
        let queries = vec![vec![1.0, 0.0]];
        let candidates = vec![vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]];
        assert_eq!(hardest_candidates(&queries, &candidates, |_, c| c != 0), vec![Some(2)]);
        assert_eq!(hardest_candidates(&queries, &candidates, |_, c| c == 1), vec![Some(1)]);
        assert_eq!(hardest_candidates(&queries, &candidates, |_, _| false), vec![None]);
        let tied = vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(hardest_candidates(&queries, &tied, |_, _| true), vec![Some(1)]);
    }

    #[test]
    fn window_ranks_before_exclusion() {
        let scored = [(5.0, "c"), (9.0, "a"), (3.0, "d"), (7.0, "b")];
        let mut w = window_candidates(&scored, (2, 3), |_| false);
        w.sort();
        assert_eq!(w, vec![0, 3]);
        // "b" (rank 2) is a positive
        assert_eq!(window_candidates(&scored, (2, 3), |i| i == 3), vec![0]);
        assert_eq!(window_candidates(&scored, (1, 100), |_| false).len(), 4);
        assert!(window_candidates(&scored, (200, 1000), |_| false).is_empty());
        // equal scores order by id
        let tie = [(1.0, "b"), (1.0, "a")];
        assert_eq!(window_candidates(&tie, (1, 1), |_| false), vec![1]);
    }

    struct Fixture {
        data: TrainingData,
        vocab: Vocab,
    }

    fn fixture(langs: &[(&str, usize, usize)]) -> Fixture {
        // (language, products, queries per product)
        let mut catalog = Vec::new();
        let mut records = Vec::new();
        for &(lang, n, per) in langs {
            for p in 0..n {
                let id = format!("{lang}-P{p}");
                catalog.push(CatalogEntry {
                    product_id: id.clone(),
                    language: lang.into(),
                    text: format!("{lang} item{p} thing"),
                });
                for q in 0..per {
                    records.push(LogRecord {
                        query: format!("{lang} item{p} q{q}"),
                        product_id: id.clone(),
                        language: lang.into(),
                        signal: Signal::Purchase,
                        count: 1,
                    });
                }
            }
        }
        // a query with two positives
        if let Some(&(lang, n, _)) = langs.first() {
            if n >= 3 {
                records.push(LogRecord {
                    query: format!("{lang} item0 q0"),
                    product_id: format!("{lang}-P1"),
                    language: lang.into(),
                    signal: Signal::Purchase,
                    count: 1,
                });
                records.push(LogRecord {
                    query: format!("{lang} item0 q0"),
                    product_id: format!("{lang}-P2"),
                    language: lang.into(),
                    signal: Signal::Impression,
                    count: 1,
                });
            }
        }
        let graph = build_graph(&records, &catalog, 25, &PositiveSignals::default()).unwrap();
        let text: Vec<String> = catalog
            .iter()
            .map(|c| c.text.clone())
            .chain(records.iter().map(|r| r.query.clone()))
            .collect();
        let vocab = build_vocab(&text, 1000, 1).unwrap();
        let data = TrainingData::new(&graph, &vocab, &records, false);
        Fixture { data, vocab }
    }

    fn small_params(vocab: &Vocab) -> ModelParams<f32> {
        ModelParams::init(
            Dims {
                vocab_size: vocab.len(),
                embed_dim: 8,
                dim: 8,
            },
            Architecture::Gcn,
            3,
        )
    }

    #[test]
    fn two_product_language_forces_complement() {
        let f = fixture(&[("en", 2, 1)]);
        let q = f.data.query_index[&QueryKey::new("en item0 q0", "en")];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let p = sample_random_negative(q, Some("en"), &f.data, &mut rng).unwrap();
            assert_eq!(f.data.products[p].id, "en-P1");
        }
    }

    #[test]
    fn random_negatives_exclude_all_positives_and_are_uniform() {
        let f = fixture(&[("en", 12, 1)]);
        let q = f.data.query_index[&QueryKey::new("en item0 q0", "en")];
        assert_eq!(f.data.queries[q].positives.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = vec![0usize; f.data.products.len()];
        let draws = 100_000;
        for _ in 0..draws {
            let p = sample_random_negative(q, Some("en"), &f.data, &mut rng).unwrap();
            assert!(!f.data.queries[q].is_positive(p));
            counts[p] += 1;
        }
        let eligible: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(eligible.len(), 10);
        for c in eligible {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() < 0.005, "frequency {freq}");
        }
    }

    #[test]
    fn all_positive_language_has_no_candidates() {
        let f = fixture(&[("en", 3, 1)]);
        let mut data = f.data.clone();
        let q = data.query_index[&QueryKey::new("en item0 q0", "en")];
        data.queries[q].positives = vec![0, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_random_negative(q, Some("en"), &data, &mut rng),
            Err(SamplingError::NoCandidates(_))
        ));
    }

    #[test]
    fn batches_are_monolingual_and_reproducible() {
        let f = fixture(&[("en", 20, 3), ("es", 6, 2)]);
        let schedule = LanguageSchedule::from_data(&f.data, 0.7).unwrap();
        let params = small_params(&f.vocab);
        let config = SamplerConfig {
            batch_size: 8,
            ..Default::default()
        };
        for mode in [NegativeMode::Random, NegativeMode::Behavior, NegativeMode::Offline, NegativeMode::Online] {
            let mut a = Sampler::new(config.clone(), &f.data, 9).unwrap();
            let mut b = Sampler::new(config.clone(), &f.data, 9).unwrap();
            a.refresh_offline(&params, &f.data).unwrap();
            b.refresh_offline(&params, &f.data).unwrap();
            for _ in 0..30 {
                let x = a.next_batch(&f.data, &schedule, mode, Some(&params)).unwrap();
                let y = b.next_batch(&f.data, &schedule, mode, Some(&params)).unwrap();
                let lang = x.language.clone().unwrap();
                assert_eq!(x.triplets.len(), 8);
                for t in &x.triplets {
                    let pos_l = &f.data.products[f.data.product_index[&t.positive_id]].language;
                    let neg_l = &f.data.products[f.data.product_index[&t.negative_id]].language;
                    assert_eq!(pos_l, &lang);
                    assert_eq!(neg_l, &lang);
                    let q = f.data.query_index[&QueryKey::new(t.query_text.clone(), lang.clone())];
                    assert!(!f.data.queries[q].is_positive(f.data.product_index[&t.negative_id]), "{mode}");
                }
                let ids = |b: &TripletBatch| -> Vec<(String, String, String)> {
                    b.triplets
                        .iter()
                        .map(|t| (t.query_text.clone(), t.positive_id.clone(), t.negative_id.clone()))
                        .collect()
                };
                assert_eq!(ids(&x), ids(&y));
            }
        }
    }

    #[test]
    fn single_language_schedule() {
        let f = fixture(&[("de", 5, 2)]);
        let schedule = LanguageSchedule::from_data(&f.data, 0.7).unwrap();
        let mut s = Sampler::new(SamplerConfig { batch_size: 4, ..Default::default() }, &f.data, 0).unwrap();
        for _ in 0..50 {
            let b = s.next_batch(&f.data, &schedule, NegativeMode::Random, None).unwrap();
            assert_eq!(b.language.as_deref(), Some("de"));
        }
    }

    #[test]
    fn language_draws_follow_smoothed_schedule() {
        let schedule = LanguageSchedule::new(&shares(&[("en", 0.9), ("es", 0.1)]), 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let en = (0..n).filter(|_| schedule.sample(&mut rng) == "en").count();
        let frac = en as f64 / n as f64;
        assert!((frac - 0.8232).abs() < 0.02, "{frac}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let seq_a: Vec<&str> = (0..1000).map(|_| schedule.sample(&mut a)).collect();
        let seq_b: Vec<&str> = (0..1000).map(|_| schedule.sample(&mut b)).collect();
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn pair_stream_covers_epoch_before_repeating() {
        let f = fixture(&[("en", 5, 2)]);
        let schedule = LanguageSchedule::from_data(&f.data, 1.0).unwrap();
        let n = f.data.pairs.len();
        let mut s = Sampler::new(SamplerConfig { batch_size: n, ..Default::default() }, &f.data, 4).unwrap();
        let b = s.next_batch(&f.data, &schedule, NegativeMode::Random, None).unwrap();
        let mut seen: Vec<(String, String)> = b.triplets.iter().map(|t| (t.query_text.clone(), t.positive_id.clone())).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn mixed_batches_draw_from_every_language() {
        let f = fixture(&[("en", 20, 3), ("es", 20, 3)]);
        let schedule = LanguageSchedule::from_data(&f.data, 0.7).unwrap();
        let config = SamplerConfig {
            batch_size: 32,
            fusion: FusionStrategy::WeightMix,
            ..Default::default()
        };
        let mut s = Sampler::new(config, &f.data, 2).unwrap();
        let b = s.next_batch(&f.data, &schedule, NegativeMode::Random, None).unwrap();
        assert!(b.language.is_none());
        let langs: BTreeSet<&str> = b
            .triplets
            .iter()
            .map(|t| f.data.products[f.data.product_index[&t.positive_id]].language.as_str())
            .collect();
        assert_eq!(langs.len(), 2);
    }

    #[test]
    fn online_negatives_dominate_eligible_candidates() {
        let f = fixture(&[("en", 30, 2)]);
        let params = small_params(&f.vocab);
        let queries: Vec<usize> = (0..8).map(|i| f.data.pairs[i * 3].query).collect();
        let candidates: Vec<usize> = (0..30).step_by(2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = sample_online_hard_negatives(&queries, &candidates, &params, &f.data, Some("en"), &mut rng).unwrap();
        for (&q, &pick) in queries.iter().zip(&picks) {
            let item = &f.data.queries[q];
            assert!(!item.is_positive(pick));
            let xq = encode_query(&item.tokens, &params).unwrap();
            let s_pick = dot(&xq, &encode_product(&f.data.products[pick].tokens, &params).unwrap());
            for &c in candidates.iter().filter(|&&c| !item.is_positive(c)) {
                let s = dot(&xq, &encode_product(&f.data.products[c].tokens, &params).unwrap());
                assert!(s_pick >= s);
            }
        }
    }

    #[test]
    fn offline_map_respects_language_window_and_positives() {
        let f = fixture(&[("en", 10, 1), ("es", 4, 1)]);
        let params = small_params(&f.vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = refresh_offline_hard_negatives(&params, &f.data, (2, 4), 5, &mut rng).unwrap();
        assert!(!map.is_empty());
        for (key, ids) in &map {
            let q = &f.data.queries[f.data.query_index[key]];
            assert_eq!(ids.len(), 5);
            for id in ids {
                let p = f.data.product_index[id];
                assert_eq!(f.data.products[p].language, key.language);
                assert!(!q.is_positive(p));
            }
        }
    }

    #[test]
    fn self_neighbor_exclusion() {
        let f = fixture(&[("en", 3, 2)]);
        let graph_text: Vec<usize> = f.data.pairs.iter().map(|p| p.positive.neighbors.len()).collect();
        assert!(graph_text.iter().all(|&n| n >= 2));
        let catalog: Vec<CatalogEntry> = (0..3)
            .map(|p| CatalogEntry {
                product_id: format!("en-P{p}"),
                language: "en".into(),
                text: format!("en item{p} thing"),
            })
            .collect();
        let records: Vec<LogRecord> = (0..3)
            .flat_map(|p| {
                (0..2).map(move |q| LogRecord {
                    query: format!("en item{p} q{q}"),
                    product_id: format!("en-P{p}"),
                    language: "en".into(),
                    signal: Signal::Purchase,
                    count: 1,
                })
            })
            .collect();
        let graph = build_graph(&records, &catalog, 25, &PositiveSignals::default()).unwrap();
        let data = TrainingData::new(&graph, &f.vocab, &records, true);
        for pair in &data.pairs {
            assert_eq!(pair.positive.neighbors.len(), 1);
            assert!(!pair.positive.neighbors.contains(&data.queries[pair.query].tokens));
        }
    }
}
