//! Recall@K, average precision, held-out evaluation and ablation grids.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graphstore::{BipartiteGraph, LogRecord};
use crate::model::{encode_query, ModelError, ModelParams};
use crate::sampling::TrainingData;
use crate::serve::{build_index, precompute_subset, ProductEmbedding, ScoreMode, SearchOptions, ServeError};
use crate::textcore::{normalize, tokenize, Vocab};
use crate::train::{train, TrainConfig, TrainError};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_CORPUS_SIZE: usize = 5000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty relevant set")]
    NoRelevant,
    #[error("eval line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("arm '{arm}': {reason}")]
    Arm { arm: String, reason: String },
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::NoRelevant);
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id.as_ref())).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Mean of precision@k over the ranks k holding a relevant item, divided by
/// `|relevant|` (relevant items missing from the ranking contribute 0).
pub fn average_precision<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::NoRelevant);
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub text: String,
    pub language: String,
    pub relevant: BTreeSet<String>,
    /// `Some(true)` for queries with no word shared with their relevant products.
    pub gap: Option<bool>,
}

/// Reads `query \t language \t relevant_ids \t gap_label` lines. Ids are
/// comma separated; the label is `gap`, `nongap` or empty.
pub fn read_eval_queries<R: BufRead>(source: R) -> Result<Vec<EvalQuery>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(EvalError::Parse {
                line: line_no,
                reason: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let gap = match fields.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some("gap") => Some(true),
            Some("nongap") => Some(false),
            Some(other) => {
                return Err(EvalError::Parse {
                    line: line_no,
                    reason: format!("unknown gap label '{other}'"),
                })
            }
        };
        let language = fields[1].trim();
        if language.is_empty() {
            return Err(EvalError::Parse {
                line: line_no,
                reason: "empty language".into(),
            });
        }
        out.push(EvalQuery {
            text: normalize(fields[0]),
            language: language.to_owned(),
            relevant: fields[2]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect(),
            gap,
        });
    }
    Ok(out)
}

pub fn write_eval_queries<W: Write>(queries: &[EvalQuery], mut sink: W) -> std::io::Result<()> {
    for q in queries {
        let label = match q.gap {
            Some(true) => "gap",
            Some(false) => "nongap",
            None => "",
        };
        let ids: Vec<&str> = q.relevant.iter().map(String::as_str).collect();
        writeln!(sink, "{}\t{}\t{}\t{}", q.text, q.language, ids.join(","), label)?;
    }
    sink.flush()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LanguageEval {
    pub queries: Vec<EvalQuery>,
    /// Relevant products plus random same-language distractors, sorted.
    pub corpus: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub languages: BTreeMap<String, LanguageEval>,
    /// Queries left with no relevant product in the catalog.
    pub skipped: usize,
}

impl EvalSet {
    pub fn n_queries(&self) -> usize {
        self.languages.values().map(|l| l.queries.len()).sum()
    }
}

/// Groups queries by language and fills each language's corpus with random
/// distractors from the graph up to `corpus_size` (or the whole language).
/// Relevant ids missing from the graph are dropped.
pub fn build_eval_set(queries: Vec<EvalQuery>, graph: &BipartiteGraph, corpus_size: usize, seed: u64) -> EvalSet {
    let mut set = EvalSet::default();
    for mut q in queries {
        q.relevant.retain(|id| graph.products.contains_key(id));
        if q.relevant.is_empty() {
            set.skipped += 1;
            continue;
        }
        set.languages.entry(q.language.clone()).or_default().queries.push(q);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (language, lang_eval) in set.languages.iter_mut() {
        let mut corpus: BTreeSet<String> = lang_eval.queries.iter().flat_map(|q| q.relevant.iter().cloned()).collect();
        let mut pool: Vec<&String> = graph
            .languages
            .get(language)
            .map(|p| p.products.iter().filter(|id| !corpus.contains(*id)).collect())
            .unwrap_or_default();
        pool.shuffle(&mut rng);
        let room = corpus_size.saturating_sub(corpus.len());
        corpus.extend(pool.into_iter().take(room).cloned());
        lang_eval.corpus = corpus.into_iter().collect();
    }
    set
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub language: String,
    pub query: String,
    pub gap: Option<bool>,
    pub recall: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub language: String,
    pub recall: f64,
    pub map: f64,
    pub n_queries: usize,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub arm: String,
    pub k: usize,
    pub score: ScoreMode,
    pub skipped: usize,
    /// Per language (sorted), then `overall`, then `overall:gap` and
    /// `overall:nongap` when labels exist.
    pub rows: Vec<MetricsRow>,
    pub per_query: Vec<QueryScore>,
}

impl MetricsReport {
    pub fn row(&self, language: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.language == language)
    }

    pub fn recall(&self, language: &str) -> Option<f64> {
        self.row(language).map(|r| r.recall)
    }
}

fn mean_row<'a>(language: &str, scores: impl Iterator<Item = &'a QueryScore>, corpus_size: usize) -> MetricsRow {
    let (mut n, mut r, mut a) = (0usize, 0.0, 0.0);
    for s in scores {
        n += 1;
        r += s.recall;
        a += s.ap;
    }
    let div = n.max(1) as f64;
    MetricsRow {
        language: language.to_owned(),
        recall: r / div,
        map: a / div,
        n_queries: n,
        corpus_size,
    }
}

/// Metrics from precomputed vectors. `query_vectors` follows the order of
/// queries in `set` (languages sorted, then file order).
pub fn evaluate_vectors(
    arm: &str,
    set: &EvalSet,
    products: &[ProductEmbedding],
    query_vectors: &[Vec<f32>],
    k: usize,
    score: ScoreMode,
) -> Result<MetricsReport, EvalError> {
    let by_id: BTreeMap<&str, &ProductEmbedding> = products.iter().map(|p| (p.id.as_str(), p)).collect();
    let dim = products.first().map_or(0, |p| p.vector.len());
    let mut per_query = Vec::with_capacity(set.n_queries());
    let mut rows = Vec::new();
    let mut offset = 0;
    for (language, lang_eval) in &set.languages {
        let entries = lang_eval
            .corpus
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|p| (*p).clone())
                    .ok_or_else(|| ServeError::UnknownProduct(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let index = build_index(entries, dim, score == ScoreMode::Cosine)?;
        let options = SearchOptions {
            score,
            language: None,
            shards: 1,
        };
        let vectors = &query_vectors[offset..offset + lang_eval.queries.len()];
        offset += lang_eval.queries.len();
        let scores = lang_eval
            .queries
            .par_iter()
            .zip(vectors)
            .map(|(q, v)| -> Result<QueryScore, EvalError> {
                let result = index.search_vector(v, index.len(), &options)?;
                let ranking: Vec<&str> = result.hits.iter().map(|h| h.id.as_str()).collect();
                Ok(QueryScore {
                    language: language.clone(),
                    query: q.text.clone(),
                    gap: q.gap,
                    recall: recall_at_k(&ranking, &q.relevant, k)?,
                    ap: average_precision(&ranking, &q.relevant)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(mean_row(language, scores.iter(), index.len()));
        per_query.extend(scores);
    }
    let total_corpus = set.languages.values().map(|l| l.corpus.len()).sum();
    rows.push(mean_row("overall", per_query.iter(), total_corpus));
    if per_query.iter().any(|s| s.gap.is_some()) {
        rows.push(mean_row("overall:gap", per_query.iter().filter(|s| s.gap == Some(true)), total_corpus));
        rows.push(mean_row("overall:nongap", per_query.iter().filter(|s| s.gap == Some(false)), total_corpus));
    }
    Ok(MetricsReport {
        arm: arm.to_owned(),
        k,
        score,
        skipped: set.skipped,
        rows,
        per_query,
    })
}

pub fn evaluate(
    arm: &str,
    params: &ModelParams<f32>,
    vocab: &Vocab,
    graph: &BipartiteGraph,
    set: &EvalSet,
    k: usize,
    score: ScoreMode,
) -> Result<MetricsReport, EvalError> {
    let ids: BTreeSet<String> = set.languages.values().flat_map(|l| l.corpus.iter().cloned()).collect();
    let products = precompute_subset(graph, vocab, params, params, Some(&ids))?;
    let queries: Vec<&EvalQuery> = set.languages.values().flat_map(|l| &l.queries).collect();
    let query_vectors = queries
        .par_iter()
        .map(|q| encode_query(&tokenize(&q.text, vocab), params))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_vectors(arm, set, &products, &query_vectors, k, score)
}

pub const REPORT_HEADER: &str = "arm\tlanguage\trecall_at_k\tmap\tn_queries";

/// Metric rows under [`REPORT_HEADER`], preceded by `#` lines echoing K, the
/// score mode, skipped queries and corpus sizes.
pub fn write_report<W: Write>(reports: &[MetricsReport], mut sink: W) -> std::io::Result<()> {
    for r in reports {
        writeln!(sink, "# arm={} k={} score={} skipped={}", r.arm, r.k, r.score, r.skipped)?;
        for row in &r.rows {
            writeln!(sink, "# arm={} language={} corpus_size={}", r.arm, row.language, row.corpus_size)?;
        }
    }
    writeln!(sink, "{REPORT_HEADER}")?;
    for r in reports {
        for row in &r.rows {
            writeln!(sink, "{}\t{}\t{:.6}\t{:.6}\t{}", r.arm, row.language, row.recall, row.map, row.n_queries)?;
        }
    }
    sink.flush()
}

pub fn write_per_query<W: Write>(report: &MetricsReport, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "arm\tlanguage\tquery\tgap\trecall_at_k\tap")?;
    for s in &report.per_query {
        let gap = match s.gap {
            Some(true) => "gap",
            Some(false) => "nongap",
            None => "",
        };
        writeln!(sink, "{}\t{}\t{}\t{}\t{}\t{}", report.arm, s.language, s.query, gap, s.recall, s.ap)?;
    }
    sink.flush()
}

/// One row per arm; per language (and overall) a recall and a mAP column.
pub fn write_comparison<W: Write>(reports: &[MetricsReport], mut sink: W) -> std::io::Result<()> {
    let columns: Vec<String> = reports
        .first()
        .map(|r| r.rows.iter().map(|row| row.language.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["arm".to_string()];
    for c in &columns {
        header.push(format!("{c}:recall_at_k"));
        header.push(format!("{c}:map"));
    }
    writeln!(sink, "{}", header.join("\t"))?;
    for r in reports {
        let mut line = vec![r.arm.clone()];
        for c in &columns {
            match r.row(c) {
                Some(row) => {
                    line.push(format!("{:.6}", row.recall));
                    line.push(format!("{:.6}", row.map));
                }
                None => line.extend(["".to_string(), "".to_string()]),
            }
        }
        writeln!(sink, "{}", line.join("\t"))?;
    }
    sink.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    pub fn new(name: impl Into<String>, overrides: &[(&str, &str)]) -> Self {
        Arm {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

/// Inputs shared by every arm of a grid.
pub struct GridInputs<'a> {
    pub graph: &'a BipartiteGraph,
    pub vocab: &'a Vocab,
    pub records: &'a [LogRecord],
    pub eval_set: &'a EvalSet,
    pub k: usize,
    pub score: ScoreMode,
}

pub fn arm_config(base: &TrainConfig, arm: &Arm) -> Result<TrainConfig, EvalError> {
    let mut config = base.clone();
    for (key, value) in &arm.overrides {
        config.set(key, value).map_err(|reason| EvalError::Arm {
            arm: arm.name.clone(),
            reason,
        })?;
    }
    Ok(config)
}

/// Trains and evaluates each arm from the same seed, data and eval set.
pub fn run_ablation_grid(base: &TrainConfig, arms: &[Arm], inputs: &GridInputs) -> Result<Vec<MetricsReport>, EvalError> {
    let mut reports = Vec::with_capacity(arms.len());
    let mut data_cache: BTreeMap<bool, TrainingData> = BTreeMap::new();
    for arm in arms {
        let config = arm_config(base, arm)?;
        let data = data_cache.entry(config.exclude_self_neighbor).or_insert_with(|| {
            TrainingData::new(inputs.graph, inputs.vocab, inputs.records, config.exclude_self_neighbor)
        });
        let outcome = train(&config, data, inputs.vocab)?;
        log::info!("arm {} trained ({} batches)", arm.name, outcome.trace.len());
        reports.push(evaluate(
            &arm.name,
            &outcome.params,
            inputs.vocab,
            inputs.graph,
            inputs.eval_set,
            inputs.k,
            inputs.score,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_cases() {
        let ranking = ["a", "x", "y"];
        assert_eq!(recall_at_k(&ranking, &set(&["a"]), 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranking, &set(&["a", "b"]), 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranking, &set(&["b"]), 10).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&ranking, &set(&[]), 10), Err(EvalError::NoRelevant)));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&["a", "b", "c"], &set(&["a", "b"])).unwrap(), 1.0);
        let ap = average_precision(&["a", "x", "b"], &set(&["a", "b"])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&["x", "y"], &set(&["a"])).unwrap(), 0.0);
    }

    fn ranking_strategy() -> impl Strategy<Value = (Vec<String>, BTreeSet<String>)> {
        (2usize..30).prop_flat_map(|n| {
            let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            (Just(ids.clone()).prop_shuffle(), proptest::sample::subsequence(ids, 1..=n))
                .prop_map(|(ranking, rel)| (ranking, rel.into_iter().collect()))
        })
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k((ranking, relevant) in ranking_strategy()) {
            let mut last = 0.0;
            for k in 1..=ranking.len() {
                let r = recall_at_k(&ranking, &relevant, k).unwrap();
                prop_assert!(r >= last && (0.0..=1.0).contains(&r));
                last = r;
            }
        }

        #[test]
        fn ap_is_one_iff_relevant_on_top((ranking, relevant) in ranking_strategy()) {
            let ap = average_precision(&ranking, &relevant).unwrap();
            let on_top = ranking.iter().take(relevant.len()).all(|id| relevant.contains(id));
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert_eq!((ap - 1.0).abs() < 1e-12, on_top);
        }

        #[test]
        fn tail_permutation_keeps_metrics((ranking, relevant) in ranking_strategy(), seed in any::<u64>()) {
            let last = ranking.iter().rposition(|id| relevant.contains(id)).unwrap();
            let cut = (last + 1).max(10).min(ranking.len());
            let mut shuffled = ranking.clone();
            shuffled[cut..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(recall_at_k(&ranking, &relevant, 10).unwrap(), recall_at_k(&shuffled, &relevant, 10).unwrap());
            prop_assert_eq!(average_precision(&ranking, &relevant).unwrap(), average_precision(&shuffled, &relevant).unwrap());
        }
    }

    #[test]
    fn eval_tsv_roundtrip() {
        let text = "Red Shoes\ten\tP1,P2\tgap\nlamp\tde\tP3\tnongap\nmug\ten\tP4\t\n";
        let queries = read_eval_queries(text.as_bytes()).unwrap();
        assert_eq!(queries[0].text, "red shoes");
        assert_eq!(queries[0].relevant, set(&["P1", "P2"]));
        assert_eq!(queries[0].gap, Some(true));
        assert_eq!(queries[2].gap, None);
        let mut buf = Vec::new();
        write_eval_queries(&queries, &mut buf).unwrap();
        assert_eq!(read_eval_queries(&buf[..]).unwrap(), queries);
        assert!(matches!(
            read_eval_queries("q\ten\tP1\tmaybe\n".as_bytes()),
            Err(EvalError::Parse { line: 1, .. })
        ));
    }

    fn unit(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn oracle_vectors_score_perfectly_and_duplicates_agree() {
        let products: Vec<ProductEmbedding> = (0..8)
            .map(|i| ProductEmbedding {
                id: format!("P{i}"),
                language: "en".into(),
                vector: unit(8, i),
            })
            .collect();
        let queries: Vec<EvalQuery> = [0, 3, 3, 7]
            .iter()
            .map(|&i| EvalQuery {
                text: format!("q{i}"),
                language: "en".into(),
                relevant: set(&[&format!("P{i}")]),
                gap: Some(i == 7),
            })
            .collect();
        let eval_set = EvalSet {
            languages: BTreeMap::from([(
                "en".to_string(),
                LanguageEval {
                    corpus: products.iter().map(|p| p.id.clone()).collect(),
                    queries: queries.clone(),
                },
            )]),
            skipped: 0,
        };
        let vectors: Vec<Vec<f32>> = [0, 3, 3, 7].iter().map(|&i| unit(8, i)).collect();
        let report = evaluate_vectors("oracle", &eval_set, &products, &vectors, 10, ScoreMode::Cosine).unwrap();
        assert_eq!(report.recall("overall"), Some(1.0));
        assert_eq!(report.row("overall").unwrap().map, 1.0);
        assert_eq!(report.row("overall:gap").unwrap().n_queries, 1);
        assert_eq!(report.per_query[1], report.per_query[2]);

        let mut buf = Vec::new();
        write_report(std::slice::from_ref(&report), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains(&format!("{REPORT_HEADER}\noracle\ten\t1.000000\t1.000000\t4\n")));
        let mut wide = Vec::new();
        write_comparison(&[report.clone(), report], &mut wide).unwrap();
        let wide = String::from_utf8(wide).unwrap();
        let lines: Vec<&str> = wide.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], lines[2]);
    }
}
