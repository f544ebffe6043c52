//! Deterministic synthetic multilingual corpora with a tunable vocabulary gap
//! between queries and product descriptions.
//!
//! Every concept owns a few catalog-side terms, and each catalog term has
//! exactly one query-side synonym. A "gap" query uses only synonyms, so it
//! shares no word with its product's description; the only link is through
//! other queries that led to the same product.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{write_eval_queries, EvalQuery};
use crate::graphstore::{CatalogEntry, LogRecord, Signal};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    /// Distinct positive (query, product) pairs emitted for this language.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub languages: Vec<LanguageSpec>,
    /// Catalog terms per concept (each with one query-side synonym).
    pub terms_per_concept: usize,
    /// Training queries per product are drawn uniformly from this range.
    pub min_neighbors: usize,
    pub max_neighbors: usize,
    /// Probability that a query uses only query-side synonyms.
    pub gap_rate: f64,
    /// Catalog-only products per language, built from other concepts' terms.
    pub distractors_per_language: usize,
    /// Shown-but-not-purchased products logged per training query.
    pub impressions_per_query: usize,
    /// Held-out queries per language (capped by what the concepts can supply).
    pub eval_queries_per_language: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let shares = [("l0", 2400), ("l1", 300), ("l2", 150), ("l3", 90), ("l4", 60)];
        SynthConfig {
            languages: shares
                .iter()
                .map(|&(code, pairs)| LanguageSpec {
                    code: code.into(),
                    pairs,
                })
                .collect(),
            terms_per_concept: 3,
            min_neighbors: 1,
            max_neighbors: 5,
            gap_rate: 0.5,
            distractors_per_language: 100,
            impressions_per_query: 3,
            eval_queries_per_language: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_owned()));
        if self.languages.is_empty() {
            return bad("at least one language is required");
        }
        let codes: BTreeSet<&str> = self.languages.iter().map(|l| l.code.as_str()).collect();
        if codes.len() != self.languages.len() {
            return bad("language codes must be distinct");
        }
        if self
            .languages
            .iter()
            .any(|l| l.pairs == 0 || l.code.is_empty() || l.code.contains(char::is_whitespace))
        {
            return bad("every language needs a non-empty code and at least one pair");
        }
        if self.terms_per_concept < 2 {
            return bad("terms_per_concept must be at least 2");
        }
        if self.min_neighbors == 0 || self.min_neighbors > self.max_neighbors {
            return bad("neighbor range needs 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.gap_rate) {
            return bad("gap_rate must lie in [0, 1]");
        }
        Ok(())
    }

    /// Set one field by name; `languages` takes `code:pairs,code:pairs`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
        }
        match key {
            "languages" => {
                self.languages = value
                    .split(',')
                    .map(|part| {
                        let (code, pairs) = part
                            .split_once(':')
                            .ok_or_else(|| format!("languages: expected code:pairs, got '{part}'"))?;
                        Ok(LanguageSpec {
                            code: code.trim().to_owned(),
                            pairs: num(key, pairs.trim())?,
                        })
                    })
                    .collect::<Result<_, String>>()?
            }
            "terms-per-concept" => self.terms_per_concept = num(key, value)?,
            "min-neighbors" => self.min_neighbors = num(key, value)?,
            "max-neighbors" => self.max_neighbors = num(key, value)?,
            "gap-rate" => self.gap_rate = num(key, value)?,
            "distractors" => self.distractors_per_language = num(key, value)?,
            "impressions" => self.impressions_per_query = num(key, value)?,
            "eval-queries" => self.eval_queries_per_language = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(format!("unknown synth option '{other}'")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub logs: Vec<LogRecord>,
    pub catalog: Vec<CatalogEntry>,
    pub eval: Vec<EvalQuery>,
}

const FILLERS: usize = 4;

/// Word factory for one language: syllables from a language-specific
/// consonant/vowel inventory, unique across every language generated.
struct WordMaker {
    syllables: Vec<String>,
}

impl WordMaker {
    fn new(language_index: usize) -> Self {
        const CONSONANTS: &str = "bcdfghjklmnprstvwz";
        const VOWELS: &str = "aeiouy";
        let consonants: Vec<char> = CONSONANTS.chars().collect();
        let vowels: Vec<char> = VOWELS.chars().collect();
        // each language leans on a rotated half of the consonants
        let start = (language_index * 5) % consonants.len();
        let own: Vec<char> = (0..9).map(|i| consonants[(start + i) % consonants.len()]).collect();
        let mut syllables = Vec::new();
        for &c in &own {
            for &v in &vowels {
                syllables.push(format!("{c}{v}"));
            }
        }
        WordMaker { syllables }
    }

    fn make(&self, rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
        loop {
            let n = rng.gen_range(2..=3);
            let word: String = (0..n)
                .map(|_| self.syllables.choose(rng).expect("non-empty inventory").as_str())
                .collect();
            if used.insert(word.clone()) {
                return word;
            }
        }
    }
}

struct Concept {
    product_id: String,
    catalog_terms: Vec<String>,
    synonyms: Vec<String>,
}

impl Concept {
    /// A query of one or two term slots; gap queries use synonyms only,
    /// others keep at least one catalog term.
    fn query(&self, gap: bool, rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(1..=2usize.min(self.catalog_terms.len()));
        let slots: Vec<usize> = rand::seq::index::sample(rng, self.catalog_terms.len(), n).into_vec();
        let keep_catalog = if gap { usize::MAX } else { rng.gen_range(0..n) };
        slots
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let synonym = gap || (i != keep_catalog && rng.gen_bool(0.5));
                if synonym {
                    self.synonyms[s].as_str()
                } else {
                    self.catalog_terms[s].as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used = BTreeSet::new();
    let mut corpus = SynthCorpus {
        logs: Vec::new(),
        catalog: Vec::new(),
        eval: Vec::new(),
    };
    let mean_neighbors = (config.min_neighbors + config.max_neighbors) as f64 / 2.0;
    for (li, spec) in config.languages.iter().enumerate() {
        let maker = WordMaker::new(li);
        let lang = spec.code.as_str();
        let fillers: Vec<String> = (0..FILLERS).map(|_| maker.make(&mut rng, &mut used)).collect();
        let n_concepts = ((spec.pairs as f64 / mean_neighbors).ceil() as usize).max(1);
        let concepts: Vec<Concept> = (0..n_concepts)
            .map(|c| {
                let catalog_terms: Vec<String> = (0..config.terms_per_concept)
                    .map(|_| maker.make(&mut rng, &mut used))
                    .collect();
                let synonyms = (0..config.terms_per_concept)
                    .map(|_| maker.make(&mut rng, &mut used))
                    .collect();
                Concept {
                    product_id: format!("{lang}-p{c:05}"),
                    catalog_terms,
                    synonyms,
                }
            })
            .collect();
        for c in &concepts {
            let mut words = c.catalog_terms.clone();
            words.push(fillers.choose(&mut rng).expect("fillers exist").clone());
            words.shuffle(&mut rng);
            corpus.catalog.push(CatalogEntry {
                product_id: c.product_id.clone(),
                language: lang.to_owned(),
                text: words.join(" "),
            });
        }
        for d in 0..config.distractors_per_language {
            let mut words: Vec<String> = (0..config.terms_per_concept)
                .map(|_| {
                    let c = concepts.choose(&mut rng).expect("concepts exist");
                    c.catalog_terms.choose(&mut rng).expect("terms exist").clone()
                })
                .collect();
            words.push(fillers.choose(&mut rng).expect("fillers exist").clone());
            corpus.catalog.push(CatalogEntry {
                product_id: format!("{lang}-d{d:05}"),
                language: lang.to_owned(),
                text: words.join(" "),
            });
        }

        // neighbor counts summing to exactly spec.pairs
        let mut budget: Vec<usize> = (0..n_concepts)
            .map(|_| rng.gen_range(config.min_neighbors..=config.max_neighbors))
            .collect();
        let mut total: usize = budget.iter().sum();
        let mut c = 0;
        while total != spec.pairs {
            if total > spec.pairs && budget[c] > 1 {
                budget[c] -= 1;
                total -= 1;
            } else if total < spec.pairs {
                budget[c] += 1;
                total += 1;
            }
            c = (c + 1) % n_concepts;
        }

        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut training: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (ci, concept) in concepts.iter().enumerate() {
            let mut tries = 0;
            while training.get(&ci).map_or(0, Vec::len) < budget[ci] {
                tries += 1;
                let gap = rng.gen_bool(config.gap_rate);
                let mut q = concept.query(gap, &mut rng);
                if seen.contains(&q) && tries > 50 {
                    // combinations exhausted: repeat a synonym to stay unique
                    q = format!("{q} {}", concept.synonyms.choose(&mut rng).expect("synonyms exist"));
                }
                if seen.insert(q.clone()) {
                    training.entry(ci).or_default().push(q);
                }
            }
        }
        for (ci, queries) in &training {
            let concept = &concepts[*ci];
            for q in queries {
                corpus.logs.push(LogRecord {
                    query: q.clone(),
                    product_id: concept.product_id.clone(),
                    language: lang.to_owned(),
                    signal: Signal::Purchase,
                    count: rng.gen_range(1..=3),
                });
                let shown: Vec<&Concept> = concepts
                    .choose_multiple(&mut rng, config.impressions_per_query + 1)
                    .filter(|o| o.product_id != concept.product_id)
                    .take(config.impressions_per_query)
                    .collect();
                for other in std::iter::once(concept).chain(shown) {
                    corpus.logs.push(LogRecord {
                        query: q.clone(),
                        product_id: other.product_id.clone(),
                        language: lang.to_owned(),
                        signal: Signal::Impression,
                        count: 1,
                    });
                }
            }
        }

        // held-out queries, disjoint from every training query of the language
        let mut order: Vec<usize> = (0..n_concepts).collect();
        order.shuffle(&mut rng);
        let mut emitted = 0;
        for &ci in order.iter().cycle().take(n_concepts * 4) {
            if emitted == config.eval_queries_per_language {
                break;
            }
            let gap = rng.gen_bool(config.gap_rate);
            let q = concepts[ci].query(gap, &mut rng);
            if !seen.insert(q.clone()) {
                continue;
            }
            corpus.eval.push(EvalQuery {
                text: q,
                language: lang.to_owned(),
                relevant: BTreeSet::from([concepts[ci].product_id.clone()]),
                gap: Some(gap),
            });
            emitted += 1;
        }
    }
    Ok(corpus)
}

pub fn write_logs<W: Write>(records: &[LogRecord], mut sink: W) -> std::io::Result<()> {
    for r in records {
        writeln!(sink, "{}\t{}\t{}\t{}\t{}", r.query, r.product_id, r.language, r.signal, r.count)?;
    }
    sink.flush()
}

pub fn write_catalog<W: Write>(entries: &[CatalogEntry], mut sink: W) -> std::io::Result<()> {
    for e in entries {
        writeln!(sink, "{}\t{}\t{}", e.product_id, e.language, e.text)?;
    }
    sink.flush()
}

pub fn write_corpus<W: Write>(corpus: &SynthCorpus, logs: W, catalog: W, eval: W) -> std::io::Result<()> {
    write_logs(&corpus.logs, logs)?;
    write_catalog(&corpus.catalog, catalog)?;
    write_eval_queries(&corpus.eval, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{ingest_catalog, ingest_logs};
    use crate::textcore::words;

    fn small(gap_rate: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            languages: vec![
                LanguageSpec {
                    code: "aa".into(),
                    pairs: 120,
                },
                LanguageSpec {
                    code: "bb".into(),
                    pairs: 17,
                },
            ],
            gap_rate,
            distractors_per_language: 10,
            eval_queries_per_language: 20,
            seed,
            ..Default::default()
        }
    }

    fn descriptions(corpus: &SynthCorpus) -> BTreeMap<String, BTreeSet<String>> {
        corpus
            .catalog
            .iter()
            .map(|e| (e.product_id.clone(), words(&e.text).into_iter().collect()))
            .collect()
    }

    fn overlaps(corpus: &SynthCorpus, query: &str, product: &str) -> bool {
        let d = &descriptions(corpus)[product];
        words(query).iter().any(|w| d.contains(w))
    }

    #[test]
    fn gap_rate_extremes() {
        for (rate, expect_overlap) in [(0.0, true), (1.0, false)] {
            let corpus = generate_corpus(&small(rate, 1)).unwrap();
            for r in corpus.logs.iter().filter(|r| r.signal == Signal::Purchase) {
                assert_eq!(overlaps(&corpus, &r.query, &r.product_id), expect_overlap, "{}", r.query);
            }
            for q in &corpus.eval {
                let p = q.relevant.iter().next().unwrap();
                assert_eq!(overlaps(&corpus, &q.text, p), expect_overlap);
            }
        }
    }

    #[test]
    fn gap_labels_match_overlap() {
        let corpus = generate_corpus(&small(0.5, 2)).unwrap();
        assert!(corpus.eval.iter().any(|q| q.gap == Some(true)));
        assert!(corpus.eval.iter().any(|q| q.gap == Some(false)));
        for q in &corpus.eval {
            let p = q.relevant.iter().next().unwrap();
            assert_eq!(q.gap == Some(true), !overlaps(&corpus, &q.text, p));
        }
    }

    #[test]
    fn pair_counts_are_exact_and_eval_is_held_out() {
        let config = small(0.5, 3);
        let corpus = generate_corpus(&config).unwrap();
        let ids: BTreeSet<&str> = corpus.catalog.iter().map(|e| e.product_id.as_str()).collect();
        for spec in &config.languages {
            let pairs: BTreeSet<(&str, &str)> = corpus
                .logs
                .iter()
                .filter(|r| r.signal == Signal::Purchase && r.language == spec.code)
                .map(|r| (r.query.as_str(), r.product_id.as_str()))
                .collect();
            assert_eq!(pairs.len(), spec.pairs);
        }
        let train: BTreeSet<(&str, &str)> = corpus
            .logs
            .iter()
            .map(|r| (r.query.as_str(), r.language.as_str()))
            .collect();
        for q in &corpus.eval {
            assert!(!train.contains(&(q.text.as_str(), q.language.as_str())));
            assert!(q.relevant.iter().all(|p| ids.contains(p.as_str())));
        }
    }

    #[test]
    fn output_is_deterministic_and_parseable() {
        let render = |seed| {
            let corpus = generate_corpus(&small(0.5, seed)).unwrap();
            let (mut l, mut c, mut e) = (Vec::new(), Vec::new(), Vec::new());
            write_logs(&corpus.logs, &mut l).unwrap();
            write_catalog(&corpus.catalog, &mut c).unwrap();
            write_eval_queries(&corpus.eval, &mut e).unwrap();
            (l, c, e, corpus)
        };
        let (l1, c1, e1, corpus) = render(9);
        let (l2, c2, e2, _) = render(9);
        assert_eq!((&l1, &c1, &e1), (&l2, &c2, &e2));
        assert_ne!(render(10).0, l1);
        assert_eq!(ingest_logs(&l1[..]).unwrap(), corpus.logs);
        assert_eq!(ingest_catalog(&c1[..]).unwrap(), corpus.catalog);
    }

    #[test]
    fn rejects_bad_config() {
        let c = SynthConfig {
            gap_rate: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate_corpus(&c).is_err());
        let mut c = SynthConfig::default();
        c.set("languages", "x:3,y:1").unwrap();
        assert_eq!(c.languages.len(), 2);
        assert!(c.set("languages", "x").is_err());
        assert!(c.set("nope", "1").is_err());
    }
}
