//! Multilingual query→product retrieval with a graph-convolution product tower.
//!
//! Pipeline: behavior logs and a catalog become a query–product bipartite
//! graph ([`graphstore`]); a shared subword vocabulary ([`textcore`]) feeds a
//! two-tower model ([`model`]) trained with language-scheduled batches and
//! random or hard negatives ([`sampling`], [`train`]); product embeddings are
//! precomputed and scanned exactly by cosine similarity ([`serve`]) and scored
//! with Recall@K and mAP ([`eval`]). [`synthgen`] produces synthetic corpora
//! with a controllable query/catalog vocabulary gap.

pub mod eval;
pub mod graphstore;
pub mod model;
pub mod sampling;
pub mod serve;
pub mod synthgen;
pub mod textcore;
pub mod train;
