//! `mlgcn` command line: synthetic data, vocabulary, graph, training,
//! embedding, indexing, search, evaluation and ablation grids.

mod config_file;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mlgcn::eval::{
    build_eval_set, evaluate, read_eval_queries, run_ablation_grid, write_comparison, write_per_query, write_report, Arm,
    GridInputs, DEFAULT_CORPUS_SIZE, DEFAULT_K,
};
use mlgcn::graphstore::{build_graph, ingest_catalog, ingest_logs, load_graph, save_graph, PositiveSignals, DEFAULT_T_MAX};
use mlgcn::sampling::TrainingData;
use mlgcn::serve::{
    build_index, load_index, precompute_embeddings, save_index, search, ScoreMode, SearchOptions,
};
use mlgcn::synthgen::{generate_corpus, write_catalog, write_logs, SynthConfig};
use mlgcn::textcore::{build_vocab, Vocab};
use mlgcn::train::{
    checkpoint_hash, grad_check_against, grad_check_fixture, load_for_serving, save_checkpoint, write_trace,
    CheckpointManifest, TrainConfig, Trainer,
};
use mlgcn::eval::write_eval_queries;
use mlgcn::model::loss_and_grads;

#[derive(Parser, Debug)]
#[command(name = "mlgcn", version, about = "Multilingual query-to-product retrieval with a graph-convolution product tower")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Flat `key=value` file; keys are flag names without the dashes.
    /// Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multilingual corpus (logs, catalog, eval queries).
    Synth(SynthArgs),
    /// Build the subword vocabulary from logs and catalog.
    BuildVocab(VocabArgs),
    /// Build the query-product graph file.
    BuildGraph(GraphArgs),
    /// Train a model and write a checkpoint.
    Train(TrainCmd),
    /// Finite-difference gradient check on the seeded small model.
    GradCheck(GradCheckArgs),
    /// Precompute product embeddings with a checkpoint.
    Embed(EmbedArgs),
    /// Build a search index from precomputed embeddings.
    Index(IndexArgs),
    /// Top-K products for a query.
    Search(SearchArgs),
    /// Recall@K and mAP on held-out queries.
    Eval(EvalArgs),
    /// Train and evaluate several configurations side by side.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Languages and pair counts, e.g. `l0:2400,l1:300`.
    #[arg(long)]
    languages: Option<String>,
    #[arg(long)]
    gap_rate: Option<f64>,
    #[arg(long)]
    terms_per_concept: Option<usize>,
    #[arg(long)]
    min_neighbors: Option<usize>,
    #[arg(long)]
    max_neighbors: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    impressions: Option<usize>,
    #[arg(long)]
    eval_queries: Option<usize>,
}

#[derive(Args, Debug)]
struct VocabArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8192)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    t_max: usize,
    /// Comma-separated subset of `click,purchase`.
    #[arg(long, default_value = "purchase")]
    positive_signals: PositiveSignals,
}

/// Training options; unset ones keep the library defaults.
#[derive(Args, Debug, Default)]
struct TrainOpts {
    #[arg(long)]
    total_batches: Option<String>,
    #[arg(long)]
    warmup_frac: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// random, behavior, offline or online.
    #[arg(long)]
    neg_mode: Option<String>,
    /// unweight-separate, weight-mix or weight-separate.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    smoothing: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    /// gcn or text-only.
    #[arg(long)]
    arch: Option<String>,
    /// uniform or identity.
    #[arg(long)]
    gcn_init: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    offline_refresh: Option<String>,
    #[arg(long)]
    offline_window_lo: Option<String>,
    #[arg(long)]
    offline_window_hi: Option<String>,
    #[arg(long)]
    offline_per_query: Option<String>,
    #[arg(long)]
    online_pool: Option<String>,
    #[arg(long)]
    online_include_positives: Option<String>,
    #[arg(long)]
    exclude_self_neighbor: Option<String>,
}

impl TrainOpts {
    fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let mut config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let pairs = [
            ("total-batches", &self.total_batches),
            ("warmup-frac", &self.warmup_frac),
            ("batch-size", &self.batch_size),
            ("neg-mode", &self.neg_mode),
            ("fusion", &self.fusion),
            ("smoothing", &self.smoothing),
            ("embed-dim", &self.embed_dim),
            ("dim", &self.dim),
            ("arch", &self.arch),
            ("gcn-init", &self.gcn_init),
            ("lr", &self.lr),
            ("offline-refresh", &self.offline_refresh),
            ("offline-window-lo", &self.offline_window_lo),
            ("offline-window-hi", &self.offline_window_hi),
            ("offline-per-query", &self.offline_per_query),
            ("online-pool", &self.online_pool),
            ("online-include-positives", &self.online_include_positives),
            ("exclude-self-neighbor", &self.exclude_self_neighbor),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, v).map_err(UsageError)?;
            }
        }
        config.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Logs file; impressions feed behavior negatives.
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace TSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write `<out>.<batch>` every N batches (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// L2-normalize rows (needed for cosine scoring by inner product).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    topk: usize,
    /// cosine or inner.
    #[arg(long, default_value = "cosine")]
    score: ScoreMode,
    /// Restrict results to one language.
    #[arg(long)]
    lang: Option<String>,
}

#[derive(Args, Debug)]
struct EvalInputs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Held-out queries TSV.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    topk: usize,
    /// cosine or inner.
    #[arg(long, default_value = "cosine")]
    score: ScoreMode,
    /// Products per language in the ranked corpus.
    #[arg(long, default_value_t = DEFAULT_CORPUS_SIZE)]
    corpus_size: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics report TSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    arm: String,
    /// Per-query scores TSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long)]
    logs: PathBuf,
    /// Comparison table TSV (one row per arm).
    #[arg(long)]
    out: PathBuf,
    /// Long-form metrics report TSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `name:key=value;key=value`, repeatable. Default: full model vs text-only.
    #[arg(long = "arm")]
    arms: Vec<String>,
    #[command(flatten)]
    opts: TrainOpts,
}

/// Bad flag values found after parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    Vocab::read_from(open(path)?).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn read_graph(path: &Path) -> Result<mlgcn::graphstore::BipartiteGraph> {
    load_graph(open(path)?).with_context(|| format!("reading graph {}", path.display()))
}

fn read_checkpoint(path: &Path, vocab: &Vocab) -> Result<(CheckpointManifest, mlgcn::model::ModelParams<f32>, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot open {}", path.display()))?;
    let (manifest, params) =
        load_for_serving(&bytes[..], vocab).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok((manifest, params, checkpoint_hash(&bytes)))
}

fn log_config(stage: &str, items: &[(String, String)]) {
    let rendered: Vec<String> = items.iter().map(|(k, v)| format!("{k}={v}")).collect();
    info!("{stage}: {}", rendered.join(" "));
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut config = SynthConfig {
        seed: cli.seed,
        ..Default::default()
    };
    let overrides = [
        ("languages", args.languages.clone()),
        ("gap-rate", args.gap_rate.map(|v| v.to_string())),
        ("terms-per-concept", args.terms_per_concept.map(|v| v.to_string())),
        ("min-neighbors", args.min_neighbors.map(|v| v.to_string())),
        ("max-neighbors", args.max_neighbors.map(|v| v.to_string())),
        ("distractors", args.distractors.map(|v| v.to_string())),
        ("impressions", args.impressions.map(|v| v.to_string())),
        ("eval-queries", args.eval_queries.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, &v).map_err(UsageError)?;
        }
    }
    let json = serde_json::to_string_pretty(&config)?;
    info!("synth config: {}", serde_json::to_string(&config)?);
    let corpus = generate_corpus(&config)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    write_logs(&corpus.logs, create(&args.out_dir.join("logs.tsv"))?)?;
    write_catalog(&corpus.catalog, create(&args.out_dir.join("catalog.tsv"))?)?;
    write_eval_queries(&corpus.eval, create(&args.out_dir.join("eval.tsv"))?)?;
    let mut manifest = create(&args.out_dir.join("synth.json"))?;
    writeln!(manifest, "{json}")?;
    manifest.flush()?;
    info!(
        "wrote {} log records, {} products, {} eval queries to {}",
        corpus.logs.len(),
        corpus.catalog.len(),
        corpus.eval.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_build_vocab(args: &VocabArgs) -> Result<()> {
    log_config(
        "build-vocab",
        &[
            ("vocab-size".into(), args.vocab_size.to_string()),
            ("min-freq".into(), args.min_freq.to_string()),
        ],
    );
    let records = ingest_logs(open(&args.logs)?)?;
    let catalog = ingest_catalog(open(&args.catalog)?)?;
    let queries: BTreeSet<&str> = records.iter().map(|r| r.query.as_str()).collect();
    let corpus = queries.into_iter().chain(catalog.iter().map(|e| e.text.as_str()));
    let vocab = build_vocab(corpus, args.vocab_size, args.min_freq)?;
    vocab.write_to(create(&args.out)?)?;
    info!("vocabulary of {} pieces, hash {}", vocab.len(), vocab.content_hash());
    Ok(())
}

fn run_build_graph(args: &GraphArgs) -> Result<()> {
    log_config(
        "build-graph",
        &[
            ("t-max".into(), args.t_max.to_string()),
            ("positive-signals".into(), args.positive_signals.to_string()),
        ],
    );
    let records = ingest_logs(open(&args.logs)?)?;
    let catalog = ingest_catalog(open(&args.catalog)?)?;
    let graph = build_graph(&records, &catalog, args.t_max, &args.positive_signals)?;
    let mut sink = create(&args.out)?;
    save_graph(&graph, &mut sink)?;
    sink.flush()?;
    info!("graph with {} products and {} queries", graph.products.len(), graph.queries.len());
    Ok(())
}

fn write_checkpoint(path: &Path, params: &mlgcn::model::ModelParams<f32>, manifest: &CheckpointManifest) -> Result<()> {
    let mut sink = create(path)?;
    save_checkpoint(params, manifest, &mut sink)?;
    sink.flush()?;
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainCmd) -> Result<()> {
    let mut config = args.opts.resolve(cli.seed)?;
    config.checkpoint_every = args.checkpoint_every;
    log_config("train", &config.to_key_values());
    let vocab = read_vocab(&args.vocab)?;
    let graph = read_graph(&args.graph)?;
    let records = ingest_logs(open(&args.logs)?)?;
    let data = TrainingData::new(&graph, &vocab, &records, config.exclude_self_neighbor);
    let mut trainer = Trainer::new(config.clone(), &data, vocab.len())?;
    info!("language probabilities: {:?}", trainer.schedule().probabilities());
    let mut trace = Vec::with_capacity(config.total_batches);
    while !trainer.is_done() {
        let row = trainer.step()?;
        if (row.batch + 1) % 1000 == 0 {
            info!("batch {} loss {:.4} ({})", row.batch + 1, row.loss, row.mode);
        }
        trace.push(row);
        let done = trainer.batches_done();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && !trainer.is_done() {
            let manifest = CheckpointManifest::new(trainer.params(), &vocab, &config);
            let mut name = args.out.clone().into_os_string();
            name.push(format!(".{done}"));
            write_checkpoint(Path::new(&name), trainer.params(), &manifest)?;
        }
    }
    let params = trainer.into_params();
    write_checkpoint(&args.out, &params, &CheckpointManifest::new(&params, &vocab, &config))?;
    if let Some(path) = &args.trace {
        write_trace(&trace, create(path)?)?;
    }
    Ok(())
}

fn run_grad_check(cli: &Cli, args: &GradCheckArgs) -> Result<()> {
    log_config("grad-check", &[("h".into(), args.h.to_string()), ("seed".into(), cli.seed.to_string())]);
    let (params, batch) = grad_check_fixture(cli.seed);
    let (_, analytic) = loss_and_grads(&batch, &params)?;
    let (err, coords) = grad_check_against(&params, &batch, args.h, &analytic, cli.seed)?;
    println!("max_relative_error\t{err:e}\ncoordinates\t{coords}");
    if err >= args.tolerance {
        bail!("max relative error {err:e} is not below {:e}", args.tolerance);
    }
    Ok(())
}

fn run_embed(args: &EmbedArgs) -> Result<()> {
    let vocab = read_vocab(&args.vocab)?;
    let graph = read_graph(&args.graph)?;
    let (manifest, params, hash) = read_checkpoint(&args.checkpoint, &vocab)?;
    log_config("embed", &[("checkpoint".into(), hash.clone()), ("arch".into(), manifest.arch.to_string())]);
    let entries = precompute_embeddings(&graph, &vocab, &params)?;
    let index = build_index(entries, manifest.dims.dim, false)?.with_checkpoint_hash(hash);
    let mut sink = create(&args.out)?;
    save_index(&index, &mut sink)?;
    sink.flush()?;
    info!("{} product embeddings", index.len());
    Ok(())
}

fn run_index(args: &IndexArgs) -> Result<()> {
    log_config("index", &[("normalize".into(), args.normalize.to_string())]);
    let raw = load_index(open(&args.embeddings)?)?;
    let hash = raw.checkpoint_hash().to_owned();
    let index = build_index(raw.entries(), raw.dim(), args.normalize)?.with_checkpoint_hash(hash);
    let zero = (0..index.len()).filter(|&r| index.is_zero_row(r)).count();
    if zero > 0 {
        log::warn!("{zero} products have zero embeddings and will always score 0");
    }
    let mut sink = create(&args.out)?;
    save_index(&index, &mut sink)?;
    sink.flush()?;
    Ok(())
}

fn run_search(args: &SearchArgs) -> Result<()> {
    log_config(
        "search",
        &[
            ("topk".into(), args.topk.to_string()),
            ("score".into(), args.score.to_string()),
            ("lang".into(), args.lang.clone().unwrap_or_default()),
        ],
    );
    if args.topk == 0 {
        return Err(UsageError("--topk must be at least 1".into()).into());
    }
    let vocab = read_vocab(&args.vocab)?;
    let (_, params, hash) = read_checkpoint(&args.checkpoint, &vocab)?;
    let index = load_index(open(&args.index)?)?;
    if !index.checkpoint_hash().is_empty() && index.checkpoint_hash() != hash {
        log::warn!("index was built from a different checkpoint");
    }
    let options = SearchOptions {
        score: args.score,
        language: args.lang.clone(),
        shards: 0,
    };
    let result = search(&args.query, &vocab, &params, &index, args.topk, &options)?;
    if result.zero_query {
        log::warn!("query embedding is zero; all scores are 0");
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (rank, hit) in result.hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{:.6}", rank + 1, hit.id, hit.score)?;
    }
    Ok(())
}

fn load_eval(cli: &Cli, inputs: &EvalInputs) -> Result<(Vocab, mlgcn::graphstore::BipartiteGraph, mlgcn::eval::EvalSet)> {
    let vocab = read_vocab(&inputs.vocab)?;
    let graph = read_graph(&inputs.graph)?;
    let queries = read_eval_queries(open(&inputs.eval)?)?;
    let set = build_eval_set(queries, &graph, inputs.corpus_size, cli.seed);
    if set.skipped > 0 {
        log::warn!("{} eval queries have no relevant product in the graph and are skipped", set.skipped);
    }
    Ok((vocab, graph, set))
}

fn eval_config(cli: &Cli, inputs: &EvalInputs) -> Vec<(String, String)> {
    vec![
        ("topk".into(), inputs.topk.to_string()),
        ("score".into(), inputs.score.to_string()),
        ("corpus-size".into(), inputs.corpus_size.to_string()),
        ("seed".into(), cli.seed.to_string()),
    ]
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    log_config("eval", &eval_config(cli, &args.inputs));
    let (vocab, graph, set) = load_eval(cli, &args.inputs)?;
    let (_, params, hash) = read_checkpoint(&args.checkpoint, &vocab)?;
    info!("checkpoint {hash}");
    let report = evaluate(&args.arm, &params, &vocab, &graph, &set, args.inputs.topk, args.inputs.score)?;
    write_report(std::slice::from_ref(&report), create(&args.out)?)?;
    if let Some(path) = &args.per_query {
        write_per_query(&report, create(path)?)?;
    }
    for row in &report.rows {
        info!("{}: recall@{} {:.4} mAP {:.4} ({} queries)", row.language, report.k, row.recall, row.map, row.n_queries);
    }
    Ok(())
}

fn parse_arm(spec: &str) -> Result<Arm> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    if name.is_empty() {
        return Err(UsageError(format!("arm '{spec}' has no name")).into());
    }
    let overrides = rest
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                .ok_or_else(|| UsageError(format!("arm '{name}': expected key=value, got '{kv}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Arm {
        name: name.to_owned(),
        overrides,
    })
}

fn run_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let base = args.opts.resolve(cli.seed)?;
    let arms = if args.arms.is_empty() {
        vec![Arm::new("full", &[]), Arm::new("w/o-gcn", &[("arch", "text-only")])]
    } else {
        args.arms.iter().map(|s| parse_arm(s)).collect::<Result<_>>()?
    };
    for arm in &arms {
        mlgcn::eval::arm_config(&base, arm).map_err(|e| UsageError(e.to_string()))?;
    }
    let mut echo = base.to_key_values();
    echo.extend(eval_config(cli, &args.inputs));
    echo.extend(arms.iter().map(|a| {
        let kv: Vec<String> = a.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        (format!("arm:{}", a.name), kv.join(";"))
    }));
    log_config("ablate", &echo);
    let (vocab, graph, set) = load_eval(cli, &args.inputs)?;
    let records = ingest_logs(open(&args.logs)?)?;
    let inputs = GridInputs {
        graph: &graph,
        vocab: &vocab,
        records: &records,
        eval_set: &set,
        k: args.inputs.topk,
        score: args.inputs.score,
    };
    let reports = run_ablation_grid(&base, &arms, &inputs)?;
    write_comparison(&reports, create(&args.out)?)?;
    if let Some(path) = &args.report {
        write_report(&reports, create(path)?)?;
    }
    Ok(())
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::Synth(_) => "synth",
        Command::BuildVocab(_) => "build-vocab",
        Command::BuildGraph(_) => "build-graph",
        Command::Train(_) => "train",
        Command::GradCheck(_) => "grad-check",
        Command::Embed(_) => "embed",
        Command::Index(_) => "index",
        Command::Search(_) => "search",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => run_synth(cli, a),
        Command::BuildVocab(a) => run_build_vocab(a),
        Command::BuildGraph(a) => run_build_graph(a),
        Command::Train(a) => run_train(cli, a),
        Command::GradCheck(a) => run_grad_check(cli, a),
        Command::Embed(a) => run_embed(a),
        Command::Index(a) => run_index(a),
        Command::Search(a) => run_search(a),
        Command::Eval(a) => run_eval(cli, a),
        Command::Ablate(a) => run_ablate(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv = match config_file::merge(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: config: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are not errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::from(1);
        }
    }
    let stage = stage_name(&cli.command);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
