//! Adam, the warm-up-then-hard-negatives training loop, finite-difference
//! gradient checking and checkpoint files.

use std::fmt;
use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    batch_loss, loss_and_grads, pre_activations, Architecture, Dims, GcnInit, Gradients, ModelError, ModelParams, ProductRef,
    Real, Triplet, TripletBatch,
};
use crate::sampling::{
    FusionStrategy, LanguageSchedule, NegativeMode, Sampler, SamplerConfig, SamplingError, TrainingData,
    DEFAULT_OFFLINE_REFRESH, DEFAULT_OFFLINE_WINDOW, DEFAULT_SMOOTHING,
};
use crate::textcore::{TokenSeq, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MLGC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("gradient shapes do not match parameters")]
    ShapeMismatch,
    #[error("kink-adjacent evaluation (pre-activation {0:e} within 10h of zero)")]
    KinkAdjacent(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("not a checkpoint file")]
    NotCheckpoint,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("dimension mismatch: manifest expects {expected} tensor bytes, file has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocab {vocab}")]
    VocabMismatch { checkpoint: String, vocab: String },
    #[error("corrupt checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per tensor. Embedding rows are updated lazily:
/// a row's moments decay for the steps it sat out when it is next touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    row_step: Vec<u64>,
    embed_dim: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            row_step: vec![0; params.dims().vocab_size],
            embed_dim: params.dims().embed_dim,
        }
    }
}

fn to_real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to every Real")
}

pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<(), TrainError> {
    if !grads.is_finite() {
        let name = if grads.embedding.values().flatten().all(|x| x.is_finite()) { "dense tensors" } else { "E" };
        return Err(TrainError::NonFiniteGradient(name));
    }
    let dims = params.dims();
    if state.m[0].len() != dims.vocab_size * dims.embed_dim
        || grads.dense().iter().zip(&params.tensors()[1..]).any(|(g, p)| g.len() != p.len())
    {
        return Err(TrainError::ShapeMismatch);
    }
    state.t += 1;
    let t = state.t;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    let (b1, b2) = (to_real::<T>(beta1), to_real::<T>(beta2));
    let (lr, eps, c1, c2) = (to_real::<T>(lr), to_real::<T>(eps), to_real::<T>(c1), to_real::<T>(c2));
    let update = |theta: &mut T, g: T, m: &mut T, v: &mut T| {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    let de = state.embed_dim;
    let mut tensors = params.tensors_mut();
    for (&row, g) in &grads.embedding {
        let r = row as usize;
        let skipped = t - 1 - state.row_step[r];
        let range = r * de..(r + 1) * de;
        if skipped > 0 {
            let d1 = to_real::<T>(beta1.powf(skipped as f64));
            let d2 = to_real::<T>(beta2.powf(skipped as f64));
            state.m[0][range.clone()].iter_mut().for_each(|x| *x *= d1);
            state.v[0][range.clone()].iter_mut().for_each(|x| *x *= d2);
        }
        let theta = &mut tensors[0][range.clone()];
        let (m, v) = (&mut state.m[0][range.clone()], &mut state.v[0][range]);
        for i in 0..de {
            update(&mut theta[i], g[i], &mut m[i], &mut v[i]);
        }
        state.row_step[r] = t;
    }
    for (k, g) in grads.dense().iter().enumerate() {
        let theta = &mut tensors[k + 1];
        let (m, v) = (&mut state.m[k + 1], &mut state.v[k + 1]);
        for i in 0..g.len() {
            update(&mut theta[i], g[i], &mut m[i], &mut v[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainConfig {
    pub total_batches: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub neg_mode: NegativeMode,
    pub fusion: FusionStrategy,
    pub smoothing: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub dim: usize,
    pub arch: Architecture,
    pub gcn_init: GcnInit,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub offline_refresh: usize,
    pub offline_window_lo: usize,
    pub offline_window_hi: usize,
    pub offline_per_query: usize,
    pub online_pool: usize,
    pub online_include_positives: bool,
    pub exclude_self_neighbor: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            total_batches: 20_000,
            warmup_fraction: 0.2,
            batch_size: 64,
            neg_mode: NegativeMode::Online,
            fusion: FusionStrategy::WeightSeparate,
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
            embed_dim: 32,
            dim: 32,
            arch: Architecture::Gcn,
            gcn_init: GcnInit::Uniform,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            offline_refresh: DEFAULT_OFFLINE_REFRESH,
            offline_window_lo: DEFAULT_OFFLINE_WINDOW.0,
            offline_window_hi: DEFAULT_OFFLINE_WINDOW.1,
            offline_per_query: 10,
            online_pool: 0,
            online_include_positives: false,
            exclude_self_neighbor: false,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

impl TrainConfig {
    /// Set one field by its kebab-case name (the same names the CLI flags use).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "total-batches" => self.total_batches = parse(key, value)?,
            "warmup-frac" | "warmup-fraction" => self.warmup_fraction = parse(key, value)?,
            "batch-size" => self.batch_size = parse(key, value)?,
            "neg-mode" => self.neg_mode = parse(key, value)?,
            "fusion" => self.fusion = parse(key, value)?,
            "smoothing" => self.smoothing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "embed-dim" => self.embed_dim = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "arch" => self.arch = parse(key, value)?,
            "gcn-init" => self.gcn_init = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "offline-refresh" => self.offline_refresh = parse(key, value)?,
            "offline-window-lo" => self.offline_window_lo = parse(key, value)?,
            "offline-window-hi" => self.offline_window_hi = parse(key, value)?,
            "offline-per-query" => self.offline_per_query = parse(key, value)?,
            "online-pool" => self.online_pool = parse(key, value)?,
            "online-include-positives" => self.online_include_positives = parse(key, value)?,
            "exclude-self-neighbor" => self.exclude_self_neighbor = parse(key, value)?,
            "checkpoint-every" => self.checkpoint_every = parse(key, value)?,
            other => return Err(format!("unknown training option '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch-size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup-frac must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1]");
        }
        if self.embed_dim == 0 || self.dim == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.offline_window_lo == 0 || self.offline_window_lo > self.offline_window_hi {
            return bad("offline window needs 1 <= lo <= hi");
        }
        if self.offline_refresh == 0 {
            return bad("offline-refresh must be at least 1");
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam hyperparameters out of range");
        }
        Ok(())
    }

    /// First batch that uses the configured negative mode.
    pub fn warmup_batches(&self) -> usize {
        (self.warmup_fraction * self.total_batches as f64).floor() as usize
    }

    pub fn mode_for(&self, batch: usize) -> NegativeMode {
        if batch < self.warmup_batches() {
            NegativeMode::Random
        } else {
            self.neg_mode
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            fusion: self.fusion,
            online_pool: self.online_pool,
            online_include_positives: self.online_include_positives,
            offline_window: (self.offline_window_lo, self.offline_window_hi),
            offline_per_query: self.offline_per_query,
        }
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object()
            .expect("config is an object")
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub batch: usize,
    pub language: String,
    pub mode: NegativeMode,
    pub loss: f32,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "batch\tlanguage\tmode\tloss")?;
    for r in rows {
        writeln!(sink, "{}\t{}\t{}\t{}", r.batch, r.language, r.mode, r.loss)?;
    }
    sink.flush()
}

/// Single writer of parameters and optimizer state.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainingData,
    schedule: LanguageSchedule,
    sampler: Sampler,
    params: ModelParams<f32>,
    adam: AdamState<f32>,
    batch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainingData, vocab_size: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let dims = Dims {
            vocab_size,
            embed_dim: config.embed_dim,
            dim: config.dim,
        };
        let params = ModelParams::init_with(dims, config.arch, config.gcn_init, config.seed);
        let schedule = LanguageSchedule::from_data(data, config.fusion.effective_smoothing(config.smoothing))?;
        // Separate streams so sampling does not depend on initialization draws.
        let sampler = Sampler::new(config.sampler(), data, config.seed.wrapping_add(0x5eed))?;
        let adam = AdamState::new(&params, config.adam());
        Ok(Trainer {
            config,
            data,
            schedule,
            sampler,
            params,
            adam,
            batch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LanguageSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn batches_done(&self) -> usize {
        self.batch
    }

    pub fn is_done(&self) -> bool {
        self.batch >= self.config.total_batches
    }

    pub fn step(&mut self) -> Result<TraceRow, TrainError> {
        let mode = self.config.mode_for(self.batch);
        if mode == NegativeMode::Offline {
            let since = self.batch - self.config.warmup_batches();
            if since.is_multiple_of(self.config.offline_refresh) {
                self.sampler.refresh_offline(&self.params, self.data)?;
            }
        }
        let batch = self
            .sampler
            .next_batch(self.data, &self.schedule, mode, Some(&self.params))?;
        let (loss, grads) = loss_and_grads(&batch, &self.params)?;
        adam_step(&mut self.params, &grads, &mut self.adam)?;
        let row = TraceRow {
            batch: self.batch,
            language: batch.language.unwrap_or_else(|| "mixed".into()),
            mode,
            loss,
        };
        self.batch += 1;
        Ok(row)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub trace: Vec<TraceRow>,
}

pub fn train(config: &TrainConfig, data: &TrainingData, vocab: &Vocab) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config.clone(), data, vocab.len())?;
    let mut trace = Vec::with_capacity(config.total_batches);
    while !trainer.is_done() {
        trace.push(trainer.step()?);
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        trace,
    })
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-7)`.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Coordinate budget for a gradient check. Models with fewer parameters are
/// checked exhaustively.
pub const GRAD_CHECK_COORDS: usize = 200;

/// Maximum relative error between `analytic` and central differences with
/// step `h`, plus the number of coordinates compared. Every tensor receives an
/// equal share of the budget; embedding coordinates are drawn from rows of
/// tokens present in the batch.
pub fn grad_check_against(
    params: &ModelParams<f64>,
    batch: &TripletBatch,
    h: f64,
    analytic: &Gradients<f64>,
    seed: u64,
) -> Result<(f64, usize), TrainError> {
    let nearest = pre_activations(batch, params)?
        .into_iter()
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min);
    if nearest < 10.0 * h {
        return Err(TrainError::KinkAdjacent(nearest));
    }
    let dims = params.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<u32> = batch
        .triplets
        .iter()
        .flat_map(|t| {
            let product = |p: &ProductRef| -> Vec<u32> {
                p.description
                    .iter()
                    .chain(p.neighbors.iter().flat_map(|n| n.iter()))
                    .copied()
                    .collect()
            };
            t.query
                .iter()
                .copied()
                .chain(product(&t.positive))
                .chain(product(&t.negative))
                .collect::<Vec<_>>()
        })
        .collect();
    tokens.sort_unstable();
    tokens.dedup();

    let tensors = params.tensors();
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= GRAD_CHECK_COORDS {
        for (tensor, values) in tensors.iter().enumerate() {
            coords.extend((0..values.len()).map(|i| (tensor, i)));
        }
    } else {
        let quota = GRAD_CHECK_COORDS.div_ceil(tensors.len());
        for (tensor, values) in tensors.iter().enumerate() {
            let pool: Vec<usize> = if tensor == 0 {
                tokens
                    .iter()
                    .flat_map(|&r| (0..dims.embed_dim).map(move |c| r as usize * dims.embed_dim + c))
                    .collect()
            } else {
                (0..values.len()).collect()
            };
            let take = quota.min(pool.len());
            coords.extend(index::sample(&mut rng, pool.len(), take).into_iter().map(|i| (tensor, pool[i])));
        }
    }

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &(tensor, i) in &coords {
        let original = probe.tensors()[tensor][i];
        probe.tensors_mut()[tensor][i] = original + h;
        let plus = batch_loss(batch, &probe)?;
        probe.tensors_mut()[tensor][i] = original - h;
        let minus = batch_loss(batch, &probe)?;
        probe.tensors_mut()[tensor][i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.get(tensor, i, dims.embed_dim), numeric));
    }
    Ok((worst, coords.len()))
}

pub fn grad_check(params: &ModelParams<f64>, batch: &TripletBatch, h: f64) -> Result<f64, TrainError> {
    let (_, analytic) = loss_and_grads(batch, params)?;
    grad_check_against(params, batch, h, &analytic, 0).map(|(e, _)| e)
}

/// Small seeded model and batch for gradient checks: V=20, d_e=d=4, B=3.
/// Embeddings and biases are drawn wide enough that no ReLU pre-activation
/// sits within 0.02 of zero (draws repeat until that holds).
pub fn grad_check_fixture(seed: u64) -> (ModelParams<f64>, TripletBatch) {
    let dims = Dims {
        vocab_size: 20,
        embed_dim: 4,
        dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = |rng: &mut ChaCha8Rng, max: usize| -> TokenSeq {
        let n = rng.gen_range(1..=max);
        TokenSeq::new((0..n).map(|_| rng.gen_range(2..20)).collect())
    };
    let product = |rng: &mut ChaCha8Rng| -> std::sync::Arc<ProductRef> {
        let description = tokens(rng, 5);
        let t = rng.gen_range(0..=3);
        let neighbors = (0..t).map(|_| tokens(rng, 3)).collect();
        std::sync::Arc::new(ProductRef { description, neighbors })
    };
    let triplets = (0..3)
        .map(|i| Triplet {
            query_text: format!("q{i}"),
            query: tokens(&mut rng, 3),
            positive_id: format!("P{i}"),
            positive: product(&mut rng),
            negative_id: format!("N{i}"),
            negative: product(&mut rng),
        })
        .collect();
    let batch = TripletBatch {
        language: Some("xx".into()),
        triplets,
    };
    let mut params = ModelParams::<f64>::init(dims, Architecture::Gcn, seed);
    loop {
        for x in params.embedding.as_mut_slice() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for b in [&mut params.b_f, &mut params.b_q, &mut params.b_p] {
            for x in b.iter_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
        let pre = pre_activations(&batch, &params).expect("fixture tokens are in range");
        if pre.iter().all(|z| z.abs() > 0.02) {
            return (params, batch);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dims: Dims,
    pub arch: Architecture,
    pub seed: u64,
    pub vocab_hash: String,
    pub config: TrainConfig,
}

impl CheckpointManifest {
    pub fn new(params: &ModelParams<f32>, vocab: &Vocab, config: &TrainConfig) -> Self {
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            dims: params.dims(),
            arch: params.arch,
            seed: config.seed,
            vocab_hash: vocab.content_hash(),
            config: config.clone(),
        }
    }
}

/// Layout: magic `MLGC1`, u32 manifest length, JSON manifest, then E, W_f,
/// b_f, W_q, b_q, W_p, b_p as row-major little-endian f32.
pub fn save_checkpoint<W: Write>(
    params: &ModelParams<f32>,
    manifest: &CheckpointManifest,
    mut sink: W,
) -> Result<(), TrainError> {
    if manifest.dims != params.dims() {
        return Err(TrainError::Manifest("manifest dims differ from parameters".into()));
    }
    let json = serde_json::to_vec(manifest).map_err(|e| TrainError::Manifest(e.to_string()))?;
    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&(json.len() as u32).to_le_bytes())?;
    sink.write_all(&json)?;
    for tensor in params.tensors() {
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for x in tensor {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        sink.write_all(&bytes)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut source: R) -> Result<(CheckpointManifest, ModelParams<f32>), TrainError> {
    let mut magic = [0u8; 5];
    if source.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::NotCheckpoint);
    }
    let mut len = [0u8; 4];
    source.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    source.read_exact(&mut json)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&json).map_err(|e| TrainError::Manifest(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version(manifest.version));
    }
    let mut params = ModelParams::<f32>::zeros(manifest.dims, manifest.arch);
    let expected: usize = params.tensors().iter().map(|t| t.len() * 4).sum();
    let mut data = Vec::with_capacity(expected);
    source.read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(TrainError::DimensionMismatch {
            expected,
            found: data.len(),
        });
    }
    let mut chunks = data.chunks_exact(4);
    for tensor in params.tensors_mut() {
        for (x, c) in tensor.iter_mut().zip(&mut chunks) {
            *x = f32::from_le_bytes(c.try_into().expect("chunks of 4"));
        }
    }
    params.validate()?;
    Ok((manifest, params))
}

/// Load and verify the checkpoint was trained against `vocab`.
pub fn load_for_serving<R: Read>(source: R, vocab: &Vocab) -> Result<(CheckpointManifest, ModelParams<f32>), TrainError> {
    let (manifest, params) = load_checkpoint(source)?;
    let hash = vocab.content_hash();
    if manifest.vocab_hash != hash {
        return Err(TrainError::VocabMismatch {
            checkpoint: manifest.vocab_hash,
            vocab: hash,
        });
    }
    if manifest.dims.vocab_size != vocab.len() {
        return Err(TrainError::Manifest("vocabulary size differs from checkpoint".into()));
    }
    Ok((manifest, params))
}

/// SHA-256 of checkpoint bytes, hex encoded.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
