//! Two-tower model: a one-layer feed-forward text encoder over mean-pooled token
//! embeddings, a graph-convolution product encoder, the softplus triplet loss,
//! and exact reverse-mode gradients through the whole fixed graph.
//!
//! Query tower: `h = ReLU(W_f · mean(E[tokens]) + b_f)`.
//! Product tower (GCN): neighbor features are transformed by
//! `ReLU(W_q · h_j + b_q)` and averaged into `h_q` (zero when there are no
//! neighbors), then `x_p = ReLU(W_p · [h_p; h_q] + b_p)`.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textcore::TokenSeq;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to every Real")
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x + bias`
    fn affine(&self, x: &[T], bias: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x) + bias[r]).collect()
    }

    /// `selfᵀ · y`
    fn transpose_mul(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += a ⊗ b`
    fn add_outer(&mut self, a: &[T], b: &[T]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == T::zero() {
                continue;
            }
            let cols = self.cols;
            for (m, &bc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *m += ar * bc;
            }
        }
    }

    fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| real::<U>(x.to_f64().unwrap())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub dim: usize,
}

/// Product tower variant. `TextOnly` drops the graph-convolution layer and
/// embeds products from their description alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Gcn,
    TextOnly,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(Architecture::Gcn),
            "text-only" => Ok(Architecture::TextOnly),
            other => Err(format!("unknown architecture '{other}' (expected gcn or text-only)")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Gcn => "gcn",
            Architecture::TextOnly => "text-only",
        })
    }
}

/// Starting point for the graph-convolution weights `W_q` and `W_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcnInit {
    /// Uniform in ±1/√fan_in, like the encoder.
    #[default]
    Uniform,
    /// `W_q = I`, `W_p = [½I ½I]`: the layer starts as the average of the
    /// product feature and the mean neighbor feature, in the query space.
    Identity,
}

impl std::str::FromStr for GcnInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(GcnInit::Uniform),
            "identity" => Ok(GcnInit::Identity),
            other => Err(format!("unknown gcn init '{other}' (expected uniform or identity)")),
        }
    }
}

impl std::fmt::Display for GcnInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GcnInit::Uniform => "uniform",
            GcnInit::Identity => "identity",
        })
    }
}

pub const TENSOR_NAMES: [&str; 7] = ["E", "W_f", "b_f", "W_q", "b_q", "W_p", "b_p"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    /// V × d_e token embeddings.
    pub embedding: Matrix<T>,
    /// d × d_e encoder projection.
    pub w_f: Matrix<T>,
    pub b_f: Vec<T>,
    /// d × d neighbor transform.
    pub w_q: Matrix<T>,
    pub b_q: Vec<T>,
    /// d × 2d fusion projection over `[h_p; h_q]`.
    pub w_p: Matrix<T>,
    pub b_p: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(dims: Dims, arch: Architecture) -> Self {
        let Dims {
            vocab_size,
            embed_dim,
            dim,
        } = dims;
        ModelParams {
            arch,
            embedding: Matrix::zeros(vocab_size, embed_dim),
            w_f: Matrix::zeros(dim, embed_dim),
            b_f: vec![T::zero(); dim],
            w_q: Matrix::zeros(dim, dim),
            b_q: vec![T::zero(); dim],
            w_p: Matrix::zeros(dim, 2 * dim),
            b_p: vec![T::zero(); dim],
        }
    }

    /// Seeded initialization: weights uniform in ±1/√fan_in, biases zero,
    /// embeddings uniform in ±0.05.
    /// Seeded initialization: E uniform in ±0.05, weight matrices uniform in
    /// ±1/√fan_in, biases zero.
    pub fn init(dims: Dims, arch: Architecture, seed: u64) -> Self {
        Self::init_with(dims, arch, GcnInit::Uniform, seed)
    }

    pub fn init_with(dims: Dims, arch: Architecture, gcn_init: GcnInit, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims, arch);
        fill_uniform(params.embedding.as_mut_slice(), 0.05, &mut rng);
        fill_uniform(params.w_f.as_mut_slice(), (dims.embed_dim as f64).sqrt().recip(), &mut rng);
        // drawn either way so E and W_f do not depend on the GCN init
        fill_uniform(params.w_q.as_mut_slice(), (dims.dim as f64).sqrt().recip(), &mut rng);
        fill_uniform(params.w_p.as_mut_slice(), (2.0 * dims.dim as f64).sqrt().recip(), &mut rng);
        if gcn_init == GcnInit::Identity {
            let half = real::<T>(0.5);
            params.w_q = Matrix::identity(dims.dim);
            params.w_p = Matrix::zeros(dims.dim, 2 * dims.dim);
            for i in 0..dims.dim {
                params.w_p.row_mut(i)[i] = half;
                params.w_p.row_mut(i)[dims.dim + i] = half;
            }
        }
        params
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab_size: self.embedding.rows,
            embed_dim: self.embedding.cols,
            dim: self.w_f.rows,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let Dims {
            vocab_size: _,
            embed_dim,
            dim,
        } = self.dims();
        let shapes_ok = embed_dim >= 1
            && dim >= 1
            && self.w_f.cols == embed_dim
            && self.b_f.len() == dim
            && (self.w_q.rows, self.w_q.cols) == (dim, dim)
            && self.b_q.len() == dim
            && (self.w_p.rows, self.w_p.cols) == (dim, 2 * dim)
            && self.b_p.len() == dim;
        if !shapes_ok {
            return Err(ModelError::DimensionMismatch("inconsistent parameter shapes".into()));
        }
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if !t.iter().all(|x| x.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Tensors in their fixed declared order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> [&[T]; 7] {
        [
            self.embedding.as_slice(),
            self.w_f.as_slice(),
            &self.b_f,
            self.w_q.as_slice(),
            &self.b_q,
            self.w_p.as_slice(),
            &self.b_p,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 7] {
        [
            self.embedding.as_mut_slice(),
            self.w_f.as_mut_slice(),
            &mut self.b_f,
            self.w_q.as_mut_slice(),
            &mut self.b_q,
            self.w_p.as_mut_slice(),
            &mut self.b_p,
        ]
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| real::<U>(a.to_f64().unwrap())).collect();
        ModelParams {
            arch: self.arch,
            embedding: self.embedding.cast(),
            w_f: self.w_f.cast(),
            b_f: v(&self.b_f),
            w_q: self.w_q.cast(),
            b_q: v(&self.b_q),
            w_p: self.w_p.cast(),
            b_p: v(&self.b_p),
        }
    }
}

fn fill_uniform<T: Real>(xs: &mut [T], bound: f64, rng: &mut ChaCha8Rng) {
    for x in xs {
        *x = real(rng.gen_range(-bound..bound));
    }
}

/// Feature extractor boundary. The feed-forward encoder implements it; a
/// heavier encoder can be substituted for serving without touching the GCN.
pub trait TextEncoder<T>: Sync {
    fn encode(&self, tokens: &TokenSeq) -> Result<Vec<T>, ModelError>;
}

impl<T: Real> TextEncoder<T> for ModelParams<T> {
    fn encode(&self, tokens: &TokenSeq) -> Result<Vec<T>, ModelError> {
        encode_text(tokens, self)
    }
}

/// A product as the model sees it: tokenized description plus tokenized
/// neighbor queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProductRef {
    pub description: TokenSeq,
    pub neighbors: Vec<TokenSeq>,
}

#[derive(Debug, Clone)]
pub struct Triplet {
    pub query_text: String,
    pub query: TokenSeq,
    pub positive_id: String,
    pub positive: Arc<ProductRef>,
    pub negative_id: String,
    pub negative: Arc<ProductRef>,
}

#[derive(Debug, Clone)]
pub struct TripletBatch {
    /// `None` only for mixed-language batches.
    pub language: Option<String>,
    pub triplets: Vec<Triplet>,
}

struct TextTrace<T> {
    pooled: Vec<T>,
    pre: Vec<T>,
    out: Vec<T>,
}

fn text_forward<T: Real>(tokens: &[u32], params: &ModelParams<T>) -> Result<TextTrace<T>, ModelError> {
    let Dims {
        vocab_size,
        embed_dim,
        ..
    } = params.dims();
    let mut pooled = vec![T::zero(); embed_dim];
    for &id in tokens {
        if id as usize >= vocab_size {
            return Err(ModelError::TokenOutOfRange { id, vocab_size });
        }
        for (p, &e) in pooled.iter_mut().zip(params.embedding.row(id as usize)) {
            *p += e;
        }
    }
    if !tokens.is_empty() {
        let inv = real::<T>(tokens.len() as f64).recip();
        pooled.iter_mut().for_each(|p| *p *= inv);
    }
    let pre = params.w_f.affine(&pooled, &params.b_f);
    let out = pre.iter().map(|&z| z.max(T::zero())).collect();
    Ok(TextTrace { pooled, pre, out })
}

pub fn encode_text<T: Real>(tokens: &TokenSeq, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    text_forward(tokens, params).map(|t| t.out)
}

pub fn encode_query<T: Real>(tokens: &TokenSeq, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    encode_text(tokens, params)
}

struct GcnTrace<T> {
    neighbor_pre: Vec<Vec<T>>,
    concat: Vec<T>,
    pre: Vec<T>,
    out: Vec<T>,
}

fn gcn_forward<T: Real, F: AsRef<[T]>>(params: &ModelParams<T>, h_p: &[T], neighbors: &[F]) -> GcnTrace<T> {
    let dim = params.dims().dim;
    let mut h_q = vec![T::zero(); dim];
    let mut neighbor_pre = Vec::with_capacity(neighbors.len());
    for h in neighbors {
        let u = params.w_q.affine(h.as_ref(), &params.b_q);
        for (acc, &z) in h_q.iter_mut().zip(&u) {
            *acc += z.max(T::zero());
        }
        neighbor_pre.push(u);
    }
    if !neighbors.is_empty() {
        let inv = real::<T>(neighbors.len() as f64).recip();
        h_q.iter_mut().for_each(|x| *x *= inv);
    }
    let mut concat = Vec::with_capacity(2 * dim);
    concat.extend_from_slice(h_p);
    concat.extend_from_slice(&h_q);
    let pre = params.w_p.affine(&concat, &params.b_p);
    let out = pre.iter().map(|&z| z.max(T::zero())).collect();
    GcnTrace {
        neighbor_pre,
        concat,
        pre,
        out,
    }
}

/// Graph-convolution layer over already extracted features.
pub fn gcn_layer<T: Real, F: AsRef<[T]>>(params: &ModelParams<T>, h_p: &[T], neighbor_features: &[F]) -> Vec<T> {
    gcn_forward(params, h_p, neighbor_features).out
}

/// Final product embedding from precomputed features, honoring the architecture.
pub fn product_from_features<T: Real, F: AsRef<[T]>>(
    params: &ModelParams<T>,
    h_p: Vec<T>,
    neighbor_features: &[F],
) -> Vec<T> {
    match params.arch {
        Architecture::Gcn => gcn_layer(params, &h_p, neighbor_features),
        Architecture::TextOnly => h_p,
    }
}

pub fn encode_product<T: Real>(product: &ProductRef, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    let h_p = encode_text(&product.description, params)?;
    if params.arch == Architecture::TextOnly {
        return Ok(h_p);
    }
    let features = product
        .neighbors
        .iter()
        .map(|n| encode_text(n, params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(gcn_layer(params, &h_p, &features))
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        (T::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x_q·x_neg − x_q·x_pos))`, evaluated without overflow.
pub fn triplet_loss<T: Real>(x_q: &[T], x_pos: &[T], x_neg: &[T]) -> Result<T, ModelError> {
    if x_q.len() != x_pos.len() || x_q.len() != x_neg.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "query {} / positive {} / negative {}",
            x_q.len(),
            x_pos.len(),
            x_neg.len()
        )));
    }
    if ![x_q, x_pos, x_neg].iter().all(|v| v.iter().all(|x| x.is_finite())) {
        return Err(ModelError::NonFinite("triplet embeddings"));
    }
    Ok(softplus(dot(x_q, x_neg) - dot(x_q, x_pos)))
}

/// Gradients shaped like [`ModelParams`]; embedding rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub embedding: BTreeMap<u32, Vec<T>>,
    pub w_f: Matrix<T>,
    pub b_f: Vec<T>,
    pub w_q: Matrix<T>,
    pub b_q: Vec<T>,
    pub w_p: Matrix<T>,
    pub b_p: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(dims: Dims) -> Self {
        let ModelParams {
            w_f,
            b_f,
            w_q,
            b_q,
            w_p,
            b_p,
            ..
        } = ModelParams::zeros(
            Dims {
                vocab_size: 0,
                ..dims
            },
            Architecture::Gcn,
        );
        Gradients {
            embedding: BTreeMap::new(),
            w_f,
            b_f,
            w_q,
            b_q,
            w_p,
            b_p,
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (id, row) in &other.embedding {
            let dst = self
                .embedding
                .entry(*id)
                .or_insert_with(|| vec![T::zero(); row.len()]);
            dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        add_slices(self.w_f.as_mut_slice(), other.w_f.as_slice());
        add_slices(&mut self.b_f, &other.b_f);
        add_slices(self.w_q.as_mut_slice(), other.w_q.as_slice());
        add_slices(&mut self.b_q, &other.b_q);
        add_slices(self.w_p.as_mut_slice(), other.w_p.as_slice());
        add_slices(&mut self.b_p, &other.b_p);
    }

    /// Dense tensors in declared order, excluding the sparse embedding.
    pub fn dense(&self) -> [&[T]; 6] {
        [
            self.w_f.as_slice(),
            &self.b_f,
            self.w_q.as_slice(),
            &self.b_q,
            self.w_p.as_slice(),
            &self.b_p,
        ]
    }

    pub fn dense_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w_f.as_mut_slice(),
            &mut self.b_f,
            self.w_q.as_mut_slice(),
            &mut self.b_q,
            self.w_p.as_mut_slice(),
            &mut self.b_p,
        ]
    }

    pub fn scale(&mut self, s: T) {
        self.embedding.values_mut().flatten().for_each(|x| *x *= s);
        for t in self.dense_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.values().flatten().all(|x| x.is_finite())
            && self.dense().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Gradient entry `index` of tensor `tensor` (declared order), embedding
    /// addressed row-major.
    pub fn get(&self, tensor: usize, index: usize, embed_dim: usize) -> T {
        if tensor == 0 {
            let (row, col) = (index / embed_dim, index % embed_dim);
            return self
                .embedding
                .get(&(row as u32))
                .map_or(T::zero(), |r| r[col]);
        }
        self.dense()[tensor - 1][index]
    }
}

fn add_slices<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn relu_mask<T: Real>(upstream: &[T], pre: &[T]) -> Vec<T> {
    upstream
        .iter()
        .zip(pre)
        .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
        .collect()
}

fn text_backward<T: Real>(
    tokens: &[u32],
    trace: &TextTrace<T>,
    d_out: &[T],
    params: &ModelParams<T>,
    grads: &mut Gradients<T>,
) {
    let d_pre = relu_mask(d_out, &trace.pre);
    if d_pre.iter().all(|&g| g == T::zero()) {
        return;
    }
    grads.w_f.add_outer(&d_pre, &trace.pooled);
    add_slices(&mut grads.b_f, &d_pre);
    if tokens.is_empty() {
        return;
    }
    let inv = real::<T>(tokens.len() as f64).recip();
    let d_pooled: Vec<T> = params.w_f.transpose_mul(&d_pre).into_iter().map(|g| g * inv).collect();
    for &id in tokens {
        let row = grads
            .embedding
            .entry(id)
            .or_insert_with(|| vec![T::zero(); d_pooled.len()]);
        add_slices(row, &d_pooled);
    }
}

struct ProductTrace<T> {
    description: TextTrace<T>,
    neighbors: Vec<TextTrace<T>>,
    gcn: Option<GcnTrace<T>>,
}

impl<T: Real> ProductTrace<T> {
    fn out(&self) -> &[T] {
        match &self.gcn {
            Some(g) => &g.out,
            None => &self.description.out,
        }
    }
}

fn product_forward<T: Real>(product: &ProductRef, params: &ModelParams<T>) -> Result<ProductTrace<T>, ModelError> {
    let description = text_forward(&product.description, params)?;
    if params.arch == Architecture::TextOnly {
        return Ok(ProductTrace {
            description,
            neighbors: Vec::new(),
            gcn: None,
        });
    }
    let neighbors = product
        .neighbors
        .iter()
        .map(|n| text_forward(n, params))
        .collect::<Result<Vec<_>, _>>()?;
    let features: Vec<&[T]> = neighbors.iter().map(|t| t.out.as_slice()).collect();
    let gcn = gcn_forward(params, &description.out, &features);
    Ok(ProductTrace {
        description,
        neighbors,
        gcn: Some(gcn),
    })
}

fn product_backward<T: Real>(
    product: &ProductRef,
    trace: &ProductTrace<T>,
    d_out: &[T],
    params: &ModelParams<T>,
    grads: &mut Gradients<T>,
) {
    let Some(gcn) = &trace.gcn else {
        text_backward(&product.description, &trace.description, d_out, params, grads);
        return;
    };
    let dim = params.dims().dim;
    let d_pre = relu_mask(d_out, &gcn.pre);
    if d_pre.iter().all(|&g| g == T::zero()) {
        return;
    }
    grads.w_p.add_outer(&d_pre, &gcn.concat);
    add_slices(&mut grads.b_p, &d_pre);
    let d_concat = params.w_p.transpose_mul(&d_pre);
    let (d_hp, d_hq) = d_concat.split_at(dim);

    if !trace.neighbors.is_empty() {
        let inv = real::<T>(trace.neighbors.len() as f64).recip();
        let d_mean: Vec<T> = d_hq.iter().map(|&g| g * inv).collect();
        for ((tokens, nb), u) in product.neighbors.iter().zip(&trace.neighbors).zip(&gcn.neighbor_pre) {
            let d_u = relu_mask(&d_mean, u);
            if d_u.iter().all(|&g| g == T::zero()) {
                continue;
            }
            grads.w_q.add_outer(&d_u, &nb.out);
            add_slices(&mut grads.b_q, &d_u);
            let d_h = params.w_q.transpose_mul(&d_u);
            text_backward(tokens, nb, &d_h, params, grads);
        }
    }
    text_backward(&product.description, &trace.description, d_hp, params, grads);
}

/// Loss and accumulated gradient of one triplet, with the loss gradient
/// pre-scaled by `weight`.
fn triplet_grads<T: Real>(
    triplet: &Triplet,
    params: &ModelParams<T>,
    weight: T,
    grads: &mut Gradients<T>,
) -> Result<T, ModelError> {
    let q = text_forward(&triplet.query, params)?;
    let pos = product_forward(&triplet.positive, params)?;
    let neg = product_forward(&triplet.negative, params)?;
    let z = dot(&q.out, neg.out()) - dot(&q.out, pos.out());
    let loss = softplus(z);
    if !loss.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    let g = sigmoid(z) * weight;
    let d_q: Vec<T> = neg.out().iter().zip(pos.out()).map(|(&n, &p)| g * (n - p)).collect();
    let d_neg: Vec<T> = q.out.iter().map(|&x| g * x).collect();
    let d_pos: Vec<T> = d_neg.iter().map(|&x| -x).collect();
    text_backward(&triplet.query, &q, &d_q, params, grads);
    product_backward(&triplet.positive, &pos, &d_pos, params, grads);
    product_backward(&triplet.negative, &neg, &d_neg, params, grads);
    Ok(loss)
}

/// Triplets per reduction chunk. Fixed so the summation order, and hence the
/// result bits, do not depend on the worker count.
const REDUCTION_CHUNK: usize = 4;

/// Mean triplet loss over the batch and its exact gradient.
pub fn loss_and_grads<T: Real>(
    batch: &TripletBatch,
    params: &ModelParams<T>,
) -> Result<(T, Gradients<T>), ModelError> {
    if batch.triplets.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let dims = params.dims();
    let weight = real::<T>(batch.triplets.len() as f64).recip();
    let partials = batch
        .triplets
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros(dims);
            let mut loss = T::zero();
            for t in chunk {
                loss += triplet_grads(t, params, weight, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut total = Gradients::zeros(dims);
    let mut loss = T::zero();
    for (l, g) in &partials {
        loss += *l;
        total.add_assign(g);
    }
    Ok((loss * weight, total))
}

/// Mean loss only, used by finite-difference checks.
pub fn batch_loss<T: Real>(batch: &TripletBatch, params: &ModelParams<T>) -> Result<T, ModelError> {
    if batch.triplets.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut loss = T::zero();
    for t in &batch.triplets {
        let q = encode_query(&t.query, params)?;
        let pos = encode_product(&t.positive, params)?;
        let neg = encode_product(&t.negative, params)?;
        loss += triplet_loss(&q, &pos, &neg)?;
    }
    Ok(loss / real(batch.triplets.len() as f64))
}

/// Every ReLU pre-activation evaluated for the batch.
pub fn pre_activations<T: Real>(batch: &TripletBatch, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    let mut out = Vec::new();
    let product = |p: &ProductRef, out: &mut Vec<T>| -> Result<(), ModelError> {
        let trace = product_forward(p, params)?;
        out.extend_from_slice(&trace.description.pre);
        for n in &trace.neighbors {
            out.extend_from_slice(&n.pre);
        }
        if let Some(g) = &trace.gcn {
            out.extend(g.neighbor_pre.iter().flatten().copied());
            out.extend_from_slice(&g.pre);
        }
        Ok(())
    };
    for t in &batch.triplets {
        out.extend(text_forward(&t.query, params)?.pre);
        product(&t.positive, &mut out)?;
        product(&t.negative, &mut out)?;
    }
    Ok(out)
}
