//! Transmission-aware prompt learning and the zero-shot task performer.
//!
//! A meta-network maps each decoded token to a conditional vector `pi`.
//! Every learnable context embedding is shifted by `pi`, the shifted context
//! is followed by a classname embedding sequence, and a frozen text encoder
//! turns the whole sequence into one text feature per (sample, class).
//! Classification and retrieval then rank cosine similarities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::math::{self, Stream};
use crate::nn::{join, Activation, Dense, Module, Tensor};
use crate::tokens::TokenBatch;

/// Frozen text encoder over sequences of `D`-dimensional embeddings.
pub trait TextEncoder {
    fn embed_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn encode(&self, seq: &[&[f64]]) -> Result<Vec<f64>>;
    /// Gradient of `dout . encode(seq)` with respect to each sequence element.
    fn backward(&self, seq: &[&[f64]], dout: &[f64]) -> Result<Vec<Vec<f64>>>;
}

/// Mapping applied after mean pooling in [`ToyTextEncoder`].
#[derive(Debug, Clone, PartialEq)]
pub enum ToyTextHead {
    /// `A v + b`
    Affine(Dense),
    /// `A2 tanh(A1 v + b1) + b2`
    Mlp { hidden: Dense, out: Dense },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTextKind {
    Affine,
    Mlp,
}

/// Seeded stand-in for a frozen text encoder: mean-pool the sequence, then
/// apply a fixed random head. Mean pooling makes it blind to token order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    embed_dim: usize,
    head: ToyTextHead,
}

impl ToyTextEncoder {
    pub fn new(embed_dim: usize, output_dim: usize, kind: ToyTextKind, seed: u64) -> Result<Self> {
        if embed_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("text encoder dims must be positive".into()));
        }
        let mut rng = math::substream(seed, "toy-text-encoder");
        let head = match kind {
            ToyTextKind::Affine => ToyTextHead::Affine(gaussian_dense(embed_dim, output_dim, 0.0, &mut rng)),
            ToyTextKind::Mlp => {
                let width = output_dim.max(embed_dim);
                ToyTextHead::Mlp {
                    hidden: gaussian_dense(embed_dim, width, 0.1, &mut rng),
                    out: gaussian_dense(width, output_dim, 0.0, &mut rng),
                }
            }
        };
        Ok(Self { embed_dim, head })
    }

    /// Wrap an explicit affine map `A v + b` (`A` is `[N, D]`).
    pub fn affine(dense: Dense) -> Self {
        Self {
            embed_dim: dense.input_dim(),
            head: ToyTextHead::Affine(dense),
        }
    }

    pub fn head(&self) -> &ToyTextHead {
        &self.head
    }

    fn pool(&self, seq: &[&[f64]]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Empty("text encoder sequence"));
        }
        let mut mean = vec![0.0; self.embed_dim];
        for v in seq {
            ensure_dim("text encoder embedding", self.embed_dim, v.len())?;
            math::axpy(1.0, v, &mut mean);
        }
        let inv = 1.0 / seq.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(mean)
    }
}

fn gaussian_dense(input: usize, output: usize, bias_sd: f64, rng: &mut Stream) -> Dense {
    let mut d = Dense::zeros(input, output);
    let sd = (1.0 / input as f64).sqrt();
    d.weight = Tensor::gaussian(&[output, input], sd, rng);
    if bias_sd > 0.0 {
        d.bias = Tensor::gaussian(&[output], bias_sd, rng);
    }
    d
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn output_dim(&self) -> usize {
        match &self.head {
            ToyTextHead::Affine(d) => d.output_dim(),
            ToyTextHead::Mlp { out, .. } => out.output_dim(),
        }
    }

    fn encode(&self, seq: &[&[f64]]) -> Result<Vec<f64>> {
        let pooled = self.pool(seq)?;
        Ok(match &self.head {
            ToyTextHead::Affine(d) => d.forward(&pooled),
            ToyTextHead::Mlp { hidden, out } => {
                let h: Vec<f64> = hidden.forward(&pooled).into_iter().map(f64::tanh).collect();
                out.forward(&h)
            }
        })
    }

    fn backward(&self, seq: &[&[f64]], dout: &[f64]) -> Result<Vec<Vec<f64>>> {
        ensure_dim("text encoder output gradient", self.output_dim(), dout.len())?;
        let pooled = self.pool(seq)?;
        let dpooled = match &self.head {
            ToyTextHead::Affine(d) => d.backward_input(dout),
            ToyTextHead::Mlp { hidden, out } => {
                let z = hidden.forward(&pooled);
                let dh = out.backward_input(dout);
                let dz: Vec<f64> = dh
                    .iter()
                    .zip(&z)
                    .map(|(g, zi)| {
                        let t = zi.tanh();
                        g * (1.0 - t * t)
                    })
                    .collect();
                hidden.backward_input(&dz)
            }
        };
        let inv = 1.0 / seq.len() as f64;
        let per: Vec<f64> = dpooled.iter().map(|g| g * inv).collect();
        Ok(vec![per; seq.len()])
    }
}

/// `M` learnable context embeddings of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub context: Tensor,
}

impl PromptContext {
    pub const DEFAULT_INIT_SD: f64 = 0.02;

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let m = vectors.len();
        if m == 0 {
            return Err(Error::Empty("prompt context"));
        }
        let d = vectors[0].len();
        let mut data = Vec::with_capacity(m * d);
        for v in vectors {
            ensure_dim("context embedding", d, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("context embedding"));
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            context: Tensor {
                shape: vec![m, d],
                data,
            },
        })
    }

    /// Zero-mean Gaussian initialization, used when no phrase embedding is available.
    pub fn gaussian(m: usize, d: usize, sd: f64, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument("context needs M >= 1 and D >= 1".into()));
        }
        let mut rng = math::substream(seed, "prompt-context");
        Ok(Self {
            context: Tensor::gaussian(&[m, d], sd, &mut rng),
        })
    }

    pub fn len(&self) -> usize {
        self.context.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.context.shape[1]
    }

    pub fn vector(&self, m: usize) -> &[f64] {
        let d = self.embed_dim();
        &self.context.data[m * d..(m + 1) * d]
    }
}

impl Module for PromptContext {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "context"), &self.context);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "context"), &mut self.context);
    }
}

/// Embedding sequence of one class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassnameEmbedding {
    pub name: String,
    pub tokens: Vec<Vec<f64>>,
}

/// Validates a candidate class set: at least two classes, shared non-empty `D`.
pub fn check_classes(classes: &[ClassnameEmbedding], embed_dim: usize) -> Result<()> {
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 candidate classes, got {}",
            classes.len()
        )));
    }
    for c in classes {
        if c.tokens.is_empty() {
            return Err(Error::Empty("classname embedding"));
        }
        for t in &c.tokens {
            ensure_dim("classname embedding", embed_dim, t.len())?;
        }
    }
    Ok(())
}

/// `pi = W2 relu(W1 s_hat + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub fc1: Dense,
    pub fc2: Dense,
}

pub(crate) struct MetaCache {
    z1: Vec<f64>,
    h: Vec<f64>,
}

impl MetaNet {
    /// Hidden width `N / 16`, at least 8.
    pub fn hidden_for(token_dim: usize) -> usize {
        (token_dim / 16).max(8)
    }

    pub fn init(token_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = math::substream(seed, "meta-net");
        let hidden = Self::hidden_for(token_dim);
        let mut fc2 = Dense::init(hidden, embed_dim, &mut rng);
        // small initial pi keeps the starting prompts close to the context init
        fc2.weight.data.iter_mut().for_each(|w| *w = math::to_f32_grid(*w * 0.1));
        Self {
            fc1: Dense::init(token_dim, hidden, &mut rng),
            fc2,
        }
    }

    pub fn zeros(token_dim: usize, embed_dim: usize) -> Self {
        let hidden = Self::hidden_for(token_dim);
        Self {
            fc1: Dense::zeros(token_dim, hidden),
            fc2: Dense::zeros(hidden, embed_dim),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, s_hat: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("meta-net input", self.token_dim(), s_hat.len())?;
        Ok(self.forward_cached(s_hat).0)
    }

    pub(crate) fn forward_cached(&self, s_hat: &[f64]) -> (Vec<f64>, MetaCache) {
        let z1 = self.fc1.forward(s_hat);
        let h: Vec<f64> = z1.iter().map(|&z| Activation::Relu.apply(z)).collect();
        (self.fc2.forward(&h), MetaCache { z1, h })
    }

    /// Returns `dL/ds_hat`; parameter gradients accumulate into `grad`.
    pub(crate) fn backward(&self, s_hat: &[f64], cache: &MetaCache, dpi: &[f64], grad: &mut MetaNet) -> Vec<f64> {
        let dh = self.fc2.backward(&cache.h, dpi, &mut grad.fc2);
        let dz: Vec<f64> = dh
            .iter()
            .zip(&cache.z1)
            .map(|(g, &z)| g * Activation::Relu.derivative(z))
            .collect();
        self.fc1.backward(s_hat, &dz, &mut grad.fc1)
    }
}

impl Module for MetaNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Trainable part of the task performer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaplParams {
    pub meta: MetaNet,
    pub context: PromptContext,
}

impl TaplParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            meta: MetaNet::zeros(self.meta.token_dim(), self.meta.embed_dim()),
            context: PromptContext {
                context: Tensor::zeros(&self.context.context.shape),
            },
        }
    }
}

impl Module for TaplParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.meta.visit(&join(prefix, "meta"), f);
        self.context.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.meta.visit_mut(&join(prefix, "meta"), f);
        self.context.visit_mut(prefix, f);
    }
}

/// Candidate text features, either one set for all samples (`G x N`) or
/// one per sample (`B x G x N`).
#[derive(Debug, Clone, PartialEq)]
pub enum TextFeatureSet {
    Shared(Vec<Vec<f64>>),
    PerSample(Vec<Vec<Vec<f64>>>),
}

impl TextFeatureSet {
    pub fn classes(&self) -> usize {
        match self {
            TextFeatureSet::Shared(t) => t.len(),
            TextFeatureSet::PerSample(t) => t.first().map_or(0, Vec::len),
        }
    }

    /// Text feature of class `k` as seen by sample `b`.
    pub fn get(&self, b: usize, k: usize) -> &[f64] {
        match self {
            TextFeatureSet::Shared(t) => &t[k],
            TextFeatureSet::PerSample(t) => &t[b][k],
        }
    }

    fn check(&self, batch: usize, dim: usize) -> Result<()> {
        let g = self.classes();
        if g == 0 {
            return Err(Error::Empty("text feature set"));
        }
        match self {
            TextFeatureSet::Shared(t) => {
                for row in t {
                    ensure_dim("text feature", dim, row.len())?;
                }
            }
            TextFeatureSet::PerSample(t) => {
                ensure_dim("per-sample text features", batch, t.len())?;
                for sample in t {
                    ensure_dim("per-sample class count", g, sample.len())?;
                    for row in sample {
                        ensure_dim("text feature", dim, row.len())?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `[(pi + e_1), ..., (pi + e_M), c_k...]`
pub fn prompt_sequence(pi: Option<&[f64]>, ctx: &PromptContext, class: &ClassnameEmbedding) -> Vec<Vec<f64>> {
    let mut seq = Vec::with_capacity(ctx.len() + class.tokens.len());
    for m in 0..ctx.len() {
        let e = ctx.vector(m);
        seq.push(match pi {
            Some(p) => e.iter().zip(p).map(|(a, b)| b + a).collect(),
            None => e.to_vec(),
        });
    }
    seq.extend(class.tokens.iter().cloned());
    seq
}

fn encode_prompt<E: TextEncoder + ?Sized>(
    pi: Option<&[f64]>,
    ctx: &PromptContext,
    class: &ClassnameEmbedding,
    encoder: &E,
) -> Result<Vec<f64>> {
    let seq = prompt_sequence(pi, ctx, class);
    let refs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
    encoder.encode(&refs)
}

fn check_prompt_dims<E: TextEncoder + ?Sized>(
    ctx: &PromptContext,
    classes: &[ClassnameEmbedding],
    encoder: &E,
) -> Result<()> {
    ensure_dim("context embedding", encoder.embed_dim(), ctx.embed_dim())?;
    check_classes(classes, encoder.embed_dim())
}

/// Text features of the plain prompts `[e_1..e_M, c_k]`.
pub fn unconditional_text_features<E: TextEncoder + ?Sized>(
    ctx: &PromptContext,
    classes: &[ClassnameEmbedding],
    encoder: &E,
) -> Result<TextFeatureSet> {
    check_prompt_dims(ctx, classes, encoder)?;
    let t = classes
        .iter()
        .map(|c| encode_prompt(None, ctx, c, encoder))
        .collect::<Result<Vec<_>>>()?;
    Ok(TextFeatureSet::Shared(t))
}

/// Text features conditioned on one `pi` per sample.
pub fn build_text_features<E: TextEncoder + ?Sized>(
    pis: &[Vec<f64>],
    ctx: &PromptContext,
    classes: &[ClassnameEmbedding],
    encoder: &E,
) -> Result<TextFeatureSet> {
    check_prompt_dims(ctx, classes, encoder)?;
    let mut out = Vec::with_capacity(pis.len());
    for pi in pis {
        ensure_dim("conditional vector", ctx.embed_dim(), pi.len())?;
        out.push(
            classes
                .iter()
                .map(|c| encode_prompt(Some(pi), ctx, c, encoder))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(TextFeatureSet::PerSample(out))
}

/// Cosine similarity of every sample with every candidate, `B x G`.
pub fn cosine_matrix(s_hat: &TokenBatch, t: &TextFeatureSet) -> Result<Vec<Vec<f64>>> {
    t.check(s_hat.len(), s_hat.dim())?;
    let g = t.classes();
    let text_norms: Option<Vec<f64>> = match t {
        TextFeatureSet::Shared(rows) => Some(rows.iter().map(|r| math::norm(r)).collect()),
        TextFeatureSet::PerSample(_) => None,
    };
    s_hat
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let ns = math::norm(s);
            if ns == 0.0 {
                return Err(Error::ZeroNorm("image feature"));
            }
            (0..g)
                .map(|k| {
                    let tk = t.get(b, k);
                    let nt = text_norms.as_ref().map_or_else(|| math::norm(tk), |n| n[k]);
                    if nt == 0.0 {
                        return Err(Error::ZeroNorm("text feature"));
                    }
                    Ok(math::dot(s, tk) / (ns * nt))
                })
                .collect()
        })
        .collect()
}

/// Row-stochastic `B x G` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ProbabilityMatrix {
    pub fn argmax(&self) -> Vec<usize> {
        self.rows.iter().map(|r| math::argmax(r)).collect()
    }
}

/// `p[b, k] = softmax_k(cos(s_hat_b, t_k) / temperature)`.
pub fn task_probabilities(s_hat: &TokenBatch, t: &TextFeatureSet, temperature: f64) -> Result<ProbabilityMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let sims = cosine_matrix(s_hat, t)?;
    Ok(ProbabilityMatrix {
        rows: sims
            .into_iter()
            .map(|row| {
                let scaled: Vec<f64> = row.iter().map(|c| c / temperature).collect();
                math::softmax(&scaled)
            })
            .collect(),
    })
}

/// Row-wise argmax of the cosine similarities (temperature does not matter).
pub fn classify(s_hat: &TokenBatch, t: &TextFeatureSet) -> Result<Vec<usize>> {
    if s_hat.is_empty() {
        return Err(Error::Empty("classification batch"));
    }
    Ok(cosine_matrix(s_hat, t)?
        .iter()
        .map(|r| math::argmax(r))
        .collect())
}

/// Indices sorted by descending score, ties to the lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Gallery indices ranked by cosine similarity to `query`.
pub fn retrieve(query: &[f64], gallery: &TokenBatch) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Empty("retrieval gallery"));
    }
    ensure_dim("retrieval query", gallery.dim(), query.len())?;
    let nq = math::norm(query);
    if nq == 0.0 {
        return Err(Error::ZeroNorm("retrieval query"));
    }
    let scores = gallery
        .iter()
        .map(|s| {
            let ns = math::norm(s);
            if ns == 0.0 {
                Err(Error::ZeroNorm("gallery item"))
            } else {
                Ok(math::dot(query, s) / (nq * ns))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_descending(&scores))
}

/// How per-sample conditional vectors turn into text features at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Fixed prompts, no meta-network.
    Frozen,
    /// One conditional vector per received sample (`B x G` encoder passes).
    PerSample,
    /// A single conditional vector averaged over the batch (`G` passes).
    Pooled,
}

/// Receiver-side task performer: prompts plus a frozen text encoder.
pub struct TaskPerformer<'a, E: TextEncoder + ?Sized> {
    pub encoder: &'a E,
    pub classes: &'a [ClassnameEmbedding],
    pub context: &'a PromptContext,
    pub meta: Option<&'a MetaNet>,
    pub mode: PromptMode,
}

impl<E: TextEncoder + ?Sized> TaskPerformer<'_, E> {
    pub fn text_features(&self, s_hat: &TokenBatch) -> Result<TextFeatureSet> {
        let meta = match (self.mode, self.meta) {
            (PromptMode::Frozen, _) | (_, None) => {
                return unconditional_text_features(self.context, self.classes, self.encoder)
            }
            (_, Some(m)) => m,
        };
        let pis = s_hat
            .iter()
            .map(|s| meta.forward(s))
            .collect::<Result<Vec<_>>>()?;
        if self.mode == PromptMode::Pooled {
            let mut mean = vec![0.0; meta.embed_dim()];
            for p in &pis {
                math::axpy(1.0 / pis.len() as f64, p, &mut mean);
            }
            let t = self
                .classes
                .iter()
                .map(|c| encode_prompt(Some(&mean), self.context, c, self.encoder))
                .collect::<Result<Vec<_>>>()?;
            check_prompt_dims(self.context, self.classes, self.encoder)?;
            return Ok(TextFeatureSet::Shared(t));
        }
        build_text_features(&pis, self.context, self.classes, self.encoder)
    }

    pub fn classify(&self, s_hat: &TokenBatch) -> Result<Vec<usize>> {
        classify(s_hat, &self.text_features(s_hat)?)
    }

    /// For each class, the gallery ranked by that class's similarity column.
    pub fn retrieve_by_class(&self, s_hat: &TokenBatch) -> Result<Vec<Vec<usize>>> {
        let sims = cosine_matrix(s_hat, &self.text_features(s_hat)?)?;
        Ok((0..self.classes.len())
            .map(|k| rank_descending(&sims.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect())
    }
}

/// Random classname embedding sequences, mainly for tests and synthetic worlds.
pub fn random_classnames(count: usize, tokens: usize, embed_dim: usize, rng: &mut Stream) -> Vec<ClassnameEmbedding> {
    (0..count)
        .map(|k| ClassnameEmbedding {
            name: format!("class{k}"),
            tokens: (0..tokens)
                .map(|_| {
                    (0..embed_dim)
                        .map(|_| math::to_f32_grid(rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                })
                .collect(),
        })
        .collect()
}
