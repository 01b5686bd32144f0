//! Contrastive losses, the optimizer and the two training stages.
//!
//! Stage 1 trains the JSCC codec alone with the symmetric token-matching
//! loss. Stage 2 freezes the codec and trains the meta-network and the
//! context embeddings with the symmetric image-text loss.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::channel;
use crate::error::{ensure_dim, Error, Result};
use crate::jscc::JsccCodec;
use crate::math::{self, Stream};
use crate::nn::{self, Module};
use crate::tapl::{
    build_text_features, prompt_sequence, ClassnameEmbedding, TaplParams, TextEncoder, TextFeatureSet,
};
use crate::tokens::TokenBatch;

/// CLIP-style logit scale used inside the training losses by default.
pub const DEFAULT_SIMILARITY_SCALE: f64 = 100.0;

/// Mean softmax cross-entropy of each row of `logits` at its label.
pub fn contrastive_ce(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(contrastive_ce_grad(logits, labels)?.0)
}

/// [`contrastive_ce`] and its gradient with respect to `logits`.
pub fn contrastive_ce_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    ensure_dim("cross-entropy labels", logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: row.len(),
            });
        }
        let lse = math::logsumexp(row);
        loss += lse - row[label];
        let mut g: Vec<f64> = row.iter().map(|x| (x - lse).exp() / b).collect();
        g[label] -= 1.0 / b;
        grad.push(g);
    }
    Ok((loss / b, grad))
}

/// Cosine of `a` and `b` and its gradient with respect to `b`.
fn cosine_and_grad_b(a: &[f64], na: f64, b: &[f64]) -> (f64, Vec<f64>) {
    let nb = math::norm(b);
    let c = math::dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    (c, g)
}

fn row_norms(rows: &TokenBatch, what: &'static str) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = math::norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm(what))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Symmetric token-matching loss between transmitted `s` and received
/// `s_hat`, labels `[0, .., B-1]`.
pub fn jscc_loss(s: &TokenBatch, s_hat: &TokenBatch, scale: f64) -> Result<f64> {
    Ok(jscc_loss_grad(s, s_hat, scale)?.0)
}

/// [`jscc_loss`] and its gradient with respect to `s_hat`.
pub fn jscc_loss_grad(s: &TokenBatch, s_hat: &TokenBatch, scale: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    ensure_dim("JSCC loss batch", s.len(), s_hat.len())?;
    ensure_dim("JSCC loss dim", s.dim(), s_hat.dim())?;
    let b = s.len();
    if b < 2 {
        return Err(Error::InvalidArgument("JSCC loss needs B >= 2".into()));
    }
    let ns = row_norms(s, "transmitted token")?;
    row_norms(s_hat, "received token")?;
    // cos[i][j] = cos(s_i, s_hat_j); dcos[i][j] = d cos / d s_hat_j
    let mut cos = vec![vec![0.0; b]; b];
    let mut dcos = vec![vec![Vec::new(); b]; b];
    for i in 0..b {
        for j in 0..b {
            let (c, g) = cosine_and_grad_b(s.row(i), ns[i], s_hat.row(j));
            cos[i][j] = c;
            dcos[i][j] = g;
        }
    }
    let labels: Vec<usize> = (0..b).collect();
    let forward: Vec<Vec<f64>> = cos.iter().map(|r| r.iter().map(|c| scale * c).collect()).collect();
    let backward: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| scale * cos[j][i]).collect()).collect();
    let (l1, g1) = contrastive_ce_grad(&forward, &labels)?;
    let (l2, g2) = contrastive_ce_grad(&backward, &labels)?;
    let mut d_shat = vec![vec![0.0; s.dim()]; b];
    for i in 0..b {
        for j in 0..b {
            // forward[i][j] and backward[j][i] both read cos[i][j]
            let w = 0.5 * scale * (g1[i][j] + g2[j][i]);
            if w != 0.0 {
                math::axpy(w, &dcos[i][j], &mut d_shat[j]);
            }
        }
    }
    Ok((0.5 * (l1 + l2), d_shat))
}

/// Symmetric image-text loss. The image-to-text term is cross-entropy over
/// the `G` candidates of each sample; the text-to-image term takes, for each
/// sample `b`, the similarities of every sample to class `l_b` and targets `b`.
pub fn tapl_loss(s_hat: &TokenBatch, t: &TextFeatureSet, labels: &[usize], scale: f64) -> Result<f64> {
    Ok(tapl_loss_grad(s_hat, t, labels, scale)?.0)
}

/// [`tapl_loss`] and its gradient with respect to every text feature,
/// indexed `[b][k]` (for shared features, only `[0][k]` is populated).
pub fn tapl_loss_grad(
    s_hat: &TokenBatch,
    t: &TextFeatureSet,
    labels: &[usize],
    scale: f64,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let b = s_hat.len();
    ensure_dim("TAPL labels", b, labels.len())?;
    let g = t.classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= g) {
        return Err(Error::LabelOutOfRange { label, classes: g });
    }
    let sims = crate::tapl::cosine_matrix(s_hat, t)?;
    let norms = row_norms(s_hat, "received token")?;
    let logits: Vec<Vec<f64>> = sims.iter().map(|r| r.iter().map(|c| scale * c).collect()).collect();
    let (l1, g1) = contrastive_ce_grad(&logits, labels)?;
    let transposed: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..b).map(|j| logits[j][l]).collect())
        .collect();
    let own: Vec<usize> = (0..b).collect();
    let (l2, g2) = contrastive_ce_grad(&transposed, &own)?;

    let mut dlogit = vec![vec![0.0; g]; b];
    for i in 0..b {
        for k in 0..g {
            dlogit[i][k] += 0.5 * g1[i][k];
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..b {
            dlogit[j][l] += 0.5 * g2[i][j];
        }
    }
    let shared = matches!(t, TextFeatureSet::Shared(_));
    let mut dt = vec![vec![vec![0.0; s_hat.dim()]; g]; if shared { 1 } else { b }];
    for i in 0..b {
        for k in 0..g {
            let w = scale * dlogit[i][k];
            if w == 0.0 {
                continue;
            }
            let (_, dc) = cosine_and_grad_b(s_hat.row(i), norms[i], t.get(i, k));
            let slot = if shared { 0 } else { i };
            math::axpy(w, &dc, &mut dt[slot][k]);
        }
    }
    Ok((0.5 * (l1 + l2), dt))
}

/// Training hyper-parameters shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub snr_range_db: (f64, f64),
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub similarity_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            snr_range_db: (-10.0, 10.0),
            batch_size: 64,
            learning_rate: 1e-3,
            steps: 2000,
            seed: 0,
            similarity_scale: DEFAULT_SIMILARITY_SCALE,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "SNR range lower bound {lo} exceeds upper bound {hi}"
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.similarity_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be >= 0 and similarity scale > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform draw on `[lo, hi]` dB.
pub fn sample_snr(range_db: (f64, f64), rng: &mut Stream) -> f64 {
    let (lo, hi) = range_db;
    if lo == hi {
        return lo;
    }
    lo + (hi - lo) * rng.random::<f64>()
}

/// Adam over every tensor of a [`Module`]; parameters stay on the `f32` grid.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, params: &mut M, grads: &M) {
        let g = nn::flatten(grads);
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        assert_eq!(g.len(), self.m.len(), "parameter layout changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, tensor| {
            for p in tensor.data.iter_mut() {
                let gi = g[offset];
                m[offset] = b1 * m[offset] + (1.0 - b1) * gi;
                v[offset] = b2 * v[offset] + (1.0 - b2) * gi * gi;
                let update = lr * (m[offset] / bc1) / ((v[offset] / bc2).sqrt() + eps);
                *p = math::to_f32_grid(*p - update);
                offset += 1;
            }
        });
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub snr_db: f64,
}

/// Write a loss trace as `step,loss,snr_db` CSV.
pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,snr_db")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.step, r.loss, r.snr_db)?;
    }
    w.flush()?;
    Ok(())
}

fn draw_batch(n: usize, size: usize, rng: &mut Stream) -> Vec<usize> {
    let mut idx = index::sample(rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Sends each row of `tokens` through `codec` at `snr_db`, with noise drawn
/// from `rng`. Returns the decoded batch and the per-item traces.
fn transmit_batch(
    codec: &JsccCodec,
    tokens: &TokenBatch,
    snr_db: f64,
    rng: &mut Stream,
) -> Result<(TokenBatch, Vec<crate::jscc::ItemTrace>)> {
    let l = codec.config.channel_uses;
    let sigma2 = channel::snr_to_noise_variance(snr_db, codec.config.power);
    let mut rows = Vec::with_capacity(tokens.len());
    let mut traces = Vec::with_capacity(tokens.len());
    for s in tokens.iter() {
        let noise = channel::complex_noise(l, sigma2, rng);
        let (s_hat, trace) = codec.forward_traced(s, snr_db, &noise)?;
        rows.push(s_hat);
        traces.push(trace);
    }
    Ok((TokenBatch::from_rows(rows, None)?, traces))
}

/// Stage-1 objective for one batch at fixed noise: loss and parameter gradient.
pub fn stage1_loss_and_grad(
    codec: &JsccCodec,
    tokens: &TokenBatch,
    snr_db: f64,
    noise: &[Vec<f64>],
    scale: f64,
) -> Result<(f64, JsccCodec)> {
    ensure_dim("stage-1 noise rows", tokens.len(), noise.len())?;
    let mut rows = Vec::with_capacity(tokens.len());
    let mut traces = Vec::with_capacity(tokens.len());
    for (s, n) in tokens.iter().zip(noise) {
        let (s_hat, trace) = codec.forward_traced(s, snr_db, n)?;
        rows.push(s_hat);
        traces.push(trace);
    }
    let s_hat = TokenBatch::from_rows(rows, None)?;
    let (loss, d_shat) = jscc_loss_grad(tokens, &s_hat, scale)?;
    let mut grad = codec.zeros_like();
    for (trace, d) in traces.iter().zip(&d_shat) {
        codec.backward_traced(trace, d, &mut grad);
    }
    Ok((loss, grad))
}

/// Train the codec with the symmetric token-matching loss. SNR is drawn
/// once per step from `cfg.snr_range_db`; channel noise is redrawn every step.
pub fn train_stage1(data: &TokenBatch, codec: &mut JsccCodec, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    ensure_dim("stage-1 token dim", codec.config.input_dim, data.dim())?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument("stage 1 needs at least 2 tokens".into()));
    }
    let mut rng = math::substream(cfg.seed, "stage1");
    let mut adam = Adam::new(cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    let l = codec.config.channel_uses;
    for step in 0..cfg.steps {
        let batch = data.select(&draw_batch(data.len(), cfg.batch_size, &mut rng));
        let snr_db = sample_snr(cfg.snr_range_db, &mut rng);
        let sigma2 = channel::snr_to_noise_variance(snr_db, codec.config.power);
        let noise: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| channel::complex_noise(l, sigma2, &mut rng))
            .collect();
        let (loss, grad) = stage1_loss_and_grad(codec, &batch, snr_db, &noise, cfg.similarity_scale)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(codec, &grad);
        trace.push(TraceRow { step, loss, snr_db });
    }
    Ok(trace)
}

/// Stage-2 objective for already-decoded tokens: loss and TAPL gradient.
pub fn stage2_loss_and_grad<E: TextEncoder + ?Sized>(
    params: &TaplParams,
    s_hat: &TokenBatch,
    labels: &[usize],
    classes: &[ClassnameEmbedding],
    encoder: &E,
    scale: f64,
) -> Result<(f64, TaplParams)> {
    let mut pis = Vec::with_capacity(s_hat.len());
    let mut caches = Vec::with_capacity(s_hat.len());
    for s in s_hat.iter() {
        ensure_dim("meta-net input", params.meta.token_dim(), s.len())?;
        let (pi, c) = params.meta.forward_cached(s);
        pis.push(pi);
        caches.push(c);
    }
    let t = build_text_features(&pis, &params.context, classes, encoder)?;
    let (loss, dt) = tapl_loss_grad(s_hat, &t, labels, scale)?;

    let mut grad = params.zeros_like();
    let m = params.context.len();
    let d = params.context.embed_dim();
    for (b, s) in s_hat.iter().enumerate() {
        let mut dpi = vec![0.0; d];
        for (k, class) in classes.iter().enumerate() {
            let dtk = &dt[b][k];
            if dtk.iter().all(|&x| x == 0.0) {
                continue;
            }
            let seq = prompt_sequence(Some(&pis[b]), &params.context, class);
            let refs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
            let dseq = encoder.backward(&refs, dtk)?;
            for (pos, g) in dseq.iter().take(m).enumerate() {
                math::axpy(1.0, g, &mut dpi);
                math::axpy(1.0, g, &mut grad.context.context.data[pos * d..(pos + 1) * d]);
            }
        }
        params.meta.backward(s, &caches[b], &dpi, &mut grad.meta);
    }
    Ok((loss, grad))
}

/// Train meta-network and context embeddings on tokens decoded by the
/// frozen codec. `data` must carry labels indexing `classes`.
pub fn train_stage2<E: TextEncoder + ?Sized>(
    data: &TokenBatch,
    codec: &JsccCodec,
    params: &mut TaplParams,
    classes: &[ClassnameEmbedding],
    encoder: &E,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("stage 2 needs labelled tokens".into()))?;
    data.check_labels(classes.len())?;
    let mut rng = math::substream(cfg.seed, "stage2");
    let mut adam = Adam::new(cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = draw_batch(data.len(), cfg.batch_size, &mut rng);
        let batch = data.select(&idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let snr_db = sample_snr(cfg.snr_range_db, &mut rng);
        let (s_hat, _) = transmit_batch(codec, &batch, snr_db, &mut rng)?;
        let (loss, grad) =
            stage2_loss_and_grad(params, &s_hat, &batch_labels, classes, encoder, cfg.similarity_scale)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(params, &grad);
        trace.push(TraceRow { step, loss, snr_db });
    }
    Ok(trace)
}

/// Decode `tokens` through `codec` at `snr_db` with noise from `seed`.
pub fn transmit_tokens(codec: &JsccCodec, tokens: &TokenBatch, snr_db: f64, seed: u64) -> Result<TokenBatch> {
    let mut rng = math::substream(seed, "transmit");
    let (out, _) = transmit_batch(codec, tokens, snr_db, &mut rng)?;
    match tokens.labels() {
        Some(l) => out.with_labels(l.to_vec()),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn identity_similarity_hand_value() {
        let l = contrastive_ce(&logits(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn constant_similarity_gives_log_b() {
        for b in 2..7 {
            let sim = vec![vec![0.37; b]; b];
            let labels: Vec<usize> = (0..b).collect();
            assert!((contrastive_ce(&sim, &labels).unwrap() - (b as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn large_margin_loss_vanishes() {
        let sim = logits(&[&[100.0, 0.0, 0.0], &[0.0, 100.0, 0.0], &[0.0, 0.0, 100.0]]);
        assert!(contrastive_ce(&sim, &[0, 1, 2]).unwrap() < 1e-8);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        assert!(matches!(
            contrastive_ce(&logits(&[&[1.0, 0.0]]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn snr_sampling() {
        let mut rng = math::stream(1);
        assert_eq!(sample_snr((5.0, 5.0), &mut rng), 5.0);
        let a: Vec<f64> = (0..10).map(|_| sample_snr((-10.0, 10.0), &mut math::stream(4))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        for _ in 0..1000 {
            let x = sample_snr((-10.0, 10.0), &mut rng);
            assert!((-10.0..=10.0).contains(&x));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.snr_range_db = (10.0, -10.0);
        assert!(c.validate().is_err());
        c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn jscc_loss_needs_two_rows() {
        let a = TokenBatch::from_rows(vec![vec![1.0, 0.0]], None).unwrap();
        assert!(jscc_loss(&a, &a, 1.0).is_err());
    }

    #[test]
    fn jscc_loss_rejects_zero_rows() {
        let a = TokenBatch::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        let z = TokenBatch::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]], None).unwrap();
        assert!(matches!(jscc_loss(&a, &z, 1.0), Err(Error::ZeroNorm(_))));
    }
}
