//! Central finite-difference checks of the hand-written backward passes.

use serde::Serialize;

use crate::channel;
use crate::error::{Error, Result};
use crate::jscc::{AfModule, AfModuleSpec, JsccCodec, JsccConfig, DEFAULT_SNR_INPUT_SCALE};
use crate::math;
use crate::nn::{self, Activation, Dense};
use crate::tapl::{
    self, random_classnames, MetaNet, PromptContext, TaplParams, TextEncoder, ToyTextEncoder, ToyTextKind,
};
use crate::tokens::{synth_cluster_tokens, TokenBatch};
use crate::training::{stage1_loss_and_grad, stage2_loss_and_grad};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Differentiable components with a registered check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Linear,
    AfModule,
    MetaNet,
    TextPath,
    Stage1Loss,
    Stage2Loss,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        GradTarget::Linear,
        GradTarget::AfModule,
        GradTarget::MetaNet,
        GradTarget::TextPath,
        GradTarget::Stage1Loss,
        GradTarget::Stage2Loss,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            GradTarget::Linear => "linear",
            GradTarget::AfModule => "af_module",
            GradTarget::MetaNet => "meta_net",
            GradTarget::TextPath => "text_path",
            GradTarget::Stage1Loss => "stage1_loss",
            GradTarget::Stage2Loss => "stage2_loss",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.tag() == tag)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub dim: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare `analytic` with central differences of `f` around `x`.
pub fn max_relative_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * step)));
    }
    worst
}

fn random_vec(n: usize, rng: &mut math::Stream) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Run the registered check for `target` at feature width `dim`.
pub fn grad_check(target: GradTarget, dim: usize, seed: u64) -> Result<GradCheckReport> {
    if dim < 2 {
        return Err(Error::InvalidArgument("gradient check needs dim >= 2".into()));
    }
    let mut rng = math::substream(seed, "gradcheck");
    let (checked, max_rel_error) = match target {
        GradTarget::Linear => check_linear(dim, &mut rng),
        GradTarget::AfModule => check_af(dim, &mut rng),
        GradTarget::MetaNet => check_meta(dim, &mut rng),
        GradTarget::TextPath => check_text_path(dim, seed)?,
        GradTarget::Stage1Loss => check_stage1(dim, seed)?,
        GradTarget::Stage2Loss => check_stage2(dim, seed)?,
    };
    Ok(GradCheckReport {
        target,
        dim,
        checked,
        max_rel_error,
    })
}

fn check_linear(dim: usize, rng: &mut math::Stream) -> (usize, f64) {
    let layer = Dense::init(dim, dim, rng);
    let x = random_vec(dim, rng);
    let w = random_vec(dim, rng);
    let mut g = Dense::zeros(dim, dim);
    let dx = layer.backward(&x, &w, &mut g);
    let mut fx = |v: &[f64]| math::dot(&layer.forward(v), &w);
    let e_in = max_relative_error(&mut fx, &x, &dx, DEFAULT_STEP);
    let flat = nn::flatten(&layer);
    let mut fp = |p: &[f64]| {
        let mut l = layer.clone();
        nn::unflatten(&mut l, p);
        math::dot(&l.forward(&x), &w)
    };
    let e_par = max_relative_error(&mut fp, &flat, &nn::flatten(&g), DEFAULT_STEP);
    (dim + flat.len(), e_in.max(e_par))
}

fn check_af(dim: usize, rng: &mut math::Stream) -> (usize, f64) {
    let spec = AfModuleSpec {
        feature_dim: dim,
        hidden_dim: (dim / 4).max(16),
    };
    let af = AfModule::init(spec, Activation::Relu, DEFAULT_SNR_INPUT_SCALE, rng);
    let feature = random_vec(dim, rng);
    let snr = 3.7;
    let w = random_vec(dim, rng);
    let (_, cache) = af.forward_cached(&feature, snr);
    let mut g = AfModule::zeros(spec, Activation::Relu, DEFAULT_SNR_INPUT_SCALE);
    let (df, dsnr) = af.backward(&feature, &cache, &w, &mut g);

    // inputs: feature followed by the SNR
    let mut x = feature.clone();
    x.push(snr);
    let mut analytic = df;
    analytic.push(dsnr);
    let mut fx = |v: &[f64]| math::dot(&af.forward_cached(&v[..dim], v[dim]).0, &w);
    let e_in = max_relative_error(&mut fx, &x, &analytic, DEFAULT_STEP);

    let flat = nn::flatten(&af);
    let mut fp = |p: &[f64]| {
        let mut a = af.clone();
        nn::unflatten(&mut a, p);
        math::dot(&a.forward_cached(&feature, snr).0, &w)
    };
    let e_par = max_relative_error(&mut fp, &flat, &nn::flatten(&g), DEFAULT_STEP);
    (x.len() + flat.len(), e_in.max(e_par))
}

fn check_meta(dim: usize, rng: &mut math::Stream) -> (usize, f64) {
    use rand::Rng;
    let embed = (dim / 2).max(2);
    let mut meta = MetaNet::init(dim, embed, rng.random());
    // keep the hidden units away from the ReLU kink
    meta.fc1.bias.data.iter_mut().for_each(|b| *b = 0.1);
    let s = random_vec(dim, rng);
    let w = random_vec(embed, rng);
    let (_, cache) = meta.forward_cached(&s);
    let mut g = MetaNet::zeros(dim, embed);
    let ds = meta.backward(&s, &cache, &w, &mut g);
    let mut fx = |v: &[f64]| math::dot(&meta.forward_cached(v).0, &w);
    let e_in = max_relative_error(&mut fx, &s, &ds, DEFAULT_STEP);
    let flat = nn::flatten(&meta);
    let mut fp = |p: &[f64]| {
        let mut m = meta.clone();
        nn::unflatten(&mut m, p);
        math::dot(&m.forward_cached(&s).0, &w)
    };
    let e_par = max_relative_error(&mut fp, &flat, &nn::flatten(&g), DEFAULT_STEP);
    (dim + flat.len(), e_in.max(e_par))
}

/// Scalar `sum_k w_k . T([(pi + e_1)..(pi + e_M), c_k])` with respect to
/// `pi` and the context, through both toy text encoder heads.
fn check_text_path(dim: usize, seed: u64) -> Result<(usize, f64)> {
    let embed = (dim / 2).max(2);
    let mut rng = math::substream(seed, "gradcheck-text");
    let classes = random_classnames(3, 2, embed, &mut rng);
    let ctx = PromptContext::gaussian(4, embed, 0.5, seed)?;
    let pi = random_vec(embed, &mut rng);
    let weights: Vec<Vec<f64>> = (0..classes.len()).map(|_| random_vec(dim, &mut rng)).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for kind in [ToyTextKind::Affine, ToyTextKind::Mlp] {
        let enc = ToyTextEncoder::new(embed, dim, kind, seed)?;
        let m = ctx.len();
        // analytic gradient w.r.t. [pi, context...]
        let mut analytic = vec![0.0; embed * (m + 1)];
        for (class, w) in classes.iter().zip(&weights) {
            let seq = tapl::prompt_sequence(Some(&pi), &ctx, class);
            let refs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
            let dseq = enc.backward(&refs, w)?;
            for (pos, g) in dseq.iter().take(m).enumerate() {
                math::axpy(1.0, g, &mut analytic[..embed]);
                math::axpy(1.0, g, &mut analytic[embed * (pos + 1)..embed * (pos + 2)]);
            }
        }
        let mut x = pi.clone();
        x.extend_from_slice(&ctx.context.data);
        let mut f = |v: &[f64]| {
            let c = PromptContext::from_vectors(&v[embed..].chunks(embed).map(<[f64]>::to_vec).collect::<Vec<_>>())
                .expect("valid context");
            let t = tapl::build_text_features(&[v[..embed].to_vec()], &c, &classes, &enc).expect("valid prompt");
            (0..classes.len()).map(|k| math::dot(t.get(0, k), &weights[k])).sum()
        };
        worst = worst.max(max_relative_error(&mut f, &x, &analytic, DEFAULT_STEP));
        checked += x.len();
    }
    Ok((checked, worst))
}

fn stage1_fixture(dim: usize, seed: u64) -> Result<(JsccCodec, TokenBatch, Vec<Vec<f64>>, f64)> {
    let l = (dim / 2).max(1);
    let cfg = JsccConfig::new(dim, l);
    let codec = JsccCodec::init(&cfg, seed)?;
    let tokens = synth_cluster_tokens(2, 2, dim, 0.3, seed)?.batch;
    let snr = 2.5;
    let mut rng = math::substream(seed, "gradcheck-noise");
    let sigma2 = channel::snr_to_noise_variance(snr, 1.0);
    let noise = (0..tokens.len())
        .map(|_| channel::complex_noise(l, sigma2, &mut rng))
        .collect();
    Ok((codec, tokens, noise, snr))
}

/// Full encode, power normalization, fixed-noise channel and decode, under
/// the symmetric token loss at unit similarity scale.
fn check_stage1(dim: usize, seed: u64) -> Result<(usize, f64)> {
    let (codec, tokens, noise, snr) = stage1_fixture(dim, seed)?;
    let scale = 1.0;
    let (_, grad) = stage1_loss_and_grad(&codec, &tokens, snr, &noise, scale)?;
    let flat = nn::flatten(&codec);
    let mut f = |p: &[f64]| {
        let mut c = codec.clone();
        nn::unflatten(&mut c, p);
        stage1_loss_and_grad(&c, &tokens, snr, &noise, scale)
            .expect("finite forward")
            .0
    };
    Ok((flat.len(), max_relative_error(&mut f, &flat, &nn::flatten(&grad), DEFAULT_STEP)))
}

/// Meta-network and context gradients of the symmetric image-text loss.
fn check_stage2(dim: usize, seed: u64) -> Result<(usize, f64)> {
    let embed = (dim / 2).max(2);
    let mut rng = math::substream(seed, "gradcheck-stage2");
    let classes = random_classnames(4, 1, embed, &mut rng);
    let enc = ToyTextEncoder::new(embed, dim, ToyTextKind::Affine, seed)?;
    let mut meta = MetaNet::init(dim, embed, seed);
    meta.fc1.bias.data.iter_mut().for_each(|b| *b = 0.1);
    let params = TaplParams {
        meta,
        context: PromptContext::gaussian(4, embed, 0.5, seed)?,
    };
    let set = synth_cluster_tokens(4, 1, dim, 0.2, seed)?;
    let labels = set.batch.labels().expect("labelled").to_vec();
    let scale = 1.0;
    let (_, grad) = stage2_loss_and_grad(&params, &set.batch, &labels, &classes, &enc, scale)?;
    let flat = nn::flatten(&params);
    let mut f = |p: &[f64]| {
        let mut q = params.clone();
        nn::unflatten(&mut q, p);
        stage2_loss_and_grad(&q, &set.batch, &labels, &classes, &enc, scale)
            .expect("finite forward")
            .0
    };
    Ok((flat.len(), max_relative_error(&mut f, &flat, &nn::flatten(&grad), DEFAULT_STEP)))
}
