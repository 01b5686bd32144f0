//! SNR-adaptive joint source-channel codec for token vectors.
//!
//! Encoder and decoder are stacks of `Dense -> activation -> AF` blocks
//! closed by a final dense layer. The attention-feature (AF) module turns
//! the block output and the channel SNR into a sigmoid mask that rescales
//! the features, which lets a single set of weights serve every SNR.

use serde::Serialize;

use crate::channel::{self, ChannelFrame};
use crate::error::{ensure_dim, Error, Result};
use crate::math::{self, Stream};
use crate::nn::{join, Activation, Dense, Module, Tensor};
use crate::store::{digest_hex, ParameterStore, StoreMeta};
use crate::tokens::TokenBatch;

/// SNR (dB) is multiplied by this before it is appended to AF inputs.
pub const DEFAULT_SNR_INPUT_SCALE: f64 = 1.0 / 20.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JsccConfig {
    /// Token dimension `N`.
    pub input_dim: usize,
    /// Complex channel uses `L`; the encoder emits `2L` reals.
    pub channel_uses: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
    /// AF hidden width is `feature_dim / af_hidden_ratio`, at least `af_min_hidden`.
    pub af_hidden_ratio: usize,
    pub af_min_hidden: usize,
    pub af_enabled: bool,
    pub snr_input_scale: f64,
    pub power: f64,
}

impl JsccConfig {
    /// Two hidden blocks of width `N` on each side.
    pub fn new(input_dim: usize, channel_uses: usize) -> Self {
        Self {
            input_dim,
            channel_uses,
            encoder_widths: vec![input_dim, input_dim],
            decoder_widths: vec![input_dim, input_dim],
            activation: Activation::Relu,
            af_hidden_ratio: 4,
            af_min_hidden: 16,
            af_enabled: true,
            snr_input_scale: DEFAULT_SNR_INPUT_SCALE,
            power: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channel_uses == 0 {
            return Err(Error::InvalidArgument(
                "JSCC input_dim and channel_uses must be positive".into(),
            ));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::InvalidArgument("zero layer width".into()));
        }
        if self.af_hidden_ratio == 0 || self.af_min_hidden == 0 {
            return Err(Error::InvalidArgument("AF hidden sizing must be positive".into()));
        }
        if !(self.power > 0.0) {
            return Err(Error::InvalidArgument("power must be positive".into()));
        }
        Ok(())
    }

    pub fn af_hidden(&self, feature_dim: usize) -> usize {
        (feature_dim / self.af_hidden_ratio).max(self.af_min_hidden)
    }

    /// Stable digest over every field that shapes the parameters or the forward map.
    pub fn hash(&self) -> String {
        digest_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Width and bottleneck of one AF module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AfModuleSpec {
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

/// `mask = sigmoid(W2 act(W1 [f; snr * scale] + b1) + b2)`, `out = f * mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfModule {
    pub fc1: Dense,
    pub fc2: Dense,
    pub activation: Activation,
    pub snr_input_scale: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct AfCache {
    u: Vec<f64>,
    z1: Vec<f64>,
    h: Vec<f64>,
    mask: Vec<f64>,
}

impl AfModule {
    pub fn init(spec: AfModuleSpec, activation: Activation, snr_input_scale: f64, rng: &mut Stream) -> Self {
        let mut fc2 = Dense::init(spec.hidden_dim, spec.feature_dim, rng);
        // start near a uniform half-mask rather than a saturated one
        fc2.weight.data.iter_mut().for_each(|w| *w = math::to_f32_grid(*w * 0.5));
        Self {
            fc1: Dense::init(spec.feature_dim + 1, spec.hidden_dim, rng),
            fc2,
            activation,
            snr_input_scale,
        }
    }

    pub fn zeros(spec: AfModuleSpec, activation: Activation, snr_input_scale: f64) -> Self {
        Self {
            fc1: Dense::zeros(spec.feature_dim + 1, spec.hidden_dim),
            fc2: Dense::zeros(spec.hidden_dim, spec.feature_dim),
            activation,
            snr_input_scale,
        }
    }

    pub fn spec(&self) -> AfModuleSpec {
        AfModuleSpec {
            feature_dim: self.fc2.output_dim(),
            hidden_dim: self.fc2.input_dim(),
        }
    }

    pub fn forward(&self, feature: &[f64], snr_db: f64) -> Result<Vec<f64>> {
        ensure_dim("AF feature", self.spec().feature_dim, feature.len())?;
        Ok(self.forward_cached(feature, snr_db).0)
    }

    /// The sigmoid mask alone.
    pub fn mask(&self, feature: &[f64], snr_db: f64) -> Result<Vec<f64>> {
        ensure_dim("AF feature", self.spec().feature_dim, feature.len())?;
        Ok(self.forward_cached(feature, snr_db).1.mask)
    }

    pub(crate) fn forward_cached(&self, feature: &[f64], snr_db: f64) -> (Vec<f64>, AfCache) {
        let mut u = Vec::with_capacity(feature.len() + 1);
        u.extend_from_slice(feature);
        u.push(snr_db * self.snr_input_scale);
        let z1 = self.fc1.forward(&u);
        let h: Vec<f64> = z1.iter().map(|&z| self.activation.apply(z)).collect();
        let mask: Vec<f64> = self.fc2.forward(&h).into_iter().map(math::sigmoid).collect();
        let out = feature.iter().zip(&mask).map(|(f, m)| f * m).collect();
        (out, AfCache { u, z1, h, mask })
    }

    /// Returns `(dL/dfeature, dL/dsnr_db)` and accumulates parameter gradients.
    pub(crate) fn backward(
        &self,
        feature: &[f64],
        cache: &AfCache,
        dout: &[f64],
        grad: &mut AfModule,
    ) -> (Vec<f64>, f64) {
        let mut dfeature: Vec<f64> = dout.iter().zip(&cache.mask).map(|(g, m)| g * m).collect();
        let dz2: Vec<f64> = dout
            .iter()
            .zip(feature)
            .zip(&cache.mask)
            .map(|((g, f), m)| g * f * m * (1.0 - m))
            .collect();
        let dh = self.fc2.backward(&cache.h, &dz2, &mut grad.fc2);
        let dz1: Vec<f64> = dh
            .iter()
            .zip(&cache.z1)
            .map(|(g, &z)| g * self.activation.derivative(z))
            .collect();
        let du = self.fc1.backward(&cache.u, &dz1, &mut grad.fc1);
        let n = feature.len();
        math::axpy(1.0, &du[..n], &mut dfeature);
        (dfeature, du[n] * self.snr_input_scale)
    }
}

impl Module for AfModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `Dense -> activation -> optional AF`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: Dense,
    pub af: Option<AfModule>,
}

/// Hidden blocks followed by an output dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub out: Dense,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub(crate) struct StackCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    af: Vec<Option<AfCache>>,
    last: Vec<f64>,
}

impl Stack {
    fn build(
        cfg: &JsccConfig,
        input: usize,
        widths: &[usize],
        output: usize,
        out_gain: f64,
        rng: Option<&mut Stream>,
    ) -> Self {
        let mut rng = rng;
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            let spec = AfModuleSpec {
                feature_dim: w,
                hidden_dim: cfg.af_hidden(w),
            };
            let (dense, af) = match rng.as_deref_mut() {
                Some(r) => {
                    let dense = Dense::init(prev, w, r);
                    let af = cfg
                        .af_enabled
                        .then(|| AfModule::init(spec, cfg.activation, cfg.snr_input_scale, r));
                    (dense, af)
                }
                None => (
                    Dense::zeros(prev, w),
                    cfg.af_enabled
                        .then(|| AfModule::zeros(spec, cfg.activation, cfg.snr_input_scale)),
                ),
            };
            blocks.push(Block { dense, af });
            prev = w;
        }
        let out = match rng {
            Some(r) => {
                let mut d = Dense::init(prev, output, r);
                d.weight.data.iter_mut().for_each(|w| *w = math::to_f32_grid(*w * out_gain));
                d
            }
            None => Dense::zeros(prev, output),
        };
        Self {
            blocks,
            out,
            activation: cfg.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map_or(self.out.input_dim(), |b| b.dense.input_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    pub(crate) fn forward_cached(&self, x: &[f64], snr_db: f64) -> (Vec<f64>, StackCache) {
        let n = self.blocks.len();
        let mut cache = StackCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            act: Vec::with_capacity(n),
            af: Vec::with_capacity(n),
            last: Vec::new(),
        };
        let mut a = x.to_vec();
        for block in &self.blocks {
            let z = block.dense.forward(&a);
            let h: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            cache.inputs.push(a);
            cache.pre.push(z);
            a = match &block.af {
                Some(af) => {
                    let (o, c) = af.forward_cached(&h, snr_db);
                    cache.af.push(Some(c));
                    o
                }
                None => {
                    cache.af.push(None);
                    h.clone()
                }
            };
            cache.act.push(h);
        }
        let y = self.out.forward(&a);
        cache.last = a;
        (y, cache)
    }

    pub fn forward(&self, x: &[f64], snr_db: f64) -> Vec<f64> {
        self.forward_cached(x, snr_db).0
    }

    /// Returns `(dL/dx, dL/dsnr)`; parameter gradients accumulate into `grad`.
    pub(crate) fn backward(&self, cache: &StackCache, dy: &[f64], grad: &mut Stack) -> (Vec<f64>, f64) {
        let mut da = self.out.backward(&cache.last, dy, &mut grad.out);
        let mut dsnr = 0.0;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let dh = match (&block.af, &cache.af[i]) {
                (Some(af), Some(c)) => {
                    let gaf = grad.blocks[i].af.as_mut().expect("gradient layout matches");
                    let (dh, ds) = af.backward(&cache.act[i], c, &da, gaf);
                    dsnr += ds;
                    dh
                }
                _ => da,
            };
            let dz: Vec<f64> = dh
                .iter()
                .zip(&cache.pre[i])
                .map(|(g, &z)| g * self.activation.derivative(z))
                .collect();
            da = block
                .dense
                .backward(&cache.inputs[i], &dz, &mut grad.blocks[i].dense);
        }
        (da, dsnr)
    }
}

impl Module for Stack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.dense.visit(&join(&p, "dense"), f);
            if let Some(af) = &b.af {
                af.visit(&join(&p, "af"), f);
            }
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.dense.visit_mut(&join(&p, "dense"), f);
            if let Some(af) = &mut b.af {
                af.visit_mut(&join(&p, "af"), f);
            }
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct JsccCodec {
    pub config: JsccConfig,
    pub encoder: Stack,
    pub decoder: Stack,
}

const ENCODER_OUT_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;
// small so the decoder starts close to the zero map
const DECODER_OUT_GAIN: f64 = 0.05;

/// Everything the backward pass of one item needs.
#[derive(Debug, Clone)]
pub struct ItemTrace {
    enc: StackCache,
    pre_norm: Vec<f64>,
    dec: StackCache,
}

impl JsccCodec {
    pub fn init(config: &JsccConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = math::substream(seed, "jscc-init");
        let n = config.input_dim;
        let two_l = 2 * config.channel_uses;
        let encoder = Stack::build(config, n, &config.encoder_widths, two_l, ENCODER_OUT_GAIN, Some(&mut rng));
        let decoder = Stack::build(config, two_l, &config.decoder_widths, n, DECODER_OUT_GAIN, Some(&mut rng));
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Same layout as [`JsccCodec::init`], every parameter zero. Used for gradients.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let two_l = 2 * c.channel_uses;
        Self {
            config: c.clone(),
            encoder: Stack::build(c, c.input_dim, &c.encoder_widths, two_l, 0.0, None),
            decoder: Stack::build(c, two_l, &c.decoder_widths, c.input_dim, 0.0, None),
        }
    }

    pub fn from_store(config: &JsccConfig, store: &ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = config.hash();
        if store.meta.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: store.meta.config_hash.clone(),
            });
        }
        let mut codec = Self::init(config, 0)?.zeros_like();
        store.load_into(&mut codec)?;
        Ok(codec)
    }

    pub fn to_store(&self, stage: &str, seed: u64) -> ParameterStore {
        ParameterStore::from_module(
            self,
            StoreMeta {
                config_hash: self.config.hash(),
                stage: stage.to_string(),
                seed,
            },
        )
    }

    /// Encoder output before power normalization (`2L` reals).
    pub fn encode_pre_norm(&self, token: &[f64], snr_db: f64) -> Result<Vec<f64>> {
        ensure_dim("JSCC encoder input", self.config.input_dim, token.len())?;
        let x = self.encoder.forward(token, snr_db);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("JSCC encoder activations"));
        }
        Ok(x)
    }

    /// Power-normalized channel input for one token, packed real layout.
    pub fn encode_item(&self, token: &[f64], snr_db: f64) -> Result<Vec<f64>> {
        let x = self.encode_pre_norm(token, snr_db)?;
        channel::power_normalize_reals(&x, self.config.power)
    }

    pub fn encode(&self, tokens: &TokenBatch, snr_db: f64) -> Result<Vec<ChannelFrame>> {
        ensure_dim("JSCC encoder input", self.config.input_dim, tokens.dim())?;
        tokens
            .iter()
            .map(|row| channel::pack_complex(&self.encode_item(row, snr_db)?))
            .collect()
    }

    pub fn decode_item(&self, received: &[f64], snr_db: f64) -> Result<Vec<f64>> {
        ensure_dim("JSCC decoder input", 2 * self.config.channel_uses, received.len())?;
        let y = self.decoder.forward(received, snr_db);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("JSCC decoder output"));
        }
        Ok(y)
    }

    pub fn decode(&self, frames: &[ChannelFrame], snr_db: f64) -> Result<TokenBatch> {
        let rows = frames
            .iter()
            .map(|f| {
                ensure_dim("JSCC frame length", self.config.channel_uses, f.len())?;
                self.decode_item(&channel::unpack_complex(f), snr_db)
            })
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::from_rows(rows, None)
    }

    /// Encode, add the given packed-real noise, decode. Keeps what the
    /// backward pass needs.
    pub fn forward_traced(&self, token: &[f64], snr_db: f64, noise: &[f64]) -> Result<(Vec<f64>, ItemTrace)> {
        ensure_dim("JSCC encoder input", self.config.input_dim, token.len())?;
        ensure_dim("channel noise", 2 * self.config.channel_uses, noise.len())?;
        let (x, enc) = self.encoder.forward_cached(token, snr_db);
        let mut z = channel::power_normalize_reals(&x, self.config.power)?;
        math::axpy(1.0, noise, &mut z);
        let (s_hat, dec) = self.decoder.forward_cached(&z, snr_db);
        if s_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("JSCC forward pass"));
        }
        Ok((
            s_hat,
            ItemTrace {
                enc,
                pre_norm: x,
                dec,
            },
        ))
    }

    /// Backpropagate `dL/ds_hat` through decoder, channel (noise held fixed),
    /// power normalization and encoder. Returns `dL/dtoken`.
    pub fn backward_traced(&self, trace: &ItemTrace, d_shat: &[f64], grad: &mut JsccCodec) -> Vec<f64> {
        let (dz, _) = self.decoder.backward(&trace.dec, d_shat, &mut grad.decoder);
        let dx = channel::power_normalize_backward(&trace.pre_norm, &dz, self.config.power);
        let (dtoken, _) = self.encoder.backward(&trace.enc, &dx, &mut grad.encoder);
        dtoken
    }
}

impl Module for JsccCodec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use crate::tokens::synth_cluster_tokens;

    fn small() -> JsccConfig {
        JsccConfig::new(16, 8)
    }

    #[test]
    fn zero_output_weights_give_half_mask() {
        let mut af = AfModule::init(
            AfModuleSpec {
                feature_dim: 6,
                hidden_dim: 16,
            },
            Activation::Relu,
            DEFAULT_SNR_INPUT_SCALE,
            &mut math::stream(1),
        );
        nn::zero_grad(&mut af.fc2);
        let f = [1.0, -2.0, 0.5, 0.0, 3.0, -0.25];
        let out = af.forward(&f, 7.0).unwrap();
        for (o, x) in out.iter().zip(f) {
            assert_eq!(*o, x / 2.0);
        }
    }

    #[test]
    fn af_rejects_wrong_width() {
        let af = AfModule::zeros(
            AfModuleSpec {
                feature_dim: 4,
                hidden_dim: 2,
            },
            Activation::Relu,
            DEFAULT_SNR_INPUT_SCALE,
        );
        assert!(af.forward(&[1.0; 5], 0.0).is_err());
    }

    #[test]
    fn hidden_width_rule() {
        let c = JsccConfig::new(768, 384);
        assert_eq!(c.af_hidden(768), 192);
        assert_eq!(c.af_hidden(32), 16);
    }

    #[test]
    fn shapes_and_power() {
        let codec = JsccCodec::init(&small(), 3).unwrap();
        let set = synth_cluster_tokens(4, 2, 16, 0.2, 1).unwrap();
        let frames = codec.encode(&set.batch, 5.0).unwrap();
        assert_eq!(frames.len(), 8);
        for f in &frames {
            assert_eq!(f.len(), 8);
            assert!((f.power() - 1.0).abs() < 1e-9);
        }
        let decoded = codec.decode(&frames, 5.0).unwrap();
        assert_eq!(decoded.dim(), 16);
    }

    #[test]
    fn encoder_rejects_wrong_token_dim() {
        let codec = JsccCodec::init(&small(), 3).unwrap();
        assert!(codec.encode_item(&[0.1; 15], 0.0).is_err());
        assert!(codec.decode_item(&[0.1; 15], 0.0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_store_roundtrips() {
        let a = JsccCodec::init(&small(), 11).unwrap();
        let b = JsccCodec::init(&small(), 11).unwrap();
        assert_eq!(a, b);
        let store = a.to_store("init", 11);
        let back = JsccCodec::from_store(&small(), &store).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn store_with_other_config_is_rejected() {
        let a = JsccCodec::init(&small(), 11).unwrap();
        let store = a.to_store("init", 11);
        let mut other = small();
        other.af_min_hidden = 8;
        assert!(matches!(
            JsccCodec::from_store(&other, &store),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn no_af_variant_has_no_af_parameters() {
        let mut cfg = small();
        cfg.af_enabled = false;
        let codec = JsccCodec::init(&cfg, 1).unwrap();
        let mut names = Vec::new();
        codec.visit("", &mut |n, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.contains(".af.")));
        assert!(codec.encode_item(&[0.3; 16], 0.0).is_ok());
    }
}
