//! Synthetic image-text world standing in for a pretrained vision-language
//! encoder pair.
//!
//! A frozen toy text encoder defines the text side. Each class gets a random
//! classname embedding; its image-token cluster center is the normalized
//! text feature of the bare classname, perturbed by a per-class
//! misalignment. The stock context phrase adds a shared offset (a modality
//! gap) to every prompt feature, so fixed prompts are good but not ideal,
//! and learned context has something to correct.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::{self, Stream};
use crate::tapl::{ClassnameEmbedding, PromptContext, TextEncoder, ToyTextEncoder, ToyTextKind};
use crate::tokens::{random_unit, sample_around, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldConfig {
    /// Token dimension `N`.
    pub token_dim: usize,
    /// Text embedding dimension `D`.
    pub embed_dim: usize,
    /// Context length `M`.
    pub context_len: usize,
    /// Embedding vectors per classname.
    pub classname_tokens: usize,
    /// Within-class Gaussian spread of image tokens.
    pub spread: f64,
    /// Norm of the stock-phrase offset relative to a typical class feature.
    pub text_gap: f64,
    /// Norm of the per-class image/text misalignment (centers are unit norm).
    pub misalignment: f64,
    pub text_kind: ToyTextKind,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            embed_dim: 32,
            context_len: 4,
            classname_tokens: 1,
            spread: 0.01,
            text_gap: 1.0,
            misalignment: 2.5,
            text_kind: ToyTextKind::Affine,
            seed: 0,
        }
    }
}

/// Statistical family a class set is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Family {
    /// Offset added to every classname embedding entry before encoding.
    pub name_shift: f64,
    /// Multiplier on the world's within-class spread.
    pub spread_factor: f64,
}

impl Family {
    pub const BASE: Family = Family {
        name_shift: 0.0,
        spread_factor: 1.0,
    };
    /// Shifted classname statistics and looser clusters.
    pub const SHIFTED: Family = Family {
        name_shift: 0.5,
        spread_factor: 1.5,
    };
}

/// A set of classes: their names, text-side embeddings and image-side centers.
#[derive(Debug, Clone)]
pub struct ClassDomain {
    pub classes: Vec<ClassnameEmbedding>,
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

impl ClassDomain {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    /// `per_class` labelled tokens per class drawn from `seed`.
    pub fn sample(&self, per_class: usize, seed: u64) -> Result<TokenBatch> {
        let mut rng = math::substream(seed, "domain-sample");
        sample_around(&self.centers, per_class, self.spread, &mut rng)
    }

    /// Rejects `other` if it shares any class name with `self`.
    pub fn ensure_disjoint(&self, other: &ClassDomain) -> Result<()> {
        let mine = self.names();
        let overlap: Vec<String> = other
            .names()
            .into_iter()
            .filter(|n| mine.contains(n))
            .map(str::to_string)
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(Error::ClassOverlap(overlap))
        }
    }
}

pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub text_encoder: ToyTextEncoder,
    /// Embeddings of the stock context phrase.
    pub phrase: PromptContext,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.token_dim < 2 || config.embed_dim == 0 || config.context_len == 0 || config.classname_tokens == 0 {
            return Err(Error::InvalidArgument(format!("invalid world config {config:?}")));
        }
        if !(config.spread >= 0.0 && config.text_gap >= 0.0 && config.misalignment >= 0.0) {
            return Err(Error::InvalidArgument("world magnitudes must be non-negative".into()));
        }
        let text_encoder = ToyTextEncoder::new(config.embed_dim, config.token_dim, config.text_kind, config.seed)?;
        let mut rng = math::substream(config.seed, "world-phrase");

        // typical norm of a bare class feature
        let probe: Vec<f64> = (0..64)
            .map(|_| {
                let c = gaussian(config.embed_dim, 0.0, &mut rng);
                text_encoder.encode(&[&c]).map(|t| math::norm(&t))
            })
            .collect::<Result<_>>()?;
        let typical = probe.iter().sum::<f64>() / probe.len() as f64;

        // phrase vectors share one direction so their sum carries the gap
        let dir = random_unit(config.embed_dim, &mut rng);
        let base: Vec<Vec<f64>> = (0..config.context_len)
            .map(|_| {
                let jitter = gaussian(config.embed_dim, 0.0, &mut rng);
                dir.iter().zip(&jitter).map(|(d, j)| d + 0.1 * j).collect()
            })
            .collect();
        let sum: Vec<f64> = (0..config.embed_dim)
            .map(|i| base.iter().map(|v| v[i]).sum())
            .collect();
        let zero = vec![0.0; config.embed_dim];
        let offset = sub(&text_encoder.encode(&[&sum])?, &text_encoder.encode(&[&zero])?);
        let scale = if config.text_gap == 0.0 { 0.0 } else { config.text_gap * typical / math::norm(&offset) };
        let phrase: Vec<Vec<f64>> = base
            .iter()
            .map(|v| v.iter().map(|x| math::to_f32_grid(x * scale)).collect())
            .collect();
        Ok(Self {
            phrase: PromptContext::from_vectors(&phrase)?,
            text_encoder,
            config,
        })
    }

    /// `count` fresh classes named `{prefix}{k}`, drawn from the stream `tag`.
    pub fn domain(&self, prefix: &str, count: usize, family: Family, tag: &str) -> Result<ClassDomain> {
        if count < 2 {
            return Err(Error::InvalidArgument(format!("a domain needs at least 2 classes, got {count}")));
        }
        let mut rng = math::substream(self.config.seed, &format!("domain-{tag}"));
        let mut classes = Vec::with_capacity(count);
        let mut centers = Vec::with_capacity(count);
        for k in 0..count {
            let tokens: Vec<Vec<f64>> = (0..self.config.classname_tokens)
                .map(|_| {
                    gaussian(self.config.embed_dim, family.name_shift, &mut rng)
                        .into_iter()
                        .map(math::to_f32_grid)
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = tokens.iter().map(Vec::as_slice).collect();
            let feature = self.text_encoder.encode(&refs)?;
            let n = math::norm(&feature);
            let noise = random_unit(self.config.token_dim, &mut rng);
            let raw: Vec<f64> = feature
                .iter()
                .zip(&noise)
                .map(|(f, r)| f / n + self.config.misalignment * r)
                .collect();
            let rn = math::norm(&raw);
            centers.push(raw.into_iter().map(|x| math::to_f32_grid(x / rn)).collect());
            classes.push(ClassnameEmbedding {
                name: format!("{prefix}{k}"),
                tokens,
            });
        }
        Ok(ClassDomain {
            classes,
            centers,
            spread: self.config.spread * family.spread_factor,
        })
    }
}

fn gaussian(n: usize, shift: f64, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
