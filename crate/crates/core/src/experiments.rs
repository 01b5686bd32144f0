//! Desk-scale experiment protocol: method variants, SNR sweeps, ablations,
//! cross-distribution evaluation, CSV reports and SVG plots.
//!
//! Every experiment runs on a [`SyntheticWorld`]. Models are trained on
//! one class domain and evaluated on held-out samples of the same classes,
//! or zero-shot on a disjoint domain from a shifted family.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelFrame};
use crate::error::{Error, Result};
use crate::jscc::{JsccCodec, JsccConfig};
use crate::math;
use crate::nn::Tensor;
use crate::store::{self, digest_hex, ParameterStore, StoreMeta};
use crate::tapl::{MetaNet, PromptContext, PromptMode, TaplParams, TaskPerformer, TextEncoder};
use crate::tokens::{ImageSpec, TokenBatch};
use crate::training::{self, TraceRow, TrainConfig};
use crate::world::{ClassDomain, Family, SyntheticWorld, WorldConfig};

pub const SWEEP_SNRS_DB: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adaptive codec plus learned prompts.
    Semclip,
    /// Adaptive codec, fixed prompts.
    SemclipNoTapl,
    /// Codec without AF modules trained at one SNR, fixed prompts.
    SemclipNoAf,
    /// Uncoded analog transmission of the token, fixed prompts.
    ClipFtDirect,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Semclip,
        Method::SemclipNoTapl,
        Method::SemclipNoAf,
        Method::ClipFtDirect,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Semclip => "semclip",
            Method::SemclipNoTapl => "semclip_no_tapl",
            Method::SemclipNoAf => "semclip_no_af",
            Method::ClipFtDirect => "clip_ft_direct",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {tag:?}")))
    }

    pub fn needs_training(self) -> bool {
        self != Method::ClipFtDirect
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1Accuracy,
    RecallAt1,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Top1Accuracy, Metric::RecallAt1];

    pub fn tag(self) -> &'static str {
        match self {
            Metric::Top1Accuracy => "top1_accuracy",
            Metric::RecallAt1 => "recall_at_1",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {tag:?}")))
    }
}

/// Data sizes and training schedules shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeskSetup {
    pub world: WorldConfig,
    pub train_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Classes in the shifted domain used for cross-distribution runs.
    pub cross_classes: usize,
    pub channel_uses: usize,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Fixed training SNR of the codec without AF modules.
    pub no_af_snr_db: f64,
    pub prompt_mode: PromptMode,
    /// Image geometry the tokens stand for, used for bandwidth ratios.
    pub image: ImageSpec,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train_classes: 16,
            train_per_class: 64,
            eval_per_class: 32,
            cross_classes: 16,
            channel_uses: 32,
            stage1: TrainConfig {
                steps: 3000,
                similarity_scale: 4.0,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                steps: 500,
                batch_size: 32,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            no_af_snr_db: 0.0,
            prompt_mode: PromptMode::PerSample,
            image: ImageSpec {
                height: 336,
                width: 336,
                channels: 3,
            },
        }
    }
}

impl DeskSetup {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.train_classes < 2 || self.cross_classes < 2 {
            return Err(Error::InvalidArgument("domains need at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 || self.channel_uses == 0 {
            return Err(Error::InvalidArgument("sample counts and L must be positive".into()));
        }
        Ok(())
    }

    pub fn jscc(&self) -> JsccConfig {
        JsccConfig::new(self.world.token_dim, self.channel_uses)
    }

    pub fn jscc_no_af(&self) -> JsccConfig {
        JsccConfig {
            af_enabled: false,
            ..self.jscc()
        }
    }

    pub fn hash(&self) -> String {
        digest_hex(serde_json::to_string(self).expect("setup serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub snrs_db: Vec<f64>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
    pub setup: DeskSetup,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            snrs_db: SWEEP_SNRS_DB.to_vec(),
            seeds: vec![0],
            metrics: vec![Metric::Top1Accuracy],
            setup: DeskSetup::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.snrs_db.is_empty() || self.metrics.is_empty() {
            return Err(Error::InvalidArgument("methods, SNRs and metrics must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.snrs_db.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("SNR values must not be NaN".into()));
        }
        self.setup.validate()
    }

    pub fn hash(&self) -> String {
        digest_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// The world, its training domain and the labelled token sets drawn from it.
pub struct DeskData {
    pub world: SyntheticWorld,
    pub train: ClassDomain,
    pub train_tokens: TokenBatch,
    /// Fresh samples of the training classes.
    pub eval_tokens: TokenBatch,
}

impl DeskData {
    pub fn build(setup: &DeskSetup) -> Result<Self> {
        let world = SyntheticWorld::new(setup.world.clone())?;
        let train = world.domain("base", setup.train_classes, Family::BASE, "train")?;
        let seed = setup.world.seed;
        let train_tokens = train.sample(setup.train_per_class, seed ^ 0x7472)?;
        let eval_tokens = train.sample(setup.eval_per_class, seed ^ 0x6576)?;
        Ok(Self {
            world,
            train,
            train_tokens,
            eval_tokens,
        })
    }

    /// Disjoint classes from the shifted family.
    pub fn shifted_domain(&self, setup: &DeskSetup) -> Result<ClassDomain> {
        let d = self
            .world
            .domain("shifted", setup.cross_classes, Family::SHIFTED, "cross")?;
        self.train.ensure_disjoint(&d)?;
        Ok(d)
    }
}

/// Everything trained for one seed.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub seed: u64,
    pub codec: JsccCodec,
    pub codec_no_af: JsccCodec,
    pub tapl: TaplParams,
    pub stage1_trace: Vec<TraceRow>,
    pub no_af_trace: Vec<TraceRow>,
    pub stage2_trace: Vec<TraceRow>,
}

fn derived_seed(seed: u64, tag: &str) -> u64 {
    math::substream(seed, tag).random()
}

fn stage_config(base: &TrainConfig, seed: u64, tag: &str) -> TrainConfig {
    TrainConfig {
        seed: derived_seed(seed, tag),
        ..base.clone()
    }
}

/// Stage 1 for both codecs, then stage 2 on the adaptive codec.
pub fn train_models(data: &DeskData, setup: &DeskSetup, seed: u64) -> Result<TrainedModels> {
    setup.validate()?;
    let mut codec = JsccCodec::init(&setup.jscc(), derived_seed(seed, "codec-init"))?;
    let stage1_trace = training::train_stage1(
        &data.train_tokens,
        &mut codec,
        &stage_config(&setup.stage1, seed, "stage1"),
    )?;

    let mut codec_no_af = JsccCodec::init(&setup.jscc_no_af(), derived_seed(seed, "codec-no-af-init"))?;
    let no_af_cfg = TrainConfig {
        snr_range_db: (setup.no_af_snr_db, setup.no_af_snr_db),
        ..stage_config(&setup.stage1, seed, "stage1-no-af")
    };
    let no_af_trace = training::train_stage1(&data.train_tokens, &mut codec_no_af, &no_af_cfg)?;

    let world = &data.world;
    let mut tapl = TaplParams {
        meta: MetaNet::init(
            setup.world.token_dim,
            setup.world.embed_dim,
            derived_seed(seed, "meta-init"),
        ),
        context: world.phrase.clone(),
    };
    let stage2_trace = training::train_stage2(
        &data.train_tokens,
        &codec,
        &mut tapl,
        &data.train.classes,
        &world.text_encoder,
        &stage_config(&setup.stage2, seed, "stage2"),
    )?;
    Ok(TrainedModels {
        seed,
        codec,
        codec_no_af,
        tapl,
        stage1_trace,
        no_af_trace,
        stage2_trace,
    })
}

const CODEC_FILE: &str = "codec.ckpt";
const CODEC_NO_AF_FILE: &str = "codec_no_af.ckpt";
const TAPL_FILE: &str = "tapl.ckpt";

impl TrainedModels {
    /// Writes the three checkpoints into `dir`; returns `(file, content hash)`.
    pub fn save(&self, setup: &DeskSetup, dir: &Path) -> Result<Vec<(String, String)>> {
        fs::create_dir_all(dir)?;
        let tapl = ParameterStore::from_module(
            &self.tapl,
            StoreMeta {
                config_hash: setup.hash(),
                stage: "tapl".into(),
                seed: self.seed,
            },
        );
        let stores = [
            (CODEC_FILE, self.codec.to_store("jscc", self.seed)),
            (CODEC_NO_AF_FILE, self.codec_no_af.to_store("jscc_no_af", self.seed)),
            (TAPL_FILE, tapl),
        ];
        let mut out = Vec::with_capacity(stores.len());
        for (name, s) in &stores {
            store::save_checkpoint(s, &dir.join(name))?;
            out.push((name.to_string(), s.hash()?));
        }
        Ok(out)
    }

    pub fn load(setup: &DeskSetup, dir: &Path) -> Result<Self> {
        let read = |name: &str, hash: &str| {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path.display().to_string()));
            }
            store::load_checkpoint(&path, Some(hash))
        };
        let jscc = setup.jscc();
        let jscc_no_af = setup.jscc_no_af();
        let codec = JsccCodec::from_store(&jscc, &read(CODEC_FILE, &jscc.hash())?)?;
        let codec_no_af = JsccCodec::from_store(&jscc_no_af, &read(CODEC_NO_AF_FILE, &jscc_no_af.hash())?)?;
        let tapl_store = read(TAPL_FILE, &setup.hash())?;
        let (n, d, m) = (setup.world.token_dim, setup.world.embed_dim, setup.world.context_len);
        let mut tapl = TaplParams {
            meta: MetaNet::zeros(n, d),
            context: PromptContext {
                context: Tensor::zeros(&[m, d]),
            },
        };
        tapl_store.load_into(&mut tapl)?;
        Ok(Self {
            seed: tapl_store.meta.seed,
            codec,
            codec_no_af,
            tapl,
            stage1_trace: Vec::new(),
            no_af_trace: Vec::new(),
            stage2_trace: Vec::new(),
        })
    }
}

/// Uncoded analog transmission: each token is packed into `ceil(N/2)`
/// complex symbols (zero-padded if `N` is odd), power-normalized, sent over
/// AWGN and unpacked. Labels are carried over.
pub fn baseline_clip_ft(tokens: &TokenBatch, snr_db: f64, power: f64, seed: u64) -> Result<TokenBatch> {
    let mut rng = math::substream(seed, "clip-ft");
    let n = tokens.dim();
    let sigma2 = channel::snr_to_noise_variance(snr_db, power);
    let rows = tokens
        .iter()
        .map(|s| {
            let mut x = s.to_vec();
            if n % 2 == 1 {
                x.push(0.0);
            }
            let frame = channel::power_normalize(&channel::pack_complex(&x)?, power)?;
            let noise = channel::complex_noise(frame.len(), sigma2, &mut rng);
            let received = add_noise(&frame, &noise);
            let mut y = channel::unpack_complex(&received);
            y.truncate(n);
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::from_rows(rows, tokens.labels().map(<[usize]>::to_vec))
}

fn add_noise(frame: &ChannelFrame, noise: &[f64]) -> ChannelFrame {
    let l = frame.len();
    ChannelFrame::new(
        frame
            .symbols()
            .iter()
            .enumerate()
            .map(|(i, z)| z + num_complex::Complex64::new(noise[i], noise[l + i]))
            .collect(),
    )
}

/// Tokens as seen by the receiver of `method`.
pub fn received_tokens(
    method: Method,
    models: Option<&TrainedModels>,
    tokens: &TokenBatch,
    snr_db: f64,
    seed: u64,
) -> Result<TokenBatch> {
    let seed = derived_seed(seed, "eval-noise");
    match method {
        Method::ClipFtDirect => baseline_clip_ft(tokens, snr_db, 1.0, seed),
        _ => {
            let m = require(models, method)?;
            let codec = if method == Method::SemclipNoAf { &m.codec_no_af } else { &m.codec };
            training::transmit_tokens(codec, tokens, snr_db, seed)
        }
    }
}

fn require(models: Option<&TrainedModels>, method: Method) -> Result<&TrainedModels> {
    models.ok_or_else(|| Error::MissingCheckpoint(format!("no trained models for {}", method.tag())))
}

/// Receiver-side prompt setup of `method`.
pub fn performer<'a>(
    method: Method,
    models: Option<&'a TrainedModels>,
    world: &'a SyntheticWorld,
    domain: &'a ClassDomain,
    mode: PromptMode,
) -> Result<TaskPerformer<'a, dyn TextEncoder + 'a>> {
    let (context, meta, mode) = match method {
        Method::Semclip => {
            let m = require(models, method)?;
            (&m.tapl.context, Some(&m.tapl.meta), mode)
        }
        _ => (&world.phrase, None, PromptMode::Frozen),
    };
    Ok(TaskPerformer {
        encoder: &world.text_encoder as &dyn TextEncoder,
        classes: &domain.classes,
        context,
        meta,
        mode,
    })
}

fn labels_of(data: &TokenBatch) -> Result<&[usize]> {
    data.labels()
        .ok_or_else(|| Error::InvalidArgument("evaluation data must be labelled".into()))
}

/// Fraction of predictions equal to the label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::DimMismatch {
            context: "predictions",
            expected: labels.len(),
            actual: pred.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

pub struct EvalContext<'a> {
    pub world: &'a SyntheticWorld,
    pub domain: &'a ClassDomain,
    pub mode: PromptMode,
}

/// Top-1 zero-shot accuracy of `method` on `data` at `snr_db`.
pub fn eval_classification(
    method: Method,
    models: Option<&TrainedModels>,
    ctx: &EvalContext,
    data: &TokenBatch,
    snr_db: f64,
    seed: u64,
) -> Result<f64> {
    let labels = labels_of(data)?;
    data.check_labels(ctx.domain.len())?;
    let received = received_tokens(method, models, data, snr_db, seed)?;
    let p = performer(method, models, ctx.world, ctx.domain, ctx.mode)?;
    accuracy(&p.classify(&received)?, labels)
}

/// Text-to-image recall@1: each class prompt queries the received gallery;
/// a hit is a top-ranked item of that class. Only classes present in `data`
/// are queried.
pub fn eval_retrieval(
    method: Method,
    models: Option<&TrainedModels>,
    ctx: &EvalContext,
    data: &TokenBatch,
    snr_db: f64,
    seed: u64,
) -> Result<f64> {
    let labels = labels_of(data)?;
    data.check_labels(ctx.domain.len())?;
    let received = received_tokens(method, models, data, snr_db, seed)?;
    let p = performer(method, models, ctx.world, ctx.domain, ctx.mode)?;
    let rankings = p.retrieve_by_class(&received)?;
    let mut queries = 0usize;
    let mut hits = 0usize;
    for (k, ranking) in rankings.iter().enumerate() {
        if !labels.contains(&k) {
            continue;
        }
        queries += 1;
        if labels[ranking[0]] == k {
            hits += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Empty("retrieval queries"));
    }
    Ok(hits as f64 / queries as f64)
}

pub fn eval_metric(
    metric: Metric,
    method: Method,
    models: Option<&TrainedModels>,
    ctx: &EvalContext,
    data: &TokenBatch,
    snr_db: f64,
    seed: u64,
) -> Result<f64> {
    match metric {
        Metric::Top1Accuracy => eval_classification(method, models, ctx, data, snr_db, seed),
        Metric::RecallAt1 => eval_retrieval(method, models, ctx, data, snr_db, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub snr_db: f64,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// A cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub method: Method,
    pub snr_db: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub rows: Vec<ReportRow>,
    pub failed: Vec<FailedCell>,
    pub models: Vec<TrainedModels>,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (a.method, a.metric, a.seed)
            .cmp(&(b.method, b.metric, b.seed))
            .then(a.snr_db.total_cmp(&b.snr_db))
    });
}

/// Evaluates every `(method, snr, seed, metric)` cell on `data` using
/// already-trained models (one per seed, or none if only the baseline runs).
pub fn evaluate_cells(
    cfg: &ExperimentConfig,
    models: &[Option<&TrainedModels>],
    ctx: &EvalContext,
    data: &TokenBatch,
) -> SweepOutcome {
    let hash = cfg.hash();
    let mut out = SweepOutcome::default();
    for (&seed, m) in cfg.seeds.iter().zip(models) {
        for &method in &cfg.methods {
            for &snr_db in &cfg.snrs_db {
                for &metric in &cfg.metrics {
                    match eval_metric(metric, method, *m, ctx, data, snr_db, seed) {
                        Ok(value) => out.rows.push(ReportRow {
                            method,
                            snr_db,
                            metric,
                            value,
                            seed,
                            config_hash: hash.clone(),
                        }),
                        Err(e) => out.failed.push(FailedCell {
                            method,
                            snr_db,
                            seed,
                            error: e.to_string(),
                        }),
                    }
                }
            }
        }
    }
    sort_rows(&mut out.rows);
    out
}

fn train_all(cfg: &ExperimentConfig, data: &DeskData) -> Result<Vec<TrainedModels>> {
    if !cfg.methods.iter().any(|m| m.needs_training()) {
        return Ok(Vec::new());
    }
    cfg.seeds
        .iter()
        .map(|&s| train_models(data, &cfg.setup, s))
        .collect()
}

/// Trains per seed (if any method needs it) and sweeps every cell on
/// held-out samples of the training classes.
pub fn snr_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let data = DeskData::build(&cfg.setup)?;
    let models = train_all(cfg, &data)?;
    sweep_with(cfg, &data, models)
}

/// Sweep with models trained elsewhere (one per seed, same order).
pub fn sweep_with(cfg: &ExperimentConfig, data: &DeskData, models: Vec<TrainedModels>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let refs = model_refs(cfg, &models)?;
    let ctx = EvalContext {
        world: &data.world,
        domain: &data.train,
        mode: cfg.setup.prompt_mode,
    };
    let mut out = evaluate_cells(cfg, &refs, &ctx, &data.eval_tokens);
    out.models = models;
    Ok(out)
}

fn model_refs<'a>(cfg: &ExperimentConfig, models: &'a [TrainedModels]) -> Result<Vec<Option<&'a TrainedModels>>> {
    if models.is_empty() {
        return Ok(vec![None; cfg.seeds.len()]);
    }
    if models.len() != cfg.seeds.len() {
        return Err(Error::DimMismatch {
            context: "trained models per seed",
            expected: cfg.seeds.len(),
            actual: models.len(),
        });
    }
    Ok(models.iter().map(Some).collect())
}

/// The three learned variants across the sweep.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let cfg = ExperimentConfig {
        methods: vec![Method::Semclip, Method::SemclipNoTapl, Method::SemclipNoAf],
        ..cfg.clone()
    };
    snr_sweep(&cfg)
}

/// Zero-shot evaluation on `target` with models trained on `data.train`;
/// nothing is retrained. Overlapping class names are rejected.
pub fn cross_dataset_eval(
    cfg: &ExperimentConfig,
    data: &DeskData,
    models: &[TrainedModels],
    target: &ClassDomain,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    data.train.ensure_disjoint(target)?;
    let refs = model_refs(cfg, models)?;
    let tokens = target.sample(cfg.setup.eval_per_class, cfg.setup.world.seed ^ 0x6364)?;
    let ctx = EvalContext {
        world: &data.world,
        domain: target,
        mode: cfg.setup.prompt_mode,
    };
    Ok(evaluate_cells(cfg, &refs, &ctx, &tokens))
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub snr_db: f64,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, Metric, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.metric, r.snr_db.to_bits()))
            .or_default()
            .push(r.value);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((method, metric, bits), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                method,
                snr_db: f64::from_bits(bits),
                metric,
                mean,
                std,
                seeds: v.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| (a.method, a.metric).cmp(&(b.method, b.metric)).then(a.snr_db.total_cmp(&b.snr_db)));
    out
}

/// Mean value of one `(method, metric, snr)` cell over seeds.
pub fn cell_mean(rows: &[ReportRow], method: Method, metric: Metric, snr_db: f64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.metric == metric && r.snr_db == snr_db)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub const REPORT_COLUMNS: [&str; 6] = ["method", "snr_db", "metric", "value", "seed", "config_hash"];

const REPORT_NOTES: [&str; 3] = [
    "clip_ft_direct: tokens sent uncoded (packed into N/2 complex symbols, power-normalized, AWGN), no codec, fixed prompts",
    "semclip_no_af: codec without AF modules trained at a single fixed SNR, fixed prompts",
    "inference cosine temperature 1; training similarity scales are part of the config hash",
];

/// CSV text: `#` note lines, header, rows, `# config_hash=...` footer.
pub fn report_to_string(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    let mut out = String::new();
    for note in REPORT_NOTES {
        writeln!(out, "# {note}").expect("write to string");
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.tag().to_string(),
            r.snr_db.to_string(),
            r.metric.tag().to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv writes utf-8"));
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    writeln!(out, "# config_hash={}", hashes.into_iter().collect::<Vec<_>>().join(";")).expect("write to string");
    Ok(out)
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let text = report_to_string(rows)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Format(format!("unexpected report columns {headers:?}")));
    }
    let field = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or_default().to_string();
    let num = |s: String, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("bad {what} {s:?}")))
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ReportRow {
                method: Method::from_tag(&field(&rec, 0))?,
                snr_db: num(field(&rec, 1), "snr_db")?,
                metric: Metric::from_tag(&field(&rec, 2))?,
                value: num(field(&rec, 3), "value")?,
                seed: field(&rec, 4)
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed {:?}", field(&rec, 4))))?,
                config_hash: field(&rec, 5),
            })
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    parse_report(&fs::read_to_string(path)?)
}

/// Axes for the bandwidth plot: channel uses behind each config hash.
#[derive(Debug, Clone)]
pub struct PlotAxes {
    pub image: ImageSpec,
    pub channel_uses: BTreeMap<String, usize>,
    /// SNR at which the bandwidth plot is drawn.
    pub bandwidth_snr_db: f64,
}

/// Writes `accuracy_vs_snr.svg` and `accuracy_vs_bandwidth.svg` into `dir`.
pub fn emit_plots(rows: &[ReportRow], axes: &PlotAxes, dir: &Path) -> Result<Vec<PathBuf>> {
    let acc: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == Metric::Top1Accuracy).collect();
    if acc.is_empty() {
        return Err(Error::Empty("accuracy rows"));
    }
    fs::create_dir_all(dir)?;

    let mut by_snr: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for s in summarize(&acc.iter().map(|r| (*r).clone()).collect::<Vec<_>>()) {
        by_snr.entry(s.method).or_default().push((s.snr_db, s.mean));
    }

    let mut by_bw: BTreeMap<Method, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in acc.iter().filter(|r| r.snr_db == axes.bandwidth_snr_db) {
        let Some(&l) = axes.channel_uses.get(&r.config_hash) else {
            continue;
        };
        let x = channel::bandwidth_ratio(l, &axes.image);
        by_bw.entry(r.method).or_default().entry(x.to_bits()).or_default().push(r.value);
    }
    let by_bw: BTreeMap<Method, Vec<(f64, f64)>> = by_bw
        .into_iter()
        .map(|(m, pts)| {
            let v = pts
                .into_iter()
                .map(|(x, ys)| (f64::from_bits(x), ys.iter().sum::<f64>() / ys.len() as f64))
                .collect();
            (m, v)
        })
        .collect();

    let snr_path = dir.join("accuracy_vs_snr.svg");
    fs::write(&snr_path, svg_lines("Top-1 accuracy vs SNR", "SNR (dB)", &by_snr))?;
    let bw_path = dir.join("accuracy_vs_bandwidth.svg");
    let title = format!("Top-1 accuracy vs bandwidth ratio at {} dB", axes.bandwidth_snr_db);
    fs::write(&bw_path, svg_lines(&title, "bandwidth ratio L/(CWH)", &by_bw))?;
    Ok(vec![snr_path, bw_path])
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

fn svg_lines(title: &str, xlabel: &str, series: &BTreeMap<Method, Vec<(f64, f64)>>) -> String {
    let (w, h, pad) = (560.0, 360.0, 50.0);
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let (mut x0, mut x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(x1 > x0) {
        x0 -= 1.0_f64.max(x0.abs() * 0.1);
        x1 += 1.0_f64.max(x1.abs() * 0.1);
    }
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, pad - 4.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.4e}</text>"#, px(x0), h - pad + 16.0, x0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.4e}</text>"#, px(x1), h - pad + 16.0, x1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 10.0);
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, w - pad - 120.0, method.tag());
    }
    s.push_str("</svg>\n");
    s
}
