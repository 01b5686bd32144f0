//! Flat `key = value` run configuration and run manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key has a default; [`entries`] lists the full resolved
//! configuration so manifests never depend on implicit defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, Method, Metric};
use crate::store::digest_hex;
use crate::tapl::{PromptMode, ToyTextKind};
use crate::tokens::ImageSpec;
use crate::training::TrainConfig;

/// Overrides the configured seeds with a single seed.
pub const SEED_ENV: &str = "SEMCLIP_SEED";

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got {v:?}"))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got {v:?}"))
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        Err("expected a non-empty list".into())
    } else {
        Ok(items)
    }
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    let n: usize = parse_num(v, "a positive integer")?;
    if n == 0 {
        Err("must be at least 1".into())
    } else {
        Ok(n)
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(v)?;
    if x < 0.0 {
        Err(format!("must be non-negative, got {x}"))
    } else {
        Ok(x)
    }
}

fn strictly_positive(v: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(v)?;
    if x <= 0.0 {
        Err(format!("must be positive, got {x}"))
    } else {
        Ok(x)
    }
}

fn snr_range(v: &str) -> std::result::Result<(f64, f64), String> {
    let r = parse_list(v, parse_f64)?;
    match r.as_slice() {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        [lo, hi] => Err(format!("range order: lower bound {lo} exceeds upper bound {hi}")),
        _ => Err(format!("expected lo,hi, got {v:?}")),
    }
}

fn prompt_mode(v: &str) -> std::result::Result<PromptMode, String> {
    match v {
        "frozen" => Ok(PromptMode::Frozen),
        "per_sample" => Ok(PromptMode::PerSample),
        "pooled" => Ok(PromptMode::Pooled),
        _ => Err(format!("expected frozen|per_sample|pooled, got {v:?}")),
    }
}

fn prompt_mode_tag(m: PromptMode) -> &'static str {
    match m {
        PromptMode::Frozen => "frozen",
        PromptMode::PerSample => "per_sample",
        PromptMode::Pooled => "pooled",
    }
}

fn text_kind(v: &str) -> std::result::Result<ToyTextKind, String> {
    match v {
        "affine" => Ok(ToyTextKind::Affine),
        "mlp" => Ok(ToyTextKind::Mlp),
        _ => Err(format!("expected affine|mlp, got {v:?}")),
    }
}

fn text_kind_tag(k: ToyTextKind) -> &'static str {
    match k {
        ToyTextKind::Affine => "affine",
        ToyTextKind::Mlp => "mlp",
    }
}

fn image(v: &str) -> std::result::Result<ImageSpec, String> {
    let d = v
        .split('x')
        .map(|s| positive(s.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match d.as_slice() {
        [h, w, c] => ImageSpec::new(*h, *w, *c).map_err(|e| e.to_string()),
        _ => Err(format!("expected HxWxC, got {v:?}")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn set_train(t: &mut TrainConfig, field: &str, v: &str) -> std::result::Result<bool, String> {
    match field {
        "snr_range" => t.snr_range_db = snr_range(v)?,
        "batch_size" => {
            t.batch_size = positive(v)?;
            if t.batch_size < 2 {
                return Err("must be at least 2".into());
            }
        }
        "learning_rate" => t.learning_rate = non_negative(v)?,
        "steps" => t.steps = parse_num(v, "an integer")?,
        "similarity_scale" => t.similarity_scale = strictly_positive(v)?,
        "adam_beta1" | "adam_beta2" => {
            let b = parse_f64(v)?;
            if !(0.0..1.0).contains(&b) {
                return Err(format!("must lie in [0, 1), got {b}"));
            }
            if field == "adam_beta1" {
                t.adam_beta1 = b;
            } else {
                t.adam_beta2 = b;
            }
        }
        "adam_eps" => t.adam_eps = strictly_positive(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig) -> Vec<(String, String)> {
    [
        ("snr_range", format!("{},{}", t.snr_range_db.0, t.snr_range_db.1)),
        ("batch_size", t.batch_size.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("steps", t.steps.to_string()),
        ("similarity_scale", t.similarity_scale.to_string()),
        ("adam_beta1", t.adam_beta1.to_string()),
        ("adam_beta2", t.adam_beta2.to_string()),
        ("adam_eps", t.adam_eps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}{k}"), v))
    .collect()
}

/// Applies one `key = value` pair.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let s = &mut cfg.setup;
    let w = &mut s.world;
    match key {
        "methods" => cfg.methods = parse_list(v, |m| Method::from_tag(m).map_err(|e| e.to_string()))?,
        "snrs" => cfg.snrs_db = parse_list(v, parse_f64)?,
        "seeds" => cfg.seeds = parse_list(v, |x| parse_num(x, "an unsigned integer"))?,
        "metrics" => cfg.metrics = parse_list(v, |m| Metric::from_tag(m).map_err(|e| e.to_string()))?,
        "token_dim" => {
            w.token_dim = positive(v)?;
            if w.token_dim < 2 {
                return Err("must be at least 2".into());
            }
        }
        "embed_dim" => w.embed_dim = positive(v)?,
        "context_len" => w.context_len = positive(v)?,
        "classname_tokens" => w.classname_tokens = positive(v)?,
        "spread" => w.spread = non_negative(v)?,
        "text_gap" => w.text_gap = non_negative(v)?,
        "misalignment" => w.misalignment = non_negative(v)?,
        "text_kind" => w.text_kind = text_kind(v)?,
        "world_seed" => w.seed = parse_num(v, "an unsigned integer")?,
        "train_classes" | "cross_classes" => {
            let n = positive(v)?;
            if n < 2 {
                return Err("must be at least 2".into());
            }
            if key == "train_classes" {
                s.train_classes = n;
            } else {
                s.cross_classes = n;
            }
        }
        "train_per_class" => s.train_per_class = positive(v)?,
        "eval_per_class" => s.eval_per_class = positive(v)?,
        "channel_uses" => s.channel_uses = positive(v)?,
        "no_af_snr_db" => s.no_af_snr_db = parse_f64(v)?,
        "prompt_mode" => s.prompt_mode = prompt_mode(v)?,
        "image" => s.image = image(v)?,
        _ => {
            let handled = match key.strip_prefix("stage2_") {
                Some(field) => set_train(&mut s.stage2, field, v)?,
                None => set_train(&mut s.stage1, key, v)?,
            };
            if !handled {
                return Err(format!("unknown key {key:?}"));
            }
        }
    }
    Ok(())
}

/// Every key with its resolved value, in a fixed order.
pub fn entries(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let s = &cfg.setup;
    let w = &s.world;
    let methods: Vec<&str> = cfg.methods.iter().map(|m| m.tag()).collect();
    let metrics: Vec<&str> = cfg.metrics.iter().map(|m| m.tag()).collect();
    let mut out: Vec<(String, String)> = [
        ("methods", methods.join(",")),
        ("snrs", join(&cfg.snrs_db)),
        ("seeds", join(&cfg.seeds)),
        ("metrics", metrics.join(",")),
        ("token_dim", w.token_dim.to_string()),
        ("embed_dim", w.embed_dim.to_string()),
        ("context_len", w.context_len.to_string()),
        ("classname_tokens", w.classname_tokens.to_string()),
        ("spread", w.spread.to_string()),
        ("text_gap", w.text_gap.to_string()),
        ("misalignment", w.misalignment.to_string()),
        ("text_kind", text_kind_tag(w.text_kind).to_string()),
        ("world_seed", w.seed.to_string()),
        ("train_classes", s.train_classes.to_string()),
        ("train_per_class", s.train_per_class.to_string()),
        ("eval_per_class", s.eval_per_class.to_string()),
        ("cross_classes", s.cross_classes.to_string()),
        ("channel_uses", s.channel_uses.to_string()),
        ("no_af_snr_db", s.no_af_snr_db.to_string()),
        ("prompt_mode", prompt_mode_tag(s.prompt_mode).to_string()),
        (
            "image",
            format!("{}x{}x{}", s.image.height, s.image.width, s.image.channels),
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    out.extend(train_entries("", &s.stage1));
    out.extend(train_entries("stage2_", &s.stage2));
    out
}

/// Parses config text on top of the defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected key = value, got {l:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key {k:?}"),
            });
        }
        set_key(&mut cfg, k, v).map_err(|msg| Error::Config {
            line,
            msg: format!("{k}: {msg}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&fs::read_to_string(path)?)
}

/// Renders a config back into the flat format; parsing it gives the same config.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    entries(cfg).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Applies `SEMCLIP_SEED` if it is set; returns the override.
pub fn apply_seed_override(cfg: &mut ExperimentConfig, value: Option<&str>) -> Result<Option<u64>> {
    let Some(v) = value else {
        return Ok(None);
    };
    let seed: u64 = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
    cfg.seeds = vec![seed];
    Ok(Some(seed))
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub seed_override: Option<u64>,
    pub config: BTreeMap<String, String>,
    /// Checkpoint file name to content hash.
    pub checkpoints: BTreeMap<String, String>,
    /// Output file name to content digest.
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; excluded from [`RunManifest::hash`].
    pub timestamp: u64,
}

#[derive(Serialize)]
struct Hashed<'a> {
    command: &'a str,
    artifact_version: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    seed_override: Option<u64>,
    config: &'a BTreeMap<String, String>,
    checkpoints: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, seed_override: Option<u64>) -> Self {
        let mut m = Self::from_entries(command, entries(cfg), cfg.seeds.clone(), seed_override);
        m.config_hash = cfg.hash();
        m
    }

    /// Manifest for commands configured by plain arguments; the config hash
    /// covers the given entries.
    pub fn from_entries(
        command: &str,
        entries: Vec<(String, String)>,
        seeds: Vec<u64>,
        seed_override: Option<u64>,
    ) -> Self {
        let config: BTreeMap<String, String> = entries.into_iter().collect();
        let config_hash = digest_hex(serde_json::to_string(&config).expect("entries serialize").as_bytes());
        Self {
            command: command.to_string(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_hash,
            seeds,
            seed_override,
            config,
            checkpoints: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Records an output file by name and content digest.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, digest_hex(&fs::read(path)?));
        Ok(())
    }

    pub fn hash(&self) -> String {
        let h = Hashed {
            command: &self.command,
            artifact_version: &self.artifact_version,
            config_hash: &self.config_hash,
            seeds: &self.seeds,
            seed_override: self.seed_override,
            config: &self.config,
            checkpoints: &self.checkpoints,
            outputs: &self.outputs,
        };
        digest_hex(serde_json::to_string(&h).expect("manifest serializes").as_bytes())
    }

    /// JSON with an added `manifest_hash` field.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        v["manifest_hash"] = serde_json::Value::String(self.hash());
        serde_json::to_string_pretty(&v).expect("manifest serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}
