use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semclip::channel::{self, ChannelConfig};
use semclip::config::{self, RunManifest, SEED_ENV};
use semclip::experiments::{self, DeskData, ExperimentConfig, Method, PlotAxes, SweepOutcome, TrainedModels};
use semclip::tokens::{self, ImageEncoder, ImageSpec, ToyImageEncoder};
use semclip::training;
use semclip::Result;

/// Zero-shot semantic communication toolkit.
#[derive(Parser)]
#[command(name = "semclip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Token synthesis, encoding and feature caches.
    #[command(subcommand)]
    Tokens(TokensCmd),
    /// Channel simulation.
    #[command(subcommand)]
    Channel(ChannelCmd),
    /// Training, sweeps, ablations, cross-distribution runs and plots.
    #[command(subcommand)]
    Exp(ExpCmd),
}

#[derive(Subcommand)]
enum TokensCmd {
    /// Labelled cluster tokens written as a feature cache.
    Synth {
        #[arg(long, default_value_t = 16)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode images (CSV, one image of H*W*C values per line) with the toy encoder.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a feature cache header as JSON.
    Inspect { path: PathBuf },
}

#[derive(Subcommand)]
enum ChannelCmd {
    /// Measure SNR and noise moments of the AWGN simulator.
    Probe {
        #[arg(long, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, default_value_t = 1_000_000)]
        symbols: usize,
        #[arg(long, default_value_t = 1.0)]
        power: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// Flat key = value config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Directory written by `exp train`; models are trained in-process if absent.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExpCmd {
    /// Train both stages per seed and save checkpoints and loss traces.
    Train(ExpArgs),
    /// Every configured method across the SNR list.
    Sweep(ExpArgs),
    /// The learned variants with and without prompts and AF modules.
    Ablate(ExpArgs),
    /// Zero-shot on disjoint classes from a shifted family.
    Crossdata(ExpArgs),
    /// SVG plots from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Configs whose hashes appear in the report, for the bandwidth axis.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokens(t) => tokens_cmd(t),
        Command::Channel(ChannelCmd::Probe {
            snr_db,
            symbols,
            power,
            seed,
            out,
        }) => {
            let report = channel::probe(&ChannelConfig::awgn(snr_db, power, seed)?, symbols)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                fs::write(&path, format!("{json}\n"))?;
                let entries = vec![
                    ("snr_db".into(), snr_db.to_string()),
                    ("symbols".into(), symbols.to_string()),
                    ("power".into(), power.to_string()),
                ];
                write_manifest(RunManifest::from_entries("channel probe", entries, vec![seed], None), &[path])?;
            }
            Ok(())
        }
        Command::Exp(e) => exp_cmd(e),
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

/// Records `outputs` in the manifest and writes it beside the first one.
fn write_manifest(mut m: RunManifest, outputs: &[PathBuf]) -> Result<()> {
    for o in outputs {
        m.add_output(o)?;
    }
    let path = manifest_path(&outputs[0]);
    m.write(&path)?;
    eprintln!("manifest {} ({})", path.display(), m.hash());
    Ok(())
}

fn tokens_cmd(cmd: TokensCmd) -> Result<()> {
    match cmd {
        TokensCmd::Synth {
            classes,
            per_class,
            dim,
            spread,
            seed,
            out,
        } => {
            let set = tokens::synth_cluster_tokens(classes, per_class, dim, spread, seed)?;
            tokens::save_feature_cache(&set.batch, &out)?;
            let entries = vec![
                ("classes".into(), classes.to_string()),
                ("per_class".into(), per_class.to_string()),
                ("dim".into(), dim.to_string()),
                ("spread".into(), spread.to_string()),
            ];
            let outputs = [out.clone(), tokens::label_sidecar(&out)];
            write_manifest(RunManifest::from_entries("tokens synth", entries, vec![seed], None), &outputs)
        }
        TokensCmd::Encode {
            input,
            height,
            width,
            channels,
            dim,
            seed,
            out,
        } => {
            let spec = ImageSpec::new(height, width, channels)?;
            let encoder = ToyImageEncoder::new(spec, dim, seed)?;
            let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(&input)?;
            let images = reader
                .records()
                .map(|r| {
                    r?.iter()
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|_| semclip::Error::Format(format!("bad pixel value {v:?}")))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = encoder.encode_batch(&images)?;
            tokens::save_feature_cache(&batch, &out)?;
            let entries = vec![
                ("image".into(), format!("{height}x{width}x{channels}")),
                ("dim".into(), dim.to_string()),
                ("input".into(), input.display().to_string()),
            ];
            write_manifest(RunManifest::from_entries("tokens encode", entries, vec![seed], None), &[out])
        }
        TokensCmd::Inspect { path } => {
            let h = tokens::inspect_feature_cache(&path)?;
            println!(
                "{}",
                serde_json::json!({
                    "version": h.version,
                    "dim": h.dim,
                    "count": h.count,
                    "dtype": "f32-le",
                    "labels": tokens::label_sidecar(&path).exists(),
                })
            );
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, Option<u64>)> {
    let mut cfg = match path {
        Some(p) => config::parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed_override = config::apply_seed_override(&mut cfg, env.as_deref())?;
    if let Some(s) = seed_override {
        eprintln!("{SEED_ENV}={s} overrides configured seeds");
    }
    Ok((cfg, seed_override))
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn obtain_models(cfg: &ExperimentConfig, data: &DeskData, ckpt: Option<&Path>) -> Result<Vec<TrainedModels>> {
    if !cfg.methods.iter().any(|m| m.needs_training()) {
        return Ok(Vec::new());
    }
    cfg.seeds
        .iter()
        .map(|&s| match ckpt {
            Some(dir) => TrainedModels::load(&cfg.setup, &seed_dir(dir, s)),
            None => {
                eprintln!("training seed {s}");
                experiments::train_models(data, &cfg.setup, s)
            }
        })
        .collect()
}

fn finish_report(
    command: &str,
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
    outcome: &SweepOutcome,
    out: &Path,
) -> Result<()> {
    for f in &outcome.failed {
        eprintln!(
            "cell failed: {} at {} dB, seed {}: {}",
            f.method.tag(),
            f.snr_db,
            f.seed,
            f.error
        );
    }
    fs::create_dir_all(out)?;
    let report = out.join("report.csv");
    experiments::write_report(&outcome.rows, &report)?;
    for s in experiments::summarize(&outcome.rows) {
        println!(
            "{:<16} {:>6} dB  {:<14} {:.4} +- {:.4} ({} seeds)",
            s.method.tag(),
            s.snr_db,
            s.metric.tag(),
            s.mean,
            s.std,
            s.seeds
        );
    }
    let mut m = RunManifest::new(command, cfg, seed_override);
    m.config.insert("failed_cells".into(), outcome.failed.len().to_string());
    write_manifest(m, &[report])?;
    if outcome.is_complete() {
        Ok(())
    } else {
        Err(semclip::Error::InvalidArgument(format!(
            "{} cells failed; the report holds the remaining rows",
            outcome.failed.len()
        )))
    }
}

fn exp_cmd(cmd: ExpCmd) -> Result<()> {
    match cmd {
        ExpCmd::Train(a) => {
            let (cfg, seed_override) = load_config(a.config.as_deref())?;
            cfg.validate()?;
            let data = DeskData::build(&cfg.setup)?;
            fs::create_dir_all(&a.out)?;
            let mut m = RunManifest::new("exp train", &cfg, seed_override);
            let mut outputs = Vec::new();
            for &s in &cfg.seeds {
                eprintln!("training seed {s}");
                let models = experiments::train_models(&data, &cfg.setup, s)?;
                let dir = seed_dir(&a.out, s);
                for (name, hash) in models.save(&cfg.setup, &dir)? {
                    m.checkpoints.insert(format!("seed-{s}/{name}"), hash);
                }
                for (name, trace) in [
                    ("stage1_trace.csv", &models.stage1_trace),
                    ("stage1_no_af_trace.csv", &models.no_af_trace),
                    ("stage2_trace.csv", &models.stage2_trace),
                ] {
                    let path = dir.join(name);
                    training::write_trace(trace, &path)?;
                    outputs.push(path);
                }
            }
            fs::write(a.out.join("config.txt"), config::render_config(&cfg))?;
            outputs.insert(0, a.out.join("config.txt"));
            for o in &outputs {
                let rel = o.strip_prefix(&a.out).unwrap_or(o).display().to_string();
                m.outputs.insert(rel, semclip::store::digest_hex(&fs::read(o)?));
            }
            let path = a.out.join("manifest.json");
            m.write(&path)?;
            eprintln!("manifest {} ({})", path.display(), m.hash());
            Ok(())
        }
        ExpCmd::Sweep(a) => sweep_cmd("exp sweep", a, None),
        ExpCmd::Ablate(a) => sweep_cmd(
            "exp ablate",
            a,
            Some(vec![Method::Semclip, Method::SemclipNoTapl, Method::SemclipNoAf]),
        ),
        ExpCmd::Crossdata(a) => {
            let (cfg, seed_override) = load_config(a.config.as_deref())?;
            cfg.validate()?;
            let data = DeskData::build(&cfg.setup)?;
            let target = data.shifted_domain(&cfg.setup)?;
            let models = obtain_models(&cfg, &data, a.checkpoints.as_deref())?;
            let outcome = experiments::cross_dataset_eval(&cfg, &data, &models, &target)?;
            finish_report("exp crossdata", &cfg, seed_override, &outcome, &a.out)
        }
        ExpCmd::Plot {
            report,
            config: configs,
            snr_db,
            out,
        } => {
            let rows = experiments::read_report(&report)?;
            let mut channel_uses = BTreeMap::new();
            let mut entries = vec![
                ("report".to_string(), report.display().to_string()),
                ("snr_db".to_string(), snr_db.to_string()),
            ];
            for c in &configs {
                let cfg = config::parse_config(c)?;
                channel_uses.insert(cfg.hash(), cfg.setup.channel_uses);
                entries.push((format!("config:{}", cfg.hash()), c.display().to_string()));
            }
            let image = match configs.first() {
                Some(c) => config::parse_config(c)?.setup.image,
                None => ExperimentConfig::default().setup.image,
            };
            let axes = PlotAxes {
                image,
                channel_uses,
                bandwidth_snr_db: snr_db,
            };
            let files = experiments::emit_plots(&rows, &axes, &out)?;
            let mut m = RunManifest::from_entries("exp plot", entries, Vec::new(), None);
            for f in &files {
                m.add_output(f)?;
            }
            m.write(&out.join("manifest.json"))?;
            Ok(())
        }
    }
}

fn sweep_cmd(command: &str, a: ExpArgs, methods: Option<Vec<Method>>) -> Result<()> {
    let (mut cfg, seed_override) = load_config(a.config.as_deref())?;
    if let Some(m) = methods {
        cfg.methods = m;
    }
    cfg.validate()?;
    let data = DeskData::build(&cfg.setup)?;
    let models = obtain_models(&cfg, &data, a.checkpoints.as_deref())?;
    let outcome = experiments::sweep_with(&cfg, &data, models)?;
    finish_report(command, &cfg, seed_override, &outcome, &a.out)
}
