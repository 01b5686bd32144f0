use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semclip::channel;
use semclip::experiments::*;
use semclip::tapl::PromptMode;
use semclip::tokens::{cosine, synth_cluster_tokens};
use semclip::world::WorldConfig;
use semclip::Error;

fn cheap_setup() -> DeskSetup {
    let mut s = DeskSetup {
        world: WorldConfig {
            token_dim: 16,
            embed_dim: 8,
            ..WorldConfig::default()
        },
        train_classes: 4,
        train_per_class: 8,
        eval_per_class: 4,
        cross_classes: 4,
        channel_uses: 8,
        ..DeskSetup::default()
    };
    s.stage1.steps = 20;
    s.stage1.batch_size = 16;
    s.stage2.steps = 5;
    s.stage2.batch_size = 8;
    s
}

fn cheap_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        seeds,
        metrics: vec![Metric::Top1Accuracy, Metric::RecallAt1],
        setup: cheap_setup(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn sweep_has_one_row_per_cell() {
    let cfg = cheap_config(vec![0, 1]);
    let out = snr_sweep(&cfg).unwrap();
    assert!(out.is_complete(), "{:?}", out.failed);
    assert_eq!(out.models.len(), 2);
    for method in Method::ALL {
        for seed in [0, 1] {
            for metric in [Metric::Top1Accuracy, Metric::RecallAt1] {
                let cells: Vec<&ReportRow> = out
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.seed == seed && r.metric == metric)
                    .collect();
                assert_eq!(cells.len(), 5);
                let snrs: Vec<f64> = cells.iter().map(|r| r.snr_db).collect();
                assert_eq!(snrs, SWEEP_SNRS_DB.to_vec());
            }
        }
    }
    assert!(out.rows.iter().all(|r| (0.0..=1.0).contains(&r.value) && r.config_hash == cfg.hash()));
    let summary = summarize(&out.rows);
    assert_eq!(summary.len(), 4 * 5 * 2);
    assert!(summary.iter().all(|s| s.seeds == 2));
}

#[test]
fn reports_are_byte_identical_and_round_trip() {
    let cfg = cheap_config(vec![3]);
    let a = report_to_string(&snr_sweep(&cfg).unwrap().rows).unwrap();
    let b = report_to_string(&snr_sweep(&cfg).unwrap().rows).unwrap();
    assert_eq!(a, b);
    let rows = parse_report(&a).unwrap();
    assert_eq!(report_to_string(&rows).unwrap(), a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_report(&rows, &path).unwrap();
    assert_eq!(read_report(&path).unwrap(), rows);
    let text = std::fs::read_to_string(&path).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, REPORT_COLUMNS.join(","));
    assert!(text.lines().last().unwrap().starts_with("# config_hash="));
    assert!(parse_report("a,b\n1,2\n").is_err());
    assert!(report_to_string(&[]).is_err());
}

#[test]
fn checkpoints_are_reproducible_and_reload() {
    let setup = cheap_setup();
    let data = DeskData::build(&setup).unwrap();
    let a = train_models(&data, &setup, 7).unwrap();
    let b = train_models(&data, &setup, 7).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = a.save(&setup, da.path()).unwrap();
    let hb = b.save(&setup, db.path()).unwrap();
    assert_eq!(ha, hb);
    for (name, _) in &ha {
        assert_eq!(std::fs::read(da.path().join(name)).unwrap(), std::fs::read(db.path().join(name)).unwrap());
    }
    let back = TrainedModels::load(&setup, da.path()).unwrap();
    assert_eq!(back.seed, 7);
    assert_eq!(back.codec, a.codec);
    assert_eq!(back.codec_no_af, a.codec_no_af);
    assert_eq!(back.tapl, a.tapl);
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        TrainedModels::load(&cheap_setup(), dir.path()),
        Err(Error::MissingCheckpoint(_))
    ));
    let cfg = ExperimentConfig {
        methods: vec![Method::Semclip, Method::ClipFtDirect],
        ..cheap_config(vec![0])
    };
    let data = DeskData::build(&cfg.setup).unwrap();
    let ctx = EvalContext {
        world: &data.world,
        domain: &data.train,
        mode: PromptMode::PerSample,
    };
    let out = evaluate_cells(&cfg, &[None], &ctx, &data.eval_tokens);
    assert_eq!(out.failed.len(), 5 * 2);
    assert!(out.failed.iter().all(|f| f.method == Method::Semclip));
    assert_eq!(out.rows.len(), 5 * 2);
}

#[test]
fn overlapping_target_domain_is_rejected() {
    let cfg = cheap_config(vec![0]);
    let data = DeskData::build(&cfg.setup).unwrap();
    let clip_only = ExperimentConfig {
        methods: vec![Method::ClipFtDirect],
        ..cfg.clone()
    };
    assert!(matches!(
        cross_dataset_eval(&clip_only, &data, &[], &data.train),
        Err(Error::ClassOverlap(_))
    ));
    let shifted = data.shifted_domain(&cfg.setup).unwrap();
    let out = cross_dataset_eval(&clip_only, &data, &[], &shifted).unwrap();
    assert!(out.is_complete());
    assert_eq!(out.rows.len(), 5 * 2);
}

#[test]
fn uncoded_baseline_cosine_matches_theory() {
    // cos(s, s + n) concentrates at 1 / sqrt(1 + sigma^2 / P)
    let set = synth_cluster_tokens(8, 250, 64, 0.1, 1).unwrap();
    for snr in [-5.0, 0.0, 5.0] {
        let y = baseline_clip_ft(&set.batch, snr, 1.0, 2).unwrap();
        let mean: f64 = set
            .batch
            .iter()
            .zip(y.iter())
            .map(|(a, b)| cosine(a, b).unwrap())
            .sum::<f64>()
            / set.batch.len() as f64;
        let want = 1.0 / (1.0 + channel::snr_to_noise_variance(snr, 1.0)).sqrt();
        assert!((mean - want).abs() < 0.01, "{snr} dB: {mean} vs {want}");
        assert_eq!(y.labels(), set.batch.labels());
    }
    let odd = synth_cluster_tokens(2, 2, 5, 0.1, 0).unwrap();
    assert_eq!(baseline_clip_ft(&odd.batch, 0.0, 1.0, 0).unwrap().dim(), 5);
}

#[test]
fn noiseless_baseline_reaches_clean_accuracy() {
    let setup = DeskSetup::default();
    let data = DeskData::build(&setup).unwrap();
    let ctx = EvalContext {
        world: &data.world,
        domain: &data.train,
        mode: PromptMode::Frozen,
    };
    let got = eval_classification(Method::ClipFtDirect, None, &ctx, &data.eval_tokens, f64::INFINITY, 0).unwrap();
    let p = performer(Method::ClipFtDirect, None, &data.world, &data.train, PromptMode::Frozen).unwrap();
    let clean = accuracy(&p.classify(&data.eval_tokens).unwrap(), data.eval_tokens.labels().unwrap()).unwrap();
    assert!((got - clean).abs() < 1e-12, "{got} vs {clean}");
    let noisy = eval_classification(Method::ClipFtDirect, None, &ctx, &data.eval_tokens, -10.0, 0).unwrap();
    assert!(noisy <= clean);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let setup = DeskSetup::default();
    let data = DeskData::build(&setup).unwrap();
    let ctx = EvalContext {
        world: &data.world,
        domain: &data.train,
        mode: PromptMode::Frozen,
    };
    let mut labels = data.eval_tokens.labels().unwrap().to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = data.eval_tokens.clone().with_labels(labels).unwrap();
    let n = shuffled.len() as f64;
    let g = setup.train_classes as f64;
    let p = 1.0 / g;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let acc = eval_classification(Method::ClipFtDirect, None, &ctx, &shuffled, 10.0, 0).unwrap();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc} vs {p} +- {}", 3.0 * sigma);
}

#[test]
fn method_and_metric_tags() {
    for m in Method::ALL {
        assert_eq!(Method::from_tag(m.tag()).unwrap(), m);
    }
    assert!(Method::from_tag("clip").is_err());
    assert_eq!(Metric::from_tag("recall_at_1").unwrap(), Metric::RecallAt1);
    assert!(!Method::ClipFtDirect.needs_training());
    assert!(Method::SemclipNoAf.needs_training());
    assert!(accuracy(&[0, 1], &[0]).is_err());
    assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
}

#[test]
fn summary_uses_sample_std() {
    let row = |seed, value| ReportRow {
        method: Method::Semclip,
        snr_db: 0.0,
        metric: Metric::Top1Accuracy,
        value,
        seed,
        config_hash: "h".into(),
    };
    let s = summarize(&[row(0, 0.5), row(1, 0.7), row(2, 0.9)]);
    assert_eq!(s.len(), 1);
    assert!((s[0].mean - 0.7).abs() < 1e-12);
    assert!((s[0].std - 0.2).abs() < 1e-12);
    assert_eq!(cell_mean(&[row(0, 0.5), row(1, 0.7)], Method::Semclip, Metric::Top1Accuracy, 0.0), Some(0.6));
}
