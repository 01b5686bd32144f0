use semclip::config::*;
use semclip::experiments::{ExperimentConfig, Method, Metric};
use semclip::tapl::PromptMode;
use semclip::Error;

#[test]
fn empty_and_comment_only_files_give_defaults() {
    assert_eq!(parse_config_str("").unwrap(), ExperimentConfig::default());
    assert_eq!(parse_config_str("# nothing\n\n   \n").unwrap(), ExperimentConfig::default());
}

#[test]
fn keys_set_fields() {
    let cfg = parse_config_str(
        "methods = semclip, clip_ft_direct\n\
         snrs = -5, 0\n\
         seeds = 1,2,3\n\
         metrics = recall_at_1\n\
         channel_uses = 16\n\
         prompt_mode = pooled\n\
         image = 224x224x3\n\
         snr_range = -2, 8\n\
         stage2_steps = 7\n",
    )
    .unwrap();
    assert_eq!(cfg.methods, vec![Method::Semclip, Method::ClipFtDirect]);
    assert_eq!(cfg.snrs_db, vec![-5.0, 0.0]);
    assert_eq!(cfg.seeds, vec![1, 2, 3]);
    assert_eq!(cfg.metrics, vec![Metric::RecallAt1]);
    assert_eq!(cfg.setup.channel_uses, 16);
    assert_eq!(cfg.setup.prompt_mode, PromptMode::Pooled);
    assert_eq!((cfg.setup.image.height, cfg.setup.image.channels), (224, 3));
    assert_eq!(cfg.setup.stage1.snr_range_db, (-2.0, 8.0));
    assert_eq!(cfg.setup.stage2.steps, 7);
    assert_eq!(cfg.setup.stage1.steps, ExperimentConfig::default().setup.stage1.steps);
}

#[test]
fn errors_carry_line_numbers() {
    let cases = [
        ("# c\nsnr_range = 10, -10\n", 2),
        ("seeds = 0\nbogus_key = 1\n", 2),
        ("seeds = 0\nseeds = 1\n", 2),
        ("no equals sign\n", 1),
        ("\n\nchannel_uses = zero\n", 3),
        ("methods = clip\n", 1),
        ("spread = nan\n", 1),
    ];
    for (text, want) in cases {
        match parse_config_str(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    let msg = parse_config_str("snr_range = 10, -10\n").unwrap_err().to_string();
    assert!(msg.contains("line 1") && msg.contains("snr_range"), "{msg}");
}

#[test]
fn render_round_trips() {
    let cfg = parse_config_str("seeds = 4, 5\nspread = 0.02\nstage2_learning_rate = 0.01\n").unwrap();
    let text = render_config(&cfg);
    assert_eq!(parse_config_str(&text).unwrap(), cfg);
    assert_eq!(render_config(&parse_config_str(&text).unwrap()), text);
}

#[test]
fn hash_is_deterministic_and_sensitive() {
    let a = parse_config_str("seeds = 1\n").unwrap();
    let b = parse_config_str("seeds = 1\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    let c = parse_config_str("seeds = 1\nstage2_steps = 3\n").unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn seed_override_replaces_seeds() {
    let mut cfg = parse_config_str("seeds = 1, 2\n").unwrap();
    assert_eq!(apply_seed_override(&mut cfg, None).unwrap(), None);
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(apply_seed_override(&mut cfg, Some(" 9 ")).unwrap(), Some(9));
    assert_eq!(cfg.seeds, vec![9]);
    assert!(apply_seed_override(&mut cfg, Some("-1")).is_err());
}

#[test]
fn manifest_hash_ignores_timestamp() {
    let cfg = ExperimentConfig::default();
    let mut a = RunManifest::new("exp sweep", &cfg, None);
    let mut b = RunManifest::new("exp sweep", &cfg, None);
    a.timestamp = 1;
    b.timestamp = 2;
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.config_hash, cfg.hash());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    std::fs::write(&out, "x").unwrap();
    a.add_output(&out).unwrap();
    assert_ne!(a.hash(), b.hash());
    let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(v["manifest_hash"], a.hash());
    assert_eq!(v["artifact_version"], ARTIFACT_VERSION);
    assert!(v["outputs"]["r.csv"].is_string());
}
