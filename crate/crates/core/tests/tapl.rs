use proptest::prelude::*;
use semclip::math;
use semclip::nn::Dense;
use semclip::tapl::*;
use semclip::tokens::TokenBatch;

fn rows(v: &[&[f64]]) -> TokenBatch {
    TokenBatch::from_rows(v.iter().map(|r| r.to_vec()).collect(), None).unwrap()
}

fn setup() -> (ToyTextEncoder, PromptContext, Vec<ClassnameEmbedding>, MetaNet) {
    let enc = ToyTextEncoder::new(6, 16, ToyTextKind::Affine, 3).unwrap();
    let ctx = PromptContext::gaussian(4, 6, 0.5, 1).unwrap();
    let classes = random_classnames(5, 2, 6, &mut math::stream(2));
    let meta = MetaNet::init(16, 6, 4);
    (enc, ctx, classes, meta)
}

#[test]
fn unit_temperature_hand_value() {
    // e / (e + 1)
    let s = rows(&[&[1.0, 0.0]]);
    let t = TextFeatureSet::Shared(vec![vec![3.0, 0.0], vec![0.0, 0.5]]);
    let p = task_probabilities(&s, &t, 1.0).unwrap();
    assert!((p.rows[0][0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    assert!((p.rows[0][1] - (1.0 - 0.731_058_578_630_004_9)).abs() < 1e-15);
    assert!(task_probabilities(&s, &t, 0.0).is_err());
    assert!(task_probabilities(&s, &t, f64::NAN).is_err());
}

#[test]
fn meta_net_hidden_rule() {
    assert_eq!(MetaNet::hidden_for(512), 32);
    assert_eq!(MetaNet::hidden_for(256), 16);
    assert_eq!(MetaNet::hidden_for(64), 8);
    assert_eq!(MetaNet::hidden_for(16), 8);
    let m = MetaNet::init(512, 12, 0);
    assert_eq!(m.fc1.output_dim(), 32);
    assert_eq!((m.token_dim(), m.embed_dim()), (512, 12));
    assert!(m.forward(&[0.0; 10]).is_err());
}

#[test]
fn prompt_sequence_layout() {
    let ctx = PromptContext::from_vectors(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let class = ClassnameEmbedding {
        name: "x".into(),
        tokens: vec![vec![9.0, 9.0]],
    };
    let seq = prompt_sequence(Some(&[0.5, -1.0]), &ctx, &class);
    assert_eq!(seq, vec![vec![1.5, 1.0], vec![3.5, 3.0], vec![9.0, 9.0]]);
    let plain = prompt_sequence(None, &ctx, &class);
    assert_eq!(plain, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]);
    assert!(PromptContext::from_vectors(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn affine_text_encoder_is_mean_pool_then_map() {
    let mut d = Dense::zeros(2, 2);
    d.weight.data = vec![1.0, 2.0, 0.0, -1.0];
    d.bias.data = vec![0.5, 0.0];
    let enc = ToyTextEncoder::affine(d);
    let out = enc.encode(&[&[1.0, 0.0], &[3.0, 2.0]]).unwrap();
    // mean (2, 1)
    assert_eq!(out, vec![4.5, -1.0]);
    assert_eq!(enc.encode(&[&[3.0, 2.0], &[1.0, 0.0]]).unwrap(), out);
    assert!(enc.encode(&[]).is_err());
    assert!(enc.encode(&[&[1.0]]).is_err());
}

#[test]
fn frozen_mode_ignores_meta_net() {
    let (enc, ctx, classes, meta) = setup();
    let s = TokenBatch::from_rows(vec![vec![0.3; 16], vec![-0.2; 16]], None).unwrap();
    let frozen = TaskPerformer {
        encoder: &enc,
        classes: &classes,
        context: &ctx,
        meta: Some(&meta),
        mode: PromptMode::Frozen,
    };
    let t = frozen.text_features(&s).unwrap();
    assert_eq!(t, unconditional_text_features(&ctx, &classes, &enc).unwrap());
}

#[test]
fn pooled_equals_per_sample_for_one_item() {
    let (enc, ctx, classes, meta) = setup();
    let s = TokenBatch::from_rows(vec![(0..16).map(|i| (i as f64).cos()).collect()], None).unwrap();
    let mk = |mode| TaskPerformer {
        encoder: &enc,
        classes: &classes,
        context: &ctx,
        meta: Some(&meta),
        mode,
    };
    let per = mk(PromptMode::PerSample).text_features(&s).unwrap();
    let pooled = mk(PromptMode::Pooled).text_features(&s).unwrap();
    for k in 0..classes.len() {
        assert_eq!(per.get(0, k), pooled.get(0, k));
    }
    assert!(matches!(per, TextFeatureSet::PerSample(_)));
}

#[test]
fn conditional_features_use_meta_output() {
    let (enc, ctx, classes, meta) = setup();
    let s: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
    let pi = meta.forward(&s).unwrap();
    let t = build_text_features(std::slice::from_ref(&pi), &ctx, &classes, &enc).unwrap();
    for (k, c) in classes.iter().enumerate() {
        let seq = prompt_sequence(Some(&pi), &ctx, c);
        let refs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
        assert_eq!(t.get(0, k), enc.encode(&refs).unwrap().as_slice());
    }
}

#[test]
fn classify_and_retrieve() {
    let t = TextFeatureSet::Shared(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let s = rows(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.5]]);
    assert_eq!(classify(&s, &t).unwrap(), vec![0, 1, 0]);
    assert_eq!(retrieve(&[0.0, 1.0], &s).unwrap(), vec![1, 2, 0]);
    assert_eq!(rank_descending(&[0.5, 0.9, 0.5]), vec![1, 0, 2]);
    assert!(check_classes(&random_classnames(1, 1, 2, &mut math::stream(0)), 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn probabilities_are_row_stochastic_and_argmax_is_temperature_free(
        s in prop::collection::vec(prop::collection::vec(-1f64..1.0, 4), 1..6),
        t in prop::collection::vec(prop::collection::vec(-1f64..1.0, 4), 2..7),
        tau in 0.01f64..10.0,
    ) {
        prop_assume!(s.iter().chain(&t).all(|r| math::norm(r) > 1e-3));
        let batch = TokenBatch::from_rows(s, None).unwrap();
        let set = TextFeatureSet::Shared(t);
        let p = task_probabilities(&batch, &set, tau).unwrap();
        for row in &p.rows {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let q = task_probabilities(&batch, &set, 1.0).unwrap();
        prop_assert_eq!(p.argmax(), q.argmax());
        prop_assert_eq!(p.argmax(), classify(&batch, &set).unwrap());
    }
}
