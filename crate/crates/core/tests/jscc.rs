use semclip::channel;
use semclip::jscc::*;
use semclip::math;
use semclip::nn::{self, Activation, Dense};
use semclip::store::*;
use semclip::tokens::synth_cluster_tokens;
use semclip::Error;

fn matvec(d: &Dense, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (d.weight.shape[0], d.weight.shape[1]);
    (0..rows)
        .map(|r| d.bias.data[r] + (0..cols).map(|c| d.weight.data[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

#[test]
fn shapes_follow_config() {
    let cfg = JsccConfig::new(64, 32);
    let codec = JsccCodec::init(&cfg, 0).unwrap();
    assert_eq!(codec.encoder.input_dim(), 64);
    assert_eq!(codec.encoder.output_dim(), 64);
    assert_eq!(codec.decoder.input_dim(), 64);
    assert_eq!(codec.decoder.output_dim(), 64);
    let cfg = JsccConfig::new(40, 6);
    let codec = JsccCodec::init(&cfg, 0).unwrap();
    assert_eq!(codec.encoder.output_dim(), 12);
    assert_eq!(codec.decoder.input_dim(), 12);
    let token = vec![0.1; 40];
    assert_eq!(codec.encode_item(&token, 0.0).unwrap().len(), 12);
    assert!(matches!(codec.encode_item(&[0.1; 39], 0.0), Err(Error::DimMismatch { .. })));
    assert!(matches!(codec.decode_item(&[0.1; 11], 0.0), Err(Error::DimMismatch { .. })));
}

#[test]
fn af_hidden_width_rule() {
    let cfg = JsccConfig::new(8, 4);
    assert_eq!(cfg.af_hidden(256), 64);
    assert_eq!(cfg.af_hidden(64), 16);
    assert_eq!(cfg.af_hidden(40), 16);
    assert_eq!(cfg.af_hidden(8), 16);
    let codec = JsccCodec::init(&JsccConfig::new(256, 8), 1).unwrap();
    let af = codec.encoder.blocks[0].af.as_ref().unwrap();
    assert_eq!(af.spec(), AfModuleSpec { feature_dim: 256, hidden_dim: 64 });
}

#[test]
fn disabled_af_removes_modules() {
    let mut cfg = JsccConfig::new(16, 4);
    cfg.af_enabled = false;
    let codec = JsccCodec::init(&cfg, 0).unwrap();
    assert!(codec.encoder.blocks.iter().chain(&codec.decoder.blocks).all(|b| b.af.is_none()));
    assert_ne!(cfg.hash(), JsccConfig::new(16, 4).hash());
}

#[test]
fn af_mask_matches_hand_computation() {
    let spec = AfModuleSpec { feature_dim: 6, hidden_dim: 3 };
    let af = AfModule::init(spec, Activation::Relu, DEFAULT_SNR_INPUT_SCALE, &mut math::stream(3));
    let f = [0.5, -1.0, 2.0, 0.0, 0.25, -0.75];
    for snr in [-10.0, 0.0, 7.5] {
        let mut u = f.to_vec();
        u.push(snr / 20.0);
        let h: Vec<f64> = matvec(&af.fc1, &u).into_iter().map(|v| v.max(0.0)).collect();
        let mask: Vec<f64> = matvec(&af.fc2, &h).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let got = af.mask(&f, snr).unwrap();
        let out = af.forward(&f, snr).unwrap();
        for i in 0..6 {
            assert!((got[i] - mask[i]).abs() < 1e-12);
            assert!((out[i] - f[i] * mask[i]).abs() < 1e-12);
            assert!(got[i] > 0.0 && got[i] < 1.0);
        }
    }
}

#[test]
fn encoded_frames_meet_power_constraint() {
    let mut cfg = JsccConfig::new(32, 16);
    cfg.power = 2.0;
    let codec = JsccCodec::init(&cfg, 5).unwrap();
    let set = synth_cluster_tokens(4, 8, 32, 0.1, 5).unwrap();
    for snr in [-10.0, 0.0, 10.0] {
        for frame in codec.encode(&set.batch, snr).unwrap() {
            assert_eq!(frame.len(), 16);
            assert!((frame.power() - 2.0).abs() < 1e-9);
        }
    }
}

#[test]
fn decode_inverts_packing_of_encode() {
    let codec = JsccCodec::init(&JsccConfig::new(16, 4), 2).unwrap();
    let set = synth_cluster_tokens(2, 2, 16, 0.1, 0).unwrap();
    let frames = codec.encode(&set.batch, 3.0).unwrap();
    let out = codec.decode(&frames, 3.0).unwrap();
    for (i, row) in set.batch.iter().enumerate() {
        let z = codec.encode_item(row, 3.0).unwrap();
        assert_eq!(channel::unpack_complex(&frames[i]), z);
        assert_eq!(out.row(i), codec.decode_item(&z, 3.0).unwrap().as_slice());
    }
}

#[test]
fn traced_forward_matches_plain_path() {
    let codec = JsccCodec::init(&JsccConfig::new(16, 4), 2).unwrap();
    let token: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
    let noise = vec![0.0; 8];
    let (s_hat, _) = codec.forward_traced(&token, -2.0, &noise).unwrap();
    let z = codec.encode_item(&token, -2.0).unwrap();
    assert_eq!(s_hat, codec.decode_item(&z, -2.0).unwrap());
}

#[test]
fn init_is_seeded_and_on_f32_grid() {
    let cfg = JsccConfig::new(16, 4);
    let a = JsccCodec::init(&cfg, 7).unwrap();
    assert_eq!(a, JsccCodec::init(&cfg, 7).unwrap());
    assert_ne!(a, JsccCodec::init(&cfg, 8).unwrap());
    assert!(nn::flatten(&a).iter().all(|&v| v == v as f32 as f64));
    assert!(nn::flatten(&a.zeros_like()).iter().all(|&v| v == 0.0));
    assert_eq!(nn::param_count(&a), nn::param_count(&a.zeros_like()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = JsccConfig::new(24, 6);
    let codec = JsccCodec::init(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.ckpt");
    let store = codec.to_store("stage1", 11);
    save_checkpoint(&store, &path).unwrap();
    let back = load_checkpoint(&path, Some(&cfg.hash())).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.hash().unwrap(), store.hash().unwrap());
    let restored = JsccCodec::from_store(&cfg, &back).unwrap();
    assert_eq!(restored, codec);
    let token = vec![0.2; 24];
    assert_eq!(restored.encode_item(&token, 1.0).unwrap(), codec.encode_item(&token, 1.0).unwrap());
}

#[test]
fn checkpoint_rejects_other_config() {
    let cfg = JsccConfig::new(24, 6);
    let other = JsccConfig::new(24, 8);
    let store = JsccCodec::init(&cfg, 0).unwrap().to_store("stage1", 0);
    assert!(matches!(JsccCodec::from_store(&other, &store), Err(Error::ConfigHashMismatch { .. })));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.ckpt");
    save_checkpoint(&store, &path).unwrap();
    assert!(matches!(load_checkpoint(&path, Some(&other.hash())), Err(Error::ConfigHashMismatch { .. })));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
}
