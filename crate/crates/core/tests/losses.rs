use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semclip::tapl::TextFeatureSet;
use semclip::tokens::TokenBatch;
use semclip::training::*;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// -log(exp(row[target]) / sum(exp(row)))
fn nll(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    -(row[target].exp() / z).ln()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn oracle_jscc(s: &[Vec<f64>], s_hat: &[Vec<f64>], scale: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let fwd: Vec<f64> = (0..b).map(|j| scale * cos(&s[i], &s_hat[j])).collect();
        let bwd: Vec<f64> = (0..b).map(|j| scale * cos(&s[j], &s_hat[i])).collect();
        total += 0.5 * (nll(&fwd, i) + nll(&bwd, i));
    }
    total / b as f64
}

fn oracle_tapl(s_hat: &[Vec<f64>], t: &[Vec<Vec<f64>>], labels: &[usize], scale: f64) -> f64 {
    let b = s_hat.len();
    let g = t[0].len();
    let mut total = 0.0;
    for i in 0..b {
        let i2t: Vec<f64> = (0..g).map(|k| scale * cos(&s_hat[i], &t[i][k])).collect();
        let t2i: Vec<f64> = (0..b).map(|j| scale * cos(&s_hat[j], &t[j][labels[i]])).collect();
        total += 0.5 * (nll(&i2t, labels[i]) + nll(&t2i, i));
    }
    total / b as f64
}

#[test]
fn jscc_loss_matches_brute_force() {
    for case in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let b = rng.random_range(2..7);
        let d = rng.random_range(2..9);
        let scale = rng.random_range(0.5..10.0);
        let s = random_rows(&mut rng, b, d);
        let s_hat = random_rows(&mut rng, b, d);
        let got = jscc_loss(
            &TokenBatch::from_rows(s.clone(), None).unwrap(),
            &TokenBatch::from_rows(s_hat.clone(), None).unwrap(),
            scale,
        )
        .unwrap();
        let want = oracle_jscc(&s, &s_hat, scale);
        assert!((got - want).abs() < 1e-10, "case {case}: {got} vs {want}");
    }
}

#[test]
fn tapl_loss_matches_brute_force() {
    for case in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let b = rng.random_range(2..6);
        let g = rng.random_range(2..6);
        let d = rng.random_range(2..8);
        let scale = rng.random_range(0.5..10.0);
        let s_hat = random_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..g)).collect();
        let batch = TokenBatch::from_rows(s_hat.clone(), None).unwrap();
        let (set, per) = if case % 2 == 0 {
            let shared = random_rows(&mut rng, g, d);
            (TextFeatureSet::Shared(shared.clone()), vec![shared; b])
        } else {
            let per: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random_rows(&mut rng, g, d)).collect();
            (TextFeatureSet::PerSample(per.clone()), per)
        };
        let got = tapl_loss(&batch, &set, &labels, scale).unwrap();
        let want = oracle_tapl(&s_hat, &per, &labels, scale);
        assert!((got - want).abs() < 1e-10, "case {case}: {got} vs {want}");
    }
}

#[test]
fn constant_batches_give_log_b() {
    let s = TokenBatch::from_rows(vec![vec![-1.0, 2.0]; 4], None).unwrap();
    let s_hat = TokenBatch::from_rows(vec![vec![0.3, 0.7]; 4], None).unwrap();
    let got = jscc_loss(&s, &s_hat, 100.0).unwrap();
    assert!((got - 4f64.ln()).abs() < 1e-12, "{got}");
}

#[test]
fn identical_text_features_give_mean_of_logs() {
    let s_hat = TokenBatch::from_rows(vec![vec![0.3, 0.7]; 3], None).unwrap();
    let t = TextFeatureSet::Shared(vec![vec![1.0, 2.0]; 5]);
    let got = tapl_loss(&s_hat, &t, &[0, 4, 2], 100.0).unwrap();
    assert!((got - 0.5 * (5f64.ln() + 3f64.ln())).abs() < 1e-12, "{got}");
}

#[test]
fn orthogonal_pair_hand_value() {
    // log(1 + e^-1)
    let s = TokenBatch::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
    let got = jscc_loss(&s, &s, 1.0).unwrap();
    assert!((got - 0.313_261_687_518_222_8).abs() < 1e-12, "{got}");
    let t = TextFeatureSet::Shared(vec![vec![2.0, 0.0], vec![0.0, 3.0]]);
    let got = tapl_loss(&s, &t, &[0, 1], 1.0).unwrap();
    assert!((got - 0.313_261_687_518_222_8).abs() < 1e-12, "{got}");
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let logits = vec![vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 3.0]];
    let (loss, grad) = contrastive_ce_grad(&logits, &[2, 0]).unwrap();
    assert!((loss - 0.5 * (nll(&logits[0], 2) + nll(&logits[1], 0))).abs() < 1e-12);
    for row in grad {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
    assert!(contrastive_ce(&logits, &[3, 0]).is_err());
    assert!(contrastive_ce(&logits, &[0]).is_err());
}

#[test]
fn loss_rejects_degenerate_inputs() {
    let one = TokenBatch::from_rows(vec![vec![1.0, 0.0]], None).unwrap();
    assert!(jscc_loss(&one, &one, 1.0).is_err());
    let s = TokenBatch::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
    let zero = TokenBatch::from_rows(vec![vec![0.0, 0.0], vec![0.0, 1.0]], None).unwrap();
    assert!(jscc_loss(&s, &zero, 1.0).is_err());
    let t = TextFeatureSet::Shared(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(tapl_loss(&s, &t, &[0, 2], 1.0).is_err());
}
