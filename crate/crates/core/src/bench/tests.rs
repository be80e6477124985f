use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn small_weights(d: usize, seed: u64) -> AttentionWeights<Array<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_attention(d, &mut rng)
}

#[test]
fn single_token_attends_only_to_itself() {
    let w = small_weights(4, 1);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Array::from_f64(&[1, 4], &[0.3, -1.0, 0.5, 2.0]).unwrap());
    let wv = w.constants(&tape);
    let (out, probs) = self_attention(x, &wv, 2).unwrap();
    for p in &probs {
        assert_eq!(p.value().data(), &[1.0]);
    }
    let v = ops::linear(x, wv.wv, None).unwrap();
    assert!(out.value().max_abs_diff(&v.value()) < 1e-15);
}

#[test]
fn identical_tokens_get_uniform_weights() {
    let w = small_weights(6, 2);
    let tape = Tape::<f64>::new();
    let row = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
    let x = tape.constant(Array::from_fn(&[5, 6], |i| row[i % 6]));
    let (_, probs) = self_attention(x, &w.constants(&tape), 3).unwrap();
    for p in &probs {
        assert!(p.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn three_tokens_match_hand_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, heads) = (3, 4, 2);
    let x = random(&mut rng, &[n, d]);
    let w = small_weights(d, 4);
    let tape = Tape::<f64>::new();
    let (out, _) = self_attention(tape.constant(x.clone()), &w.constants(&tape), heads).unwrap();

    let proj = |m: &Array<f64>| {
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] = (0..d).map(|k| x.at(&[i, k]) * m.at(&[k, j])).sum();
            }
        }
        y
    };
    let (q, k, v) = (proj(&w.wq), proj(&w.wk), proj(&w.wv));
    let dh = d / heads;
    for h in 0..heads {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..dh {
                let want: f64 = (0..n).map(|j| s[j].exp() / z * v[j * d + h * dh + c]).sum();
                assert!((out.value().at(&[i, h * dh + c]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn block_preserves_shape_and_rejects_bad_heads() {
    let w = small_weights(8, 5);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Array::ones(&[7, 8]));
    let y = attention_block_forward(x, &w.constants(&tape), 2).unwrap();
    assert_eq!(y.shape(), vec![7, 8]);
    assert!(matches!(attention_block_forward(x, &w.constants(&tape), 3), Err(BenchError::Config(_))));
}

#[test]
fn attention_block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 4]);
    let w = small_weights(4, 7);
    let report = crate::numerics::finite_difference_check(
        |tape, v| {
            let mut wv = w.constants(tape);
            wv.wq = v[1];
            wv.fc1_w = v[2];
            let y = attention_block_forward(v[0], &wv, 2).map_err(|e| NumericsError::Invalid(e.to_string()))?;
            ops::mean(ops::mul(y, y)?)
        },
        &[x, w.wq.clone(), w.fc1_w.clone()],
        Default::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{report:?}");
}

#[test]
fn fit_exponent_examples() {
    let lin: Vec<(usize, f64)> = [256, 512, 1024, 2048].iter().map(|&n| (n, 0.3 * n as f64)).collect();
    assert!((fit_exponent(&lin).unwrap() - 1.0).abs() < 1e-12);
    let quad: Vec<(usize, f64)> = [256, 512, 1024, 2048].iter().map(|&n| (n, 1e-4 * (n * n) as f64)).collect();
    assert!((fit_exponent(&quad).unwrap() - 2.0).abs() < 1e-12);
    let sqrt: Vec<(usize, f64)> = [4, 16, 64].iter().map(|&n| (n, (n as f64).sqrt())).collect();
    assert!((fit_exponent(&sqrt).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(fit_exponent(&lin[..2]), Err(BenchError::Insufficient(_))));
}

#[test]
fn single_rep_sweep_yields_one_row_per_model() {
    let opts = BenchOptions {
        reps: 1,
        warmups: 0,
        ..Default::default()
    };
    let report = measure_all(&[ModelKind::AumS, ModelKind::AttnS], &[16], &opts).unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert_eq!(r.status, CellStatus::Ok);
        assert!(r.fwd_ms.unwrap() > 0.0 && r.peak_bytes.unwrap() > 0);
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some("model,tokens,fwd_ms,fwdbwd_ms,peak_bytes,status"));
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("aum-s,16,"));
}

#[test]
fn budget_overrun_is_dnf_for_all_larger_counts() {
    let opts = BenchOptions {
        reps: 1,
        warmups: 0,
        budget_bytes: Some(40 << 20),
        ..Default::default()
    };
    let rows = measure(ModelKind::AttnS, &[8, 2048, 4096], &opts).unwrap();
    assert_eq!(rows[0].status, CellStatus::Ok);
    assert_eq!(rows[1].status, CellStatus::Dnf);
    assert_eq!(rows[2].status, CellStatus::Dnf);
    assert_eq!(rows[2].fwd_ms, None);
    assert_eq!(memory::budget(), None);
}

#[test]
fn token_counts_must_increase() {
    let opts = BenchOptions::default();
    assert!(matches!(measure(ModelKind::AumS, &[64, 32], &opts), Err(BenchError::Config(_))));
    assert!(matches!(measure(ModelKind::AumS, &[], &opts), Err(BenchError::Config(_))));
}

#[test]
fn model_names_round_trip() {
    for k in ModelKind::ALL {
        assert_eq!(k.label().parse::<ModelKind>().unwrap(), k);
    }
    assert_eq!(ModelKind::AttnS.heads(), 6);
    assert_eq!(ModelKind::AttnB.heads(), 12);
    assert!("mamba".parse::<ModelKind>().is_err());
}

proptest! {
    #[test]
    fn fit_is_scale_invariant(
        times in prop::collection::vec(0.01f64..100.0, 3..8),
        c in 0.001f64..1000.0,
    ) {
        let pts: Vec<(usize, f64)> = times.iter().enumerate().map(|(i, &t)| (64 << i, t)).collect();
        let scaled: Vec<(usize, f64)> = pts.iter().map(|&(n, t)| (n, c * t)).collect();
        let (a, b) = (fit_exponent(&pts).unwrap(), fit_exponent(&scaled).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }
}
