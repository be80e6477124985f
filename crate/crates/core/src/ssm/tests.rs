use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check, ops, GradCheckOptions, Tape};

struct Instance {
    x: Array<f64>,
    delta: Array<f64>,
    a: Array<f64>,
    b: Array<f64>,
    c: Array<f64>,
    d_skip: Array<f64>,
}

fn instance(seed: u64, l: usize, inner: usize, state: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Array::from_fn(shape, |_| rng.gen_range(lo..hi));
    Instance {
        x: u(&[l, inner], -1.0, 1.0),
        delta: u(&[l, inner], 1e-3, 0.5),
        a: u(&[inner, state], -2.0, -0.05),
        b: u(&[l, state], -1.0, 1.0),
        c: u(&[l, state], -1.0, 1.0),
        d_skip: u(&[inner], -1.0, 1.0),
    }
}

impl Instance {
    fn steps(&self) -> StepParams<f64> {
        StepParams::discretize(&self.a, &self.delta, &self.b, &self.c).unwrap()
    }

    fn arrays(&self) -> Vec<Array<f64>> {
        vec![
            self.x.clone(),
            self.delta.clone(),
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            self.d_skip.clone(),
        ]
    }
}

fn reverse_rows(a: &Array<f64>) -> Array<f64> {
    let w = a.last_dim();
    let rows = a.len() / w;
    let mut out = Vec::with_capacity(a.len());
    for r in (0..rows).rev() {
        out.extend_from_slice(a.row(r));
    }
    Array::new(a.shape(), out).unwrap()
}

#[test]
fn discretize_examples() {
    let (ab, _) = discretize(-1.0f64, 1.0, 2f64.ln()).unwrap();
    assert!((ab - 0.5).abs() < 1e-15);

    let (ab, bb) = discretize(-2.0f64, 3.0, 0.1).unwrap();
    assert!((ab - (-0.2f64).exp()).abs() < 1e-15);
    assert!((ab - 0.818731).abs() < 1e-6);
    assert!((bb - 0.3).abs() < 1e-15);

    let (ab, bb) = discretize(-3.0f64, 5.0, 1e-12).unwrap();
    assert!((ab - 1.0).abs() < 1e-10 && bb.abs() < 1e-10);

    assert!(discretize(-1.0f64, 1.0, 0.0).is_err());
    assert!(discretize(-1.0f64, 1.0, -0.1).is_err());
}

#[test]
fn step_params_are_contractions() {
    let inst = instance(3, 16, 4, 8);
    let steps = inst.steps();
    assert!(steps.abar.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn selectivize_zero_input_gives_ln2_steps() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = init_params::<f64, _>(6, 4, &mut rng);
    p.dt_bias = Array::zeros(&[6]);
    let pv = p.map(|a| tape.param(a.clone()));
    let x = tape.constant(Array::zeros(&[5, 6]));
    let sel = selectivize(x, &pv).unwrap();
    assert!(sel.delta.value().data().iter().all(|&d| (d - 2f64.ln()).abs() < 1e-15));
}

#[test]
fn selectivize_is_a_pointwise_map() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = init_params::<f64, _>(4, 3, &mut rng);
    let pv = p.map(|a| tape.param(a.clone()));
    let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut both = row.clone();
    both.extend_from_slice(&row);
    let x = tape.constant(Array::new(&[2, 4], both).unwrap());
    let sel = selectivize(x, &pv).unwrap();
    for v in [sel.delta, sel.b, sel.c] {
        let v = v.value();
        assert_eq!(v.row(0), v.row(1));
    }
}

#[test]
fn selectivize_matches_row_by_row_projection() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (inner, state) = (5, 3);
    let p = init_params::<f64, _>(inner, state, &mut rng);
    let x = Array::from_fn(&[3, inner], |_| rng.gen_range(-1.0..1.0));
    let pv = p.map(|a| tape.param(a.clone()));
    let sel = selectivize(tape.constant(x.clone()), &pv).unwrap();

    let r = dt_rank(inner);
    let matvec = |v: &[f64], w: &Array<f64>, cols: usize| -> Vec<f64> {
        (0..cols)
            .map(|j| v.iter().enumerate().map(|(i, &vi)| vi * w.data()[i * cols + j]).sum())
            .collect()
    };
    for t in 0..3 {
        let xt = x.row(t);
        let low = matvec(xt, &p.dt_down, r);
        let pre = matvec(&low, &p.dt_up, inner);
        for d in 0..inner {
            let z = pre[d] + p.dt_bias.data()[d];
            let sp = (1.0 + z.exp()).ln();
            assert!((sel.delta.value().row(t)[d] - sp).abs() < 1e-12);
        }
        let b = matvec(xt, &p.b_proj, state);
        let c = matvec(xt, &p.c_proj, state);
        for n in 0..state {
            assert!((sel.b.value().row(t)[n] - b[n]).abs() < 1e-12);
            assert!((sel.c.value().row(t)[n] - c[n]).abs() < 1e-12);
        }
    }
}

#[test]
fn init_follows_s4d_real_and_delta_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = init_params::<f64, _>(32, 4, &mut rng);
    for d in 0..32 {
        for n in 0..4 {
            assert!((-p.a_log.at(&[d, n]).exp() + (n as f64 + 1.0)).abs() < 1e-12);
        }
    }
    assert!(p.d_skip.data().iter().all(|&v| v == 1.0));
    for &bias in p.dt_bias.data() {
        let dt = ops::softplus(bias);
        assert!((DT_MIN * (1.0 - 1e-9)..=DT_MAX * (1.0 + 1e-9)).contains(&dt), "{dt}");
    }
    assert_eq!(p.dt_down.shape(), [32, 2]);
    for v in [1e-4, 0.01, 0.7, 3.0] {
        assert!((ops::softplus(inverse_softplus(v)) - v).abs() < 1e-12 * v.max(1.0));
    }
}

#[test]
fn naive_single_step_and_zero_input() {
    let inst = instance(4, 1, 3, 2);
    let steps = inst.steps();
    let y = scan_naive(&inst.x, &steps, &inst.d_skip).unwrap();
    for d in 0..3 {
        let mut expect = inst.d_skip.data()[d] * inst.x.data()[d];
        for n in 0..2 {
            let h1 = steps.bbar.data()[d * 2 + n] * inst.x.data()[d];
            expect += inst.c.data()[n] * h1;
        }
        assert!((y.data()[d] - expect).abs() < 1e-15);
    }

    let inst = instance(5, 9, 3, 4);
    let y = scan_naive(&Array::zeros(&[9, 3]), &inst.steps(), &inst.d_skip).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

/// Frozen output of the reference recurrence on `instance(2024, 4, 2, 2)`.
const GOLDEN: [f64; 8] = [
    -0.5221131853318658,
    0.2083286750623548,
    0.24482509896610072,
    -0.17592533802229593,
    0.4366415058234784,
    0.14378477496247835,
    -0.563700158203861,
    0.04391680287887237,
];

#[test]
fn naive_matches_frozen_golden() {
    let inst = instance(2024, 4, 2, 2);
    let y = scan_naive(&inst.x, &inst.steps(), &inst.d_skip).unwrap();
    for (got, want) in y.data().iter().zip(GOLDEN) {
        assert!((got - want).abs() < 1e-12, "{:?}", y.data());
    }
}

#[test]
fn vectorized_scan_matches_oracle_at_l64() {
    let inst = instance(7, 64, 8, 16);
    let steps = inst.steps();
    let oracle = scan_naive(&inst.x, &steps, &inst.d_skip).unwrap();
    let fast = scan(&inst.x, &steps, &inst.d_skip, ScanDirection::Forward).unwrap();
    assert!(fast.max_abs_diff(&oracle) < 1e-12);

    let steps32 = StepParams {
        abar: steps.abar.cast::<f32>(),
        bbar: steps.bbar.cast::<f32>(),
        c: steps.c.cast::<f32>(),
    };
    let fast32 = scan(&inst.x.cast(), &steps32, &inst.d_skip.cast(), ScanDirection::Forward).unwrap();
    assert!(fast32.cast::<f64>().max_abs_diff(&oracle) < 1e-5);
}

#[test]
fn backward_scan_is_reverse_of_forward_on_reversed_inputs() {
    let inst = instance(8, 13, 3, 5);
    let steps = inst.steps();
    let back = scan(&inst.x, &steps, &inst.d_skip, ScanDirection::Backward).unwrap();
    let oracle = scan_naive(&reverse_rows(&inst.x), &steps.reversed(), &inst.d_skip).unwrap();
    assert!(back.max_abs_diff(&reverse_rows(&oracle)) < 1e-12);
}

#[test]
fn backward_on_palindrome_reverses_forward_output() {
    let inst = instance(10, 6, 3, 4);
    let pal = |a: &Array<f64>| {
        let mut a = a.clone();
        let (l, w) = (a.shape()[0], a.last_dim());
        for t in l / 2..l {
            let src = a.row(l - 1 - t).to_vec();
            a.data_mut()[t * w..(t + 1) * w].copy_from_slice(&src);
        }
        a
    };
    let x = pal(&inst.x);
    let steps = StepParams::discretize(&inst.a, &pal(&inst.delta), &pal(&inst.b), &pal(&inst.c)).unwrap();
    let fwd = scan(&x, &steps, &inst.d_skip, ScanDirection::Forward).unwrap();
    let back = scan(&x, &steps, &inst.d_skip, ScanDirection::Backward).unwrap();
    assert!(back.max_abs_diff(&reverse_rows(&fwd)) < 1e-12);
}

#[test]
fn vanishing_step_leaves_only_skip_path() {
    let mut inst = instance(11, 20, 4, 6);
    inst.delta = Array::full(&[20, 4], 1e-300);
    let steps = inst.steps();
    let expect = Array::from_fn(&[20, 4], |i| inst.d_skip.data()[i % 4] * inst.x.data()[i]);
    for dir in [ScanDirection::Forward, ScanDirection::Backward] {
        let y = scan(&inst.x, &steps, &inst.d_skip, dir).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-250);
    }
}

#[test]
fn state_stays_bounded_on_long_sequences() {
    let mut inst = instance(12, 4000, 2, 4);
    inst.delta = inst.delta.map(|d| d.min(0.1) + 0.01);
    let hs = naive_states(&inst.x, &inst.steps()).unwrap();
    // |h| <= max|Bbar x| / (1 - max Abar)
    let bound = hs.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let amax = inst.steps().abar.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let bmax = inst.steps().bbar.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    assert!(bound.is_finite());
    assert!(bound <= bmax / (1.0 - amax) + 1e-12, "{bound}");
}

fn fused(inst: &Instance, dir: ScanDirection) -> Array<f64> {
    let tape = Tape::<f64>::new();
    let v: Vec<_> = inst.arrays().into_iter().map(|a| tape.param(a)).collect();
    selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], dir).unwrap().to_array()
}

#[test]
fn fused_scan_agrees_with_materialized_route() {
    for (seed, l) in [(13, 1), (14, 7), (15, 50)] {
        let inst = instance(seed, l, 3, 4);
        let steps = inst.steps();
        for dir in [ScanDirection::Forward, ScanDirection::Backward] {
            let a = fused(&inst, dir);
            let b = scan(&inst.x, &steps, &inst.d_skip, dir).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}

/// `d y_t / d x_s` for every pair, from one reverse pass per output step.
fn jacobian_support(dir: ScanDirection) -> Vec<Vec<bool>> {
    let (l, inner) = (9, 2);
    let inst = instance(16, l, inner, 3);
    let mut support = vec![vec![false; l]; l];
    for (t, row) in support.iter_mut().enumerate() {
        let tape = Tape::<f64>::new();
        let v: Vec<_> = inst.arrays().into_iter().map(|a| tape.param(a)).collect();
        let y = selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], dir).unwrap();
        let out = ops::sum(ops::select_row(y, t).unwrap()).unwrap();
        tape.backward(out).unwrap();
        let gx = tape.grad(v[0]).unwrap();
        for (s, cell) in row.iter_mut().enumerate() {
            *cell = gx.row(s).iter().any(|&g| g != 0.0);
        }
    }
    support
}

#[test]
fn forward_scan_is_causal() {
    let s = jacobian_support(ScanDirection::Forward);
    for (t, row) in s.iter().enumerate() {
        for (u, &nz) in row.iter().enumerate() {
            assert_eq!(nz, u <= t, "t={t} s={u}");
        }
    }
}

#[test]
fn backward_scan_is_anti_causal() {
    let s = jacobian_support(ScanDirection::Backward);
    for (t, row) in s.iter().enumerate() {
        for (u, &nz) in row.iter().enumerate() {
            assert_eq!(nz, u >= t, "t={t} s={u}");
        }
    }
}

fn probe_weights(shape: &[usize]) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn scan_fd(seed: u64, l: usize, inner: usize, state: usize, dir: ScanDirection) -> f64 {
    let inst = instance(seed, l, inner, state);
    let w = probe_weights(&[l, inner]);
    finite_difference_check(
        |tape, v| {
            let y = selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], dir)?;
            ops::sum(ops::mul(y, tape.constant(w.clone()))?)
        },
        &inst.arrays(),
        GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_err()
}

#[test]
fn fused_scan_gradients_match_finite_differences() {
    for dir in [ScanDirection::Forward, ScanDirection::Backward] {
        // lengths on, just past, and inside chunk boundaries
        for l in [1, 4, 5, 10] {
            let err = scan_fd(20 + l as u64, l, 3, 4, dir);
            assert!(err < 1e-4, "{dir:?} L={l}: {err}");
        }
    }
}

#[test]
fn full_ssm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (l, inner, state) = (6, 4, 3);
    let p = init_params::<f64, _>(inner, state, &mut rng);
    let x = Array::from_fn(&[l, inner], |_| rng.gen_range(-1.0..1.0));
    let mut params = vec![x];
    params.extend(p.named().into_iter().map(|(_, a)| a.clone()));
    let w = probe_weights(&[l, inner]);
    for dir in [ScanDirection::Forward, ScanDirection::Backward] {
        let report = finite_difference_check(
            |tape, v| {
                let p = SsmParams {
                    a_log: v[1],
                    dt_down: v[2],
                    dt_up: v[3],
                    dt_bias: v[4],
                    b_proj: v[5],
                    c_proj: v[6],
                    d_skip: v[7],
                };
                let y = ssm_forward(v[0], &p, dir)?;
                ops::sum(ops::mul(y, tape.constant(w.clone()))?)
            },
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }
}

#[test]
fn selective_scan_rejects_bad_shapes() {
    let tape = Tape::<f64>::new();
    let inst = instance(31, 4, 2, 3);
    let v: Vec<_> = inst.arrays().into_iter().map(|a| tape.constant(a)).collect();
    assert!(selective_scan(v[0], v[1], v[2], v[4], v[1], v[5], ScanDirection::Forward).is_err());
    let empty = tape.constant(Array::zeros(&[0, 2]));
    let eb = tape.constant(Array::zeros(&[0, 3]));
    assert!(matches!(
        selective_scan(empty, empty, v[2], eb, eb, v[5], ScanDirection::Forward),
        Err(NumericsError::Empty(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scan_matches_oracle(seed in any::<u64>(), l in 1usize..=64, inner in 1usize..=8, state in 1usize..=16) {
        let inst = instance(seed, l, inner, state);
        let steps = inst.steps();
        let oracle = scan_naive(&inst.x, &steps, &inst.d_skip).unwrap();
        let fast = scan(&inst.x, &steps, &inst.d_skip, ScanDirection::Forward).unwrap();
        prop_assert!(fast.max_abs_diff(&oracle) < 1e-12);
        prop_assert!(fused(&inst, ScanDirection::Forward).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn scan_gradients_match_fd(seed in any::<u64>(), l in 1usize..=12, inner in 1usize..=3, state in 1usize..=4) {
        let dir = if seed % 2 == 0 { ScanDirection::Forward } else { ScanDirection::Backward };
        prop_assert!(scan_fd(seed, l, inner, state, dir) < 1e-4);
    }
}
