use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::error::SeldError;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Scalarizes a tensor-valued op with fixed random weights.
fn weighted(tape: &mut Tape<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let w = tape.constant(randn(tape.shape(v), seed ^ 0x5eed));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

// ---- matmul ----

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity() {
    let mut t = Tape::<f64>::new();
    let i = t.constant(Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]));
    let x = t.constant(Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]));
    let y = t.matmul(i, x).unwrap();
    assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn matmul_small_matches_triple_loop() {
    let (a, b) = (vec![1., 2., 3., 4.], vec![5., 6.]);
    let expected = matmul_oracle(&a, &b, 2, 2, 1);
    assert_eq!(expected, vec![17., 39.]);
    let mut t = Tape::<f64>::new();
    let va = t.constant(Tensor::from_vec(vec![2, 2], a));
    let vb = t.constant(Tensor::from_vec(vec![2, 1], b));
    let y = t.matmul(va, vb).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 1]);
    assert_eq!(t.value(y).data(), &expected[..]);
}

#[test]
fn matmul_zero_matrix() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros(vec![3, 4]));
    let x = t.constant(randn(&[4, 2], 1));
    let y = t.matmul(z, x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_broadcasts_batch_axes() {
    let a = randn(&[2, 3, 4, 5], 2);
    let b = randn(&[5, 2], 3);
    let mut t = Tape::<f64>::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = t.matmul(va, vb).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 3, 4, 2]);
    for batch in 0..6 {
        let oracle = matmul_oracle(&a.data()[batch * 20..(batch + 1) * 20], b.data(), 4, 5, 2);
        let got = &t.value(y).data()[batch * 8..(batch + 1) * 8];
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![4, 2]));
    match t.matmul(a, b) {
        Err(SeldError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

// ---- conv2d ----

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
    let (b, cin, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(vec![b, cout, t, f]);
    for n in 0..b {
        for co in 0..cout {
            for i in 0..t {
                for j in 0..f {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ti, fj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ti < 0 || fj < 0 || ti >= t as isize || fj >= f as isize {
                                    continue;
                                }
                                s += x.at(&[n, ci, ti as usize, fj as usize]) * w.at(&[co, ci, di, dj]);
                            }
                        }
                    }
                    let off = out.offset(&[n, co, i, j]);
                    out.data_mut()[off] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_center_kernel() {
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let w = t.constant(Tensor::from_vec(vec![1, 1, 3, 3], kernel));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv2d(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.0; 9]);
}

#[test]
fn conv_delta_input_reflects_kernel() {
    let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut x = Tensor::zeros(vec![1, 1, 5, 5]);
    x.data_mut()[2 * 5 + 2] = 1.0;
    let w = Tensor::from_vec(vec![1, 1, 3, 3], kernel.clone());
    let oracle = conv_oracle(&x, &w, &[0.0]);
    let mut t = Tape::<f64>::new();
    let (vx, vw, vb) = (t.constant(x), t.constant(w), t.constant(Tensor::zeros(vec![1])));
    let y = t.conv2d(vx, vw, vb).unwrap();
    assert_eq!(t.value(y), &oracle);
    // the 3x3 neighbourhood of the delta holds the kernel flipped in both axes
    for di in 0..3 {
        for dj in 0..3 {
            assert_eq!(t.value(y).at(&[0, 0, 1 + di, 1 + dj]), kernel[(2 - di) * 3 + (2 - dj)]);
        }
    }
}

#[test]
fn conv_random_matches_direct_loops() {
    let x = randn(&[2, 3, 6, 5], 10);
    let w = randn(&[4, 3, 3, 3], 11);
    let bias = vec![0.1, -0.2, 0.3, 0.0];
    let oracle = conv_oracle(&x, &w, &bias);
    let mut t = Tape::<f64>::new();
    let (vx, vw) = (t.constant(x), t.constant(w));
    let vb = t.constant(Tensor::from_vec(vec![4], bias));
    let y = t.conv2d(vx, vw, vb).unwrap();
    assert!(t.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv_bias_gradient_is_extent_count() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(randn(&[1, 2, 4, 6], 3));
    let w = t.constant(randn(&[3, 2, 3, 3], 4));
    let b = t.leaf(Tensor::zeros(vec![3]).with_grad());
    let y = t.conv2d(x, w, b).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(b).unwrap(), &[24.0, 24.0, 24.0]);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(vec![3, 5, 3, 3]));
    let b = t.constant(Tensor::zeros(vec![3]));
    assert!(matches!(t.conv2d(x, w, b), Err(SeldError::Dimension { .. })));
}

// ---- max_pool2d ----

#[test]
fn max_pool_unit_window_is_identity() {
    let x = randn(&[1, 2, 4, 4], 5);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x.clone());
    let y = t.max_pool2d(v, 1, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn max_pool_two_by_two() {
    let mut t = Tape::<f64>::new();
    let v = t.constant(Tensor::from_vec(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]));
    let y = t.max_pool2d(v, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
}

#[test]
fn max_pool_schedule_reaches_sixteen_bins() {
    let mut t = Tape::<f32>::new();
    let mut v = t.constant(Tensor::zeros(vec![1, 1, 250, 64]));
    for (kt, kf) in [(5, 2), (1, 2), (1, 1)] {
        v = t.max_pool2d(v, kt, kf).unwrap();
    }
    assert_eq!(t.shape(v), &[1, 1, 50, 16]);
}

#[test]
fn max_pool_rejects_non_divisible() {
    let mut t = Tape::<f64>::new();
    let v = t.constant(Tensor::zeros(vec![1, 1, 5, 4]));
    assert!(matches!(t.max_pool2d(v, 2, 2), Err(SeldError::Config(_))));
}

#[test]
fn max_pool_backward_conserves_mass_and_breaks_ties_first() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![7., 7., 7., 7.]).with_grad());
    let y = t.max_pool2d(x, 2, 2).unwrap();
    let s = t.scale(y, 3.0);
    let s = t.sum(s);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 0.0, 0.0, 0.0]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(randn(&[2, 3, 6, 4], 6).with_grad());
    let y = t.max_pool2d(x, 3, 2).unwrap();
    let s = weighted(&mut t, y, 7).unwrap();
    t.backward(s).unwrap();
    let w = randn(t.shape(y), 7 ^ 0x5eed);
    let out_mass: f64 = w.data().iter().sum();
    let in_mass: f64 = t.grad(x).unwrap().iter().sum();
    assert!((out_mass - in_mass).abs() < 1e-12);
}

// ---- gru ----

struct ScalarGru {
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    b_ih: Vec<f64>,
    b_hh: Vec<f64>,
    d: usize,
    h: usize,
}

impl ScalarGru {
    fn cell(&self, x: &[f64], hprev: &[f64]) -> Vec<f64> {
        let h = self.h;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xi = |g: usize| -> f64 {
            self.b_ih[g] + (0..self.d).map(|i| x[i] * self.w_ih[i * 3 * h + g]).sum::<f64>()
        };
        let hh = |g: usize| -> f64 {
            self.b_hh[g] + (0..h).map(|i| hprev[i] * self.w_hh[i * 3 * h + g]).sum::<f64>()
        };
        (0..h)
            .map(|j| {
                let r = sig(xi(j) + hh(j));
                let z = sig(xi(h + j) + hh(h + j));
                let n = (xi(2 * h + j) + r * hh(2 * h + j)).tanh();
                (1.0 - z) * n + z * hprev[j]
            })
            .collect()
    }

    fn run(&self, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); xs.len()];
        let mut hstate = vec![0.0; self.h];
        let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            hstate = self.cell(&xs[t], &hstate);
            out[t] = hstate.clone();
        }
        out
    }
}

fn gru_params(d: usize, h: usize, seed: u64) -> [Tensor<f64>; 4] {
    [
        randn(&[d, 3 * h], seed),
        randn(&[h, 3 * h], seed + 1),
        randn(&[3 * h], seed + 2),
        randn(&[3 * h], seed + 3),
    ]
}

fn record_gru(t: &mut Tape<f64>, p: &[Tensor<f64>; 4]) -> GruWeights {
    GruWeights {
        w_ih: t.leaf(p[0].clone()),
        w_hh: t.leaf(p[1].clone()),
        b_ih: t.leaf(p[2].clone()),
        b_hh: t.leaf(p[3].clone()),
    }
}

#[test]
fn gru_zero_weights_zero_input() {
    let mut t = Tape::<f64>::new();
    let zeros = [
        Tensor::zeros(vec![3, 6]),
        Tensor::zeros(vec![2, 6]),
        Tensor::zeros(vec![6]),
        Tensor::zeros(vec![6]),
    ];
    let (f, b) = (record_gru(&mut t, &zeros), record_gru(&mut t, &zeros));
    let x = t.constant(Tensor::zeros(vec![2, 4, 3]));
    let y = t.gru_bidirectional(x, &f, &b).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_matches_scalar_recurrence() {
    let (d, h) = (3, 2);
    for steps in [1usize, 3] {
        let pf = gru_params(d, h, 20);
        let pb = gru_params(d, h, 30);
        let x = randn(&[1, steps, d], 40);
        let mut t = Tape::<f64>::new();
        let (wf, wb) = (record_gru(&mut t, &pf), record_gru(&mut t, &pb));
        let vx = t.constant(x.clone());
        let y = t.gru_bidirectional(vx, &wf, &wb).unwrap();
        let oracle = |p: &[Tensor<f64>; 4]| ScalarGru {
            w_ih: p[0].data().to_vec(),
            w_hh: p[1].data().to_vec(),
            b_ih: p[2].data().to_vec(),
            b_hh: p[3].data().to_vec(),
            d,
            h,
        };
        let xs: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
        let fwd = oracle(&pf).run(&xs, false);
        let bwd = oracle(&pb).run(&xs, true);
        for s in 0..steps {
            for j in 0..h {
                assert!((t.value(y).at(&[0, s, j]) - fwd[s][j]).abs() < 1e-12);
                assert!((t.value(y).at(&[0, s, h + j]) - bwd[s][j]).abs() < 1e-12);
            }
        }
        if steps == 1 {
            // a single step is one cell application in each direction
            let cell = oracle(&pf).cell(&xs[0], &[0.0, 0.0]);
            assert!((t.value(y).at(&[0, 0, 0]) - cell[0]).abs() < 1e-12);
        }
    }
}

// ---- softmax ----

#[test]
fn softmax_constant_row_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(vec![1, 4], 2.5));
    let y = t.softmax(x, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn softmax_closed_form() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(vec![2], vec![0.0, 3f64.ln()]));
    let y = t.softmax(x, 0).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariant_and_overflow_safe() {
    let x = randn(&[3, 5], 8);
    let mut t = Tape::<f64>::new();
    let a = t.constant(x.clone());
    let b = t.constant(x.map(|v| v + 1000.0));
    let ya = t.softmax(a, 1).unwrap();
    let yb = t.softmax(b, 1).unwrap();
    assert!(t.value(ya).max_abs_diff(t.value(yb)) < 1e-12);
    assert!(t.value(yb).is_finite());
}

// ---- layer_norm ----

fn layer_norm_once(x: Tensor<f64>, gamma: Vec<f64>, beta: Vec<f64>) -> Tensor<f64> {
    let mut t = Tape::<f64>::new();
    let d = gamma.len();
    let vx = t.constant(x);
    let g = t.constant(Tensor::from_vec(vec![d], gamma));
    let b = t.constant(Tensor::from_vec(vec![d], beta));
    let y = t.layer_norm(vx, g, b, 1e-5).unwrap();
    t.value(y).clone()
}

#[test]
fn layer_norm_standardizes_rows() {
    let y = layer_norm_once(randn(&[4, 16], 9).map(|v| 3.0 * v + 2.0), vec![1.0; 16], vec![0.0; 16]);
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // eps in the denominator shrinks variance by a factor var/(var+eps)
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
}

#[test]
fn layer_norm_constant_row_gives_beta() {
    let beta: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
    let y = layer_norm_once(Tensor::full(vec![1, 5], 4.0), vec![2.0; 5], beta.clone());
    assert_eq!(y.data(), &beta[..]);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let x = randn(&[1, 8], 12);
    let gamma = randn(&[8], 13).into_data();
    let beta = randn(&[8], 14).into_data();
    let y = layer_norm_once(x.clone(), gamma.clone(), beta.clone());
    let row = x.data();
    let mean = row.iter().sum::<f64>() / 8.0;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
    for j in 0..8 {
        let expected = (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
        assert!((y.data()[j] - expected).abs() < 1e-12);
    }
}

// ---- dropout ----

#[test]
fn dropout_identity_cases() {
    let x = randn(&[3, 7], 15);
    let mut rng = rng_from_seed(1);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x.clone());
    let a = t.dropout(v, 0.0, true, &mut rng).unwrap();
    let b = t.dropout(v, 0.5, false, &mut rng).unwrap();
    assert_eq!(t.value(a), &x);
    assert_eq!(t.value(b), &x);
    assert!(matches!(t.dropout(v, 1.0, true, &mut rng), Err(SeldError::Config(_))));
}

#[test]
fn dropout_preserves_expectation() {
    let x = Tensor::<f64>::from_fn(vec![8], |i| 1.0 + i as f64);
    let mut rng = rng_from_seed(2);
    let draws = 4000;
    let mut acc = [0.0; 8];
    for _ in 0..draws {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let y = t.dropout(v, 0.3, true, &mut rng).unwrap();
        acc.iter_mut().zip(t.value(y).data()).for_each(|(a, &b)| *a += b);
    }
    for (a, &xv) in acc.iter().zip(x.data()) {
        let mean = a / draws as f64;
        assert!((mean - xv).abs() / xv < 0.05, "{mean} vs {xv}");
    }
}

// ---- tape ----

#[test]
fn backward_visits_each_op_once() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(randn(&[2, 3], 16).with_grad());
    let a = t.tanh(x);
    let b = t.mul(a, x).unwrap();
    let c = t.add(b, a).unwrap();
    let s = t.sum(c);
    let visited = t.backward(s).unwrap();
    assert_eq!(visited, 4);
    // d/dx [tanh(x)·x + tanh(x)] = (1 - tanh²)(x + 1) + tanh
    for (g, &xv) in t.grad(x).unwrap().iter().zip(t.value(x).data()) {
        let th = xv.tanh();
        assert!((g - ((1.0 - th * th) * (xv + 1.0) + th)).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(vec![2]).with_grad());
    assert!(matches!(t.backward(x), Err(SeldError::Usage(_))));
}

// ---- grad_check ----

#[test]
fn grad_check_of_sum_is_exact() {
    // integer inputs and a power-of-two step keep every perturbed sum exact
    let x = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64 - 2.0);
    let err = grad_check(|t, v| Ok(t.sum(v)), &x, 2f64.powi(-16)).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_softmax_weighted_sum() {
    let x = randn(&[3, 4], 17);
    let err = grad_check(
        |t, v| {
            let y = t.softmax(v, 1)?;
            weighted(t, y, 18)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn softmax_then_sum_has_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(randn(&[3, 4], 19).with_grad());
    let y = t.softmax(x, 1).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn grad_check_every_op() {
    let results = op_suite(H).unwrap();
    assert!(results.len() >= 25);
    for (name, err) in results {
        assert!(err < TOL, "{name}: {err:e}");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn perm_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec(1usize..4, 1..5).prop_flat_map(|shape| {
            let rank = shape.len();
            (Just(shape), Just((0..rank).collect::<Vec<_>>()).prop_shuffle())
        })
    }

    proptest! {
        #[test]
        fn permute_round_trip_is_bit_exact((shape, perm) in perm_strategy(), seed in any::<u64>()) {
            let x = randn(&shape, seed);
            let y = x.permute(&perm).unwrap().permute(&inverse_perm(&perm)).unwrap();
            prop_assert_eq!(y.data(), x.data());
            prop_assert_eq!(y.shape(), x.shape());
        }

        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(randn(&[rows, cols], seed).map(|v| 30.0 * v));
            let y = t.softmax(x, 1).unwrap();
            for row in t.value(y).data().chunks(cols) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn max_pool_gradient_mass_is_conserved(seed in any::<u64>(), kt in 1usize..4, kf in 1usize..3) {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(randn(&[1, 2, 6, 4], seed).with_grad());
            let y = t.max_pool2d(x, kt.min(3), kf).unwrap();
            let y = t.scale(y, 1.0);
            let s = t.sum(y);
            t.backward(s).unwrap();
            let mass: f64 = t.grad(x).unwrap().iter().sum();
            prop_assert!((mass - t.value(y).numel() as f64).abs() < 1e-12);
        }

        #[test]
        fn adam_zero_lr_is_noop(seed in any::<u64>()) {
            let mut p = randn(&[5], seed).with_grad();
            let before = p.data().to_vec();
            p.grad = Some(randn(&[5], seed ^ 1).into_data());
            let mut s = AdamState::new(5, AdamConfig { lr: 0.0, ..AdamConfig::default() });
            adam_step(&mut p, &mut s).unwrap();
            prop_assert_eq!(p.data(), &before[..]);
        }
    }
}
