mod common;

use std::sync::Arc;

use common::{primitive_fd_error, random_tensor, rel_err, FD_STEP};
use mivae::diff::{Activation, Mlp, ParamStore, Rng, Segments, Tape, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn dims() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..5, 1usize..5)
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let mut t = random_tensor(rng, rows, cols, -2.0, 2.0);
    for v in t.values_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// Per-column values whose pairwise gaps are at least 0.05.
fn distinct(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut values = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut order: Vec<usize> = (0..rows).collect();
        rng.shuffle(&mut order);
        for (r, &k) in order.iter().enumerate() {
            values[r * cols + c] = k as f64 * 0.1 + rng.uniform(0.0, 0.05) - 0.3;
        }
    }
    Tensor::matrix(rows, cols, values).unwrap()
}

fn segments(rng: &mut Rng, count: usize) -> Arc<Segments> {
    let lengths: Vec<usize> = (0..count).map(|_| rng.int_inclusive(1, 3)).collect();
    Arc::new(Segments::from_lengths(&lengths).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients((seed, m, k) in dims(), n in 1usize..5) {
        let mut rng = Rng::from_seed(seed);
        let a = random_tensor(&mut rng, m, k, -2.0, 2.0);
        let b = random_tensor(&mut rng, k, n, -2.0, 2.0);
        let err = primitive_fd_error(&mut rng, &[a, b], &|t, v| t.matmul(v[0], v[1]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn add_sub_mul_gradients((seed, r, c) in dims(), kind in 0usize..3, bcast in 0usize..3) {
        let mut rng = Rng::from_seed(seed);
        let a = random_tensor(&mut rng, r, c, -2.0, 2.0);
        let b = match bcast {
            0 => random_tensor(&mut rng, r, c, -2.0, 2.0),
            1 => random_tensor(&mut rng, 1, c, -2.0, 2.0),
            _ => Tensor::scalar(rng.uniform(-2.0, 2.0)),
        };
        let err = primitive_fd_error(&mut rng, &[a, b], &|t, v| match kind {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn relu_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        let x = away_from_zero(&mut rng, r, c, 1e-2);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.relu(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn sigmoid_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&mut rng, r, c, -6.0, 6.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.sigmoid(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn exp_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&mut rng, r, c, -3.0, 3.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.exp(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn log_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&mut rng, r, c, 0.1, 5.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.log(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn softplus_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&mut rng, r, c, -8.0, 8.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.softplus(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn neg_scale_shift_gradients((seed, r, c) in dims(), factor in -3.0f64..3.0, shift in -3.0f64..3.0) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&mut rng, r, c, -2.0, 2.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| {
            let a = t.neg(v[0])?;
            let b = t.scale(a, factor);
            Ok(t.add_scalar(b, shift))
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn clamp_gradients((seed, r, c) in dims()) {
        let mut rng = Rng::from_seed(seed);
        // bounds at +-1 with inputs kept 0.01 away from them
        let mut x = random_tensor(&mut rng, r, c, -2.0, 2.0);
        for v in x.values_mut() {
            if (v.abs() - 1.0).abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| Ok(t.clamp(v[0], -1.0, 1.0)));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn column_op_gradients((seed, r, c) in dims(), extra in 1usize..4) {
        let mut rng = Rng::from_seed(seed);
        let a = random_tensor(&mut rng, r, c, -2.0, 2.0);
        let b = random_tensor(&mut rng, r, extra, -2.0, 2.0);
        let err = primitive_fd_error(&mut rng, &[a, b], &|t, v| {
            let joined = t.concat_cols(v[0], v[1])?;
            let part = t.slice_cols(joined, 1, c + extra)?;
            let sums = t.sum_cols(part)?;
            let total = t.sum_all(part);
            let both = t.mul(sums, total)?;
            t.concat_cols(both, part)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn segment_gradients(seed in any::<u64>(), count in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::from_seed(seed);
        let segs = segments(&mut rng, count);
        let x = random_tensor(&mut rng, segs.total_rows(), c, -2.0, 2.0);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| {
            let mean = t.segment_mean(v[0], &segs)?;
            let sum = t.segment_sum(v[0], &segs)?;
            let prod = t.mul(mean, sum)?;
            t.broadcast_segments(prod, &segs)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn segment_max_gradients(seed in any::<u64>(), count in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::from_seed(seed);
        let segs = segments(&mut rng, count);
        let x = distinct(&mut rng, segs.total_rows(), c);
        let err = primitive_fd_error(&mut rng, &[x], &|t, v| t.segment_max(v[0], &segs));
        prop_assert!(err < TOL, "rel err {err}");
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = Rng::from_seed(7);
    let a = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let b = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
    let mut tape = Tape::new();
    let va = tape.variable(a.clone());
    let vb = tape.constant(b.clone());
    let out = tape.matmul(va, vb).unwrap();
    let s = tape.sum_all(out);
    let g = tape.backward(s).unwrap();
    let ga = g.var(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected = b.get(k, 0) + b.get(k, 1);
            assert!((ga.get(i, k) - expected).abs() < 1e-14);
            let mut plus = a.clone();
            plus.values_mut()[i * 4 + k] += FD_STEP;
            let mut minus = a.clone();
            minus.values_mut()[i * 4 + k] -= FD_STEP;
            let total = |m: &Tensor| -> f64 {
                (0..3).map(|r| (0..2).map(|c| (0..4).map(|j| m.get(r, j) * b.get(j, c)).sum::<f64>()).sum::<f64>()).sum()
            };
            let numeric = (total(&plus) - total(&minus)) / (2.0 * FD_STEP);
            assert!(rel_err(ga.get(i, k), numeric, 1e-3) < 1e-6);
        }
    }
}

#[test]
fn diamond_graph_sums_both_paths() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(1.5));
    let a = tape.exp(x).unwrap();
    let b = tape.scale(x, 3.0);
    let y = tape.mul(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    let expected = 1.5f64.exp() * 4.5 + 1.5f64.exp() * 3.0;
    assert_eq!(g.var(x).unwrap().item(), expected);
}

fn mlp_straight_line(w1: &[Vec<f64>], b1: &[f64], w2: &[Vec<f64>], b2: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; b1.len()];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut s = b1[j];
        for (i, xi) in x.iter().enumerate() {
            s += xi * w1[i][j];
        }
        *hj = if s > 0.0 { s } else { 0.0 };
    }
    let mut out = vec![0.0; b2.len()];
    for (k, ok) in out.iter_mut().enumerate() {
        let mut s = b2[k];
        for (j, hj) in h.iter().enumerate() {
            s += hj * w2[j][k];
        }
        *ok = s;
    }
    out
}

#[test]
fn mlp_matches_straight_line_evaluation() {
    let mut rng = Rng::from_seed(11);
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "net", &[3, 5, 2], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).values_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let to_rows = |t: &Tensor| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect::<Vec<_>>();
    let l = net.layers();
    let w1 = to_rows(store.get(l[0].weight));
    let b1 = store.get(l[0].bias).values().to_vec();
    let w2 = to_rows(store.get(l[1].weight));
    let b2 = store.get(l[1].bias).values().to_vec();
    let x = vec![0.3, -1.2, 0.8];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::row(x.clone()));
    let out = net.forward(&mut tape, &store, xv, Activation::Relu, Activation::Identity).unwrap();
    let expected = mlp_straight_line(&w1, &b1, &w2, &b2, &x);
    for (a, b) in tape.value(out).values().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn mlp_loss_gradients_match_finite_differences() {
    let mut rng = Rng::from_seed(3);
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "net", &[3, 4, 2], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        for v in store.get_mut(id).values_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let x = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let target = random_tensor(&mut rng, 5, 2, -1.0, 1.0);
    let loss = |store: &ParamStore| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = net.forward(&mut tape, store, xv, Activation::Relu, Activation::Sigmoid).unwrap();
        let t = tape.constant(target.clone());
        let d = tape.sub(out, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum_all(sq);
        (tape, l)
    };
    let (tape, l) = loss(&store);
    let grads = tape.backward(l).unwrap();
    for &id in &ids {
        let g = grads.param(id).unwrap().clone();
        for i in 0..g.len() {
            let mut plus = store.clone();
            plus.get_mut(id).values_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).values_mut()[i] -= FD_STEP;
            let fp = {
                let (t, l) = loss(&plus);
                t.value(l).item()
            };
            let fm = {
                let (t, l) = loss(&minus);
                t.value(l).item()
            };
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(g.values()[i], numeric, 1e-3);
            assert!(err < 1e-4, "{} [{i}]: {} vs {numeric}", store.name(id), g.values()[i]);
        }
    }
}
