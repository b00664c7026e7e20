use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- independent oracles --------------------------------------------------

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (nq, d) = q.dims2();
    let (nk, dv) = v.dims2();
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..nk {
            let a = scores[j].exp() / z;
            for c in 0..dv {
                out[i * dv + c] += a * v.at(j, c);
            }
        }
    }
    out
}

/// Scatter-accumulate transposed convolution, kernel `cin×k×k×cout`.
fn naive_conv_transpose(x: &Tensor<f64>, kern: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (kern.shape()[1], kern.shape()[3]);
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    let mut out = vec![0.0; ho * wo * cout];
    for i in 0..h {
        for j in 0..w {
            for ci in 0..cin {
                let xv = x.data()[(i * w + j) * cin + ci];
                for di in 0..k {
                    for dj in 0..k {
                        for co in 0..cout {
                            let kv = kern.data()[((ci * k + di) * k + dj) * cout + co];
                            out[((i * stride + di) * wo + j * stride + dj) * cout + co] += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---- matmul ---------------------------------------------------------------

#[test]
fn matmul_identity_and_zero() {
    let mut t = Tape::<f64>::new();
    let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let a = t.constant(Tensor::from_rows(&[vec![2.5, -1.0], vec![0.25, 7.0]]));
    let zero = t.constant(Tensor::zeros([2, 2]));
    let ia = t.matmul(eye, a).unwrap();
    assert_eq!(t.value(ia), t.value(a));
    let za = t.matmul(zero, a).unwrap();
    assert!(t.value(za).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut t = Tape::<f64>::new();
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
    let expected = naive_matmul(a.data(), b.data(), 2, 2, 1);
    let (a, b) = (t.constant(a), t.constant(b));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), expected.as_slice());
    assert_eq!(t.shape(c), &[2, 1]);
}

#[test]
fn matmul_random_8x8_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[8, 8]);
        let b = rand_tensor(&mut rng, &[8, 8]);
        let expected = naive_matmul(a.data(), b.data(), 8, 8, 8);
        let mut t = Tape::<f32>::new();
        let (va, vb) = (t.constant(a.cast()), t.constant(b.cast()));
        let c = t.matmul(va, vb).unwrap();
        for (got, want) in t.value(c).data().iter().zip(&expected) {
            let rel = (*got as f64 - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

// ---- softmax --------------------------------------------------------------

#[test]
fn softmax_symmetry_and_stability() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
    let y = t.softmax(x, 1).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let big = t.constant(Tensor::new([1, 2], vec![1000.0, 1000.0]).unwrap());
    let y = t.softmax(big, 1).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn log_softmax_matches_direct_evaluation() {
    let xs = [1.0f64, 2.0, 3.0];
    let z: f64 = xs.iter().map(|x| x.exp()).sum();
    let expected: Vec<f64> = xs.iter().map(|x| (x.exp() / z).ln()).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new([3], xs.to_vec()).unwrap());
    let y = t.log_softmax(x, 0).unwrap();
    for (got, want) in t.value(y).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new([2], vec![f32::NAN, 0.0]).unwrap());
    assert!(matches!(t.softmax(x, 0), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_over_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x);
    let y = t.softmax(v, 1).unwrap();
    let y = t.value(y).data().to_vec();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| y[(o * 3 + j) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f32> = rand_tensor(&mut rng, &[rows, cols]).map(|v| v * 20.0).cast();
        let mut t = Tape::<f32>::new();
        let v = t.constant(x);
        let y = t.softmax(v, 1).unwrap();
        for r in 0..rows {
            let row = t.value(y).row(r);
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }
}

// ---- attention ------------------------------------------------------------

#[test]
fn attention_single_key_returns_value() {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.2, 9.0]]));
    let k = t.constant(Tensor::from_rows(&[vec![0.5, 0.5]]));
    let v = t.constant(Tensor::from_rows(&[vec![4.0, -2.0]]));
    let o = t.attention(q, k, v, false).unwrap();
    assert_eq!(t.value(o).data(), &[4.0, -2.0, 4.0, -2.0]);
}

#[test]
fn attention_orthogonal_query_averages_values() {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::from_rows(&[vec![0.0, 1.0]]));
    let k = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]]));
    let v = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]));
    let o = t.attention(q, k, v, false).unwrap();
    let got = t.value(o).data();
    assert!((got[0] - 3.0).abs() < 1e-12 && (got[1] - 5.0).abs() < 1e-12);
}

#[test]
fn attention_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (q, k, v) = (
        rand_tensor(&mut rng, &[2, 4]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[3, 4]),
    );
    let expected = naive_attention(&q, &k, &v);
    let mut t = Tape::<f64>::new();
    let (vq, vk, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let o = t.attention(vq, vk, vv, false).unwrap();
    for (g, w) in t.value(o).data().iter().zip(&expected) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn attention_dimension_mismatch() {
    let mut t = Tape::<f32>::new();
    let q = t.constant(Tensor::zeros([2, 4]));
    let k = t.constant(Tensor::zeros([3, 5]));
    let v = t.constant(Tensor::zeros([3, 4]));
    assert!(matches!(t.attention(q, k, v, false), Err(Error::Dimension { .. })));
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let mut y = x.clone();
    y.data_mut()[3 * 3] += 5.0;
    let run = |x: Tensor<f64>| {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let o = t.attention(v, v, v, true).unwrap();
        t.value(o).clone()
    };
    let (a, b) = (run(x), run(y));
    assert_eq!(&a.data()[..9], &b.data()[..9]);
    assert_ne!(&a.data()[9..], &b.data()[9..]);
}

fn permute_rows(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

proptest! {
    #[test]
    fn attention_is_convex_and_permutation_invariant(seed in any::<u64>(), nk in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Tensor<f32> = rand_tensor(&mut rng, &[3, 4]).map(|v| v * 3.0).cast();
        let k: Tensor<f32> = rand_tensor(&mut rng, &[nk, 4]).map(|v| v * 3.0).cast();
        let v: Tensor<f32> = rand_tensor(&mut rng, &[nk, 5]).cast();
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.reverse();
        perm.rotate_left(nk / 2);
        let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
            let mut t = Tape::<f32>::new();
            let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let o = t.attention(a, b, c, false).unwrap();
            t.value(o).clone()
        };
        let base = run(&k, &v);
        let permuted = run(&permute_rows(&k, &perm), &permute_rows(&v, &perm));
        prop_assert_eq!(base.data(), permuted.data());
        for c in 0..5 {
            let col: Vec<f32> = (0..nk).map(|j| v.at(j, c)).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for i in 0..3 {
                let o = base.at(i, c);
                prop_assert!(o >= lo - 1e-6 && o <= hi + 1e-6);
            }
        }
    }
}

// ---- multi-head attention -------------------------------------------------

#[test]
fn one_head_with_identity_projection_equals_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, k, v) = (
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[5, 4]),
    );
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let mut t = Tape::<f64>::new();
    let (vq, vk, vv, w) = (t.constant(q), t.constant(k), t.constant(v), t.constant(eye));
    let plain = t.attention(vq, vk, vv, false).unwrap();
    let mha = t.multi_head_attention(vq, vk, vv, 1, false, Some((w, None))).unwrap();
    assert!(t.value(plain).max_abs_diff(t.value(mha)) < 1e-12);
}

#[test]
fn two_heads_match_independent_per_head_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (q, k, v) = (
        rand_tensor(&mut rng, &[2, 4]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[3, 4]),
    );
    let cols = |x: &Tensor<f64>, s: usize| {
        let rows: Vec<Vec<f64>> = (0..x.dims2().0).map(|r| x.row(r)[s..s + 2].to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    let h0 = naive_attention(&cols(&q, 0), &cols(&k, 0), &cols(&v, 0));
    let h1 = naive_attention(&cols(&q, 2), &cols(&k, 2), &cols(&v, 2));
    let mut t = Tape::<f64>::new();
    let (vq, vk, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let o = t.multi_head_attention(vq, vk, vv, 2, false, None).unwrap();
    for i in 0..2 {
        let row = t.value(o).row(i);
        assert!((row[0] - h0[i * 2]).abs() < 1e-12 && (row[1] - h0[i * 2 + 1]).abs() < 1e-12);
        assert!((row[2] - h1[i * 2]).abs() < 1e-12 && (row[3] - h1[i * 2 + 1]).abs() < 1e-12);
    }
}

#[test]
fn multi_head_rejects_indivisible_dim() {
    let mut t = Tape::<f32>::new();
    let q = t.constant(Tensor::zeros([2, 6]));
    assert!(matches!(
        t.multi_head_attention(q, q, q, 4, false, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn multi_head_permutation_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let q: Tensor<f32> = rand_tensor(&mut rng, &[2, 8]).cast();
    let k: Tensor<f32> = rand_tensor(&mut rng, &[6, 8]).cast();
    let v: Tensor<f32> = rand_tensor(&mut rng, &[6, 8]).cast();
    let w: Tensor<f32> = rand_tensor(&mut rng, &[8, 8]).cast();
    let perm = [3, 0, 5, 1, 4, 2];
    let run = |k: Tensor<f32>, v: Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let (a, b, c, w) = (t.constant(q.clone()), t.constant(k), t.constant(v), t.constant(w.clone()));
        let o = t.multi_head_attention(a, b, c, 4, false, Some((w, None))).unwrap();
        t.value(o).clone()
    };
    assert_eq!(run(k.clone(), v.clone()), run(permute_rows(&k, &perm), permute_rows(&v, &perm)));
}

// ---- transposed convolution -----------------------------------------------

#[test]
fn conv_transpose_single_tap_broadcasts() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new([1, 1, 1], vec![3.5]).unwrap());
    let k = t.constant(Tensor::full([1, 2, 2, 1], 1.0));
    let y = t.conv_transpose2d(x, k, 2).unwrap();
    assert_eq!(t.shape(y), &[2, 2, 1]);
    assert_eq!(t.value(y).data(), &[3.5; 4]);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (stride, k) in [(2, 2), (2, 3), (1, 2)] {
        let x = rand_tensor(&mut rng, &[2, 2, 3]);
        let kern = rand_tensor(&mut rng, &[3, k, k, 2]);
        let expected = naive_conv_transpose(&x, &kern, stride);
        let mut t = Tape::<f64>::new();
        let (vx, vk) = (t.constant(x), t.constant(kern));
        let y = t.conv_transpose2d(vx, vk, stride).unwrap();
        let side = stride + k;
        assert_eq!(t.shape(y), &[side, side, 2]);
        for (g, w) in t.value(y).data().iter().zip(&expected) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_zero_kernel_and_bad_channels() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full([2, 2, 3], 1.0));
    let k = t.constant(Tensor::zeros([3, 2, 2, 4]));
    let y = t.conv_transpose2d(x, k, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let bad = t.constant(Tensor::zeros([2, 2, 2, 4]));
    assert!(matches!(t.conv_transpose2d(x, bad, 2), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, &[5, 5, 2]);
    let kern = rand_tensor(&mut rng, &[2, 2, 2, 3]);
    let mut t = Tape::<f64>::new();
    let (vx, vk) = (t.constant(x.clone()), t.constant(kern.clone()));
    let y = t.conv2d(vx, vk, 2).unwrap();
    assert_eq!(t.shape(y), &[2, 2, 3]);
    for oi in 0..2 {
        for oj in 0..2 {
            for co in 0..3 {
                let mut s = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        for ci in 0..2 {
                            s += x.data()[((oi * 2 + di) * 5 + oj * 2 + dj) * 2 + ci]
                                * kern.data()[((di * 2 + dj) * 2 + ci) * 3 + co];
                        }
                    }
                }
                assert!((t.value(y).data()[(oi * 2 + oj) * 3 + co] - s).abs() < 1e-12);
            }
        }
    }
}

// ---- backward -------------------------------------------------------------

#[test]
fn backward_of_sum_and_square() {
    let mut t = Tape::<f64>::new();
    let x = t.var(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::<f64>::new();
    let x = t.var(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.var(Tensor::zeros([2]));
    assert!(matches!(t.backward(x), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.var(Tensor::full([2, 2], 1.0));
    let c = t.constant(Tensor::full([2, 2], 3.0));
    let y = t.matmul(x, c).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(x).unwrap(), &[6.0; 4]);
}

fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 131);
    for _ in 0..3 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let r = grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn gradients_of_primitives() {
    check("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check("matmul_t", &[&[3, 4], &[2, 4]], |t, v| t.matmul_t(v[0], v[1]));
    check("div", &[&[2, 3], &[2, 3]], |t, v| {
        let d = t.add_scalar(v[1], 3.0);
        t.div(v[0], d)
    });
    check("max_min", &[&[2, 3], &[2, 3]], |t, v| {
        let a = t.maximum(v[0], v[1])?;
        let b = t.minimum(v[0], v[1])?;
        t.mul(a, b)
    });
    check("rows", &[&[3, 4], &[1, 4], &[4]], |t, v| {
        let a = t.add_row(v[0], v[1])?;
        t.mul_row(a, v[2])
    });
    check("unary", &[&[2, 3]], |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.gelu(v[0]);
        let c = t.exp(v[0]);
        let d = t.add_scalar(c, 1.0);
        let e = t.log(d);
        let f = t.mul(a, b)?;
        let g = t.add(f, e)?;
        let h = t.abs(g);
        Ok(t.powf(h, 1.5))
    });
    check("shape_ops", &[&[2, 3], &[2, 2]], |t, v| {
        let tr = t.transpose(v[0])?;
        let r = t.reshape(tr, [2, 3])?;
        let cc = t.concat_cols(&[r, v[1]])?;
        let cr = t.concat_rows(&[cc, cc])?;
        let sr = t.slice_rows(cr, 1, 2)?;
        let sc = t.slice_cols(sr, 1, 3)?;
        t.mean_rows(sc)
    });
    check("embedding_pick", &[&[5, 3]], |t, v| {
        let e = t.embedding(v[0], &[4, 0, 4])?;
        t.pick(e, &[2, 0, 1])
    });
    check("softmax", &[&[3, 4]], |t, v| t.softmax(v[0], 1));
    check("log_softmax", &[&[3, 4]], |t, v| t.log_softmax(v[0], 0));
    check("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    check("l2norm", &[&[3, 4]], |t, v| t.l2_normalize_rows(v[0]));
    check("attention", &[&[2, 4], &[3, 4], &[3, 5]], |t, v| t.attention(v[0], v[1], v[2], false));
    check("causal", &[&[4, 4]], |t, v| t.attention(v[0], v[0], v[0], true));
    check("mha", &[&[2, 4], &[3, 4], &[3, 4], &[4, 4], &[4]], |t, v| {
        t.multi_head_attention(v[0], v[1], v[2], 2, false, Some((v[3], Some(v[4]))))
    });
    check("conv2d", &[&[5, 5, 2], &[2, 2, 2, 3]], |t, v| t.conv2d(v[0], v[1], 2));
    check("conv_t", &[&[2, 3, 2], &[2, 3, 3, 2]], |t, v| t.conv_transpose2d(v[0], v[1], 2));
}
