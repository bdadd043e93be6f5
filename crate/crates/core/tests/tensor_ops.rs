//! Tensor-engine oracles: naive-loop references for conv2d/matmul and a
//! central-finite-difference battery over every differentiable op.

use favae_core::tensor::{gradcheck, gradcheck_many, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

// ── Naive oracles ───────────────────────────────────────────────────

/// Direct six-loop convolution, the independent reference for conv2d.
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (bs, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[bs, o, ho, wo]);
    for b in 0..bs {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize {
                                    let xi = ((b * c + ci) * h + y as usize) * wd + xx as usize;
                                    let wi = ((oc * c + ci) * k + u) * k + v;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out.data_mut()[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

// ── conv2d vs oracle ────────────────────────────────────────────────

#[test]
fn conv2d_ones_sum() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data()[0], 9.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(11);
    let mut t = Tape::new();
    let xv = randn(&mut r, &[2, 1, 4, 5]);
    let x = t.constant(xv.clone()).unwrap();
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(max_abs_diff(t.value(y), &xv), 0.0);
}

#[test]
fn conv2d_matches_oracle_on_fixed_case() {
    let mut r = rng(12);
    let xv = randn(&mut r, &[2, 3, 8, 8]);
    let wv = randn(&mut r, &[4, 3, 3, 3]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone()).unwrap();
    let w = t.constant(wv.clone()).unwrap();
    let y = t.conv2d(x, w, 1, 0).unwrap();
    let want = naive_conv2d(&xv, &wv, 1, 0);
    assert!(max_abs_diff(t.value(y), &want) < 1e-10);
}

#[test]
fn conv2d_matches_oracle_on_20_random_combos() {
    let mut r = rng(13);
    for case in 0..20 {
        let bs = r.gen_range(1..3usize);
        let c = r.gen_range(1..4usize);
        let o = r.gen_range(1..4usize);
        let k = [1, 3, 5][r.gen_range(0..3usize)];
        let pad = r.gen_range(0..3usize);
        let stride = r.gen_range(1..3usize);
        let h = r.gen_range(k.max(3)..10usize);
        let wd = r.gen_range(k.max(3)..10usize);
        let xv = randn(&mut r, &[bs, c, h, wd]);
        let wv = randn(&mut r, &[o, c, k, k]);
        let mut t = Tape::new();
        let x = t.constant(xv.clone()).unwrap();
        let w = t.constant(wv.clone()).unwrap();
        let y = t.conv2d(x, w, stride, pad).unwrap();
        let want = naive_conv2d(&xv, &wv, stride, pad);
        let diff = max_abs_diff(t.value(y), &want);
        assert!(diff < 1e-8, "case {case}: diff {diff}");
    }
}

#[test]
fn conv2d_channel_mismatch_is_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    assert!(t.conv2d(x, w, 1, 0).is_err());
}

// ── matmul vs oracle ────────────────────────────────────────────────

#[test]
fn matmul_identity_and_1x1() {
    let mut r = rng(21);
    let av = randn(&mut r, &[3, 3]);
    let mut t = Tape::new();
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let i3 = t.constant(eye).unwrap();
    let a = t.constant(av.clone()).unwrap();
    let y = t.matmul(i3, a).unwrap();
    assert_eq!(max_abs_diff(t.value(y), &av), 0.0);

    let p = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
    let q = t.constant(Tensor::new(vec![1, 1], vec![-2.0]).unwrap()).unwrap();
    let pq = t.matmul(p, q).unwrap();
    assert_eq!(t.value(pq).data()[0], -6.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(22);
    let av = randn(&mut r, &[3, 4]);
    let bv = randn(&mut r, &[4, 2]);
    let mut t = Tape::new();
    let a = t.constant(av.clone()).unwrap();
    let b = t.constant(bv.clone()).unwrap();
    let y = t.matmul(a, b).unwrap();
    assert!(max_abs_diff(t.value(y), &naive_matmul(&av, &bv)) < 1e-12);
}

#[test]
fn matmul_dim_mismatch_is_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[4, 2])).unwrap();
    assert!(t.matmul(a, b).is_err());
}

// ── elementwise examples ────────────────────────────────────────────

#[test]
fn elementwise_identities() {
    let mut r = rng(31);
    let xv = randn(&mut r, &[7]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone()).unwrap();
    let zero = t.constant(Tensor::scalar(0.0)).unwrap();
    let y = t.add(x, zero).unwrap();
    assert_eq!(max_abs_diff(t.value(y), &xv), 0.0);

    let v = t.constant(Tensor::new(vec![2], vec![-1.5, 2.0]).unwrap()).unwrap();
    let rl = t.relu(v);
    assert_eq!(t.value(rl).data(), &[0.0, 2.0]);

    let z = t.constant(Tensor::scalar(0.0)).unwrap();
    let sw = t.swish(z);
    assert_eq!(t.value(sw).data()[0], 0.0);
}

#[test]
fn non_broadcastable_shapes_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(t.add(a, b).is_err());
    assert!(t.mul(a, b).is_err());
}

// ── backward examples ───────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[5], |i| i as f64)).unwrap();
    let loss = t.sum(x);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn backward_of_square_sum() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3])).unwrap();
    let y = t.scale(x, 2.0);
    assert!(t.backward(y).is_err());
}

#[test]
fn double_backward_without_reset_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    // Grads sum: detectable double-accumulation.
    assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
    t.zero_grad();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut r = rng(41);
    let x = randn(&mut r, &[2, 3]);
    let err = gradcheck(
        |t, v| {
            let s = t.swish(v);
            let e = t.exp(s);
            let sq = t.mul(e, e)?;
            Ok(t.mean(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let d = t.detach(x);
    let prod = t.mul(x, d).unwrap();
    let loss = t.sum(prod);
    t.backward(loss).unwrap();
    // d(x * sg(x))/dx = sg(x), not 2x.
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
}

// ── Determinism ─────────────────────────────────────────────────────

#[test]
fn forward_is_bit_deterministic() {
    let build = || {
        let mut r = rng(55);
        let mut t = Tape::new();
        let x = t.constant(randn(&mut r, &[2, 3, 6, 6])).unwrap();
        let w = t.constant(randn(&mut r, &[4, 3, 3, 3])).unwrap();
        let y = t.conv2d(x, w, 1, 1).unwrap();
        let s = t.swish(y);
        let f = t.dft2_re(s).unwrap();
        let m = t.mean(f);
        t.value(m).data()[0]
    };
    let a = build();
    let b = build();
    assert_eq!(a.to_bits(), b.to_bits());
}

// ── Gradcheck battery over every differentiable op ──────────────────

fn check3(label: &str, shapes: &[Vec<usize>], f: impl Fn(&mut Tape, Var) -> favae_core::Result<Var>) {
    let mut r = rng(0xbeef ^ label.len() as u64);
    assert!(shapes.len() >= 3, "battery needs ≥3 shapes for {label}");
    for shape in shapes {
        let x = randn(&mut r, shape);
        let err = gradcheck(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{label} on {shape:?}: rel err {err}");
    }
}

#[test]
fn battery_elementwise_unary() {
    let shapes: Vec<Vec<usize>> = vec![vec![4], vec![2, 3], vec![2, 2, 3]];
    check3("swish", &shapes, |t, v| {
        let y = t.swish(v);
        Ok(t.sum(y))
    });
    check3("gelu", &shapes, |t, v| {
        let y = t.gelu(v);
        Ok(t.sum(y))
    });
    check3("sigmoid", &shapes, |t, v| {
        let y = t.sigmoid(v);
        Ok(t.sum(y))
    });
    check3("exp", &shapes, |t, v| {
        let y = t.exp(v);
        Ok(t.sum(y))
    });
    check3("softplus", &shapes, |t, v| {
        let y = t.softplus(v);
        Ok(t.sum(y))
    });
    check3("scale", &shapes, |t, v| {
        let y = t.scale(v, -2.5);
        Ok(t.sum(y))
    });
    check3("add_scalar+mean", &shapes, |t, v| {
        let y = t.add_scalar(v, 0.7);
        Ok(t.mean(y))
    });
    // relu/abs away from the kink; ln/sqrt on positive inputs.
    check3("relu", &shapes, |t, v| {
        let y = t.add_scalar(v, 3.0);
        let y = t.relu(y);
        Ok(t.sum(y))
    });
    check3("abs", &shapes, |t, v| {
        let y = t.add_scalar(v, 3.0);
        let y = t.abs(y);
        Ok(t.sum(y))
    });
    check3("ln", &shapes, |t, v| {
        let y = t.add_scalar(v, 3.0);
        let y = t.ln(y);
        Ok(t.sum(y))
    });
    check3("sqrt", &shapes, |t, v| {
        let y = t.add_scalar(v, 3.0);
        let y = t.sqrt(y);
        Ok(t.sum(y))
    });
}

#[test]
fn battery_elementwise_binary() {
    let mut r = rng(99);
    let shapes: Vec<Vec<usize>> = vec![vec![5], vec![3, 2], vec![2, 2, 2]];
    for shape in &shapes {
        let a = randn(&mut r, shape);
        let b = randn(&mut r, shape);
        let b_pos = b.map(|v| v + 2.5);
        for (label, bt) in [("add", &b), ("sub", &b), ("mul", &b), ("div", &b_pos)] {
            let errs = gradcheck_many(
                |t, vs| {
                    let y = match label {
                        "add" => t.add(vs[0], vs[1])?,
                        "sub" => t.sub(vs[0], vs[1])?,
                        "mul" => t.mul(vs[0], vs[1])?,
                        _ => t.div(vs[0], vs[1])?,
                    };
                    Ok(t.sum(y))
                },
                &[a.clone(), bt.clone()],
                1e-5,
            )
            .unwrap();
            for (i, err) in errs.iter().enumerate() {
                assert!(*err < 1e-4, "{label} input {i} on {shape:?}: rel err {err}");
            }
        }
        // Scalar broadcast on either side.
        let s = Tensor::scalar(1.7);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.mul(vs[0], vs[1])?;
                Ok(t.sum(y))
            },
            &[a.clone(), s.clone()],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "scalar-broadcast mul {errs:?}");
    }
}

#[test]
fn battery_matmul_bmm() {
    let mut r = rng(7);
    for (m, k, n) in [(2, 3, 4), (1, 5, 2), (4, 4, 4)] {
        let a = randn(&mut r, &[m, k]);
        let b = randn(&mut r, &[k, n]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1])?;
                Ok(t.sum(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "matmul {errs:?}");
    }
    for (bt, m, k, n) in [(2, 2, 3, 2), (3, 1, 4, 2), (1, 3, 2, 3)] {
        let a = randn(&mut r, &[bt, m, k]);
        let b = randn(&mut r, &[bt, k, n]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.bmm(vs[0], vs[1])?;
                Ok(t.sum(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "bmm {errs:?}");
    }
}

#[test]
fn battery_shape_ops() {
    let shapes: Vec<Vec<usize>> = vec![vec![2, 3], vec![2, 3, 4], vec![1, 2, 5]];
    check3("transpose_last2", &shapes, |t, v| {
        let y = t.transpose_last2(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check3("reshape", &shapes, |t, v| {
        let n = t.value(v).numel();
        let y = t.reshape(v, &[n])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    let shapes3: Vec<Vec<usize>> = vec![vec![2, 3, 4], vec![3, 2, 2], vec![1, 4, 2]];
    check3("permute", &shapes3, |t, v| {
        let y = t.permute(v, &[2, 0, 1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    let shapes4: Vec<Vec<usize>> = vec![vec![1, 2, 3, 3], vec![2, 1, 2, 4], vec![1, 1, 5, 2]];
    check3("upsample_nearest2", &shapes4, |t, v| {
        let y = t.upsample_nearest2(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
}

#[test]
fn battery_conv_ops() {
    let mut r = rng(17);
    for (shape, wshape, stride, pad) in [
        (vec![1, 2, 5, 5], vec![3, 2, 3, 3], 1, 1),
        (vec![2, 1, 6, 4], vec![2, 1, 3, 3], 2, 1),
        (vec![1, 3, 4, 4], vec![1, 3, 1, 1], 1, 0),
    ] {
        let x = randn(&mut r, &shape);
        let w = randn(&mut r, &wshape);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], stride, pad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "conv2d {errs:?}");
    }
    for shape in [vec![2, 5, 5], vec![1, 2, 4, 6], vec![3, 3]] {
        let x = randn(&mut r, &shape);
        let k = randn(&mut r, &[3, 3]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.depthwise_reflect(vs[0], vs[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "depthwise_reflect {errs:?}");
    }
    for shape in [vec![1, 2, 3, 3], vec![2, 3, 2, 2], vec![1, 1, 4, 4]] {
        let x = randn(&mut r, &shape);
        let b = randn(&mut r, &[shape[1]]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.bias_channel(vs[0], vs[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, b],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "bias_channel {errs:?}");
    }
    for shape in [vec![4, 3], vec![2, 2, 5], vec![6, 2]] {
        let x = randn(&mut r, &shape);
        let b = randn(&mut r, &[*shape.last().unwrap()]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.bias_last(vs[0], vs[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, b],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "bias_last {errs:?}");
    }
}

#[test]
fn battery_dft_ops() {
    let shapes: Vec<Vec<usize>> = vec![vec![4, 4], vec![2, 3, 5], vec![1, 6, 2]];
    check3("dft2_re", &shapes, |t, v| {
        let y = t.dft2_re(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check3("dft2_im", &shapes, |t, v| {
        let y = t.dft2_im(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
}

#[test]
fn battery_norm_ops() {
    let mut r = rng(23);
    for shape in [vec![1, 2, 3, 3], vec![2, 3, 2, 2], vec![1, 4, 2, 2]] {
        let x = randn(&mut r, &shape);
        let gamma = randn(&mut r, &[shape[1]]).map(|v| v + 2.0);
        let beta = randn(&mut r, &[shape[1]]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.group_norm1(vs[0], vs[1], vs[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "group_norm1 {errs:?}");
    }
    for shape in [vec![3, 4], vec![2, 2, 5], vec![1, 6]] {
        let d = *shape.last().unwrap();
        let x = randn(&mut r, &shape);
        let gamma = randn(&mut r, &[d]).map(|v| v + 2.0);
        let beta = randn(&mut r, &[d]);
        let errs = gradcheck_many(
            |t, vs| {
                let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "layer_norm {errs:?}");
    }
}

#[test]
fn battery_lookup_and_softmax() {
    let mut r = rng(29);
    for (v, d, ids) in [
        (5usize, 3usize, vec![0usize, 2, 4, 2]),
        (3, 4, vec![1, 1, 0]),
        (8, 2, vec![7, 0, 3, 3, 5]),
    ] {
        let table = randn(&mut r, &[v, d]);
        let ids2 = ids.clone();
        let err = gradcheck(
            move |t, tv| {
                let y = t.embed(tv, &ids2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "embed rel err {err}");
    }
    let shapes: Vec<Vec<usize>> = vec![vec![2, 4], vec![3, 3], vec![1, 2, 5]];
    check3("softmax_last", &shapes, |t, v| {
        let y = t.softmax_last(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    for (n, v) in [(2usize, 4usize), (3, 3), (4, 6)] {
        let logits = randn(&mut r, &[n, v]);
        let targets: Vec<usize> = (0..n).map(|i| i % v).collect();
        let t2 = targets.clone();
        let err = gradcheck(
            move |t, lv| t.cross_entropy_mean(lv, &t2),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cross_entropy rel err {err}");
    }
}

#[test]
fn embed_out_of_vocab_is_error() {
    let mut t = Tape::new();
    let table = t.constant(Tensor::zeros(&[4, 2])).unwrap();
    assert!(t.embed(table, &[0, 4]).is_err());
}
