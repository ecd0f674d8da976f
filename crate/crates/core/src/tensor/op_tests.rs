use rand::Rng as _;

use super::*;
use crate::gradcheck::check_params;
use crate::rng::{from_seed, Rng};

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval1(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.tensor(v)
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Sliding-window cross-correlation over `[B, C_in, L]`.
fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let lout = (l + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..b {
        for co in 0..cout {
            for lo in 0..lout {
                let mut s = bias[co];
                for ci in 0..cin {
                    for kk in 0..k {
                        let pos = (lo * stride + kk) as i64 - pad as i64;
                        if pos >= 0 && (pos as usize) < l {
                            s += w.at(&[co, ci, kk]) * x.at(&[bi, ci, pos as usize]);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn group_norm_oracle(x: &Tensor, groups: usize, scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cg = c / groups;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for gi in 0..groups {
            let mut vals = Vec::new();
            for ci in gi * cg..(gi + 1) * cg {
                for li in 0..l {
                    vals.push(x.at(&[bi, ci, li]));
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for ci in gi * cg..(gi + 1) * cg {
                for li in 0..l {
                    let xh = (x.at(&[bi, ci, li]) - mean) / (var + 1e-5).sqrt();
                    out[(bi * c + ci) * l + li] = xh * scale[ci] + shift[ci];
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_small_case() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let col = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    let r = eval1(|g| {
        let (x, y) = (g.input(&a), g.input(&eye));
        g.matmul(x, y)
    });
    assert_eq!(r.data(), a.data());
    let r = eval1(|g| {
        let (x, y) = (g.input(&a), g.input(&col));
        g.matmul(x, y)
    });
    assert_eq!(r.shape(), &[2, 1]);
    assert_eq!(r.data(), &[17.0, 39.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = from_seed(11);
    for _ in 0..20 {
        let a = random_tensor(&mut rng, &[5, 7], 2.0);
        let b = random_tensor(&mut rng, &[7, 3], 2.0);
        let r = eval1(|g| {
            let (x, y) = (g.input(&a), g.input(&b));
            g.matmul(x, y)
        });
        for (got, want) in r.data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.input(&Tensor::zeros([2, 3]));
    let b = g.input(&Tensor::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape(_))));
}

#[test]
fn conv_identity_kernels() {
    let mut rng = from_seed(3);
    let x = random_tensor(&mut rng, &[1, 6], 1.0);
    let k1 = Tensor::new([1, 1, 1], vec![1.0]).unwrap();
    let r = eval1(|g| {
        let (a, w) = (g.input(&x), g.input(&k1));
        g.conv1d(a, w, None, 1, 0)
    });
    assert_eq!(r.data(), x.data());
    let delta = Tensor::new([1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let r = eval1(|g| {
        let (a, w) = (g.input(&x), g.input(&delta));
        g.conv1d(a, w, None, 1, 1)
    });
    assert_eq!(r.shape(), &[1, 6]);
    assert_eq!(r.data(), x.data());
}

#[test]
fn conv_matches_sliding_window() {
    let mut rng = from_seed(5);
    for (stride, k) in [(1, 3), (2, 3), (1, 5), (2, 1), (1, 1)] {
        let pad = (k - 1) / 2;
        let x = random_tensor(&mut rng, &[3, 4, 9], 1.5);
        let w = random_tensor(&mut rng, &[5, 4, k], 1.0);
        let b = random_tensor(&mut rng, &[5], 1.0);
        let r = eval1(|g| {
            let (a, wv, bv) = (g.input(&x), g.input(&w), g.input(&b));
            g.conv1d(a, wv, Some(bv), stride, pad)
        });
        let lout = (9 + 2 * pad - k) / stride + 1;
        assert_eq!(r.shape(), &[3, 5, lout]);
        for (got, want) in r.data().iter().zip(conv_oracle(&x, &w, b.data(), stride, pad)) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn conv_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros([3, 8]));
    let w = g.input(&Tensor::zeros([2, 4, 3]));
    assert!(matches!(g.conv1d(x, w, None, 1, 1), Err(crate::Error::Shape(_))));
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full([4, 5], 3.25);
    let r = eval1(|g| {
        let a = g.input(&x);
        let s = g.input(&Tensor::full([4], 1.0));
        let t = g.input(&Tensor::zeros([4]));
        g.group_norm(a, 2, s, t)
    });
    assert!(r.data().iter().all(|v| *v == 0.0));
}

#[test]
fn group_norm_standardizes_each_group() {
    let mut rng = from_seed(9);
    for _ in 0..10 {
        // Variance well above the 1e-5 stabilizer so the normalized variance
        // sits within 1e-6 of one.
        let x = random_tensor(&mut rng, &[8, 6], 20.0);
        let r = eval1(|g| {
            let a = g.input(&x);
            let s = g.input(&Tensor::full([8], 1.0));
            let t = g.input(&Tensor::zeros([8]));
            g.group_norm(a, 4, s, t)
        });
        for group in r.data().chunks(2 * 6) {
            let n = group.len() as f64;
            let mean = group.iter().sum::<f64>() / n;
            let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6, "variance {var}");
        }
    }
}

#[test]
fn group_norm_matches_direct_formula() {
    let mut rng = from_seed(10);
    let x = random_tensor(&mut rng, &[2, 6, 5], 3.0);
    let s = random_tensor(&mut rng, &[6], 2.0);
    let t = random_tensor(&mut rng, &[6], 2.0);
    let r = eval1(|g| {
        let (a, sv, tv) = (g.input(&x), g.input(&s), g.input(&t));
        g.group_norm(a, 3, sv, tv)
    });
    for (got, want) in r.data().iter().zip(group_norm_oracle(&x, 3, s.data(), t.data())) {
        assert!((got - want).abs() <= 1e-9);
    }
}

#[test]
fn group_norm_rejects_bad_groups() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros([6, 4]));
    let s = g.input(&Tensor::zeros([6]));
    let t = g.input(&Tensor::zeros([6]));
    assert!(matches!(g.group_norm(x, 4, s, t), Err(crate::Error::Config(_))));
}

#[test]
fn backward_square() {
    let mut ps = ParamSet::new();
    let x = ps.insert("x", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let v = g.param(&ps, x);
    let y = g.mul(v, v).unwrap();
    g.backward(y).unwrap().accumulate_into(&mut ps);
    assert_eq!(ps.get(x).grad().unwrap(), &[6.0]);
}

#[test]
fn backward_unused_parameter_gets_zero() {
    let mut ps = ParamSet::new();
    let x = ps.insert("x", Tensor::scalar(3.0));
    let p = ps.insert("p", Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let v = g.param(&ps, x);
    let _ = g.param(&ps, p);
    let y = g.mul(v, v).unwrap();
    g.backward(y).unwrap().accumulate_into(&mut ps);
    assert_eq!(ps.get(p).grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let v = g.input_tracked(&Tensor::zeros([2]));
    let y = g.scale(v, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Usage(_))));
}

#[test]
fn backward_accumulation_is_additive() {
    let mut rng = from_seed(4);
    let mut ps = ParamSet::new();
    let w = ps.insert("w", random_tensor(&mut rng, &[3, 2], 1.0));
    let x = random_tensor(&mut rng, &[4, 2], 1.0);
    let run = |ps: &mut ParamSet| {
        let mut g = Graph::new();
        let (xv, wv) = (g.input(&x), g.param(ps, w));
        let y = g.linear(xv, wv, None).unwrap();
        let y = g.mish(y).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap().accumulate_into(ps);
    };
    run(&mut ps);
    let once = ps.get(w).grad().unwrap().to_vec();
    run(&mut ps);
    for (a, b) in ps.get(w).grad().unwrap().iter().zip(once) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = from_seed(8);
    let x = random_tensor(&mut rng, &[2, 3, 8], 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3], 1.0);
    let run = || {
        eval1(|g| {
            let (a, b) = (g.input(&x), g.input(&w));
            let c = g.conv1d(a, b, None, 1, 1)?;
            let s = g.input(&Tensor::full([4], 1.0));
            let t = g.input(&Tensor::zeros([4]));
            let n = g.group_norm(c, 2, s, t)?;
            g.mish(n)
        })
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn composite_net_gradients_match_finite_differences() {
    let mut rng = from_seed(21);
    let x = random_tensor(&mut rng, &[2, 3, 6], 1.0);
    let target = random_tensor(&mut rng, &[2, 5], 1.0);
    for point in 0..3 {
        let mut ps = ParamSet::new();
        let kw = ps.insert("conv.w", random_tensor(&mut rng, &[4, 3, 3], 0.7));
        let kb = ps.insert("conv.b", random_tensor(&mut rng, &[4], 0.5));
        let gs = ps.insert("gn.scale", random_tensor(&mut rng, &[4], 1.5));
        let gt = ps.insert("gn.shift", random_tensor(&mut rng, &[4], 0.5));
        let lw = ps.insert("lin.w", random_tensor(&mut rng, &[5, 24], 0.4));
        let lb = ps.insert("lin.b", random_tensor(&mut rng, &[5], 0.4));
        let report = check_params(&mut ps, 1e-5, |g, ps| {
            let s = Scope::train(ps);
            let xin = g.input(&x);
            let (w, b) = (s.get(g, kw), s.get(g, kb));
            let h = g.conv1d(xin, w, Some(b), 1, 1)?;
            let (sc, sh) = (s.get(g, gs), s.get(g, gt));
            let h = g.group_norm(h, 2, sc, sh)?;
            let h = g.mish(h)?;
            let h = g.reshape(h, [2, 24])?;
            let (w, b) = (s.get(g, lw), s.get(g, lb));
            let y = g.linear(h, w, Some(b))?;
            let t = g.input(&target);
            g.mse(y, t)
        })
        .unwrap();
        assert!(report.passes(1e-4), "point {point}: {report:?}");
    }
}

/// Gradient check of a single op on random inputs, treating every operand as
/// a parameter.
fn op_check(
    seed: u64,
    shapes: &[&[usize]],
    scale: f64,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut rng = from_seed(seed);
    let mut ps = ParamSet::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.insert(format!("in{i}"), random_tensor(&mut rng, s, scale)))
        .collect();
    // Random projection so that the scalar depends on every output entry.
    let probe_seed = rng.random::<u64>();
    let report = check_params(&mut ps, 1e-5, |g, ps| {
        let s = Scope::train(ps);
        let vars: Vec<Var> = ids.iter().map(|&id| s.get(g, id)).collect();
        let y = op(g, &vars)?;
        let mut prng = from_seed(probe_seed);
        let n = g.value(y).len();
        let probe = g.constant(g.shape(y).to_vec(), (0..n).map(|_| prng.random_range(-1.0..1.0)).collect())?;
        let z = g.mul(y, probe)?;
        g.sum(z)
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn every_op_passes_finite_differences_at_100_points() {
    type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<&[usize]>, OpFn)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", vec![&[3, 4], &[2, 4], &[2]], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("add", vec![&[2, 3], &[2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![&[2, 3], &[2, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![&[2, 3], &[2, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("affine", vec![&[5]], Box::new(|g, v| g.affine(v[0], -1.5, 0.25))),
        (
            "conv1d",
            vec![&[2, 2, 5], &[3, 2, 3], &[3]],
            Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv1d_s2",
            vec![&[2, 2, 6], &[3, 2, 3], &[3]],
            Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        (
            "group_norm",
            vec![&[2, 4, 3], &[4], &[4]],
            Box::new(|g, v| g.group_norm(v[0], 2, v[1], v[2])),
        ),
        (
            "film",
            vec![&[2, 3, 4], &[2, 3], &[2, 3]],
            Box::new(|g, v| g.film(v[0], v[1], v[2])),
        ),
        ("mish", vec![&[7]], Box::new(|g, v| g.mish(v[0]))),
        ("upsample", vec![&[2, 2, 3]], Box::new(|g, v| g.upsample(v[0], 2))),
        (
            "cat_channels",
            vec![&[2, 2, 3], &[2, 1, 3]],
            Box::new(|g, v| g.cat_channels(v[0], v[1])),
        ),
        ("cat_cols", vec![&[3, 2], &[3, 1]], Box::new(|g, v| g.cat_cols(v[0], v[1]))),
        ("slice_cols", vec![&[3, 5]], Box::new(|g, v| g.slice_cols(v[0], 1, 4))),
        ("swap_last2", vec![&[2, 3, 4]], Box::new(|g, v| g.swap_last2(v[0]))),
        ("mean", vec![&[4]], Box::new(|g, v| g.mean(v[0]))),
        ("mse", vec![&[2, 3], &[2, 3]], Box::new(|g, v| g.mse(v[0], v[1]))),
        ("row_dot", vec![&[3, 4], &[3, 4]], Box::new(|g, v| g.row_dot(v[0], v[1]))),
        ("normalize_rows", vec![&[3, 4]], Box::new(|g, v| g.normalize_rows(v[0]))),
        (
            "cross_entropy",
            vec![&[3, 4]],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 1])),
        ),
    ];
    for (name, shapes, op) in &cases {
        let mut worst: f64 = 0.0;
        for point in 0..100 {
            worst = worst.max(op_check(1000 + point, shapes, 1.5, op));
        }
        assert!(worst <= 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn mish_matches_textbook_form() {
    for i in -4000..=4000 {
        let x = f64::from(i) * 0.01;
        let want = x * x.exp().ln_1p().tanh();
        let got = super::graph::mish(x);
        assert!((got - want).abs() <= 1e-14 * want.abs().max(1e-300) + 1e-300, "x={x}: {got} vs {want}");
    }
    assert_eq!(super::graph::mish(-1000.0), 0.0);
    assert_eq!(super::graph::mish(1000.0), 1000.0);
}
