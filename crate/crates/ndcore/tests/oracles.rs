//! Independent oracles for the eager kernels and their backward rules.

use ndcore::ops::{self, BinaryOp, Divisor, ReduceOp};
use ndcore::{finite_diff_check, GradCheckOptions, Graph, Result, Scalar, ScalarFn, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Materialises the broadcast operand at full size with explicit loops.
fn tile(lhs_shape: &[usize], rhs: &Tensor<f64>) -> Vec<f64> {
    let n: usize = lhs_shape.iter().product();
    let strides = ndcore::tensor::strides_of(lhs_shape);
    (0..n)
        .map(|i| {
            let idx: Vec<usize> = (0..lhs_shape.len())
                .map(|d| (i / strides[d]) % lhs_shape[d])
                .collect();
            match rhs.rank() {
                0 => rhs.data()[0],
                1 if lhs_shape.len() >= 2 && rhs.shape() == [lhs_shape[1]] => rhs.data()[idx[1]],
                r => rhs.at(&idx[..r]),
            }
        })
        .collect()
}

fn dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 2..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_matches_explicit_tile(shape in dims(), mode in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&shape, &mut rng, -2.0, 2.0);
        let rhs_shape: Vec<usize> = match mode {
            0 => shape.clone(),
            1 => shape[..2].to_vec(),
            2 => vec![shape[1]],
            _ => vec![],
        };
        let b = random(&rhs_shape, &mut rng, 0.5, 2.0);
        let tiled = tile(&shape, &b);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let out = ops::elementwise(op, &a, &b).unwrap();
            for (i, (&x, &y)) in a.data().iter().zip(&tiled).enumerate() {
                let expect = match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                };
                prop_assert!((out.data()[i] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reductions_match_naive_loops(shape in dims(), mask in 1u8..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng, -3.0, 3.0);
        let axes: Vec<usize> = (0..shape.len()).filter(|d| mask & (1 << d) != 0).collect();
        prop_assume!(!axes.is_empty());
        let mean = ops::reduce(ReduceOp::Mean, &x, &axes, Divisor::N).unwrap();
        let var = ops::reduce(ReduceOp::Variance, &x, &axes, Divisor::N).unwrap();
        // group elements by their kept coordinates
        let strides = ndcore::tensor::strides_of(&shape);
        let mut groups: std::collections::BTreeMap<Vec<usize>, Vec<f64>> = Default::default();
        for (i, &v) in x.data().iter().enumerate() {
            let key: Vec<usize> = (0..shape.len())
                .filter(|d| !axes.contains(d))
                .map(|d| (i / strides[d]) % shape[d])
                .collect();
            groups.entry(key).or_default().push(v);
        }
        prop_assert_eq!(groups.len(), mean.numel());
        for (o, vals) in groups.values().enumerate() {
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            prop_assert!((mean.data()[o] - m).abs() < 1e-12);
            prop_assert!((var.data()[o] - v).abs() < 1e-12);
            prop_assert!(var.data()[o] >= 0.0);
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..bs {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)] {
        let x = random(&[2, 3, 7, 6], &mut rng, -1.0, 1.0);
        let w = random(&[4, 3, k, k], &mut rng, -1.0, 1.0);
        let b = random(&[4], &mut rng, -1.0, 1.0);
        let y = ops::conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let expect = naive_conv(&x, &w, &b, stride, pad);
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn eager_ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 4, 8, 8], &mut rng, -1.0, 1.0).cast::<f32>();
    let w = random(&[5, 4, 3, 3], &mut rng, -1.0, 1.0).cast::<f32>();
    let a = ops::conv2d(&x, &w, None, 2, 1).unwrap();
    let b = ops::conv2d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(a.data(), b.data());
}

/// `sum(op(inputs) ⊙ projection)` for one differentiable op.
struct OpLoss {
    kind: &'static str,
    projection: Tensor<f64>,
}

impl OpLoss {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        Ok(match self.kind {
            "add" => g.add(p[0], p[1])?,
            "sub_prefix" => g.sub(p[0], p[1])?,
            "mul_channel" => g.mul(p[0], p[1])?,
            "div" => g.div(p[0], p[1])?,
            "add_scalar" => g.add_scalar(p[0], T::from_f64(0.7))?,
            "mul_scalar" => g.mul_scalar(p[0], T::from_f64(-1.3))?,
            "sqrt" => g.sqrt(p[0])?,
            "relu" => g.relu(p[0])?,
            "mean_hw" => g.mean(p[0], &[2, 3])?,
            "var_hw" => g.variance(p[0], &[2, 3])?,
            "var_bhw" => g.variance(p[0], &[0, 2, 3])?,
            "var_unbiased" => g.reduce(ReduceOp::Variance, p[0], &[1], Divisor::NMinusOne)?,
            "conv" => g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?,
            "linear" => g.linear(p[0], p[1], Some(p[2]))?,
            "avg_pool2" => g.avg_pool2(p[0])?,
            "reshape" => g.reshape(p[0], &[6, 4])?,
            "index_select0" => g.index_select0(p[0], &[2, 0, 0, 1])?,
            "cross_entropy" => return g.cross_entropy(p[0], &[1, 0, 3]),
            other => panic!("unknown op {other}"),
        })
    }
}

impl ScalarFn for OpLoss {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let out = self.build(g, p)?;
        if g.value(out).numel() == 1 {
            return Ok(out);
        }
        let proj = g.constant(self.projection.reshape(g.shape(out))?.cast());
        let weighted = g.mul(out, proj)?;
        g.sum_all(weighted)
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>)> {
    let away_from_zero = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let t = random(shape, rng, 0.2, 1.5);
        let signs = random(shape, rng, -1.0, 1.0);
        Tensor::new(
            shape,
            t.data().iter().zip(signs.data()).map(|(v, s)| v * s.signum()).collect(),
        )
        .unwrap()
    };
    vec![
        ("add", vec![random(&[2, 3], rng, -1.0, 1.0), random(&[2, 3], rng, -1.0, 1.0)]),
        ("sub_prefix", vec![random(&[2, 3, 2, 2], rng, -1.0, 1.0), random(&[2, 3], rng, -1.0, 1.0)]),
        ("mul_channel", vec![random(&[2, 3, 2, 2], rng, -1.0, 1.0), random(&[3], rng, -1.0, 1.0)]),
        ("div", vec![random(&[2, 3, 2, 2], rng, -1.0, 1.0), random(&[2, 3], rng, 0.5, 1.5)]),
        ("add_scalar", vec![random(&[5], rng, -1.0, 1.0)]),
        ("mul_scalar", vec![random(&[5], rng, -1.0, 1.0)]),
        ("sqrt", vec![random(&[6], rng, 0.3, 2.0)]),
        ("relu", vec![away_from_zero(rng, &[8])]),
        ("mean_hw", vec![random(&[2, 3, 3, 2], rng, -1.0, 1.0)]),
        ("var_hw", vec![random(&[2, 3, 3, 2], rng, -1.0, 1.0)]),
        ("var_bhw", vec![random(&[3, 2, 2, 2], rng, -1.0, 1.0)]),
        ("var_unbiased", vec![random(&[2, 4], rng, -1.0, 1.0)]),
        (
            "conv",
            vec![
                random(&[2, 2, 5, 5], rng, -1.0, 1.0),
                random(&[3, 2, 3, 3], rng, -1.0, 1.0),
                random(&[3], rng, -1.0, 1.0),
            ],
        ),
        (
            "linear",
            vec![random(&[3, 4], rng, -1.0, 1.0), random(&[2, 4], rng, -1.0, 1.0), random(&[2], rng, -1.0, 1.0)],
        ),
        ("avg_pool2", vec![random(&[1, 2, 4, 5], rng, -1.0, 1.0)]),
        ("reshape", vec![random(&[2, 3, 4], rng, -1.0, 1.0)]),
        ("index_select0", vec![random(&[3, 2, 2], rng, -1.0, 1.0)]),
        ("cross_entropy", vec![random(&[3, 4], rng, -2.0, 2.0)]),
    ]
}

fn projection_for(kind: &str, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut g = Graph::<f64>::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let probe = OpLoss {
        kind: leak(kind),
        projection: Tensor::scalar(1.0),
    };
    let out = probe.build(&mut g, &vars).unwrap();
    random(g.shape(out), rng, -1.0, 1.0)
}

/// Central differences in double precision; h = 1e-5 keeps truncation error
/// (O(h^2)) well under the 1e-7 double-precision tolerance.
fn f64_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        ..GradCheckOptions::default()
    }
}

fn leak(s: &str) -> &'static str {
    Box::leak(s.to_string().into_boxed_str())
}

#[test]
fn every_op_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (kind, inputs) in op_cases(&mut rng) {
        let projection = projection_for(kind, &inputs, &mut rng);
        let f = OpLoss { kind, projection };
        let r64 = finite_diff_check(&f, &inputs, f64_opts()).unwrap();
        assert!(r64.max_rel_error < 1e-7, "{kind} f64: {r64:?}");
        let narrow: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        let r32 = finite_diff_check(&f, &narrow, GradCheckOptions::default()).unwrap();
        assert!(r32.max_rel_error < 1e-4, "{kind} f32: {r32:?}");
    }
}

/// conv -> relu -> mean over space -> linear -> cross-entropy
struct TinyNet;

impl ScalarFn for TinyNet {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let h = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
        let h = g.relu(h)?;
        let pooled = g.mean(h, &[2, 3])?;
        let logits = g.linear(pooled, p[3], Some(p[4]))?;
        g.cross_entropy(logits, &[0, 2])
    }
}

#[test]
fn small_network_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = vec![
        random(&[2, 2, 4, 4], &mut rng, -1.0, 1.0),
        random(&[3, 2, 3, 3], &mut rng, -0.5, 0.5),
        random(&[3], &mut rng, 0.05, 0.2),
        random(&[3, 3], &mut rng, -1.0, 1.0),
        random(&[3], &mut rng, -0.1, 0.1),
    ];
    let r64 = finite_diff_check(&TinyNet, &params, f64_opts()).unwrap();
    assert!(r64.max_rel_error < 1e-7, "{r64:?}");
    let narrow: Vec<Tensor<f32>> = params.iter().map(|t| t.cast()).collect();
    let r32 = finite_diff_check(&TinyNet, &narrow, GradCheckOptions::default()).unwrap();
    assert!(r32.max_rel_error < 1e-4, "{r32:?}");
}
