//! Exact property checks shared by the self-test command and the
//! acceptance harness: naive-loop oracles, identity collapses, the
//! renormalization algebra, Monte-Carlo unbiasedness and finite-difference
//! gradients.

use ndcore::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, Scalar, ScalarFn, Stencil, Tensor, Var};
use serde::Serialize;

use crate::augment::{
    self, mix_shift, offset_shift, renormalize, swap_shift, AugKind, AugmentorConfig, Mode, Noise, Rng, SlotDraw,
};
use crate::error::Result;
use crate::featstats::{self, BatchUncertainty};
use crate::net::{self, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }

    fn from_result(name: &str, r: Result<Check>) -> Self {
        r.unwrap_or_else(|e| Self::failed(name, e))
    }
}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())?)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean, standard deviation and batch spreads computed with plain loops.
pub fn naive_statistics(x: &Tensor<f64>, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    for i in 0..b {
        for j in 0..c {
            let plane = &x.data()[(i * c + j) * hw..(i * c + j + 1) * hw];
            let mut m = 0.0;
            for v in plane {
                m += v;
            }
            m /= hw as f64;
            let mut var = 0.0;
            for v in plane {
                var += (v - m) * (v - m);
            }
            var /= hw as f64;
            mu[i * c + j] = m;
            sigma[i * c + j] = (var + eps).sqrt();
        }
    }
    let spread = |v: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|j| {
                let mut m = 0.0;
                for i in 0..b {
                    m += v[i * c + j];
                }
                m /= b as f64;
                let mut var = 0.0;
                for i in 0..b {
                    var += (v[i * c + j] - m) * (v[i * c + j] - m);
                }
                (var / b as f64).sqrt()
            })
            .collect()
    };
    let (sm, ss) = (spread(&mu), spread(&sigma));
    (mu, sigma, sm, ss)
}

/// `instance_stats` and `batch_uncertainty` against [`naive_statistics`] on
/// random `B,C <= 4`, `H,W <= 5` double-precision tensors.
pub fn statistics_oracle(cases: usize, seed: u64, fault: bool) -> Check {
    const NAME: &str = "statistics oracle";
    const ATOL: f64 = 1e-10;
    let run = || -> Result<Check> {
        let mut rng = Rng::new(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let shape = [1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5)];
            let x = uniform_tensor(&mut rng, &shape, -3.0, 3.0)?;
            let stats = featstats::instance_stats(&x, featstats::DEFAULT_EPS)?;
            let unc = featstats::batch_uncertainty(&stats)?;
            let (mut mu, sigma, sm, ss) = naive_statistics(&x, featstats::DEFAULT_EPS);
            if fault {
                mu[0] += 1e-3;
            }
            worst = worst
                .max(max_diff(stats.mu.data(), &mu))
                .max(max_diff(stats.sigma.data(), &sigma))
                .max(max_diff(unc.sigma_mu.data(), &sm))
                .max(max_diff(unc.sigma_sigma.data(), &ss));
        }
        Ok(Check::new(
            NAME,
            worst <= ATOL,
            format!("{cases} tensors, max |diff| {worst:.3e} (atol {ATOL:e})"),
        ))
    };
    Check::from_result(NAME, run())
}

/// Every configuration that should collapse to the identity map.
pub fn identity_chain(seed: u64) -> Check {
    const NAME: &str = "identity chain";
    const ATOL: f64 = 1e-5;
    let run = || -> Result<Check> {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[4, 3, 5, 5], -2.0, 2.0)?.cast::<f32>();
        let stats = featstats::instance_stats(&x, featstats::DEFAULT_EPS)?;
        let unc = featstats::batch_uncertainty(&stats)?;
        let zero_unc = BatchUncertainty {
            sigma_mu: Tensor::zeros(&[3])?,
            sigma_sigma: Tensor::zeros(&[3])?,
        };
        let zeros = Tensor::<f32>::zeros(&[4, 3])?;
        let ident: Vec<usize> = (0..4).collect();
        let mut cases: Vec<(&str, Tensor<f32>)> = vec![
            ("dsu eps=0", augment::dsu_with_draws(&x, &stats, &unc, &zeros, &zeros)?.0),
            ("dsu sigma=0", augment::dsu(&x, &stats, &zero_unc, &mut rng)?.0),
            ("mixstyle lambda=1", augment::mix_style(&x, &stats, &[2, 0, 3, 1], 1.0)?),
            ("mixstyle identity perm", augment::mix_style(&x, &stats, &ident, 0.3)?),
            ("padain identity perm", augment::p_ada_in(&x, &stats, &ident)?),
            ("random_fixed s=0", augment::random_fixed(&x, &stats, 0.0, &mut rng)?.0),
            ("uniform_shift sigma=0", augment::uniform_shift(&x, &stats, &zero_unc, &mut rng)?.0),
        ];
        let gate = AugmentorConfig::of(AugKind::Dsu).with_p(0.0);
        cases.push(("p=0 gate", augment::apply(&x, &gate, Mode::Train, &mut rng)?));
        let on = AugmentorConfig::of(AugKind::Dsu).with_p(1.0);
        cases.push(("eval mode", augment::apply(&x, &on, Mode::Eval, &mut rng)?));
        let mut failures = Vec::new();
        let mut worst: f64 = 0.0;
        for (name, out) in &cases {
            let d = out.max_abs_diff(&x)?;
            worst = worst.max(d);
            if d > ATOL {
                failures.push(format!("{name} ({d:.2e})"));
            }
        }
        Ok(Check::new(
            NAME,
            failures.is_empty(),
            if failures.is_empty() {
                format!("{} cases, max |diff| {worst:.2e} (atol {ATOL:e})", cases.len())
            } else {
                format!("failed: {}", failures.join(", "))
            },
        ))
    };
    Check::from_result(NAME, run())
}

/// DSU output statistics equal the drawn `(beta, |gamma|)`.
pub fn renormalization_algebra(trials: usize, seed: u64) -> Check {
    const NAME: &str = "renormalization algebra";
    const ATOL: f64 = 1e-4;
    let run = || -> Result<Check> {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[4, 3, 6, 6], -2.0, 2.0)?.cast::<f32>();
        let stats = featstats::instance_stats(&x, featstats::DEFAULT_EPS)?;
        let unc = featstats::batch_uncertainty(&stats)?;
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let (out, drawn) = augment::dsu(&x, &stats, &unc, &mut rng)?;
            let got = featstats::instance_stats(&out, 0.0)?;
            let abs_gamma: Vec<f64> = drawn.gamma.to_f64_vec().iter().map(|g| g.abs()).collect();
            worst = worst
                .max(max_diff(&got.mu.to_f64_vec(), &drawn.beta.to_f64_vec()))
                .max(max_diff(&got.sigma.to_f64_vec(), &abs_gamma));
        }
        Ok(Check::new(
            NAME,
            worst <= ATOL,
            format!("{trials} draws, max |diff| {worst:.2e} (atol {ATOL:e})"),
        ))
    };
    Check::from_result(NAME, run())
}

/// Monte-Carlo mean of the DSU output stays within `z` standard errors of
/// the input at every element.
pub fn expectation_preservation(draws: usize, seed: u64) -> Check {
    const NAME: &str = "expectation preservation";
    const Z: f64 = 4.0;
    let run = || -> Result<Check> {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[3, 2, 4, 4], -1.5, 1.5)?;
        let stats = featstats::instance_stats(&x, featstats::DEFAULT_EPS)?;
        let unc = featstats::batch_uncertainty(&stats)?;
        let n = x.numel();
        let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..draws {
            let (out, _) = augment::dsu(&x, &stats, &unc, &mut rng)?;
            for (i, v) in out.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let k = draws as f64;
        let mut worst_z: f64 = 0.0;
        for i in 0..n {
            let mean = sum[i] / k;
            let var = (sq[i] / k - mean * mean).max(0.0) * k / (k - 1.0);
            let se = (var / k).sqrt();
            let dev = (mean - x.data()[i]).abs();
            worst_z = worst_z.max(if se > 0.0 { dev / se } else if dev > 0.0 { f64::INFINITY } else { 0.0 });
        }
        Ok(Check::new(
            NAME,
            worst_z <= Z,
            format!("{draws} draws over {n} elements, worst deviation {worst_z:.2} standard errors (limit {Z})"),
        ))
    };
    Check::from_result(NAME, run())
}

fn as_tensor_error(e: crate::DsuError) -> ndcore::TensorError {
    match e {
        crate::DsuError::Tensor(t) => t,
        other => ndcore::TensorError::DimensionMismatch {
            op: "check",
            reason: other.to_string(),
        },
    }
}

/// `sum(f(inputs) * projection)` for one differentiable operation.
struct OpProbe {
    op: &'static str,
    projection: Option<Tensor<f64>>,
}

const PERM: [usize; 3] = [2, 0, 1];

impl OpProbe {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let draws = [0.3, -1.1, 0.7, 1.6, -0.4, 0.2];
        let scope = [0.5, 0.8];
        Ok(match self.op {
            "add" => g.add(p[0], p[1])?,
            "sub" => g.sub(p[0], p[1])?,
            "mul" => g.mul(p[0], p[1])?,
            "div" => g.div(p[0], p[1])?,
            "add_scalar" => g.add_scalar(p[0], T::from_f64(0.7))?,
            "mul_scalar" => g.mul_scalar(p[0], T::from_f64(-1.3))?,
            "sqrt" => g.sqrt(p[0])?,
            "relu" => g.relu(p[0])?,
            "mean" => g.mean(p[0], &[2, 3])?,
            "variance" => g.variance(p[0], &[2, 3])?,
            "conv2d" => g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?,
            "linear" => g.linear(p[0], p[1], Some(p[2]))?,
            "avg_pool2" => g.avg_pool2(p[0])?,
            "reshape" => g.reshape(p[0], &[3, 8])?,
            "index_select0" => g.index_select0(p[0], &PERM)?,
            "cross_entropy" => return Ok(g.cross_entropy(p[0], &[1, 0, 3])?),
            "instance_stats" => {
                let s = featstats::instance_stats_var(g, p[0], featstats::DEFAULT_EPS)?;
                let m = g.reshape(s.mu, &[6])?;
                let sd = g.reshape(s.sigma, &[6])?;
                let both = g.mul(m, sd)?;
                g.add(both, sd)?
            }
            "dsu_layer" => {
                let s = featstats::instance_stats_var(g, p[0], featstats::DEFAULT_EPS)?;
                let shift = offset_shift(g, s, &draws, &draws[..].iter().rev().copied().collect::<Vec<_>>(), &scope, &scope)?;
                renormalize(g, p[0], s, shift)?
            }
            "mixstyle_layer" => {
                let s = featstats::instance_stats_var(g, p[0], featstats::DEFAULT_EPS)?;
                let shift = mix_shift(g, s, &PERM, 0.35)?;
                renormalize(g, p[0], s, shift)?
            }
            "padain_layer" => {
                let s = featstats::instance_stats_var(g, p[0], featstats::DEFAULT_EPS)?;
                let shift = swap_shift(g, s, &PERM)?;
                renormalize(g, p[0], s, shift)?
            }
            other => return Err(crate::DsuError::Input(format!("unknown probe {other}"))),
        })
    }
}

impl ScalarFn for OpProbe {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> ndcore::Result<Var> {
        let out = self
            .build(g, p)
            .map_err(as_tensor_error)?;
        match &self.projection {
            Some(proj) if g.value(out).numel() > 1 => {
                let pv = g.constant(proj.reshape(g.shape(out))?.cast());
                let weighted = g.mul(out, pv)?;
                g.sum_all(weighted)
            }
            _ => g.sum_all(out),
        }
    }
}

fn probe_inputs(op: &str, rng: &mut Rng) -> Result<Vec<Tensor<f64>>> {
    let mut u = |shape: &[usize], lo: f64, hi: f64| uniform_tensor(rng, shape, lo, hi);
    Ok(match op {
        "add" => vec![u(&[2, 3], -1.0, 1.0)?, u(&[2, 3], -1.0, 1.0)?],
        "sub" => vec![u(&[2, 3, 2, 2], -1.0, 1.0)?, u(&[2, 3], -1.0, 1.0)?],
        "mul" => vec![u(&[2, 3, 2, 2], -1.0, 1.0)?, u(&[3], -1.0, 1.0)?],
        "div" => vec![u(&[2, 3, 2, 2], -1.0, 1.0)?, u(&[2, 3], 0.5, 1.5)?],
        "add_scalar" | "mul_scalar" => vec![u(&[5], -1.0, 1.0)?],
        "sqrt" => vec![u(&[6], 0.3, 2.0)?],
        "relu" => {
            let mag = u(&[8], 0.2, 1.5)?;
            let sign = u(&[8], -1.0, 1.0)?;
            let v = mag.data().iter().zip(sign.data()).map(|(m, s)| m * s.signum()).collect();
            vec![Tensor::new(&[8], v)?]
        }
        "mean" | "variance" => vec![u(&[2, 3, 3, 2], -1.0, 1.0)?],
        "conv2d" => vec![u(&[2, 2, 5, 5], -1.0, 1.0)?, u(&[3, 2, 3, 3], -1.0, 1.0)?, u(&[3], -1.0, 1.0)?],
        "linear" => vec![u(&[3, 4], -1.0, 1.0)?, u(&[2, 4], -1.0, 1.0)?, u(&[2], -1.0, 1.0)?],
        "avg_pool2" => vec![u(&[1, 2, 4, 5], -1.0, 1.0)?],
        "reshape" => vec![u(&[2, 3, 4], -1.0, 1.0)?],
        "index_select0" => vec![u(&[3, 2, 2], -1.0, 1.0)?],
        "cross_entropy" => vec![u(&[3, 4], -2.0, 2.0)?],
        "instance_stats" => vec![u(&[3, 2, 3, 3], -1.0, 1.0)?],
        _ => vec![u(&[3, 2, 3, 3], -1.0, 1.0)?],
    })
}

pub const PROBED_OPS: [&str; 20] = [
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "sqrt",
    "relu",
    "mean",
    "variance",
    "conv2d",
    "linear",
    "avg_pool2",
    "reshape",
    "index_select0",
    "cross_entropy",
    "instance_stats",
    "dsu_layer",
    "mixstyle_layer",
    "padain_layer",
];

/// Relative errors are taken against `max(|analytic|, |numeric|, GRAD_FLOOR,
/// GRAD_SCALE_FLOOR * largest gradient of the same tensor)` so gradients
/// that are zero up to rounding do not dominate.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const GRAD_SCALE_FLOOR: f64 = 0.05;

/// Five-point central differences evaluated in double precision for both
/// precisions; elements whose stencil straddles a ReLU corner are skipped
/// and counted.
fn fd_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        floor: GRAD_FLOOR,
        scale_floor: GRAD_SCALE_FLOOR,
        max_per_param: 0,
        stencil: Stencil::FivePoint,
        kink_tolerance: Some(1e-7),
    }
}

/// Largest tolerated share of skipped elements.
const MAX_SKIPPED: f64 = 0.05;

pub const RTOL_F32: f64 = 1e-4;
pub const RTOL_F64: f64 = 1e-7;

fn both_precisions<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<(GradCheckReport, GradCheckReport)> {
    let r64 = finite_diff_check(f, inputs, fd_opts())?;
    let narrow: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let r32 = finite_diff_check(f, &narrow, fd_opts())?;
    Ok((r32, r64))
}

/// Two-block network with one DSU slot, its draws and uncertainty
/// scopes replayed from a recorded tape so the loss is a deterministic
/// function of weights and input.
struct FrozenDsuNet {
    params: net::Params<f64>,
    aug: AugmentorConfig,
    tape: Vec<SlotDraw>,
    labels: Vec<usize>,
}

impl FrozenDsuNet {
    fn new(seed: u64) -> Result<(Self, Vec<Tensor<f64>>)> {
        let size = 8;
                let spec = NetworkSpec::backbone(&[3, 4], 3, size).with_positions(&[2]);
        let params = net::build::<f64>(&spec, seed)?;
        let aug = AugmentorConfig::of(AugKind::Dsu).with_p(1.0);
        let mut rng = Rng::new(seed ^ 0x5eed);
        let x = uniform_tensor(&mut rng, &[4, 3, size, size], 0.0, 1.0)?;
        let mut noise = Noise::recording(rng);
        params.forward(&x, Mode::Train, &aug, &mut noise)?;
        let tape = noise.into_tape();
        let mut inputs = params.tensors.clone();
        inputs.push(x);
        Ok((
            Self {
                params,
                aug,
                tape,
                labels: vec![0, 1, 2, 1],
            },
            inputs,
        ))
    }
}

impl ScalarFn for FrozenDsuNet {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> ndcore::Result<Var> {
        let params = self.params.cast::<T>();
        let (weights, x) = p.split_at(p.len() - 1);
        let mut noise = Noise::replay(self.tape.clone());
        let f = params
            .forward_graph_with(g, x[0], weights.to_vec(), Mode::Train, &self.aug, &mut noise)
            .map_err(as_tensor_error)?;
        g.cross_entropy(f.logits, &self.labels)
    }
}

/// Central differences for every probed operation and the frozen-draw
/// network, in both precisions.
pub fn gradient_checks(seed: u64) -> Check {
    const NAME: &str = "gradient checks";
    let run = || -> Result<Check> {
        let mut rng = Rng::new(seed);
        let mut failures = Vec::new();
        let (mut w32, mut w64): (f64, f64) = (0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        let mut record = |name: &str, r32: &GradCheckReport, r64: &GradCheckReport| {
            w32 = w32.max(r32.max_rel_error);
            w64 = w64.max(r64.max_rel_error);
            checked += r32.checked + r64.checked;
            skipped += r32.skipped + r64.skipped;
            let share = |r: &GradCheckReport| r.skipped as f64 / (r.checked + r.skipped).max(1) as f64;
            if r32.max_rel_error > RTOL_F32
                || r64.max_rel_error > RTOL_F64
                || share(r32) > MAX_SKIPPED
                || share(r64) > MAX_SKIPPED
            {
                failures.push(format!(
                    "{name} (f32 {:.2e}, f64 {:.2e}, skipped {}+{})",
                    r32.max_rel_error, r64.max_rel_error, r32.skipped, r64.skipped
                ));
            }
        };
        for op in PROBED_OPS {
            let inputs = probe_inputs(op, &mut rng)?;
            let shape_probe = OpProbe { op, projection: None };
            let mut g = Graph::<f64>::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = shape_probe.build(&mut g, &vars)?;
            let projection = uniform_tensor(&mut rng, g.shape(out), -1.0, 1.0)?;
            let f = OpProbe {
                op,
                projection: Some(projection),
            };
            let (r32, r64) = both_precisions(&f, &inputs)?;
            record(op, &r32, &r64);
        }
        let (net, inputs) = FrozenDsuNet::new(seed)?;
        let (r32, r64) = both_precisions(&net, &inputs)?;
        record("network with frozen dsu", &r32, &r64);
        Ok(Check::new(
            NAME,
            failures.is_empty(),
            if failures.is_empty() {
                format!(
                    "{} ops + network, {checked} elements ({skipped} at kinks skipped), worst rel error f32 {w32:.2e} (rtol {RTOL_F32:e}), f64 {w64:.2e} (rtol {RTOL_F64:e})",
                    PROBED_OPS.len()
                )
            } else {
                format!("failed: {}", failures.join(", "))
            },
        ))
    };
    Check::from_result(NAME, run())
}

/// The five exact suites at their reference sizes.
pub fn property_suite(seed: u64, fault: bool) -> Vec<Check> {
    vec![
        statistics_oracle(100, seed, fault),
        identity_chain(seed),
        renormalization_algebra(100, seed),
        expectation_preservation(10_000, seed),
        gradient_checks(seed),
    ]
}
