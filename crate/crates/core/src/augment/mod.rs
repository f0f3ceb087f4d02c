//! Feature-statistics augmentors: DSU and the baselines and ablations it is
//! compared against, all expressed as a renormalization
//! `gamma * (x - mu) / sigma + beta` onto a drawn or derived statistic pair.

pub mod layers;
pub mod noise;
pub mod rng;

use std::fmt;
use std::str::FromStr;

use ndcore::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DsuError, Result};
use crate::featstats::{self, BatchUncertainty, InstanceStats, StatVars};
pub use layers::{mix_shift, offset_shift, renormalize, swap_shift, ShiftVars};
pub use noise::{Draw, DrawSummary, Noise, Scope, SlotDraw};
pub use rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Identity,
    Dsu,
    #[serde(alias = "mixstyle")]
    MixStyle,
    #[serde(alias = "padain")]
    PAdaIn,
    RandomFixed,
    UniformShift,
    ChannelShareDsu,
}

impl AugKind {
    pub const ALL: [AugKind; 7] = [
        AugKind::Identity,
        AugKind::Dsu,
        AugKind::MixStyle,
        AugKind::PAdaIn,
        AugKind::RandomFixed,
        AugKind::UniformShift,
        AugKind::ChannelShareDsu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Identity => "identity",
            AugKind::Dsu => "dsu",
            AugKind::MixStyle => "mix_style",
            AugKind::PAdaIn => "p_ada_in",
            AugKind::RandomFixed => "random_fixed",
            AugKind::UniformShift => "uniform_shift",
            AugKind::ChannelShareDsu => "channel_share_dsu",
        }
    }

    /// Whether the augmentor reads statistics of other instances in the batch.
    pub fn uses_batch(self) -> bool {
        !matches!(self, AugKind::Identity | AugKind::RandomFixed)
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = DsuError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let kind = match key.as_str() {
            "identity" | "none" | "baseline" => AugKind::Identity,
            "dsu" => AugKind::Dsu,
            "mix_style" | "mixstyle" => AugKind::MixStyle,
            "p_ada_in" | "padain" | "p_adain" => AugKind::PAdaIn,
            "random_fixed" => AugKind::RandomFixed,
            "uniform_shift" | "uniform" => AugKind::UniformShift,
            "channel_share_dsu" | "channel_share" => AugKind::ChannelShareDsu,
            _ => {
                return Err(DsuError::Config(format!(
                    "unknown augmentor `{s}` (expected one of {})",
                    AugKind::ALL.map(AugKind::name).join(", ")
                )))
            }
        };
        Ok(kind)
    }
}

/// Index structure of the Gaussian and uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLayout {
    /// One draw per instance and channel.
    #[default]
    PerChannel,
    /// One draw per instance, shared by its channels.
    PerInstance,
}

/// Law of the MixStyle interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaLaw {
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl Default for LambdaLaw {
    fn default() -> Self {
        LambdaLaw::Beta {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentorConfig {
    pub kind: AugKind,
    pub p: f64,
    pub eps: f64,
    /// Standard deviation of the fixed Gaussian used by `random_fixed`.
    pub fixed_scale: f64,
    pub mix_lambda: LambdaLaw,
    pub clamp_gamma: bool,
    pub layout: NoiseLayout,
}

impl Default for AugmentorConfig {
    fn default() -> Self {
        Self {
            kind: AugKind::Dsu,
            p: 0.5,
            eps: featstats::DEFAULT_EPS,
            fixed_scale: 1.0,
            mix_lambda: LambdaLaw::default(),
            clamp_gamma: false,
            layout: NoiseLayout::PerChannel,
        }
    }
}

impl AugmentorConfig {
    pub fn of(kind: AugKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(DsuError::Config(format!("augmentor.p must be in [0,1], got {}", self.p)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(DsuError::Config(format!("augmentor.eps must be > 0, got {}", self.eps)));
        }
        if !(self.fixed_scale.is_finite() && self.fixed_scale >= 0.0) {
            return Err(DsuError::Config(format!(
                "augmentor.fixed_scale must be >= 0, got {}",
                self.fixed_scale
            )));
        }
        match self.mix_lambda {
            LambdaLaw::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => Err(DsuError::Config(
                format!("augmentor.mix_lambda beta parameters must be > 0, got ({alpha}, {beta})"),
            )),
            LambdaLaw::Fixed { value } if !(0.0..=1.0).contains(&value) => Err(DsuError::Config(
                format!("augmentor.mix_lambda value must be in [0,1], got {value}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Output of one augmentor invocation on a graph. `shift` is set when the
/// gate fired and holds the statistics used for renormalization.
#[derive(Debug, Clone, Copy)]
pub struct Applied {
    pub out: Var,
    pub shift: Option<(StatVars, ShiftVars)>,
}

fn draws(rng: &mut Rng, layout: NoiseLayout, b: usize, c: usize, mut one: impl FnMut(&mut Rng) -> f64) -> Vec<f64> {
    match layout {
        NoiseLayout::PerChannel => (0..b * c).map(|_| one(rng)).collect(),
        NoiseLayout::PerInstance => (0..b)
            .flat_map(|_| std::iter::repeat_n(one(rng), c))
            .collect(),
    }
}

fn sample(cfg: &AugmentorConfig, rng: &mut Rng, b: usize, c: usize) -> Result<Draw> {
    Ok(match cfg.kind {
        AugKind::Dsu | AugKind::ChannelShareDsu | AugKind::RandomFixed => {
            let eps_mu = draws(rng, cfg.layout, b, c, Rng::normal);
            let eps_sigma = draws(rng, cfg.layout, b, c, Rng::normal);
            Draw::Gaussian { eps_mu, eps_sigma }
        }
        AugKind::UniformShift => {
            let u_mu = draws(rng, cfg.layout, b, c, Rng::symmetric);
            let u_sigma = draws(rng, cfg.layout, b, c, Rng::symmetric);
            Draw::Uniform { u_mu, u_sigma }
        }
        AugKind::MixStyle => {
            let perm = rng.permutation(b);
            let lambda = match cfg.mix_lambda {
                LambdaLaw::Beta { alpha, beta } => rng.beta(alpha, beta)?,
                LambdaLaw::Fixed { value } => value,
            };
            Draw::Mix { perm, lambda }
        }
        AugKind::PAdaIn => Draw::Swap { perm: rng.permutation(b) },
        AugKind::Identity => Draw::Skipped,
    })
}

fn scope_of<T: Scalar>(cfg: &AugmentorConfig, stats: &InstanceStats<T>) -> Result<Option<Scope>> {
    let from = |u: BatchUncertainty<T>| Scope {
        sigma_mu: u.sigma_mu.to_f64_vec(),
        sigma_sigma: u.sigma_sigma.to_f64_vec(),
    };
    Ok(match cfg.kind {
        AugKind::Dsu | AugKind::UniformShift => Some(from(featstats::batch_uncertainty(stats)?)),
        AugKind::ChannelShareDsu => Some(from(featstats::batch_uncertainty(stats)?.channel_shared()?)),
        AugKind::RandomFixed => Some(Scope {
            sigma_mu: vec![cfg.fixed_scale; stats.channels()],
            sigma_sigma: vec![cfg.fixed_scale; stats.channels()],
        }),
        _ => None,
    })
}

fn mismatch(cfg: &AugmentorConfig, d: &Draw) -> DsuError {
    DsuError::Input(format!("taped draw {d:?} does not fit augmentor {}", cfg.kind))
}

/// Runs the configured augmentor on `x` inside `g`.
///
/// In eval mode, or for the identity kind, `x` is returned untouched and no
/// randomness is consumed. Otherwise one gate value decides whether the whole
/// batch is augmented.
pub fn apply_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &AugmentorConfig,
    mode: Mode,
    noise: &mut Noise,
) -> Result<Applied> {
    let skip = Applied { out: x, shift: None };
    if mode == Mode::Eval || cfg.kind == AugKind::Identity {
        return Ok(skip);
    }
    let planned = noise.planned()?;
    let fired = match &planned {
        Some(d) => d.fired(),
        None => noise.rng().uniform() < cfg.p,
    };
    if !fired {
        noise.record(SlotDraw::skipped());
        return Ok(skip);
    }

    let stats = featstats::instance_stats_var(g, x, cfg.eps)?;
    let values = stats.values(g);
    let (b, c) = (values.batch(), values.channels());
    let (draw, scope) = match planned {
        Some(SlotDraw { draw, scope: Some(s) }) => (draw, Some(s)),
        Some(SlotDraw { draw, scope: None }) => (draw, scope_of(cfg, &values)?),
        None => (sample(cfg, noise.rng(), b, c)?, scope_of(cfg, &values)?),
    };

    let shift = match (&draw, &scope) {
        (Draw::Gaussian { eps_mu: m, eps_sigma: s }, Some(sc))
            if matches!(cfg.kind, AugKind::Dsu | AugKind::ChannelShareDsu | AugKind::RandomFixed) =>
        {
            offset_shift(g, stats, m, s, &sc.sigma_mu, &sc.sigma_sigma)?
        }
        (Draw::Uniform { u_mu, u_sigma }, Some(sc)) if cfg.kind == AugKind::UniformShift => {
            offset_shift(g, stats, u_mu, u_sigma, &sc.sigma_mu, &sc.sigma_sigma)?
        }
        (Draw::Mix { perm, lambda }, _) if cfg.kind == AugKind::MixStyle => mix_shift(g, stats, perm, *lambda)?,
        (Draw::Swap { perm }, _) if cfg.kind == AugKind::PAdaIn => swap_shift(g, stats, perm)?,
        (d, _) => return Err(mismatch(cfg, d)),
    };

    let gamma_values = g.value(shift.gamma);
    let negative = gamma_values.data().iter().filter(|v| **v < T::zero()).count() as u64;
    let summary = noise.summary_mut();
    summary.gamma_elements += gamma_values.numel() as u64;
    summary.negative_gamma += negative;

    let shift = if cfg.clamp_gamma {
        ShiftVars {
            beta: shift.beta,
            gamma: g.relu(shift.gamma)?,
        }
    } else {
        shift
    };
    let out = renormalize(g, x, stats, shift)?;
    noise.record(SlotDraw { draw, scope });
    Ok(Applied {
        out,
        shift: Some((stats, shift)),
    })
}

/// Tensor-level [`apply_var`] driven by a live generator.
pub fn apply<T: Scalar>(x: &Tensor<T>, cfg: &AugmentorConfig, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut noise = Noise::live(rng.clone());
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let res = apply_var(&mut g, xv, cfg, mode, &mut noise);
    *rng = noise.rng().clone();
    Ok(g.value(res?.out).clone())
}

/// Drawn statistics and the standardized draws behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnShift<T> {
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
    pub eps_mu: Tensor<T>,
    pub eps_sigma: Tensor<T>,
}

fn check_inputs<T: Scalar>(x: &Tensor<T>, stats: &InstanceStats<T>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || stats.mu.shape() != &s[..2] || stats.sigma.shape() != &s[..2] {
        return Err(DsuError::Input(format!(
            "statistics {:?}/{:?} do not match features {s:?}",
            stats.mu.shape(),
            stats.sigma.shape()
        )));
    }
    Ok(())
}

fn restyle<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    build: impl FnOnce(&mut Graph<T>, StatVars) -> Result<ShiftVars>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_inputs(x, stats)?;
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let sv = StatVars {
        mu: g.constant(stats.mu.clone()),
        sigma: g.constant(stats.sigma.clone()),
    };
    let shift = build(&mut g, sv)?;
    let out = renormalize(&mut g, xv, sv, shift)?;
    Ok((
        g.value(out).clone(),
        g.value(shift.beta).clone(),
        g.value(shift.gamma).clone(),
    ))
}

fn offset_restyle<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    draw_mu: Vec<f64>,
    draw_sigma: Vec<f64>,
    scope_mu: &[f64],
    scope_sigma: &[f64],
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    let shape = stats.mu.shape().to_vec();
    let (out, beta, gamma) = restyle(x, stats, |g, sv| {
        offset_shift(g, sv, &draw_mu, &draw_sigma, scope_mu, scope_sigma)
    })?;
    Ok((
        out,
        DrawnShift {
            beta,
            gamma,
            eps_mu: Tensor::from_f64(&shape, &draw_mu)?,
            eps_sigma: Tensor::from_f64(&shape, &draw_sigma)?,
        },
    ))
}

/// DSU with the supplied standard-normal draws (`[B,C]` each).
pub fn dsu_with_draws<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    unc: &BatchUncertainty<T>,
    eps_mu: &Tensor<T>,
    eps_sigma: &Tensor<T>,
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    offset_restyle(
        x,
        stats,
        eps_mu.to_f64_vec(),
        eps_sigma.to_f64_vec(),
        &unc.sigma_mu.to_f64_vec(),
        &unc.sigma_sigma.to_f64_vec(),
    )
}

/// DSU: `beta = mu + eps_mu * Sigma_mu`, `gamma = sigma + eps_sigma * Sigma_sigma`
/// with independent standard-normal draws per instance and channel.
pub fn dsu<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    unc: &BatchUncertainty<T>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    let n = stats.mu.numel();
    let (em, es) = (rng.normals(n), rng.normals(n));
    offset_restyle(
        x,
        stats,
        em,
        es,
        &unc.sigma_mu.to_f64_vec(),
        &unc.sigma_sigma.to_f64_vec(),
    )
}

/// DSU with both scopes replaced by their mean over channels.
pub fn channel_share_dsu<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    unc: &BatchUncertainty<T>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    dsu(x, stats, &unc.channel_shared()?, rng)
}

/// Shifts drawn from a fixed Gaussian of standard deviation `s`.
pub fn random_fixed<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    s: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    if !(s.is_finite() && s >= 0.0) {
        return Err(DsuError::Config(format!("fixed scale must be >= 0, got {s}")));
    }
    let n = stats.mu.numel();
    let scope = vec![s; stats.mu.shape()[1]];
    let (em, es) = (rng.normals(n), rng.normals(n));
    offset_restyle(x, stats, em, es, &scope, &scope)
}

/// Shifts drawn from `U(-Sigma, Sigma)`; `eps_*` of the result hold the
/// standardized draws on `[-1, 1)`.
pub fn uniform_shift<T: Scalar>(
    x: &Tensor<T>,
    stats: &InstanceStats<T>,
    unc: &BatchUncertainty<T>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DrawnShift<T>)> {
    let n = stats.mu.numel();
    let um: Vec<f64> = (0..n).map(|_| rng.symmetric()).collect();
    let us: Vec<f64> = (0..n).map(|_| rng.symmetric()).collect();
    offset_restyle(
        x,
        stats,
        um,
        us,
        &unc.sigma_mu.to_f64_vec(),
        &unc.sigma_sigma.to_f64_vec(),
    )
}

/// MixStyle: interpolate each instance's statistics with those of `x[perm]`.
pub fn mix_style<T: Scalar>(x: &Tensor<T>, stats: &InstanceStats<T>, perm: &[usize], lambda: f64) -> Result<Tensor<T>> {
    Ok(restyle(x, stats, |g, sv| mix_shift(g, sv, perm, lambda))?.0)
}

/// pAdaIN: take the statistics of `x[perm]` outright.
pub fn p_ada_in<T: Scalar>(x: &Tensor<T>, stats: &InstanceStats<T>, perm: &[usize]) -> Result<Tensor<T>> {
    Ok(restyle(x, stats, |g, sv| swap_shift(g, sv, perm))?.0)
}
