//! Graph-level building blocks shared by every augmentor: a target
//! statistic pair `(beta, gamma)` and the renormalization onto it.

use ndcore::{Graph, Scalar, Tensor, Var};

use crate::error::{DsuError, Result};
use crate::featstats::StatVars;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftVars {
    pub beta: Var,
    pub gamma: Var,
}

/// `gamma * (x - mu) / sigma + beta`, with `[B,C]` statistics broadcast over space.
pub fn renormalize<T: Scalar>(g: &mut Graph<T>, x: Var, stats: StatVars, shift: ShiftVars) -> Result<Var> {
    let centered = g.sub(x, stats.mu)?;
    let normed = g.div(centered, stats.sigma)?;
    let scaled = g.mul(normed, shift.gamma)?;
    Ok(g.add(scaled, shift.beta)?)
}

fn bc<T: Scalar>(g: &Graph<T>, stats: StatVars) -> (usize, usize) {
    let s = g.shape(stats.mu);
    (s[0], s[1])
}

/// `beta = mu + draw_mu * scope_mu`, `gamma = sigma + draw_sigma * scope_sigma`,
/// where draws are `[B,C]` and scopes `[C]`. The offsets enter as constants.
pub fn offset_shift<T: Scalar>(
    g: &mut Graph<T>,
    stats: StatVars,
    draw_mu: &[f64],
    draw_sigma: &[f64],
    scope_mu: &[f64],
    scope_sigma: &[f64],
) -> Result<ShiftVars> {
    let (b, c) = bc(g, stats);
    if draw_mu.len() != b * c || draw_sigma.len() != b * c {
        return Err(DsuError::Input(format!(
            "expected {} draws per statistic for [{b},{c}], got {} and {}",
            b * c,
            draw_mu.len(),
            draw_sigma.len()
        )));
    }
    if scope_mu.len() != c || scope_sigma.len() != c {
        return Err(DsuError::Input(format!(
            "expected scopes of length {c}, got {} and {}",
            scope_mu.len(),
            scope_sigma.len()
        )));
    }
    let offset = |draw: &[f64], scope: &[f64]| -> Result<Tensor<T>> {
        let v: Vec<T> = draw
            .iter()
            .enumerate()
            .map(|(i, e)| T::from_f64(e * scope[i % c]))
            .collect();
        Ok(Tensor::new(&[b, c], v)?)
    };
    let om = g.constant(offset(draw_mu, scope_mu)?);
    let os = g.constant(offset(draw_sigma, scope_sigma)?);
    Ok(ShiftVars {
        beta: g.add(stats.mu, om)?,
        gamma: g.add(stats.sigma, os)?,
    })
}

pub(crate) fn check_perm(perm: &[usize], b: usize) -> Result<()> {
    let mut seen = vec![false; b];
    if perm.len() != b {
        return Err(DsuError::Input(format!(
            "permutation of length {} for batch {b}",
            perm.len()
        )));
    }
    for &i in perm {
        if i >= b || std::mem::replace(&mut seen[i], true) {
            return Err(DsuError::Input(format!("{perm:?} is not a permutation of 0..{b}")));
        }
    }
    Ok(())
}

/// `beta = lambda mu + (1 - lambda) mu[perm]`, likewise for `gamma`.
pub fn mix_shift<T: Scalar>(g: &mut Graph<T>, stats: StatVars, perm: &[usize], lambda: f64) -> Result<ShiftVars> {
    check_perm(perm, bc(g, stats).0)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DsuError::Input(format!("mixing weight {lambda} outside [0,1]")));
    }
    let mut mix = |v: Var| -> Result<Var> {
        let other = g.index_select0(v, perm)?;
        let a = g.mul_scalar(v, T::from_f64(lambda))?;
        let b = g.mul_scalar(other, T::from_f64(1.0 - lambda))?;
        Ok(g.add(a, b)?)
    };
    Ok(ShiftVars {
        beta: mix(stats.mu)?,
        gamma: mix(stats.sigma)?,
    })
}

/// `beta = mu[perm]`, `gamma = sigma[perm]`.
pub fn swap_shift<T: Scalar>(g: &mut Graph<T>, stats: StatVars, perm: &[usize]) -> Result<ShiftVars> {
    check_perm(perm, bc(g, stats).0)?;
    Ok(ShiftVars {
        beta: g.index_select0(stats.mu, perm)?,
        gamma: g.index_select0(stats.sigma, perm)?,
    })
}
