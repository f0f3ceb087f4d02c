//! Per-instance channel statistics and their batch-level spread.

use ndcore::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DsuError, Result};

/// Added to the spatial variance before the square root.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Channel-wise mean and standard deviation of each instance, both `[B,C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Spread of the instance statistics across the batch, both `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchUncertainty<T> {
    pub sigma_mu: Tensor<T>,
    pub sigma_sigma: Tensor<T>,
}

/// Graph handles for [`InstanceStats`] computed inside a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatVars {
    pub mu: Var,
    pub sigma: Var,
}

impl StatVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> InstanceStats<T> {
        InstanceStats {
            mu: g.value(self.mu).clone(),
            sigma: g.value(self.sigma).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsDistance {
    pub mu_dist: f64,
    pub sigma_dist: f64,
}

impl StatsDistance {
    pub fn total(&self) -> f64 {
        self.mu_dist + self.sigma_dist
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(DsuError::Config(format!("eps must be finite and >= 0, got {eps}")))
    }
}

/// `mu = mean_{h,w} x`, `sigma = sqrt(var_{h,w} x + eps)`, recorded on `g`.
pub fn instance_stats_var<T: Scalar>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<StatVars> {
    check_eps(eps)?;
    if g.shape(x).len() != 4 {
        return Err(DsuError::Input(format!(
            "instance statistics need [B,C,H,W], got {:?}",
            g.shape(x)
        )));
    }
    let mu = g.mean(x, &[2, 3])?;
    let var = g.variance(x, &[2, 3])?;
    let shifted = g.add_scalar(var, T::from_f64(eps))?;
    let sigma = g.sqrt(shifted)?;
    Ok(StatVars { mu, sigma })
}

pub fn instance_stats<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<InstanceStats<T>> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let vars = instance_stats_var(&mut g, xv, eps)?;
    Ok(vars.values(&g))
}

impl<T: Scalar> InstanceStats<T> {
    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[1]
    }

    fn check(&self) -> Result<()> {
        if self.mu.rank() != 2 || self.mu.shape() != self.sigma.shape() {
            return Err(DsuError::Input(format!(
                "instance stats must be matching [B,C], got mu {:?} sigma {:?}",
                self.mu.shape(),
                self.sigma.shape()
            )));
        }
        Ok(())
    }

    /// Stacks the rows of several stats blocks with equal channel counts.
    pub fn concat(parts: &[InstanceStats<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| DsuError::Input("no statistics to concatenate".into()))?;
        let c = first.channels();
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for p in parts {
            p.check()?;
            if p.channels() != c {
                return Err(DsuError::Input(format!(
                    "channel mismatch: {} vs {c}",
                    p.channels()
                )));
            }
            mu.extend_from_slice(p.mu.data());
            sigma.extend_from_slice(p.sigma.data());
        }
        let b = mu.len() / c;
        Ok(Self {
            mu: Tensor::new(&[b, c], mu)?,
            sigma: Tensor::new(&[b, c], sigma)?,
        })
    }

    /// Batch average of `mu` and `sigma`, each length `C`.
    pub fn batch_means(&self) -> (Vec<f64>, Vec<f64>) {
        let (b, c) = (self.batch(), self.channels());
        let avg = |t: &Tensor<T>| {
            let mut acc = vec![0.0; c];
            for row in t.data().chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            acc.iter().map(|a| a / b as f64).collect()
        };
        (avg(&self.mu), avg(&self.sigma))
    }
}

/// Population standard deviation over the batch axis of each statistic.
/// The result is a plain value: no gradient flows through it.
pub fn batch_uncertainty<T: Scalar>(stats: &InstanceStats<T>) -> Result<BatchUncertainty<T>> {
    stats.check()?;
    let spread = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let var = ndcore::ops::reduce(ndcore::ReduceOp::Variance, t, &[0], ndcore::Divisor::N)?;
        Ok(ndcore::ops::sqrt(&var)?)
    };
    Ok(BatchUncertainty {
        sigma_mu: spread(&stats.mu)?,
        sigma_sigma: spread(&stats.sigma)?,
    })
}

impl<T: Scalar> BatchUncertainty<T> {
    /// Replaces each vector by its mean over channels (one shared scope).
    pub fn channel_shared(&self) -> Result<Self> {
        let share = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let m = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64;
            Ok(Tensor::full(t.shape(), T::from_f64(m))?)
        };
        Ok(Self {
            sigma_mu: share(&self.sigma_mu)?,
            sigma_sigma: share(&self.sigma_sigma)?,
        })
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distances between the batch-averaged `mu` vectors and between
/// the batch-averaged `sigma` vectors. Batch sizes may differ.
pub fn stats_distance<T: Scalar>(a: &InstanceStats<T>, b: &InstanceStats<T>) -> Result<StatsDistance> {
    a.check()?;
    b.check()?;
    if a.channels() != b.channels() {
        return Err(DsuError::Input(format!(
            "channel mismatch: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let (amu, asig) = a.batch_means();
    let (bmu, bsig) = b.batch_means();
    Ok(StatsDistance {
        mu_dist: euclidean(&amu, &bmu),
        sigma_dist: euclidean(&asig, &bsig),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_values() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = instance_stats(&x, 0.0).unwrap();
        assert_eq!(s.mu.data(), &[4.0]);
        assert!((s.sigma.data()[0] - 5f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma.data()[0] - 2.23607).abs() < 1e-5);
    }

    #[test]
    fn constant_instance() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], -1.5).unwrap();
        let s = instance_stats(&x, 0.0).unwrap();
        assert!(s.mu.data().iter().all(|&m| m == -1.5));
        assert!(s.sigma.data().iter().all(|&v| v == 0.0));
        let s = instance_stats(&x, 1e-6).unwrap();
        assert!(s.sigma.data().iter().all(|&v| (v - 1e-3).abs() < 1e-15));
    }

    #[test]
    fn rejects_negative_eps_and_wrong_rank() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(instance_stats(&x, -1.0).is_err());
        assert!(instance_stats(&Tensor::<f64>::zeros(&[2, 2]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn uncertainty_of_two_means() {
        let stats = InstanceStats {
            mu: Tensor::<f64>::from_f64(&[2, 1], &[4.0, 2.0]).unwrap(),
            sigma: Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap(),
        };
        let u = batch_uncertainty(&stats).unwrap();
        assert_eq!(u.sigma_mu.data(), &[1.0]);
        assert_eq!(u.sigma_sigma.data(), &[0.0]);
    }

    #[test]
    fn single_instance_has_zero_uncertainty() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 5.0, -1.0]).unwrap();
        let u = batch_uncertainty(&instance_stats(&x, 1e-6).unwrap()).unwrap();
        assert!(u.sigma_mu.data().iter().chain(u.sigma_sigma.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn distance_three_four_five() {
        let a = InstanceStats {
            mu: Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 0.0]).unwrap(),
            sigma: Tensor::from_f64(&[2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap(),
        };
        let b = InstanceStats {
            mu: Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap(),
            sigma: Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap(),
        };
        let d = stats_distance(&a, &b).unwrap();
        assert_eq!(d.mu_dist, 5.0);
        assert_eq!(d.sigma_dist, 0.0);
        assert_eq!(stats_distance(&a, &a).unwrap().total(), 0.0);
        let c = InstanceStats {
            mu: Tensor::<f64>::zeros(&[1, 3]).unwrap(),
            sigma: Tensor::zeros(&[1, 3]).unwrap(),
        };
        assert!(stats_distance(&a, &c).is_err());
    }

    #[test]
    fn channel_shared_scope_is_mean() {
        let u = BatchUncertainty {
            sigma_mu: Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 6.0]).unwrap(),
            sigma_sigma: Tensor::from_f64(&[3], &[0.0, 0.0, 3.0]).unwrap(),
        };
        let s = u.channel_shared().unwrap();
        assert_eq!(s.sigma_mu.data(), &[3.0; 3]);
        assert_eq!(s.sigma_sigma.data(), &[1.0; 3]);
    }
}
