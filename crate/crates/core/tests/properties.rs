use dsu::augment::{self, AugKind, AugmentorConfig, Mode, Noise, Rng};
use dsu::checks::naive_statistics;
use dsu::featstats::{batch_uncertainty, instance_stats, stats_distance, BatchUncertainty, InstanceStats};
use ndcore::Tensor;
use proptest::prelude::*;

/// `[B,C,H,W]` with B in 2..=4, C in 1..=4, H,W in 2..=5 and values that
/// keep every plane non-constant.
fn features() -> impl Strategy<Value = Tensor<f64>> {
    (2usize..=4, 1usize..=4, 2usize..=5, 2usize..=5)
        .prop_flat_map(|(b, c, h, w)| {
            let n = b * c * h * w;
            (Just([b, c, h, w]), prop::collection::vec(-3.0f64..3.0, n))
        })
        .prop_map(|(shape, mut v)| {
            let hw = shape[2] * shape[3];
            for plane in v.chunks_mut(hw) {
                plane[0] += 1.0;
                plane[hw - 1] -= 1.0;
            }
            Tensor::new(&shape, v).unwrap()
        })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permuted_batch(x: &InstanceStats<f64>, perm: &[usize]) -> InstanceStats<f64> {
    let c = x.channels();
    let pick = |t: &Tensor<f64>| {
        let v: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect();
        Tensor::new(&[perm.len(), c], v).unwrap()
    };
    InstanceStats {
        mu: pick(&x.mu),
        sigma: pick(&x.sigma),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_match_loops(x in features(), eps in 0.0f64..1e-3) {
        let s = instance_stats(&x, eps).unwrap();
        let u = batch_uncertainty(&s).unwrap();
        let (mu, sigma, smu, ssig) = naive_statistics(&x, eps);
        prop_assert!(max_diff(s.mu.data(), &mu) < 1e-10);
        prop_assert!(max_diff(s.sigma.data(), &sigma) < 1e-10);
        prop_assert!(max_diff(u.sigma_mu.data(), &smu) < 1e-10);
        prop_assert!(max_diff(u.sigma_sigma.data(), &ssig) < 1e-10);
    }

    #[test]
    fn offset_moves_mean_only(x in features(), c in -5.0f64..5.0) {
        let s = instance_stats(&x, 0.0).unwrap();
        let t = instance_stats(&x.map(|v| v + c), 0.0).unwrap();
        let shifted: Vec<f64> = s.mu.data().iter().map(|m| m + c).collect();
        prop_assert!(max_diff(t.mu.data(), &shifted) < 1e-9);
        prop_assert!(max_diff(t.sigma.data(), s.sigma.data()) < 1e-9);
    }

    #[test]
    fn scaling_scales_both(x in features(), a in -4.0f64..4.0) {
        let s = instance_stats(&x, 0.0).unwrap();
        let t = instance_stats(&x.map(|v| a * v), 0.0).unwrap();
        let mu: Vec<f64> = s.mu.data().iter().map(|m| a * m).collect();
        let sigma: Vec<f64> = s.sigma.data().iter().map(|v| a.abs() * v).collect();
        prop_assert!(max_diff(t.mu.data(), &mu) < 1e-9);
        prop_assert!(max_diff(t.sigma.data(), &sigma) < 1e-9);
    }

    #[test]
    fn uncertainty_ignores_batch_order(x in features(), seed in any::<u64>()) {
        let s = instance_stats(&x, 1e-6).unwrap();
        let perm = Rng::new(seed).permutation(s.batch());
        let u = batch_uncertainty(&s).unwrap();
        let v = batch_uncertainty(&permuted_batch(&s, &perm)).unwrap();
        prop_assert!(max_diff(u.sigma_mu.data(), v.sigma_mu.data()) < 1e-12);
        prop_assert!(max_diff(u.sigma_sigma.data(), v.sigma_sigma.data()) < 1e-12);
        prop_assert!(u.sigma_mu.data().iter().chain(u.sigma_sigma.data()).all(|v| *v >= 0.0));
    }

    #[test]
    fn distance_is_a_symmetric_nonnegative_gap(a in features(), k in 0.5f64..2.0) {
        let s = instance_stats(&a, 1e-6).unwrap();
        let t = instance_stats(&a.map(|v| k * v + 0.3), 1e-6).unwrap();
        let ab = stats_distance(&s, &t).unwrap();
        let ba = stats_distance(&t, &s).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab.mu_dist >= 0.0 && ab.sigma_dist >= 0.0);
        prop_assert_eq!(stats_distance(&s, &s).unwrap().total(), 0.0);
    }

    #[test]
    fn zero_uncertainty_dsu_is_identity(x in features(), seed in any::<u64>()) {
        let s = instance_stats(&x, 1e-6).unwrap();
        let c = s.channels();
        let zero = BatchUncertainty {
            sigma_mu: Tensor::zeros(&[c]).unwrap(),
            sigma_sigma: Tensor::zeros(&[c]).unwrap(),
        };
        let (y, d) = augment::dsu(&x, &s, &zero, &mut Rng::new(seed)).unwrap();
        prop_assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
        prop_assert_eq!(d.beta, s.mu);
    }

    #[test]
    fn renormalized_stats_are_the_drawn_ones(x in features(), seed in any::<u64>()) {
        let s = instance_stats(&x, 0.0).unwrap();
        let u = batch_uncertainty(&s).unwrap();
        let (y, d) = augment::dsu(&x, &s, &u, &mut Rng::new(seed)).unwrap();
        let t = instance_stats(&y, 0.0).unwrap();
        let abs_gamma: Vec<f64> = d.gamma.data().iter().map(|g| g.abs()).collect();
        prop_assert!(max_diff(t.mu.data(), d.beta.data()) < 1e-9);
        prop_assert!(max_diff(t.sigma.data(), &abs_gamma) < 1e-9);
    }

    #[test]
    fn draws_stay_within_their_scope(x in features(), seed in any::<u64>()) {
        let s = instance_stats(&x, 1e-6).unwrap();
        let u = batch_uncertainty(&s).unwrap();
        let c = s.channels();
        let (_, d) = augment::uniform_shift(&x, &s, &u, &mut Rng::new(seed)).unwrap();
        for (i, (b, m)) in d.beta.data().iter().zip(s.mu.data()).enumerate() {
            prop_assert!((b - m).abs() <= u.sigma_mu.data()[i % c] + 1e-12);
        }
        prop_assert!(d.eps_mu.data().iter().all(|e| (-1.0..1.0).contains(e)));
    }

    #[test]
    fn identity_permutations_and_unit_lambda_keep_features(x in features(), lambda in 0.0f64..1.0) {
        let s = instance_stats(&x, 1e-6).unwrap();
        let ident: Vec<usize> = (0..s.batch()).collect();
        prop_assert!(augment::p_ada_in(&x, &s, &ident).unwrap().max_abs_diff(&x).unwrap() < 1e-9);
        prop_assert!(augment::mix_style(&x, &s, &ident, lambda).unwrap().max_abs_diff(&x).unwrap() < 1e-9);
        let mut shifted: Vec<usize> = (1..s.batch()).collect();
        shifted.push(0);
        prop_assert!(augment::mix_style(&x, &s, &shifted, 1.0).unwrap().max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn eval_and_closed_gate_are_identity(x in features(), seed in any::<u64>(), k in 0usize..7) {
        let kind = AugKind::ALL[k];
        let x = x.cast::<f32>();
        let mut rng = Rng::new(seed);
        prop_assert_eq!(&augment::apply(&x, &AugmentorConfig::of(kind).with_p(1.0), Mode::Eval, &mut rng).unwrap(), &x);
        prop_assert_eq!(&augment::apply(&x, &AugmentorConfig::of(kind).with_p(0.0), Mode::Train, &mut rng).unwrap(), &x);
    }

    #[test]
    fn tapes_replay_exactly(x in features(), seed in any::<u64>(), k in 1usize..7) {
        let cfg = AugmentorConfig::of(AugKind::ALL[k]).with_p(1.0);
        let run = |noise: &mut Noise| {
            let mut g = ndcore::Graph::<f64>::no_grad();
            let xv = g.constant(x.clone());
            let out = augment::apply_var(&mut g, xv, &cfg, Mode::Train, noise).unwrap().out;
            g.value(out).clone()
        };
        let mut rec = Noise::recording(Rng::new(seed));
        let first = run(&mut rec);
        let mut rep = Noise::replay(rec.into_tape());
        prop_assert_eq!(run(&mut rep), first);
    }
}
