mod common;

use pgdpo_core::bench::grid_error;
use pgdpo_core::config::RunConfig;
use pgdpo_core::policy::{Head, InputNormalization, MlpPolicy, Policy};
use pgdpo_core::problems::ControlBlock;
use pgdpo_core::reference::discount_integral;
use pgdpo_core::rng::{mix_keys, NoiseSource, NoiseStream};
use pgdpo_core::stage1::clip_gradient;
use pgdpo_core::{DiscountKernel, ImpatienceProfile};
use proptest::prelude::*;

fn kernel() -> impl Strategy<Value = DiscountKernel> {
    prop_oneof![
        (0.0..3.0f64).prop_map(|rate| DiscountKernel::Exponential { rate }),
        (0.1..3.0f64, 0.05..3.0f64)
            .prop_map(|(alpha0, beta0)| DiscountKernel::SurvivalGamma { alpha0, beta0 }),
        (0.0..3.0f64).prop_map(|kappa| DiscountKernel::Hyperbolic { kappa }),
        (0.1..2.0f64, 0.0..1.0f64).prop_map(|(k0, k1)| DiscountKernel::TimeVaryingHyperbolic {
            profile: ImpatienceProfile::Linear { k0, k1 }
        }),
        (0.5..2.0f64, 0.0..0.4f64, 0.0..7.0f64).prop_map(|(k0, amplitude, omega)| {
            DiscountKernel::TimeVaryingHyperbolic {
                profile: ImpatienceProfile::Sinusoidal {
                    k0,
                    amplitude,
                    omega,
                },
            }
        }),
        (0.1..2.0f64, 0.0..2.0f64).prop_map(|(k0, gamma)| DiscountKernel::TimeVaryingHyperbolic {
            profile: ImpatienceProfile::Exponential { k0, gamma }
        }),
    ]
}

proptest! {
    #[test]
    fn kernel_is_a_discount_factor(k in kernel(), s in 0.0..1.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (t1, t2) = if a <= b { (s + a, s + b) } else { (s + b, s + a) };
        prop_assert_eq!(k.evaluate(s, s).unwrap(), 1.0);
        let d1 = k.evaluate(s, t1).unwrap();
        let d2 = k.evaluate(s, t2).unwrap();
        prop_assert!(d1 > 0.0 && d1 <= 1.0);
        prop_assert!(d2 <= d1 + 1e-15);
    }

    #[test]
    fn survival_kernel_is_multiplicative(alpha0 in 0.1..3.0f64, beta0 in 0.05..3.0f64, s in 0.0..1.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let k = DiscountKernel::SurvivalGamma { alpha0, beta0 };
        let (u, t) = if a <= b { (s + a, s + b) } else { (s + b, s + a) };
        prop_assert!(k.multiplicativity_defect(s, u, t).unwrap() <= 1e-12);
    }

    #[test]
    fn hyperbolic_kernel_is_homogeneous(kappa in 0.0..3.0f64, s in 0.0..1.0f64, a in 0.0..1.0f64, h in 0.0..1.0f64) {
        let k = DiscountKernel::Hyperbolic { kappa };
        prop_assert!(k.homogeneity_defect(s, s + a, h).unwrap() <= 1e-14);
    }

    #[test]
    fn reversed_arguments_are_rejected(k in kernel(), s in 0.01..1.0f64, gap in 1e-6..1.0f64) {
        prop_assert!(k.evaluate(s + gap, s).is_err());
    }

    #[test]
    fn discount_integral_matches_simpson(k in kernel(), t in 0.0..0.9f64) {
        let n = 2000;
        let h = (1.0 - t) / n as f64;
        let mut acc = k.factor(t, t) + k.factor(t, 1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * k.factor(t, t + i as f64 * h);
        }
        let simpson = acc * h / 3.0;
        let closed = discount_integral(&k, t, 1.0).unwrap();
        prop_assert!((closed - simpson).abs() < 1e-9, "{} vs {}", closed, simpson);
    }

    #[test]
    fn clipping_never_exceeds_the_threshold(g in proptest::collection::vec(-100.0..100.0f64, 1..50), clip in 1e-3..10.0f64) {
        let mut v = g.clone();
        let pre = clip_gradient(&mut v, clip);
        let post = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(post <= clip * (1.0 + 1e-12));
        prop_assert!((pre - g.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() <= 1e-12 * pre.max(1.0));
        if pre <= clip {
            prop_assert_eq!(v, g);
        }
    }

    #[test]
    fn softplus_heads_stay_positive(seed in any::<u64>(), t in 0.0..1.0f64, x in -50.0..50.0f64) {
        let p = MlpPolicy::init(vec![2, 8, 2], vec![Head::Identity, Head::Softplus], InputNormalization::identity(1), seed).unwrap();
        let u = p.act(t, &[x]).unwrap();
        prop_assert!(u[1] > 0.0);
    }

    #[test]
    fn antithetic_stream_negates(seed in any::<u64>(), path in 0u64..1000, step in 0usize..1000) {
        let mut a = NoiseStream::new(seed, path, 3);
        let mut b = NoiseStream::new(seed, path, 3).antithetic();
        let (mut x, mut y) = ([0.0; 3], [0.0; 3]);
        a.fill(step, 0.25, &mut x);
        b.fill(step, 0.25, &mut y);
        for i in 0..3 {
            prop_assert_eq!(x[i], -y[i]);
        }
    }

    #[test]
    fn key_mixing_separates_neighbours(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_ne!(mix_keys(&[a, b]), mix_keys(&[a, b.wrapping_add(1)]));
        prop_assert_eq!(mix_keys(&[a, b]), mix_keys(&[a, b]));
    }

    #[test]
    fn grid_error_is_a_seminorm(r in proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 2), 1..20), shift in -1.0..1.0f64) {
        let blocks = vec![ControlBlock { name: "u".into(), range: 0..2 }];
        let same: Vec<_> = r.iter().cloned().map(Some).collect();
        let e = grid_error(&same, &r, &blocks, None);
        prop_assert_eq!(e[0].l1, 0.0);
        let moved: Vec<_> = r.iter().map(|u| Some(u.iter().map(|v| v + shift).collect())).collect();
        let e = grid_error(&moved, &r, &blocks, None);
        prop_assert!((e[0].l1 - 2.0 * shift.abs()).abs() < 1e-12);
        prop_assert!(e[0].linf >= e[0].l1 - 1e-12);
    }

    #[test]
    fn config_hash_ignores_workers(workers in 1usize..64, seed in 0u64..100) {
        let mut a = RunConfig::case2();
        a.seeds = vec![seed];
        let mut b = a.clone();
        b.workers = workers;
        prop_assert_eq!(a.hash(), b.hash());
        let back = RunConfig::from_json(&a.to_json()).unwrap();
        prop_assert_eq!(back.hash(), a.hash());
    }
}

#[test]
fn hyperbolic_multiplicativity_defect_at_unit_kappa() {
    let k = DiscountKernel::Hyperbolic { kappa: 1.0 };
    let defect = k.multiplicativity_defect(0.0, 1.0, 2.0).unwrap();
    assert!((defect - 1.0 / 12.0).abs() <= 1e-12);
}
