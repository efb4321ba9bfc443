mod common;

use certrain::attacks::{self, AttackConfig, AttackKind};
use certrain::bounds::{self, BoundOptions, BoundStats};
use certrain::data::{decode_idx_images, encode_idx_images, encode_idx_labels, decode_idx_labels};
use certrain::losses::{loss_value_at, LossFamily, LossSpec};
use certrain::network::{logit_differences, BnMode};
use certrain::train::{cyclic_lr, smoothed_ramp, TrainPlan};
use certrain::Tensor;
use common::{labels, random_mlp, random_shape, stream, uniform};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ibp_contains_sampled_logit_differences(seed in 0u64..1_000_000, eps in 0.0f64..0.6) {
        let mut rng = stream("prop-ibp", seed);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, seed % 2 == 0);
        let k = *dims.last().unwrap();
        let x = uniform(&mut rng, &[2, dims[0]], -1.0, 1.0);
        let y = labels(&mut rng, 2, k);
        let lower = bounds::ibp_bounds(&net, &x, &y, eps, BoundOptions::default()).unwrap().lower;
        for _ in 0..20 {
            let noise = uniform(&mut rng, x.shape(), -eps, eps + f64::MIN_POSITIVE);
            let xp = x.zip_with(&noise, |a, b| a + b).unwrap();
            let z = logit_differences(&net.predict(&xp).unwrap(), &y).unwrap();
            for (zi, li) in z.data().iter().zip(lower.data()) {
                prop_assert!(*zi >= li - 1e-9);
            }
        }
    }

    #[test]
    fn ibp_is_monotone_in_eps(seed in 0u64..1_000_000, a in 0.0f64..0.3, b in 0.0f64..0.3) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut rng = stream("prop-monotone", seed);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, false);
        let x = uniform(&mut rng, &[1, dims[0]], 0.0, 1.0);
        let y = labels(&mut rng, 1, *dims.last().unwrap());
        let l_small = bounds::ibp_bounds(&net, &x, &y, lo, BoundOptions::default()).unwrap().lower;
        let l_big = bounds::ibp_bounds(&net, &x, &y, hi, BoundOptions::default()).unwrap().lower;
        for (s, g) in l_small.data().iter().zip(l_big.data()) {
            prop_assert!(*g <= s + 1e-12);
        }
    }

    #[test]
    fn forwabs_dominates_ibp_width(seed in 0u64..1_000_000, eps in 0.0f64..1.0) {
        let mut rng = stream("prop-forwabs", seed);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, seed % 3 == 0);
        let x = uniform(&mut rng, &[1, dims[0]], -1.0, 1.0);
        let state = bounds::ibp_bounds(&net, &x, &[0], eps, BoundOptions::default()).unwrap();
        let gap = bounds::forwabs_gap(&net, eps, BoundStats::Running).unwrap();
        prop_assert_eq!(gap.stages.len(), state.stages.len());
        for (g, s) in gap.stages.iter().zip(&state.stages) {
            for ((d, l), u) in g.data().iter().zip(s.lower.data()).zip(s.upper.data()) {
                prop_assert!(*d >= (u - l) * (1.0 - 1e-12) - 1e-12);
            }
        }
    }

    #[test]
    fn attacks_stay_in_the_ball(seed in 0u64..1_000_000, eps in 0.01f64..0.5, kind in 0usize..4) {
        let mut rng = stream("prop-attack", seed);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, false);
        let x = uniform(&mut rng, &[3, dims[0]], 0.0, 1.0);
        let y = labels(&mut rng, 3, *dims.last().unwrap());
        let kind = [AttackKind::Fgsm, AttackKind::RsFgsm, AttackKind::NFgsm, AttackKind::Pgd][kind];
        let mut cfg = AttackConfig::new(kind, eps).with_seed(seed);
        if kind == AttackKind::Pgd {
            cfg.steps = 3;
        }
        cfg.clip_input = rng.gen_bool(0.5);
        let adv = attacks::attack(&net, &x, &y, &cfg, BnMode::Running).unwrap();
        let reach = if cfg.projects() { eps } else { (1.0 + cfg.noise_multiplier) * eps };
        for (a, c) in adv.x_adv.data().iter().zip(x.data()) {
            prop_assert!((a - c).abs() <= reach + 1e-12);
            if cfg.clip_input {
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn expressive_losses_sit_between_their_endpoints(seed in 0u64..1_000_000, alpha in 0.0f64..=1.0, family in 0usize..4) {
        let mut rng = stream("prop-expressive", seed);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, false);
        let x = uniform(&mut rng, &[4, dims[0]], 0.0, 1.0);
        let y = labels(&mut rng, 4, *dims.last().unwrap());
        let cfg = AttackConfig::pgd(0.1, 3).with_seed(seed);
        let adv = attacks::attack(&net, &x, &y, &cfg, BnMode::Running).unwrap();
        let spec = |family, alpha| LossSpec::new(family, cfg.clone()).with_alpha(alpha);
        let at = |s: LossSpec| loss_value_at(&net, &x, &y, &s, Some(&adv)).unwrap().total;
        let lo = at(spec(LossFamily::Adversarial, 0.0));
        let hi = at(spec(LossFamily::Ibp, 0.0));
        let v = at(spec(LossFamily::EXPRESSIVE[family], alpha));
        let tol = 1e-9 * hi.max(1.0);
        prop_assert!(v >= lo - tol && v <= hi + tol, "{} not in [{}, {}]", v, lo, hi);
    }

    #[test]
    fn idx_bytes_round_trip(n in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = stream("prop-idx", seed);
        let pixels: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect();
        let images = Tensor::new(vec![n, 1, h, w], pixels).unwrap();
        let bytes = encode_idx_images(&images).unwrap();
        let back = decode_idx_images(&bytes, "mem").unwrap();
        prop_assert_eq!(&back, &images);
        prop_assert_eq!(encode_idx_images(&back).unwrap(), bytes);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        prop_assert_eq!(decode_idx_labels(&encode_idx_labels(&labels).unwrap(), "mem").unwrap(), labels);
    }

    #[test]
    fn schedules_stay_in_range(t in 0.0f64..=1.0, u in 0.0f64..=1.0, peak in 0.001f64..1.0, frac in 0.05f64..0.95) {
        let lr = cyclic_lr(t, peak, frac);
        prop_assert!((0.0..=peak + 1e-15).contains(&lr));
        let (a, b) = if t < u { (t, u) } else { (u, t) };
        prop_assert!(smoothed_ramp(a) <= smoothed_ramp(b) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&smoothed_ramp(t)));
    }
}

#[test]
fn bounding_eps_reaches_target_at_the_ramp_end() {
    let mut plan = TrainPlan::cyclic(10, 0.1, 0.3);
    plan.eps_ramp_epochs = 4.0;
    let spe = 7;
    let mut prev = 0.0;
    for step in 0..10 * spe {
        let s = plan.state(step, spe);
        assert!(s.bounding_eps >= prev && s.bounding_eps <= 0.3);
        prev = s.bounding_eps;
        if step + 1 >= 4 * spe {
            assert_eq!(s.bounding_eps, 0.3);
        }
    }
}
