use proptest::collection::vec;
use proptest::prelude::*;
use pwtp::numeric::Tensor;
use pwtp::objectives::{
    enopr, joint_step, mgda_alpha, scale_schedule, JointMode, SchedulerConfig, TaskGradients,
};

fn combined_sq(a: f64, g1: &[f64], g2: &[f64]) -> f64 {
    g1.iter()
        .zip(g2)
        .map(|(x, y)| (a * x + (1.0 - a) * y).powi(2))
        .sum()
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| (vec(-10.0..10.0f64, n), vec(-10.0..10.0f64, n)))
}

proptest! {
    #[test]
    fn mgda_alpha_is_min_norm_on_grid((g1, g2) in pair()) {
        let a = mgda_alpha(&g1, &g2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let best = combined_sq(a, &g1, &g2);
        for k in 0..=200 {
            let grid = k as f64 / 200.0;
            prop_assert!(best <= combined_sq(grid, &g1, &g2) + 1e-8);
        }
    }

    #[test]
    fn mgda_alpha_is_scale_invariant((g1, g2) in pair(), scale in 1e-3..1e3f64) {
        let a = mgda_alpha(&g1, &g2).unwrap();
        let s1: Vec<f64> = g1.iter().map(|v| v * scale).collect();
        let s2: Vec<f64> = g2.iter().map(|v| v * scale).collect();
        prop_assert!((a - mgda_alpha(&s1, &s2).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn step_depends_only_on_alpha(
        (g1, g2) in pair(),
        h2 in vec(-1.0..1.0f64, 3),
        eta in 1e-3..1.0f64,
    ) {
        let grads = TaskGradients { g1: g1.clone(), g2, h2 };
        let alpha = JointMode::Mgda.resolve_alpha(&grads, 1, 10).unwrap();
        let constant = JointMode::Constant(alpha).resolve_alpha(&grads, 1, 10).unwrap();
        prop_assert_eq!(alpha.to_bits(), constant.to_bits());
        let (mut a1, mut a2) = (vec![0.5; g1.len()], vec![0.25; 3]);
        let (mut b1, mut b2) = (a1.clone(), a2.clone());
        joint_step(&mut a1, &mut a2, &grads, eta, alpha).unwrap();
        joint_step(&mut b1, &mut b2, &grads, eta, constant).unwrap();
        prop_assert_eq!(a1, b1);
        prop_assert_eq!(a2, b2);
    }

    #[test]
    fn schedule_warm_phase_is_non_increasing(
        gamma in 0.05..0.95f64,
        lambda in 0.01..=1.0f64,
        total in 20usize..2000,
    ) {
        let at = |m| scale_schedule(&SchedulerConfig { gamma, lambda, total, iteration: m }).unwrap();
        let split = (gamma * total as f64).floor() as usize;
        let mut prev = at(1);
        prop_assert_eq!(prev, 1.0);
        for m in 2..=split.max(1) {
            let a = at(m);
            prop_assert!(a <= prev + 1e-12, "m={} {} > {}", m, a, prev);
            prev = a;
        }
        for m in 1..=total {
            prop_assert!((0.0..=1.0).contains(&at(m)));
        }
    }

    #[test]
    fn enopr_is_non_negative(data in vec(-5.0..5.0f64, 24)) {
        let p = Tensor::new(&[4, 2, 1, 3], data.clone()).unwrap();
        let e = enopr(&p).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e == 0.0, data.iter().all(|v| *v == 0.0));
    }
}
