use bfflow::analysis::{assemble_operator, dist_to_e1_ball, e_norm, fit_decay, skew_defect, smooth_initial_state};
use bfflow::dynamics::SimState;
use bfflow::grid::{div, grad, project_mean_zero, Grid, SineBasis};
use bfflow::physics::{bogovski, certify_eps, EnergyEvaluator, MediumMatrix, NonlinearityParams};
use bfflow::rng::SeededRng;
use proptest::prelude::*;

fn grid(n: usize) -> Grid {
    Grid::new(2, n).unwrap()
}

fn medium() -> impl Strategy<Value = MediumMatrix> {
    (0.2f64..3.0, 0.2f64..3.0, -0.9f64..0.9).prop_map(|(a, b, c)| {
        let off = c * (a * b).sqrt();
        MediumMatrix::new(2, &[a, off, off, b]).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grad_and_div_are_negative_adjoints(seed in any::<u64>(), n in prop::sample::select(vec![4usize, 6, 8, 12])) {
        let g = grid(n);
        let mut rng = SeededRng::new(seed);
        let p = rng.scalar_field(g, 1.0);
        let u = rng.vector_field(g, 1.0);
        let lhs = grad(&p).dot(&u);
        let rhs = -p.dot(&div(&u));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn sine_transform_round_trips(seed in any::<u64>(), n in prop::sample::select(vec![4usize, 8, 10, 16])) {
        let g = grid(n);
        let sine = SineBasis::new(g);
        let p = SeededRng::new(seed).scalar_field(g, 3.0);
        let back = sine.inverse(&sine.forward(p.values()));
        for (a, b) in back.iter().zip(p.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * 3.0 * n as f64);
        }
    }

    #[test]
    fn convection_is_skew(seed in any::<u64>(), amp in 1e-3f64..1e3) {
        let g = grid(8);
        let mut rng = SeededRng::new(seed);
        let u = rng.vector_field(g, amp);
        let v = rng.vector_field(g, 1.0);
        prop_assert!(skew_defect(&u, &v).unwrap() <= 1e-12);
    }

    #[test]
    fn bogovski_inverts_divergence(seed in any::<u64>()) {
        let g = grid(8);
        let p = project_mean_zero(&SeededRng::new(seed).scalar_field(g, 1.0));
        let w = bogovski(&p).unwrap().field;
        let res = div(&w).sub(&p).norm_l2() / p.norm_l2();
        prop_assert!(res <= 1e-8, "residual {}", res);
    }

    #[test]
    fn exact_exponentials_are_recovered(c in 1e-3f64..1e3, rate in -3.0f64..1.0) {
        let series: Vec<(f64, f64)> = (0..30).map(|i| {
            let t = i as f64 * 0.1;
            (t, c * (rate * t).exp())
        }).collect();
        let f = fit_decay(&series, (0.0, 3.0)).unwrap();
        prop_assert!((f.rate - rate).abs() <= 1e-9 * (1.0 + rate.abs()));
        prop_assert!((f.c / c - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn distance_to_ball_is_consistent(seed in any::<u64>(), amp in 0.01f64..20.0, r in 0.0f64..50.0) {
        let g = grid(8);
        let sine = SineBasis::new(g);
        let s = smooth_initial_state(g, &mut SeededRng::new(seed), amp, 3);
        let d = dist_to_e1_ball(&sine, &s, r);
        let d_larger = dist_to_e1_ball(&sine, &s, 2.0 * r + 1.0);
        prop_assert!(d >= 0.0);
        prop_assert!(d <= e_norm(&sine, &s) * (1.0 + 1e-12));
        prop_assert!(d_larger <= d + 1e-12);
        if s.e1_norm_sq(&sine).sqrt() <= r {
            prop_assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn certified_coupling_keeps_energy_equivalent(seed in any::<u64>(), d in medium(), amp in 0.1f64..10.0) {
        let g = grid(8);
        let mut rng = SeededRng::new(seed);
        let samples: Vec<_> = (0..4).map(|_| (rng.vector_field(g, 1.0), project_mean_zero(&rng.scalar_field(g, 1.0)))).collect();
        let eps = certify_eps(&samples, &d).unwrap();
        prop_assert!(eps > 0.0 && eps.is_finite());
        let eval = EnergyEvaluator::new(g);
        let zero = bfflow::grid::VectorField::zeros(g);
        for (_, p) in &samples {
            // Any velocity: the certificate is worst case over u.
            let u = rng.vector_field(g, amp);
            let r = eval.report(&u, p, &zero, &d, &NonlinearityParams::quintic(), eps).unwrap();
            prop_assert!(r.e_eps >= 0.5 * r.e_plain * (1.0 - 1e-9));
            prop_assert!(r.e_eps <= 1.5 * r.e_plain * (1.0 + 1e-9));
        }
    }

    #[test]
    fn pressure_operator_is_positive(seed in any::<u64>(), d in medium()) {
        let g = grid(6);
        let op = assemble_operator(&g, &d).unwrap();
        prop_assert!(op.symmetry_defect() <= 1e-12);
        prop_assert!(op.eig_min() > 0.0);
        let p = project_mean_zero(&SeededRng::new(seed).scalar_field(g, 1.0));
        let q = op.propagate(&p, 0.5).unwrap();
        prop_assert!(q.norm_l2() < p.norm_l2());
    }

    #[test]
    fn growth_exponent_range_is_enforced(l in -1.0f64..4.0) {
        let r = NonlinearityParams::new(1.0, 1.0, 0.0, l);
        prop_assert_eq!(r.is_ok(), l > 0.0 && l <= 2.0);
    }

    #[test]
    fn only_even_grids_are_accepted(n in 0usize..40) {
        prop_assert_eq!(Grid::new(2, n).is_ok(), n >= 4 && n % 2 == 0);
    }

    #[test]
    fn zero_state_has_zero_energy(n in prop::sample::select(vec![4usize, 8])) {
        let g = grid(n);
        let sine = SineBasis::new(g);
        prop_assert_eq!(e_norm(&sine, &SimState::zero(g)), 0.0);
    }
}
