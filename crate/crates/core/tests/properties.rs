use proptest::prelude::*;
use torusflow_core::drift::{drift_energy, hodge_regularize, leray_project, time_mollify, SpectralField};
use torusflow_core::energy::PartitionFamily;
use torusflow_core::flow::{simulate_ensemble, FlowConfig};
use torusflow_core::runner::Sequential;
use torusflow_core::spectral::{torus_distance, wrap_angle, NoiseBasis, TorusPoint, TrigPoly, VectorTrigPoly, WaveVector};
use torusflow_core::transport::{PhiFamily, PsiFamily, TransportKernel, TransportRecorder};
use torusflow_core::flow::{initial_grid, FlowSimulator};
use torusflow_core::TAU;

fn poly(max_k: i32) -> impl Strategy<Value = TrigPoly> {
    prop::collection::vec((-max_k..=max_k, -max_k..=max_k, -2.0..2.0f64, -2.0..2.0f64), 1..6).prop_map(|terms| {
        let mut p = TrigPoly::zero();
        for (a, b, c, s) in terms {
            p.add_term(WaveVector::new(a, b), c, s);
        }
        p
    })
}

fn point() -> impl Strategy<Value = TorusPoint> {
    (0.0..TAU, 0.0..TAU).prop_map(|(a, b)| TorusPoint::new(a, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_evaluates_pointwise(p in poly(3), q in poly(3), x in point()) {
        let lhs = p.product(&q).eval(x);
        let rhs = p.eval(x) * q.eval(x);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn leray_is_an_idempotent_projection(u1 in poly(3), u2 in poly(3), x in point()) {
        let v = VectorTrigPoly::new(u1, u2);
        let p = leray_project(&v);
        prop_assert!(p.divergence().abs_sum() < 1e-10);
        let pp = leray_project(&p);
        let (a, b) = (p.eval(x), pp.eval(x));
        prop_assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        prop_assert!(p.l2_norm_sq() <= v.l2_norm_sq() + 1e-12);
    }

    #[test]
    fn mollification_never_adds_energy(u1 in poly(3), u2 in poly(3), eps in 0.001..0.5f64) {
        let v = leray_project(&VectorTrigPoly::new(u1, u2));
        let b = SpectralField::uniform(1.0, vec![v.clone(), v.scale(-0.5), v.scale(2.0)]).unwrap();
        let e = drift_energy(&b).value();
        prop_assert!(drift_energy(&hodge_regularize(&b, eps).unwrap()).value() <= e * (1.0 + 1e-12));
        prop_assert!(drift_energy(&time_mollify(&b, eps.min(0.3)).unwrap()).value() <= e * (1.0 + 1e-9));
    }

    #[test]
    fn partition_of_unity(m in 1usize..10, x in point()) {
        let p = PartitionFamily::new(m).unwrap();
        let vals = p.eval(x);
        prop_assert!(vals.iter().all(|v| v.1 >= 0.0));
        prop_assert!((vals.iter().map(|v| v.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrapping_and_distance(a in -100.0..100.0f64, b in -100.0..100.0f64, x in point()) {
        let w = wrap_angle(a);
        prop_assert!((0.0..TAU).contains(&w));
        let y = x.translate([a, b]);
        let d = torus_distance(x, y);
        prop_assert!(d <= TAU / 2.0f64.sqrt() + 1e-12);
        prop_assert!((d - torus_distance(y, x)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ensembles_are_deterministic_per_seed(seed in any::<u64>()) {
        let basis = NoiseBasis::build(2, 1.0).unwrap();
        let drift = SpectralField::constant([0.3, -0.2], 0.05).unwrap();
        let cfg = FlowConfig::new(0.01, seed);
        let a = simulate_ensemble(&basis, &drift, 4, cfg, 2, &Sequential).unwrap();
        let b = simulate_ensemble(&basis, &drift, 4, cfg, 2, &Sequential).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a[0].terminal() != a[1].terminal());
    }

    #[test]
    fn transport_is_linear_in_phi(seed in any::<u64>(), a in -2.0..2.0f64) {
        let basis = NoiseBasis::build(2, 2.0).unwrap();
        let drift = SpectralField::constant([0.5, 0.0], 0.05).unwrap();
        let sim = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.01, seed)).unwrap();
        let init = initial_grid(8).unwrap();
        let f1 = TrigPoly::cos(1, 0);
        let f2 = &TrigPoly::constant(1.0) + &TrigPoly::sin(0, 1);
        let phis = vec![f1.clone(), f2.clone(), &f1.scale(a) + &f2];
        let psis = vec![TrigPoly::cos(1, 1), TrigPoly::sin(0, 1)];
        let pf = PhiFamily::from_polys(&phis, &init);
        let sf = PsiFamily::new(&psis);
        let k = TransportKernel::new(&pf, &sf, &basis, &[], None).unwrap();
        let s = sim.run_all(&Sequential, 1, &init, |_| TransportRecorder::new(k.clone(), &basis, sim.steps(), 0.01), |r, _| r.finish()).unwrap().remove(0);
        for n in 0..=s.steps {
            for kk in 0..2 {
                let lhs = s.theta(n, 2, kk);
                let rhs = a * s.theta(n, 0, kk) + s.theta(n, 1, kk);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
