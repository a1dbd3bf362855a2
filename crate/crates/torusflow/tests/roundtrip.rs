use proptest::prelude::*;
use torusflow::core::drift::{rough_drift, SpectralField};
use torusflow::core::flow::PathEnsemble;
use torusflow::core::spectral::{NoiseBasis, TorusPoint};
use torusflow::format::{paths_to_bytes, read_paths, BasisDoc, FieldDoc, PathHeader};
use torusflow::report::{Families, Report};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(1e-300)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_json(cutoff in 1u32..4, decay in 0.0..3.0f64) {
        let b = NoiseBasis::build(cutoff, decay).unwrap();
        let text = serde_json::to_string(&BasisDoc::from(&b)).unwrap();
        prop_assert_eq!(serde_json::from_str::<BasisDoc>(&text).unwrap().to_basis().unwrap(), b);
    }

    #[test]
    fn field_json(bins in 1usize..5, cutoff in 1u32..5, amp in 0.1..3.0f64, seed in any::<u64>()) {
        let f = rough_drift(0.5, bins, cutoff, amp, seed).unwrap();
        let text = serde_json::to_string(&FieldDoc::from(&f)).unwrap();
        prop_assert_eq!(serde_json::from_str::<FieldDoc>(&text).unwrap().to_field().unwrap(), f);
    }

    #[test]
    fn constant_field_json(c in prop::array::uniform2(finite())) {
        let f = SpectralField::constant(c, 1.0).unwrap();
        let back = serde_json::from_str::<FieldDoc>(&serde_json::to_string(&FieldDoc::from(&f)).unwrap()).unwrap().to_field().unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn path_binary(n in 1usize..20, frames in 1usize..5, modes in 0usize..6, seed in any::<u64>(), replica in any::<u32>(), ids in any::<(u64, u64)>(), vals in prop::collection::vec(0.0..std::f64::consts::TAU, 200)) {
        let pts: Vec<TorusPoint> = (0..n).map(|i| TorusPoint::new(vals[i % 200], vals[(i * 7 + 3) % 200])).collect();
        let steps = frames * 2;
        let p = PathEnsemble {
            initial: pts.clone(),
            dt: 0.01,
            steps,
            seed,
            replica,
            modes,
            basis_id: ids.0,
            drift_id: ids.1,
            recorded_steps: (0..frames).map(|f| f * 2).chain([steps]).collect(),
            frames: vec![pts; frames + 1],
            increments: (0..steps * modes).map(|i| vals[i % 200] - 3.0).collect(),
        };
        let bytes = paths_to_bytes(&p);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap();
        let h: PathHeader = serde_json::from_slice(&bytes[..header_len]).unwrap();
        prop_assert_eq!(&h, &PathHeader::from(&p));
        prop_assert_eq!(read_paths(bytes.as_slice()).unwrap(), p);
    }

    #[test]
    fn report_json(values in prop::collection::vec(prop_oneof![finite(), Just(f64::INFINITY), Just(f64::NAN)], 1..8), dt in 1e-4..1e-1f64) {
        let mut r = Report::new("transport");
        for (i, v) in values.iter().enumerate() {
            r.check_le(format!("c{i}"), *v, 1.0);
            r.metric(&format!("m{i}"), *v);
        }
        r.param("dt", dt);
        r.families = Some(Families { phis: vec!["1".into()], psis: vec!["cos(1,0)".into()] });
        r.details = serde_json::json!({"k": [1, 2]});
        let back: Report = serde_json::from_str(&serde_json::to_string_pretty(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}
