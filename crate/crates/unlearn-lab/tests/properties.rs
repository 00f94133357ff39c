//! Property-based invariants: flatten/unflatten round trips,
//! extrapolation identities, and ROUGE-L structure.

use proptest::prelude::*;

use unlearn_lab::lm::{Manifest, ModelConfig, ParamVector};
use unlearn_lab::metrics::rouge_l;
use unlearn_lab::uipe;
use unlearn_lab::unlearner::{Checkpoint, Method, TrainConfig};

fn checkpoint(values: Vec<f64>, cfg: &ModelConfig) -> Checkpoint {
    Checkpoint {
        params: ParamVector::new(Manifest::for_config(cfg), values).unwrap(),
        model_config: *cfg,
        train_config: TrainConfig::unlearn_defaults(Method::Ga, 1e-3, 0),
        epoch: 1,
        provenance: "property test".into(),
        lineage: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trips_any_payload(
        seed_values in proptest::collection::vec(-1e3f64..1e3, 252..=252)
    ) {
        // V=5, d=4 manifest totals 252 parameters
        let cfg = ModelConfig::new(5, 4, 8, 0);
        let manifest = Manifest::for_config(&cfg);
        prop_assert_eq!(manifest.total(), 252);
        let params = ParamVector::new(manifest.clone(), seed_values).unwrap();
        let parts = params.unflatten();
        let back = ParamVector::flatten(manifest, &parts).unwrap();
        prop_assert_eq!(params.values(), back.values());
    }

    #[test]
    fn extrapolation_identity_and_composition(
        ini in proptest::collection::vec(-1.0f64..1.0, 252..=252),
        delta in proptest::collection::vec(-0.1f64..0.1, 252..=252),
        a1 in 0.0f64..2.0,
        a2 in 0.0f64..2.0,
    ) {
        let cfg = ModelConfig::new(5, 4, 8, 0);
        let un_values: Vec<f64> = ini.iter().zip(&delta).map(|(i, d)| i + d).collect();
        let theta_ini = checkpoint(ini, &cfg);
        let theta_un = checkpoint(un_values, &cfg);
        let v = uipe::update_vector(&theta_ini, &theta_un).unwrap();

        // alpha = 0 is the bit-exact identity
        let same = uipe::extrapolate(&theta_un, &v, 0.0).unwrap();
        for (a, b) in same.params.values().iter().zip(theta_un.params.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        // composed == single-shot, elementwise exactly
        let single = uipe::extrapolate(&theta_un, &v, a1 + a2).unwrap();
        let first = uipe::extrapolate(&theta_un, &v, a1).unwrap();
        let composed = uipe::extrapolate(&first, &v, a2).unwrap();
        for (x, y) in composed.params.values().iter().zip(single.params.values()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rouge_f1_swap_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..6, 0..12),
        b in proptest::collection::vec(0u8..6, 0..12),
    ) {
        let ab = rouge_l(&a, &b);
        let ba = rouge_l(&b, &a);
        prop_assert_eq!(ab.f1.to_bits(), ba.f1.to_bits());
        prop_assert_eq!(ab.precision.to_bits(), ba.recall.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab.f1));
        prop_assert!(ab.f1 <= ab.precision.max(ab.recall) + 1e-15);
        if ab.precision == 0.0 || ab.recall == 0.0 {
            prop_assert_eq!(ab.f1, 0.0);
        }
    }
}
