use std::collections::{BTreeMap, BTreeSet};

use lvq_core::data::{load_dataset, make_fold_plan, preprocess_study, write_study, Half, TargetScaler, CANONICAL_SIZE};
use lvq_core::evaluate::covering_windows;
use lvq_core::indices::{indices_from_mask, Phase};
use lvq_core::model::{build_2d, load_checkpoint, save_checkpoint, BackboneSpec, HeadSpec, Init, Mode};
use lvq_core::phantom::{generate_dataset, patient_id};
use lvq_nn::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn generated_dataset_loads_and_preprocesses_to_canonical_space() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(3, 11, dir.path()).unwrap();
    assert_eq!(manifest.patients.len(), 3);
    let studies = load_dataset(dir.path()).unwrap();
    assert_eq!(studies.iter().map(|s| s.patient_id.clone()).collect::<Vec<_>>(), ["P000", "P001", "P002"]);

    for s in &studies {
        let c = preprocess_study(s);
        assert_eq!(c.spacing, 1.0);
        assert_eq!(c.frame_count(), 20);
        assert_eq!(c.shape(), (CANONICAL_SIZE, CANONICAL_SIZE));
        assert!(c.frames.iter().flat_map(|f| f.data.iter()).all(|v| (0.0..=1.0).contains(v)));
        assert!(c.phase.contains(&Phase::Systole) && c.phase.contains(&Phase::Diastole));
        // targets carry over; the canonical mask still measures close to them
        assert_eq!(c.indices, s.indices);
        let measured = indices_from_mask(&c.masks[0], 1.0).unwrap();
        assert!((measured.cavity_area - c.indices[0].cavity_area).abs() < 0.05 * c.indices[0].cavity_area);

        // canonical studies survive a disk round trip unchanged up to f32 storage
        let out = tempfile::tempdir().unwrap();
        write_study(&out.path().join(&c.patient_id), &c).unwrap();
        let back = load_dataset(out.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].masks, c.masks);
        assert_eq!(back[0].frames, c.frames);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let spec = BackboneSpec::from_name("mini").unwrap();
    let mut model = build_2d(&spec, HeadSpec::Joint, Init::Random, 4).unwrap();
    model.store.round_to_f32();
    let scaler = TargetScaler { min: [1.0; 11], max: [9.0; 11] };
    let dir = tempfile::tempdir().unwrap();
    let meta = BTreeMap::from([("note".to_string(), "test".to_string())]);
    save_checkpoint(dir.path(), &model, Some(&scaler), meta).unwrap();
    let (back, back_scaler, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back_scaler, Some(scaler));
    assert_eq!(manifest.metadata.get("note").map(String::as_str), Some("test"));

    let x = Tensor::new(&[1, 3, 1, 64, 64], (0..3 * 64 * 64).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
    let run = |m: &lvq_core::model::Model| {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = m.forward(&mut g, input, Mode::Eval, false).unwrap();
        g.value(out.regression.unwrap()).clone()
    };
    assert_eq!(run(&model).data(), run(&back).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_plans_partition_patients(n in 10usize..60, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(patient_id).collect();
        let plan = make_fold_plan(&ids, seed).unwrap();
        let mut seen = BTreeSet::new();
        for k in 0..plan.folds {
            let held = plan.fold_members(k);
            let train = plan.training_ids(k);
            prop_assert_eq!(held.len() + train.len(), n);
            prop_assert!(held.iter().all(|p| !train.contains(p)));
            // fold sizes differ by at most one
            prop_assert!(held.len() == n / plan.folds || held.len() == n.div_ceil(plan.folds));
            seen.extend(held);
        }
        prop_assert_eq!(seen.len(), n);
        let a = plan.half_union(Half::A);
        let b = plan.half_union(Half::B);
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(a.iter().all(|p| !b.contains(p)));
    }

    #[test]
    fn every_frame_is_covered_by_exactly_ns_windows((frames, ns) in (3usize..=30).prop_flat_map(|f| (Just(f), 1..=f))) {
        for t in 0..frames {
            prop_assert_eq!(covering_windows(t, ns, frames).len(), ns);
        }
    }
}
