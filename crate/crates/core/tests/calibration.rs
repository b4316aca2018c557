use phenorice_core::calibration::{
    compare_modes, optimize_district, prepare_index_cubes, CalibrationOptions, ClusterAssignment, DistrictInput,
};
use phenorice_core::classifier::{classify_district, ExclusionInputs};
use phenorice_core::phenology::Stage;
use phenorice_core::reference::rasterize_district;
use phenorice_core::synthetic::{generate, nominal_windows, Layout, SceneConfig, TrajectoryKind};

fn district_input(name: &str, shift: u64, seed: u64) -> (DistrictInput, phenorice_core::synthetic::SyntheticScene) {
    let cfg = SceneConfig {
        district: name.into(),
        shift_days: shift as f64,
        n_dates: 37,
        seed,
        ..SceneConfig::default()
    };
    let layout = Layout::grouped_fields(
        &[
            (TrajectoryKind::Rice, 30),
            (TrajectoryKind::FlatHigh, 10),
            (TrajectoryKind::FlatLow, 10),
            (TrajectoryKind::Wetland, 10),
        ],
        3,
        10,
    );
    let scene = generate(&cfg, &layout).unwrap();
    let cubes = prepare_index_cubes(&scene.cube, Some(2.0)).unwrap();
    let refs = rasterize_district(&scene.polygons, name, scene.cube.grid()).unwrap();
    let input = DistrictInput {
        district: name.into(),
        cubes,
        windows: nominal_windows(cfg.start, shift),
        refs,
    };
    (input, scene)
}

fn clusters(members: &[&str]) -> ClusterAssignment {
    let mut a = ClusterAssignment {
        clusters: [("c".to_string(), members.iter().map(|s| s.to_string()).collect())]
            .into_iter()
            .collect(),
    };
    a.normalize().unwrap();
    a
}

#[test]
fn optimized_calibration_classifies_its_own_scene() {
    let (input, scene) = district_input("Nalgonda", 0, 7);
    let out = optimize_district(
        "Nalgonda",
        &input.cubes,
        &input.windows,
        &input.refs,
        &CalibrationOptions::default(),
    )
    .unwrap();
    assert!(!out.calibration.needs_manual_review);
    for stage in Stage::AREA_STAGES {
        assert!(out.stage_scores[&stage].balance > 0.5, "{stage}");
    }
    assert_eq!(out.ledger.iter().filter(|r| r.selected).count(), 3 + 3 + 2 + 2 + 4);
    let cls = classify_district(&scene.cube, &out.calibration, &ExclusionInputs::default()).unwrap();
    let v = cls.final_mask.values();
    let correct = scene.truth.iter().zip(v).filter(|(t, p)| t == p).count();
    assert!(correct as f64 / v.len() as f64 > 0.75, "{correct} of {}", v.len());
}

#[test]
fn shifted_phenology_favors_district_mode() {
    let (a, _) = district_input("Nalgonda", 0, 1);
    let (b, _) = district_input("Suryapet", 15, 2);
    let out = compare_modes(
        &[a, b],
        &clusters(&["Nalgonda", "Suryapet"]),
        &CalibrationOptions::default(),
    )
    .unwrap();
    let c = &out.comparison;
    assert!(c.mean_district_accuracy > c.mean_cluster_accuracy, "{c:?}");
    assert!(c.delta > 0.0);
    assert_eq!(c.clusters[0].size, 2);
}

#[test]
fn identical_districts_tie() {
    let (a, _) = district_input("Nalgonda", 0, 3);
    let mut b = a.clone();
    b.district = "Suryapet".into();
    for r in &mut b.refs {
        r.polygon.district = "Suryapet".into();
    }
    let out = compare_modes(
        &[a, b],
        &clusters(&["Nalgonda", "Suryapet"]),
        &CalibrationOptions::default(),
    )
    .unwrap();
    let c = &out.comparison;
    assert!(c.delta.abs() < 1e-12, "{c:?}");
}

#[test]
fn districts_outside_every_cluster_are_rejected() {
    let (a, _) = district_input("Nalgonda", 0, 4);
    let err = compare_modes(&[a], &clusters(&["Suryapet"]), &CalibrationOptions::default()).unwrap_err();
    assert!(matches!(err, phenorice_core::Error::UnmatchedDistricts(_)));
}

#[test]
fn pipeline_agrees_with_sample_level_prediction() {
    use phenorice_core::calibration::{collect_samples, predict_sample};
    let (input, scene) = district_input("Nalgonda", 0, 7);
    let opts = CalibrationOptions::default();
    let out = optimize_district("Nalgonda", &input.cubes, &input.windows, &input.refs, &opts).unwrap();
    let cls = classify_district(&scene.cube, &out.calibration, &ExclusionInputs::default()).unwrap();
    let samples = collect_samples(&input.cubes, &input.windows, &input.refs, &opts.outlier.composite_k).unwrap();
    let mut i = 0;
    let mut diff = 0;
    for r in &input.refs {
        for p in &r.pixels {
            let pred = predict_sample(&out.calibration, &samples[i]);
            let m = cls.combined.values()[*p];
            if (m == 1) != pred {
                diff += 1;
            }
            i += 1;
        }
    }
    assert_eq!(i, scene.truth.len());
    assert_eq!(diff, 0);
}

#[test]
fn detected_windows_follow_the_reference_trajectories() {
    use phenorice_core::calibration::detect_windows;
    use phenorice_core::indices::IndexKind;
    use phenorice_core::phenology::TransitionThresholds;
    let (input, _) = district_input("Nalgonda", 0, 11);
    let (w, diags) = detect_windows(
        &input.cubes[&IndexKind::Ndvi],
        &input.refs,
        &TransitionThresholds::default(),
    )
    .unwrap();
    // the default 0.30 and 0.45 levels sit close together on the steep synthetic green-up
    w.validate(true).unwrap();
    assert_eq!(diags.len(), 3);
    assert!(diags.iter().all(|d| 2 * d.fields_crossed > d.fields_total));
    let nominal = nominal_windows(chrono::NaiveDate::from_ymd_opt(2018, 12, 20).unwrap(), 0);
    for stage in [Stage::Vegetative, Stage::Ripening] {
        let gap = (w.get(stage).start - nominal.get(stage).start).num_days().abs();
        assert!(gap <= 10, "{stage}: {gap} days from nominal");
    }
    assert!(w.reproductive.start < nominal.reproductive.start);
}
