//! End-to-end experiment protocol checks on a small generated dataset.

use sil2vox::evaluation::{
    run_experiment, run_experiment_with, ExperimentMode, ExperimentSetup, NetworkTag,
};
use sil2vox::geometry::{
    build_dataset, icosphere_mesh, unit_cube_mesh, Dataset, DatasetConfig,
};
use sil2vox::network::{init_params, NetworkSpec, StackedParams};

fn toy_dataset(dir: &std::path::Path) -> Dataset {
    let config = DatasetConfig {
        resolution: 16,
        n_polar: 4,
        n_azimuth: 6,
        hard_threshold_deg: 15.0,
    };
    let models = vec![
        ("cube".to_string(), unit_cube_mesh()),
        ("ball".to_string(), icosphere_mesh(1)),
    ];
    build_dataset(&models, &config, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn setup(dataset: &Dataset, mode: ExperimentMode, seed: u64) -> ExperimentSetup<'_> {
    ExperimentSetup {
        dataset,
        mode,
        seed,
        network: NetworkTag::Stacked,
        category: "Toys".into(),
        config_hash: 7,
        threshold: 0.5,
    }
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = toy_dataset(dir.path());
    for mode in [ExperimentMode::E1, ExperimentMode::E2] {
        let report = run_experiment_with(&setup(&dataset, mode, 3), |model_id, _image| {
            Ok(dataset.load_voxels(model_id).unwrap().to_values::<f32>())
        })
        .unwrap();
        assert_eq!(report.records.len(), 2 * 24);
        assert!(report.records.iter().all(|r| r.iou == 1.0));
        assert_eq!(report.aggregates.mean_all, 1.0);
        assert_eq!(report.aggregates.stderr_all, 0.0);
        if mode == ExperimentMode::E1 {
            // 6 pole views plus the front and back line-of-sight views
            // per model; jittered E2 views rarely come that close to an
            // axis, so only the lattice count is pinned.
            assert_eq!(report.aggregates.hard_count, 2 * 8);
            assert_eq!(report.aggregates.mean_hard, Some(1.0));
        }
    }
}

#[test]
fn network_experiments_are_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = toy_dataset(dir.path());
    let spec = NetworkSpec { resolution: 16, width_mult: 1.0 / 16.0, n_stages: 2 };
    let params: StackedParams<f32> = init_params(&spec, 99).unwrap();

    let a = run_experiment(&params, &setup(&dataset, ExperimentMode::E2, 5)).unwrap();
    let b = run_experiment(&params, &setup(&dataset, ExperimentMode::E2, 5)).unwrap();
    assert_eq!(a, b, "same checkpoint, dataset and seed must reproduce the report");
    assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.iou)));

    let other_seed = run_experiment(&params, &setup(&dataset, ExperimentMode::E2, 6)).unwrap();
    assert_ne!(
        a.records, other_seed.records,
        "different random views should change per-view scores"
    );
}

#[test]
fn mismatched_resolution_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = toy_dataset(dir.path());
    let spec = NetworkSpec { resolution: 32, width_mult: 1.0 / 16.0, n_stages: 1 };
    let params: StackedParams<f32> = init_params(&spec, 1).unwrap();
    assert!(run_experiment(&params, &setup(&dataset, ExperimentMode::E1, 0)).is_err());
}
