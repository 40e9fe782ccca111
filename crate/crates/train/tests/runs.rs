use std::fs;

use derprop_core::io::read_tensor;
use derprop_train::{
    evaluate_miou, generate_dataset, generate_synthetic_scene, train, Ablation, SceneLayout, SceneParams, TrainConfig,
};

fn tiny() -> TrainConfig {
    TrainConfig {
        height: 12,
        width: 12,
        train_scenes: 4,
        val_scenes: 2,
        epochs: 2,
        labeled_fraction: 0.25,
        saved_maps: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn run_directory_layout() {
    let cfg = tiny();
    let data = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, &data, Some(dir.path())).unwrap();

    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss_ce,loss_kl,loss_der,miou_train,miou_val");
    assert_eq!(lines.len(), cfg.epochs + 1);

    let saved: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(saved, cfg);

    let params = read_tensor(dir.path().join("final_model.dpt")).unwrap();
    assert_eq!(params.data(), run.final_model.params.as_slice());
    let momentum = read_tensor(dir.path().join("momentum_model.dpt")).unwrap();
    assert_eq!(momentum.data(), run.momentum.as_ref().unwrap().theta_m.as_slice());

    let maps = fs::read_dir(dir.path().join("maps")).unwrap().count();
    assert_eq!(maps, cfg.epochs * cfg.saved_maps);
    assert_eq!(run.labeled.len(), 1);
    assert_eq!(run.labeled.len() + run.unlabeled.len(), cfg.train_scenes);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let mut value = serde_json::to_value(tiny()).unwrap();
    value["learning_rat"] = serde_json::json!(0.1);
    assert!(serde_json::from_value::<TrainConfig>(value).is_err());
}

#[test]
fn invalid_configs_fail_validation() {
    assert!(TrainConfig { epochs: 0, ..tiny() }.validate().is_err());
    assert!(TrainConfig { labeled_fraction: 0.0, ..tiny() }.validate().is_err());
    assert!(TrainConfig { optimizer_momentum: 1.0, ..tiny() }.validate().is_err());
    let mut cfg = tiny();
    cfg.der_loss.order_budget = 8;
    assert!(cfg.validate().is_err());
}

#[test]
fn presets_stay_valid() {
    for ab in Ablation::ALL {
        ab.apply(tiny()).validate().unwrap();
    }
}

#[test]
fn scenes_are_reproducible() {
    for layout in [SceneLayout::Voronoi, SceneLayout::Rectangles] {
        let params = SceneParams {
            layout,
            ..SceneParams::default()
        };
        let a = generate_synthetic_scene(9, 16, 16, 4, params).unwrap();
        let b = generate_synthetic_scene(9, 16, 16, 4, params).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(10, 16, 16, 4, params).unwrap();
        assert_ne!(a.labels, c.labels);
        let perfect = evaluate_miou(&a.labels, &a.labels, 4).unwrap();
        assert_eq!(perfect.mean, 1.0);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let data = generate_dataset(&cfg).unwrap();
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.metrics, b.metrics);
}
