#![allow(dead_code)]

pub mod desk;

use rdd::config::ExperimentConfig;

/// A configuration small enough for a full teacher plus student run in a
/// few seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply([
        ("scene.extent", "12.8"),
        ("scene.max_objects", "3"),
        ("scene.train_count", "8"),
        ("scene.eval_count", "4"),
        ("train.epochs", "2"),
        ("train.teacher_epochs", "2"),
        ("train.teacher_min_map", "0"),
    ])
    .expect("valid overrides");
    cfg
}
