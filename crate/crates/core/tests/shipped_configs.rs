use std::path::PathBuf;

use ardir_core::harness::config::load_config;
use ardir_core::harness::presets::preset;
use ardir_core::harness::sweep::{sweep_points, SweepSpec};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_match_their_presets() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_str().unwrap().to_string();
        if path.extension().is_none_or(|e| e != "toml") || stem.ends_with("-sweep") {
            continue;
        }
        let (config, _) = load_config(&path, &[], false).unwrap();
        let mut expected = preset(&stem).unwrap();
        expected.output_dir = config.output_dir.clone();
        assert_eq!(config, expected, "{stem}");
        seen += 1;
    }
    assert_eq!(seen, 8);
}

#[test]
fn shipped_sweep_expands_to_isolated_points() {
    let (spec, base) = SweepSpec::load(&configs_dir().join("toy-beta-sweep.toml")).unwrap();
    let points = sweep_points(&spec, &base).unwrap();
    assert_eq!(points.len(), 10);
    let mut dirs: Vec<_> = points.iter().map(|p| p.config.output_dir.clone()).collect();
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 10);
    assert!(points.iter().all(|p| p.config.seeds == [1, 2, 3]));
}
