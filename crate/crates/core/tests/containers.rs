use std::fs;

use ptyff::engine::{run, EngineConfig};
use ptyff::ffop::{make_training_pairs, TrainConfig};
use ptyff::io::{
    load_dataset, load_pairs, load_run, save_dataset, save_pairs, save_run, RunManifest, RunRecord, StagedDir,
};
use ptyff::simkit::{synthesize, SimConfig};

fn sim() -> SimConfig {
    SimConfig {
        object_size: 40,
        probe_size: 16,
        scan_step: 6,
        aperture_radius: 4.0,
        mode_count: 2,
        ..SimConfig::default()
    }
}

fn names(dir: &std::path::Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ds");
    let mut bundle = synthesize(&sim()).unwrap();
    // patterns travel as f32; pre-round them so equality is exact
    for p in &mut bundle.data.patterns {
        p.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
    for m in bundle.truth.as_mut().unwrap().probe.modes_mut() {
        m.data_mut().iter_mut().for_each(|z| *z = num_complex::Complex64::new(z.re as f32 as f64, z.im as f32 as f64));
    }
    let obj = &mut bundle.truth.as_mut().unwrap().object;
    obj.data_mut().iter_mut().for_each(|z| *z = num_complex::Complex64::new(z.re as f32 as f64, z.im as f32 as f64));

    let stage = StagedDir::new(&dir).unwrap();
    save_dataset(stage.path(), &bundle, &mut RunManifest::new("dataset")).unwrap();
    stage.commit().unwrap();
    assert_eq!(
        names(&dir),
        ["manifest.json", "patterns.bin", "positions.bin", "truth_object.bin", "truth_probe.bin"]
    );
    let (k, (h, w)) = (bundle.data.len(), bundle.data.pattern_shape());
    assert_eq!(fs::metadata(dir.join("patterns.bin")).unwrap().len() as usize, k * h * w * 4);
    assert_eq!(fs::metadata(dir.join("positions.bin")).unwrap().len() as usize, k * 2 * 4);
    let (back, manifest) = load_dataset(&dir).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(manifest.kind, "dataset");
}

#[test]
fn run_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let b = synthesize(&sim()).unwrap();
    let cfg = EngineConfig {
        iterations: 4,
        i_ml: None,
        snapshot_iterations: vec![2, 4],
        ..EngineConfig::desk_scale(16)
    };
    let record = RunRecord::from(run(&b.data, &cfg, &b.physics, None).unwrap());
    save_run(tmp.path(), &record, &mut RunManifest::new("run")).unwrap();
    assert!(tmp.path().join("snapshot_2.bin").exists() && tmp.path().join("snapshot_4.bin").exists());
    let csv = fs::read_to_string(tmp.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let (back, _) = load_run(tmp.path()).unwrap();
    assert_eq!(back, record);
}

#[test]
fn pair_store_round_trip_and_shape_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = synthesize(&sim()).unwrap().truth.unwrap().object;
    let cfg = TrainConfig {
        patch_size: 16,
        ..TrainConfig::default()
    };
    let mut pairs = Vec::new();
    for d in 0..3 {
        let mut p = make_training_pairs(&truth, &truth, &cfg, d as u64).unwrap();
        p.iter_mut().for_each(|q| q.dataset = d);
        pairs.extend(p);
    }
    assert_eq!(pairs.len(), 24);
    save_pairs(tmp.path(), &pairs, 5, 100, vec![], &mut RunManifest::new("pairs")).unwrap();
    let (back, details, _) = load_pairs(tmp.path()).unwrap();
    assert_eq!(back, pairs);
    assert_eq!((details.pair_count, details.patch_size), (24, 16));

    // a truncated payload is refused on load
    let inputs = tmp.path().join("inputs.bin");
    let bytes = fs::read(&inputs).unwrap();
    fs::write(&inputs, &bytes[..bytes.len() - 16]).unwrap();
    assert!(load_pairs(tmp.path()).is_err());
}
