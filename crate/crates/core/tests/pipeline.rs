use std::fs;
use std::path::Path;

use hsarnn::harness::{self, AblationConfig};
use hsarnn::modelcore::Variant;
use hsarnn::stacksim::Position;
use hsarnn::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn ablation_cfg() -> AblationConfig {
    AblationConfig {
        variants: vec![Variant::Sarnnst],
        positions: vec![Position::C],
        trials: 3,
        seed: 2,
        train: TrainConfig { epochs: 2, seed: 2, ..TrainConfig::default() },
        ..AblationConfig::default()
    }
}

fn run_pipeline(root: &Path) {
    harness::generate_dataset(&Position::TAUGHT, 200, 10.0, 2, &root.join("data")).unwrap();
    harness::evaluate_ablation(&root.join("data"), &root.join("ckpt"), &root.join("out"), &ablation_cfg()).unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_stage_is_bit_identical_on_repeat() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path());
    run_pipeline(b.path());
    for sub in ["data", "ckpt", "out"] {
        let (fa, fb) = (files(&a.path().join(sub)), files(&b.path().join(sub)));
        assert!(!fa.is_empty(), "{sub} is empty");
        assert_eq!(fa, fb, "{sub} differs");
    }

    let csv = fs::read_to_string(a.path().join("out/report.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("SARNNST,C,")).expect("grid row");
    let cols: Vec<&str> = row.split(',').collect();
    let (successes, trials): (usize, usize) = (cols[2].parse().unwrap(), cols[3].parse().unwrap());
    assert_eq!(trials, 3);
    assert_eq!(cols[4].parse::<f64>().unwrap(), 100.0 * successes as f64 / trials as f64);

    let svg = fs::read_to_string(a.path().join("out/trajectories_C.svg")).unwrap();
    assert_eq!(svg.matches("class=\"trial\"").count(), trials);
    assert_eq!(svg.matches("class=\"mean\"").count(), 1);

    let sets = harness::read_trial_sets(&a.path().join("out/trials.json")).unwrap();
    let redrawn = tempfile::tempdir().unwrap();
    harness::report::write_trajectory_svgs(&sets, redrawn.path()).unwrap();
    assert_eq!(fs::read_to_string(redrawn.path().join("trajectories_C.svg")).unwrap(), svg);
}

#[test]
fn checkpoint_round_trip_and_resume_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    harness::generate_dataset(&[Position::C], 200, 10.0, 0, dir.path()).unwrap();
    let episodes = harness::training_episodes(dir.path()).unwrap();
    let cfg = TrainConfig { epochs: 1, seed: 5, ..TrainConfig::default() };
    let (ck, log) = train(&episodes, &hsarnn::modelcore::ModelConfig::new(Variant::Sarnn), &cfg).unwrap();
    assert_eq!(log.len(), 1);
    let path = dir.path().join("m.hsck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert!(back.expect_variant(Variant::Hsarnnst).is_err());
}
