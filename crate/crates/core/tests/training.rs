use std::fs;

use gaflow::checkpoint::{self, STEP_KEY};
use gaflow::config::Config;
use gaflow::pipeline::{
    checkpoint_path, load_data, train_schedule, Phase, TryOnModel, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};

fn small() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("resolution", "32x16"),
        ("data.train", "4"),
        ("data.held_out", "2"),
        ("batch_size", "2"),
        ("epochs", "2"),
        ("tau", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

#[test]
fn schedule_writes_checkpoints_metrics_and_reloads() {
    let config = small();
    let (train, held_out) = load_data(&config).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let (trainer, run) = train_schedule(&config, &train, &held_out, Some(tmp.path()), |l| lines.push(l.to_string())).unwrap();

    assert_eq!(lines.len(), 2);
    let phases: Vec<Phase> = run.epochs.iter().map(|e| e.phase).collect();
    assert_eq!(phases, [Phase::WarmUp, Phase::Joint]);
    assert_eq!(run.held_out.len(), 3);
    for epoch in 0..=2 {
        assert!(checkpoint_path(tmp.path(), epoch).is_file());
    }
    let csv = fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], METRICS_HEADER);
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("2,held_out,"));

    let final_path = tmp.path().join(FINAL_CHECKPOINT);
    assert_eq!(fs::read(&final_path).unwrap(), fs::read(checkpoint_path(tmp.path(), 2)).unwrap());
    let entries = checkpoint::load(&final_path).unwrap();
    let step = entries.iter().find(|(n, _)| n == STEP_KEY).unwrap();
    assert_eq!(step.1.item(), 4.0);
    assert!(entries.iter().any(|(n, _)| n.ends_with(".m1")));
    assert!(entries.iter().any(|(n, _)| n.ends_with(".m2")));

    let reloaded = TryOnModel::<f32>::load(&config, &final_path).unwrap();
    for s in &held_out {
        let (a, b) = (trainer.model.predict(s).unwrap(), reloaded.predict(s).unwrap());
        assert_eq!(a.tryon, b.tryon);
        assert_eq!(a.flow.tensor(), b.flow.tensor());
        assert_eq!(a.m_exp, b.m_exp);
    }
}

#[test]
fn training_changes_the_initial_parameters() {
    let config = small();
    let (train, held_out) = load_data(&config).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    train_schedule(&config, &train, &held_out, Some(tmp.path()), |_| {}).unwrap();
    assert_ne!(
        fs::read(checkpoint_path(tmp.path(), 0)).unwrap(),
        fs::read(checkpoint_path(tmp.path(), 1)).unwrap()
    );
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let config = small();
    let tmp = tempfile::tempdir().unwrap();
    let (train, held_out) = load_data(&config).unwrap();
    let zero = Config { epochs: 0, ..config.clone() };
    train_schedule(&zero, &train, &held_out, Some(tmp.path()), |_| {}).unwrap();
    let mut other = config.clone();
    other.set("warp_net.base_width", "8").unwrap();
    assert!(TryOnModel::<f32>::load(&other, &tmp.path().join(FINAL_CHECKPOINT)).is_err());
}
