use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gaflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaflow"))
        .args(args)
        .env_remove("GAFLOW_THREADS")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        "# tiny run\nresolution = 32x16\ndata.train = 3\ndata.held_out = 2\nbatch_size = 2\nepochs = 1\ntau = 1\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn help_lists_every_config_key() {
    let out = gaflow(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, _) in gaflow::config::KEYS {
        assert!(text.contains(key), "--help is missing {key}");
    }
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "epochs = 2\nwarp.colour = red\n").unwrap();
    let out = gaflow(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp.colour"));
}

#[test]
fn missing_config_file_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.cfg");
    let out = gaflow(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_flag_values_exit_with_config_code() {
    assert_eq!(gaflow(&["train", "--gating", "attention"]).status.code(), Some(1));
    assert_eq!(gaflow(&["train", "--resolution", "30x20"]).status.code(), Some(1));
    assert_eq!(gaflow(&["train", "--epochs", "many"]).status.code(), Some(1));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = gaflow(&["train", "--config", &cfg, "--epochs", "0", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoints/epoch_000.zflw").is_file());
    assert!(out_dir.join("final.zflw").is_file());
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn gen_train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out_arg = out_dir.to_str().unwrap();

    let out = gaflow(&["gen-data", "--config", &cfg, "--out", out_arg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("data/manifest.txt")).unwrap();
    assert!(manifest.contains("00004/"));

    let data_cfg = dir.path().join("data.cfg");
    fs::write(
        &data_cfg,
        format!(
            "{}data.dir = {}\n",
            fs::read_to_string(&cfg).unwrap(),
            out_dir.join("data").display()
        ),
    )
    .unwrap();
    let data_cfg = data_cfg.to_str().unwrap();
    let out = gaflow(&["train", "--config", data_cfg, "--out", out_arg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoints/epoch_001.zflw").is_file());
    assert_eq!(fs::read_to_string(out_dir.join("metrics.csv")).unwrap().lines().count(), 3);

    let out = gaflow(&["eval", "--config", data_cfg, "--out", out_arg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("held_out"));

    let out = gaflow(&["infer", "0,1", "--config", data_cfg, "--out", out_arg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["001_warped.ppm", "001_segmentation.ppm", "001_tryon.ppm"] {
        let bytes = fs::read(out_dir.join("infer").join(name)).unwrap();
        assert!(bytes.starts_with(b"P6\n16 32\n255\n"), "{name}");
    }

    let out = gaflow(&["infer", "9", "--config", data_cfg, "--out", out_arg]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_with_mismatched_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out_arg = out_dir.to_str().unwrap();
    assert!(gaflow(&["train", "--config", &cfg, "--epochs", "0", "--out", out_arg]).status.success());
    let out = gaflow(&["eval", "--config", &cfg, "--out", out_arg, "--gating", "convlstm"]);
    assert_ne!(out.status.code(), Some(0));

    fs::write(out_dir.join("final.zflw"), b"ZFLW garbage").unwrap();
    let out = gaflow(&["eval", "--config", &cfg, "--out", out_arg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = gaflow(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("cases passed"));
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut checkpoints = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("run{threads}"));
        let out = Command::new(env!("CARGO_BIN_EXE_gaflow"))
            .args(["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()])
            .env("GAFLOW_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        checkpoints.push(fs::read(out_dir.join("final.zflw")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
}
