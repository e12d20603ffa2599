use std::process::{Command, Output};

fn mqmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mqmk"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn config_prints_a_loadable_default() {
    let out = mqmk(&["config"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = mqmk_core::harness::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, mqmk_core::harness::ExperimentConfig::default());
}

#[test]
fn invalid_config_exits_with_one_and_lists_problems() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[data]\nnum_tasks = 0\nnoise_sigma = -1.0\n").unwrap();
    let out = mqmk(&["run", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("num_tasks"), "{err}");
    assert!(err.contains("noise_sigma"), "{err}");
}

#[test]
fn unknown_subcommand_exits_with_one() {
    assert_eq!(mqmk(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mqmk(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(mqmk(&["run", "-c", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "[experiment]\ncheckpoint = \"backbone.pclb\"\n").unwrap();
    std::fs::write(dir.path().join("backbone.pclb"), b"not a checkpoint").unwrap();
    let out = mqmk(&["run", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_on_a_non_run_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mqmk(&["report", dir.path().to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn unknown_ablation_axis_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ok.toml");
    std::fs::write(&path, "").unwrap();
    assert_eq!(mqmk(&["ablate", "-c", path.to_str().unwrap(), "-a", "depth_of_field"]).status.code(), Some(1));
}
