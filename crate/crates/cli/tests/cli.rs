use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[world]
rooms_x = 3
rooms_y = 3

[episodes]
per_world = 240

[render]
width = 16
height = 16

[agent]
d = 16
epochs = 2

[attack]
iterations = 20
checkpoint_every = 10
batch_size = 4

[build]
max_instances = 2

[ablation]
instances = 1
steps_rendered = [1]
epsilon = [0.1]
instructions = [1]
iterations = [10]
"#;

fn vlnhijack(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vlnhijack"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stage(name: &str, config: &Path, out: &Path) -> Output {
    vlnhijack(
        &[name, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    )
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

const STAGES: [&str; 7] = ["gen-world", "train-agent", "build-attacks", "attack", "eval", "ablate", "report"];

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for s in STAGES {
            let o = stage(s, &config, out);
            assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let report = fs::read_to_string(a.join("report.md")).unwrap();
    assert!(report.contains("SR ✓") && report.contains("SR ✗") && report.contains("SR Δ"));
    for f in ["eval_trajectory.json", "factors_trajectory.csv", "report.md", "report.csv", "ablation.json", "params.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // Rerunning a finished stage rewrites identical bytes.
    let before = fs::read(a.join("eval_trajectory.json")).unwrap();
    assert!(stage("eval", &config, &a).status.success());
    assert_eq!(before, fs::read(a.join("eval_trajectory.json")).unwrap());
}

#[test]
fn eval_before_attack_names_the_missing_atlas() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for s in ["gen-world", "train-agent", "build-attacks"] {
        assert!(stage(s, &config, &out).status.success());
    }
    let o = stage("eval", &config, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no attacked atlas found"));
}

#[test]
fn changed_config_is_refused_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert!(stage("gen-world", &config, &out).status.success());
    let o = vlnhijack(
        &["train-agent", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash mismatch"));
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[attack]\nepsilon = 1.5\n");
    let o = stage("gen-world", &bad, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon out of range"));

    let ok = write_config(dir.path(), TINY);
    let o = vlnhijack(&["gen-world", "--config", ok.to_str().unwrap()], &[("VHL_ATTACK_EPSILON", "0")]);
    assert_eq!(o.status.code(), Some(1));
    let o = vlnhijack(&["explode", "--config", ok.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
}
