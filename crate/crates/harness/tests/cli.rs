use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
master_seed = 3
seeds = [0]

[teacher]
n_features = 10
n_classes = 2
rank = 1
noise_sigma = 1.0

[grid]
relatedness = [0.5]
s_bar_a = [3.0]
s_bar_b = [10.0]
n_data = [30]

[student]
init = { kind = "training-aligned", s0 = 0.5 }

[train]
learning_rate = 0.01
steps = 40
record_every = 10

[test]
n_test = 300

[gcache]
n_samples = 2000
"#;

fn mtldyn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtldyn"))
        .args(args)
        .current_dir(dir)
        .env("MTLDYN_CACHE_DIR", dir.join("cache"))
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = setup();
    assert_eq!(mtldyn(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(mtldyn(&["benefit", "--config", "missing.toml"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("steps = 40", "steps = 40\nmomentum = 1")).unwrap();
    assert_eq!(mtldyn(&["benefit", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(mtldyn(&["benefit"], dir.path()).status.code(), Some(2));
}

#[test]
fn validate_passes() {
    let dir = setup();
    let out = mtldyn(&["validate"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn train_and_integrate_share_recorded_steps() {
    let dir = setup();
    for cmd in ["train", "integrate"] {
        let out = mtldyn(&[cmd, "--config", "cfg.toml", "--out", "traj"], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |name: &str| std::fs::read_to_string(dir.path().join("traj").join(name)).unwrap();
    let (train, theory) = (read("train-cell0-seed0.csv"), read("integrate-cell0-seed0.csv"));
    let header = "step,train_loss,gen_loss,gen_loss_stderr,s_1,source";
    assert_eq!(train.lines().next().unwrap(), header);
    assert_eq!(theory.lines().next().unwrap(), header);
    let steps = |t: &str| t.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(steps(&train), ["0", "10", "20", "30", "40"]);
    assert_eq!(steps(&train), steps(&theory));
    assert!(train.lines().skip(1).all(|l| l.ends_with(",empirical")));
    assert!(theory.lines().skip(1).all(|l| l.ends_with(",theory")));
    let first_s = |t: &str| t.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse::<f64>().unwrap();
    assert!((first_s(&train) - 0.5).abs() < 1e-9);
    assert!((first_s(&theory) - 0.5).abs() < 1e-12);
}

#[test]
fn benefit_and_sweep_agree() {
    let dir = setup();
    let out = mtldyn(&["benefit", "--config", "cfg.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out2 = mtldyn(&["sweep", "--config", "cfg.toml", "--out", "res", "--jobs", "1"], dir.path());
    assert!(out2.status.success(), "{}", String::from_utf8_lossy(&out2.stderr));
    let swept = std::fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), swept);
    assert!(dir.path().join("res/results.meta.json").exists());
}

#[test]
fn gen_teachers_reports_both_tasks() {
    let dir = setup();
    let out = mtldyn(&["gen-teachers", "--config", "cfg.toml", "--format", "json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["task"], "a");
    assert_eq!(rows[1]["s_bar"], 10.0);
}

#[test]
fn gcache_writes_reusable_files() {
    let dir = setup();
    let out = mtldyn(&["gcache", "--config", "cfg.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let paths = String::from_utf8(out.stdout).unwrap();
    assert_eq!(paths.lines().count(), 2);
    assert!(paths.lines().all(|p| Path::new(p).exists()));
}
