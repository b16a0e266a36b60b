use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"epochs = 2
[encoder]
conv1 = { channels = 2, kernel = 5 }
conv2 = { channels = 2, kernel = 5 }
fc = [8]
attention_dim = 4
[data.counts]
train = 4
val = 2
test = 4
[data.spec]
bag_size = 5
positive_count = [1, 2]
"#;

fn atmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atmil"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = atmil(&[
        "train",
        "--config",
        &cfg,
        "--strategy",
        "atmil",
        "--out-dir",
        run_s,
        "-q",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "best.ckpt",
        "last.ckpt",
        "steps.csv",
        "epochs.csv",
        "metrics.json",
        "confusion.csv",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    // eval picks up the saved config and agrees with the training run.
    let o = atmil(&["eval", "--checkpoint", ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed["accuracy"], saved["accuracy"]);

    let o = atmil(&["attn-export", "--checkpoint", ckpt]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 1 + 4 * 5);
    assert!(csv.starts_with("bag_id,true_label,pred_label,instance_id,meta,attention_weight\n"));
}

#[test]
fn gen_data_writes_a_loadable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    let o = atmil(&[
        "gen-data",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out-dir",
        data_s,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(manifest["seed"], 5);
    let run = dir.path().join("run");
    let o = atmil(&[
        "train",
        "--config",
        &cfg,
        "--data-dir",
        data_s,
        "--out-dir",
        run.to_str().unwrap(),
        "-q",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_reports_every_parameter() {
    let o = atmil(&[
        "gradcheck",
        "--desk",
        "--instances",
        "3",
        "--samples",
        "4",
        "--op-cases",
        "2",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("ops: 2 cases each, ok"));
    assert!(out.contains("conv1.weight"));
    assert!(out.contains("network: ok"));
}

#[test]
fn ladder_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY
        .replace("\n[", "\n[base.")
        .replacen("epochs", "[base]\nepochs", 1);
    let p = dir.path().join("ladder.toml");
    fs::write(
        &p,
        format!("strategies = [\"none\"]\ntrain_sizes = [4]\nseeds = [0]\n{body}"),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = atmil(&[
        "ladder",
        "--config",
        p.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "-q",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("none"));
    assert!(out.join("ladder.csv").exists());
}

#[test]
fn bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 0\n").unwrap();
    let o = atmil(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = atmil(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = atmil(&["train", "--strategy", "bogus", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
