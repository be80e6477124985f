use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aum"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, extra).unwrap();
    path
}

#[test]
fn toy_pipeline_memorizes_and_eval_prints_accuracy_one() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = tmp.path().join("toy");
    let o = aum(&["make-toy", "--out", p(&toy), "--samples", "16", "--seed", "3"]);
    assert!(o.status.success(), "{o:?}");

    let feats = tmp.path().join("feats");
    let o = aum(&[
        "features",
        "--manifest",
        p(&toy.join("artifacts/manifest.csv")),
        "--config",
        p(&toy.join("artifacts/train.toml")),
        "--out",
        p(&feats),
    ]);
    assert!(o.status.success(), "{o:?}");
    for f in ["config.echo", "manifest.json", "logs", "artifacts/dataset.csv"] {
        assert!(feats.join(f).exists(), "missing {f}");
    }

    // rerun resumes: nothing left to extract
    let o = Command::new(env!("CARGO_BIN_EXE_aum"))
        .args([
            "features",
            "--manifest",
            p(&toy.join("artifacts/manifest.csv")),
            "--config",
            p(&toy.join("artifacts/train.toml")),
            "--out",
            p(&feats),
        ])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("16 files, 16 cached, 0 to extract"));
    assert!(fs::read_to_string(feats.join("logs/features.log")).unwrap().contains("0 to extract"));

    let cfg_text = fs::read_to_string(toy.join("artifacts/train.toml")).unwrap();
    let cfg_text = cfg_text.replace("epochs = 100", "epochs = 40");
    let cfg = write_config(tmp.path(), &cfg_text);
    let ckpt = tmp.path().join("model.aumc");
    let o = aum(&["train", "--config", p(&cfg), "--data", p(&feats), "--out", p(&ckpt)]);
    assert!(o.status.success(), "{o:?}");
    assert!(ckpt.is_file());
    let run = tmp.path().join("model.run");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(run.join("logs/train.csv").is_file());

    let o = aum(&["eval", "--ckpt", p(&ckpt), "--data", p(&feats), "--task", "acc"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim(), "acc 1.000000");
}

#[test]
fn ablate_emits_nine_cells_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "epochs = 2\nembed_dim = 8\ndepth = 1\nstate_dim = 4\n");
    let out = tmp.path().join("ablate");
    let args = ["ablate", "--config", p(&cfg), "--out", p(&out), "--samples", "8"];
    let o = aum(&args);
    assert!(o.status.success(), "{o:?}");
    let grid = fs::read_to_string(out.join("artifacts/grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "variant,Head,Mid,End");
    assert_eq!(lines.len(), 4);
    let cells: usize = lines[1..].iter().map(|l| l.split(',').count() - 1).sum();
    assert_eq!(cells, 9);
    assert_eq!(fs::read_dir(out.join("artifacts/cells")).unwrap().count(), 9);

    // drop one cell; the rerun trains only that one and reproduces the grid
    fs::remove_file(out.join("artifacts/cells/FoBi-Mid.json")).unwrap();
    let o = aum(&args);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read_to_string(out.join("artifacts/grid.csv")).unwrap(), grid);

    // a different config may not reuse the directory
    let other = write_config(tmp.path(), "epochs = 3\nembed_dim = 8\ndepth = 1\nstate_dim = 4\n");
    let o = aum(&["ablate", "--config", p(&other), "--out", p(&out), "--samples", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_rows_cover_every_model_and_count() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    let o = aum(&[
        "bench",
        "--tokens",
        "8,16,32",
        "--models",
        "aum-s,attn-s",
        "--reps",
        "1",
        "--warmups",
        "0",
        "--out",
        p(&csv),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(stdout(&o).contains("aum-s: slope"));
    assert!(tmp.path().join("bench.run/artifacts/summary.txt").is_file());

    // DNF rows are data: still exit 0
    let csv2 = tmp.path().join("dnf.csv");
    let o = aum(&[
        "bench", "--tokens", "8,2048", "--models", "attn-s", "--reps", "1", "--warmups", "0", "--budget-mb", "40",
        "--out", p(&csv2),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(&csv2).unwrap();
    assert!(text.lines().nth(2).unwrap().ends_with(",dnf"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(aum(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(aum(&["frobnicate"]).status.code(), Some(2));

    let bad = write_config(tmp.path(), "epochz = 3\n");
    let o = aum(&["ablate", "--config", p(&bad), "--out", p(&tmp.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    let o = aum(&["bench", "--tokens", "64,32", "--out", p(&tmp.path().join("b.csv"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_aum"))
        .args(["ablate", "--out", p(&tmp.path().join("c"))])
        .env("AUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
