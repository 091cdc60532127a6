use std::path::Path;
use std::process::{Command, Output};

fn therino(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_therino"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = therino(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn run_log(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("run.toml")).unwrap().parse().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let (data, ckpt) = (p("data"), p("ckpt"));

    let cfg = p("config.toml");
    std::fs::write(&cfg, "[model]\nwidth = 4\n\n[train]\nbatch_size = 2\n").unwrap();

    ok(&["generate", "--out", &data, "--samples", "6", "--grid", "8", "--seed", "3", "--kappa", "10"]);
    assert!(data_manifest(&data).exists());
    assert_eq!(run_log(Path::new(&data))["command"].as_str(), Some("generate"));

    ok(&["solve", "--data", &data, "--tol", "1e-6"]);
    ok(&["--config", &cfg, "train", "--data", &data, "--kind", "therino", "--out", &ckpt, "--epochs", "1"]);
    let fno = p("fno");
    ok(&["--config", &cfg, "train", "--data", &data, "--kind", "fno", "--out", &fno, "--epochs", "1"]);
    let header: toml::Table = std::fs::read_to_string(Path::new(&ckpt).join("checkpoint.toml")).unwrap().parse().unwrap();
    // config file and command line both reach the run
    assert_eq!(header["model"]["width"].as_integer(), Some(4));
    assert_eq!(header["train"]["batch_size"].as_integer(), Some(2));
    assert_eq!(header["train"]["epochs"].as_integer(), Some(1));
    assert!(Path::new(&ckpt).join("history.csv").exists());

    let ev = p("eval");
    ok(&["eval", "--checkpoint", &ckpt, "--data", &data, "--out", &ev]);
    let csv = std::fs::read_to_string(Path::new(&ev).join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(Path::new(&ev).join("metrics.toml").exists());

    let ro = p("rollout");
    ok(&["rollout", "--checkpoint", &ckpt, "--data", &data, "--iters", "3", "--out", &ro]);
    assert!(Path::new(&ro).join("rollout.csv").exists());
    // a single-pass operator has no iterations to roll out
    let refused = therino(&["rollout", "--checkpoint", &fno, "--data", &data, "--out", &p("ro2")]);
    assert_eq!(refused.status.code(), Some(1));

    let ex = p("extra");
    ok(&["extrapolate", "--checkpoint", &ckpt, "--data", &data, "--kappa", "20", "--reference-kappa", "10", "--limit", "1", "--out", &ex]);
    for f in ["reference.csv", "target.csv", "extrapolate.toml"] {
        assert!(Path::new(&ex).join(f).exists(), "{f}");
    }

    let sl = p("slices");
    ok(&["export-slices", "--data", &data, "--sample", "0", "--checkpoint", &ckpt, "--out", &sl]);
    let files: Vec<String> = std::fs::read_dir(&sl).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".pgm")).count(), 4, "{files:?}");
    assert_eq!(files.iter().filter(|f| f.ends_with(".csv")).count(), 4, "{files:?}");

    for dir in [&ckpt, &ev, &ro, &ex, &sl] {
        let log = run_log(Path::new(dir));
        assert!(log.contains_key("version") && log.contains_key("args"), "{dir}");
    }
}

fn data_manifest(dir: &str) -> std::path::PathBuf {
    therino::format::manifest_path(Path::new(dir))
}

#[test]
fn exit_codes_distinguish_failures() {
    assert_eq!(therino(&["--help"]).status.code(), Some(0));
    assert_eq!(therino(&["no-such-command"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let missing = tmp.path().join("missing");
    let code = |a: &[&str]| therino(a).status.code();
    assert_eq!(code(&["generate", "--out", out.to_str().unwrap(), "--samples", "0"]), Some(1));
    assert_eq!(code(&["solve", "--data", missing.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["train", "--data", missing.to_str().unwrap(), "--kind", "nope", "--out", out.to_str().unwrap()]), Some(1));
}
