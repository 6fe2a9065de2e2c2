use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ufo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufo")).args(args).env_remove("UFO_DATA_DIR").output().expect("run ufo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains briefly into `out` and returns the checkpoint path.
fn quick_train(out: &Path, extra: &[&str]) -> PathBuf {
    let data = mnist_dir();
    let mut args = vec![
        "train", "--data-dir", s(&data), "--epochs", "2", "--batch-size", "16", "--train-limit", "32",
        "--test-limit", "16", "--out", s(out),
    ];
    args.extend_from_slice(extra);
    let o = ufo(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(ufo(&["--help"]).status.code(), Some(0));
    assert_eq!(ufo(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(ufo(&["info", "tiny", "--bogus"]).status.code(), Some(3));
}

#[test]
fn verify_filter_runs_matching_properties() {
    let o = ufo(&["verify", "--filter", "attention/oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS") && out.contains("attention/oracle-equivalence"));
    assert!(out.contains("1 passed, 0 failed"));
}

#[test]
fn verify_unmatched_filter_is_usage_error() {
    assert_eq!(ufo(&["verify", "--filter", "no-such-property"]).status.code(), Some(3));
}

#[test]
fn broken_eps_is_caught_by_norm_constraint() {
    let o = ufo(&["verify", "--filter", "attention", "--break", "xnorm-eps"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("attention/norm-constraint"), "{}", stderr(&o));
}

#[test]
fn info_reports_presets() {
    let o = ufo(&["info", "tiny"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("params(M)"));
    let o = ufo(&["info", "UFO-ViT-S", "--resolution", "224"]);
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(row.contains(" 12 ") && row.contains(" 384 "), "{row}");
    let o = ufo(&["info", "bogus"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown model"));
}

#[test]
fn info_reads_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ini");
    std::fs::write(&path, "preset = tiny\ndepth = 2\n").unwrap();
    let o = ufo(&["info", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(&path, "depth = 2\nwidth = 3\n").unwrap();
    let o = ufo(&["info", s(&path)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown key `width`"));
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.ini");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = ufo(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("base_lr"), "{err}");
}

#[test]
fn missing_data_dir_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = ufo(&["train", "--data-dir", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.ini");
    std::fs::write(&cfg, "# short run\nbase-lr = 0.004\naugment = false\nepochs = 5\n").unwrap();
    let out = dir.path().join("run");
    let ckpt = quick_train(&out, &["--config", s(&cfg)]);
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "command-line epochs win over the file: {history}");
    let resolved = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(resolved.contains("base_lr = 0.004") && resolved.contains("augment = false"), "{resolved}");

    let data = mnist_dir();
    let o = ufo(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(&data), "--limit", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("on 20 samples"));

    let o = ufo(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(&data), "--ablation", "learnable_p", "--limit", "4"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("does not fit model"), "{}", stderr(&o));
}

#[test]
fn attnmap_single_patch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = quick_train(&dir.path().join("run"), &[]);
    let img = dir.path().join("patch.pgm");
    let mut bytes = b"P5\n4 4\n255\n".to_vec();
    bytes.extend((0..16).map(|i| (i * 16) as u8));
    std::fs::write(&img, bytes).unwrap();
    let prefix = dir.path().join("map");
    let data = mnist_dir();
    let o = ufo(&["attnmap", "--checkpoint", s(&ckpt), "--data-dir", s(&data), "--image", s(&img), "--out", s(&prefix)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = std::fs::read(prefix.with_extension("pgm")).unwrap();
    assert_eq!(pgm, b"P5\n1 1\n255\n\xff");
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,0,"));

    let o = ufo(&["attnmap", "--checkpoint", s(&ckpt), "--data-dir", s(&data), "--index", "0", "--ablation", "layer_norm"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = ufo(&["bench", "--n", "32..256", "--repeats", "1", "--max-batch-budget", "4000000", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("mechanism,N,heads,h,batch,flops,peak_bytes,wall_ms"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let text = stdout(&o);
    assert!(text.contains("ufo") && text.contains("max batch"), "{text}");
    assert_eq!(ufo(&["bench", "--n", "a..b", "--out", s(&out)]).status.code(), Some(3));
}
