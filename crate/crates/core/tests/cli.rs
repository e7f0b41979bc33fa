use std::path::Path;
use std::process::{Command, Output};

fn edmd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edmd-dl"))
        .args(args)
        .env("EDMD_DL_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn small_duffing(dir: &Path) -> String {
    let path = dir.join("duffing.edmd");
    let p = path.to_str().unwrap();
    ok(edmd(
        dir,
        &["--seed", "3", "generate", "--system", "duffing", "--trajectories", "20", "--steps", "10", "--out", p],
    ));
    p.to_string()
}

fn small_model(dir: &Path, data: &str) -> String {
    let out = dir.join("run");
    ok(edmd(
        dir,
        &[
            "--seed", "1", "--threads", "1", "train", "--data", data, "--out-dir", out.to_str().unwrap(),
            "--dict", "mlp", "--width", "8", "--depth", "2", "--dictionary-size", "10", "--max-epochs", "3", "--epsilon", "1e-12",
        ],
    ));
    out.join("model.json").to_str().unwrap().to_string()
}

#[test]
fn generate_reports_pairs_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let s = ok(edmd(
        tmp.path(),
        &["generate", "--system", "duffing", "--trajectories", "5", "--steps", "4"],
    ));
    assert!(s.contains("pairs (N): 20"), "{s}");
    assert!(tmp.path().join("duffing.edmd").exists());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("duffing.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["artifacts"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn generate_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.edmd");
    let b = tmp.path().join("b.edmd");
    for p in [&a, &b] {
        ok(edmd(
            tmp.path(),
            &["--seed", "9", "generate", "--system", "ks", "--nx", "16", "--trajectories", "2", "--steps", "3",
              "--out", p.to_str().unwrap()],
        ));
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_prints_parameter_count_with_separator() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_duffing(tmp.path());
    let s = ok(edmd(
        tmp.path(),
        &["train", "--data", &data, "--dict", "mlp", "--width", "170", "--depth", "3", "--max-epochs", "1",
          "--out-dir", tmp.path().join("big").to_str().unwrap()],
    ));
    assert!(s.contains("trainable parameters: 62,412"), "{s}");
}

#[test]
fn train_predict_eval_classify_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_duffing(tmp.path());
    let model = small_model(tmp.path(), &data);
    let run = tmp.path().join("run");
    for f in ["checkpoint.json", "model.json", "loss_trace.csv", "report.json", "manifest.json", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let trace = std::fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let s = ok(edmd(tmp.path(), &["predict", "--model", &model, "--ic", "0.5,-0.25", "--steps", "5", "--truth"]));
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "step,x1,x2,actual_x1,actual_x2,error");
    assert_eq!(lines.len(), 7);
    let row0: Vec<f64> = lines[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row0[2], 0.5);
    assert_eq!(row0[3], -0.25);

    let csv = tmp.path().join("m.csv");
    let s = ok(edmd(
        tmp.path(),
        &["--seed", "4", "eval", "--model", &model, "--samples", "200", "--trajectories", "3", "--steps", "5",
          "--out", csv.to_str().unwrap()],
    ));
    assert!(s.contains("e_eigen"), "{s}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,value,samples,seed\n"));
    assert_eq!(text.lines().count(), 4);

    let cls = tmp.path().join("c.csv");
    let s = ok(edmd(
        tmp.path(),
        &["classify", "--model", &model, "--samples", "30", "--out", cls.to_str().unwrap()],
    ));
    assert!(s.contains("accuracy:"), "{s}");
    let text = std::fs::read_to_string(&cls).unwrap();
    assert!(text.starts_with("x1,x2,truth,predicted\n"));
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn training_is_reproducible_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_duffing(tmp.path());
    let m1 = std::fs::read(small_model(tmp.path(), &data)).unwrap();
    let m2 = std::fs::read(small_model(tmp.path(), &data)).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn config_file_is_used_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_duffing(tmp.path());
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\n[train]\ndictionary_size = 6\nmax_epochs = 2\nepsilon = 1e-12\n[train.dictionary]\nkind = \"mlp\"\nwidth = 4\ndepth = 1\n",
    )
    .unwrap();
    let s = ok(edmd(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--data", &data, "--out-dir", tmp.path().join("r").to_str().unwrap()],
    ));
    assert!(s.contains("dictionary size (M): 6"), "{s}");
    assert!(s.contains("iterations: 2"), "{s}");

    std::fs::write(&cfg, "schema_version = 7\n").unwrap();
    let o = edmd(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--data", &data]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(edmd(tmp.path(), &["bogus"]).status.code(), Some(2));
    let o = edmd(tmp.path(), &["predict", "--model", "/nonexistent/model.json", "--ic", "0,0"]);
    assert_eq!(o.status.code(), Some(2));
    let data = small_duffing(tmp.path());
    let o = edmd(tmp.path(), &["train", "--data", &data, "--dictionary-size", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = edmd(tmp.path(), &["train", "--data", &data, "--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let model = small_model(tmp.path(), &data);
    let o = edmd(tmp.path(), &["predict", "--model", &model, "--ic", "1,2,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ks_substep_instability_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = edmd(
        tmp.path(),
        &["generate", "--system", "ks", "--nx", "64", "--substeps", "1", "--trajectories", "1", "--steps", "50"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn init_scale_flag_reaches_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_duffing(tmp.path());
    let out = tmp.path().join("r");
    ok(edmd(
        tmp.path(),
        &["train", "--data", &data, "--out-dir", out.to_str().unwrap(), "--dict", "mlp", "--width", "4",
          "--depth", "1", "--dictionary-size", "6", "--max-epochs", "1", "--init-scale", "fan_in"],
    ));
    let cfg = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("init_scale = \"fan_in\""), "{cfg}");
}
