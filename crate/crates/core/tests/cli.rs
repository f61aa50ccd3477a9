use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bezier-gp"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_csv(dir: &Path) -> String {
    let mut body = String::from("a,b,target\n");
    for i in 0..30 {
        let a = i as f64 / 29.0;
        let b = (i * 7 % 30) as f64 / 3.0;
        body.push_str(&format!("{a},{b},{}\n", (3.0 * a).sin() + 0.1 * b));
    }
    write(dir, "train.csv", &body)
}

#[test]
fn help_documents_exit_codes() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("Exit codes"));
    for code in ["  3  ", "  4  ", "  5  ", "  6  "] {
        assert!(text.contains(code), "missing {code:?}");
    }
}

#[test]
fn order_above_limit_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--synth1d", "--order", "26"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("up to 25"), "{}", stderr(&o));
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn usage_and_io_errors_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--r"], dir.path()).status.code(), Some(2));
    let o = run(&["train", "--data", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    let csv = small_csv(dir.path());
    let o = run(&["train", "--data", &csv, "--target", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nope"));
    let o = run(&["train", "--data", &csv, "--target", "target", "--order", "2,3,4"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_then_predict_on_training_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = small_csv(dir.path());
    let o = run(
        &[
            "train", "--data", &csv, "--target", "target", "--order", "4,3", "--r", "2", "--phase1-iters", "300",
            "--phase2-iters", "100", "--split-ratio", "0.8", "--model-out", "m.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("train:") && out.contains("test:"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.report.json")).unwrap()).unwrap();
    assert_eq!(report["n_train"], 24);

    let o = run(&["predict", "--model-in", "m.json", "--data", &csv, "--ood", "clamp"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("row,mean,f_var,y_var"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().flatten().all(|v| v.is_finite()));
    assert!(rows.iter().all(|r| r[3] > r[2] && r[2] > 0.0));
    assert!(stderr(&o).contains("30 predicted"));
}

#[test]
fn predict_discards_out_of_box_rows_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let csv = small_csv(dir.path());
    let o = run(
        &["train", "--data", &csv, "--target", "target", "--order", "2", "--phase1-iters", "20", "--phase2-iters", "5"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let input = write(dir.path(), "in.csv", "b,a\n1.0,0.5\n100.0,0.5\n");
    let o = run(&["predict", "--model-in", "model.json", "--data", &input, "--out", "p.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("1 outside the input box discarded"), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("0,"));

    let bad = write(dir.path(), "bad.csv", "p,q,r\n1,2,3\n");
    let o = run(&["predict", "--model-in", "model.json", "--data", &bad], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn empty_input_gives_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--synth1d", "--order", "5", "--phase1-iters", "10", "--phase2-iters", "10"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for body in ["", "x\n"] {
        let input = write(dir.path(), "empty.csv", body);
        let o = run(&["predict", "--model-in", "model.json", "--data", &input], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert_eq!(stdout(&o), "row,mean,f_var,y_var\n");
    }
}

#[test]
fn plot_table_covers_the_box() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["train", "--synth1d", "--order", "8", "--phase1-iters", "50", "--phase2-iters", "10", "--plot", "plot.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("x,mean,lower,upper,f_var,y_var"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 201);
    assert_eq!((rows[0][0], rows[200][0]), (0.0, 1.0));
    assert!(rows.iter().all(|r| r[2] <= r[1] && r[1] <= r[3]));
}

#[test]
fn quick_verify_passes() {
    let start = Instant::now();
    let o = bin().args(["verify", "--quick"]).output().unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("[PASS]")).count() >= 6);
    assert!(!out.contains("[FAIL]"));
}

#[test]
fn verify_reports_a_corrupted_model() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{\"format_version\": 1, \"orders\": [");
    let o = run(&["verify", "--quick", "--model-in", &bad], dir.path());
    assert_eq!(o.status.code(), Some(6));
    assert!(stdout(&o).contains("[FAIL] model file loads"));
    assert!(!stderr(&o).contains("panicked"));

    let o = run(&["predict", "--model-in", &bad, "--data", &bad], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn scaling_probe_prints_one_row_per_dimension() {
    let o = bin().args(["scaling-probe", "--dims", "4,8,16", "--n", "50", "--reps", "1"]).output().unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "d,seconds");
    assert!(rows[3].starts_with("16,"));
}
