use std::path::Path;
use std::process::{Command, Output};

fn shapmort(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapmort"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL: &[&str] = &[
    "--data", "rates.txt", "--first-year", "1950", "--train-years", "50",
    "--samples", "24", "--trees", "6", "--max-depth", "4", "--horizon", "3",
    "--genders", "female", "--models", "LC_GAUSSIAN,CBD,FTS",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn synth(dir: &Path) {
    let out = shapmort(dir, &["synth", "--out", "rates.txt", "--first-year", "1950", "--last-year", "2019"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_ingest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = shapmort(dir.path(), &["ingest", "--data", "rates.txt", "--out", "clean"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("101 ages x 70 years"));
    let repairs = std::fs::read_to_string(dir.path().join("clean/repairs.csv")).unwrap();
    assert_eq!(repairs.lines().count(), 1);
    assert!(dir.path().join("clean/rates.txt").exists());
}

#[test]
fn weights_feed_combine() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = shapmort(dir.path(), &with_small(&["weights", "--out", "w.csv"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let w = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
    // header plus 4 schemes x 3 models
    assert_eq!(w.lines().count(), 13);

    let out = shapmort(dir.path(), &with_small(&["combine", "--weights", "w.csv", "--scheme", "shapley,equal", "--out", "c.csv"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let c = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let mut lines = c.lines();
    assert!(lines.next().unwrap().starts_with("scheme,gender,age,target_year,horizon"));
    let rows: Vec<&str> = lines.collect();
    // 2 schemes x 101 ages x (10 + 9 + 8) window-horizon pairs
    assert_eq!(rows.len(), 2 * 101 * 27);
    assert!(rows.iter().any(|r| r.starts_with("shapley,")));
    assert!(rows.iter().any(|r| r.starts_with("equal,")));
}

#[test]
fn report_writes_all_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = shapmort(dir.path(), &with_small(&["report", "--no-charts", "--out", "rep"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["accuracy_mse.csv", "accuracy_mae.csv", "interval_score.csv", "weights.csv", "run_manifest.json"] {
        assert!(dir.path().join("rep").join(f).exists(), "{f} missing");
    }
    assert!(!dir.path().join("rep/weights_female.svg").exists());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = shapmort(dir.path(), &["report", "--config", "absent.toml"]);
    assert_eq!(code(&out), 2);
    let out = shapmort(dir.path(), &["report", "--horizon", "0"]);
    assert_eq!(code(&out), 2);
    let out = shapmort(dir.path(), &["ingest", "--data", "absent.txt", "--out", "x"]);
    assert_eq!(code(&out), 3);
    std::fs::write(dir.path().join("bad.txt"), "not a rate file\n").unwrap();
    let out = shapmort(dir.path(), &["ingest", "--data", "bad.txt", "--out", "x"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn audit_axioms_reports_each_axiom() {
    let dir = tempfile::tempdir().unwrap();
    let game = "n 3\n- 0\n1 1\n2 1\n3 0\n1,2 4\n1,3 1\n2,3 1\n1,2,3 4\n";
    std::fs::write(dir.path().join("g.txt"), game).unwrap();
    let out = shapmort(dir.path(), &["audit-axioms", "--game", "g.txt", "--peer", "g.txt"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for axiom in ["efficiency", "symmetry", "dummy", "additivity"] {
        let line = text.lines().find(|l| l.starts_with(axiom)).unwrap();
        assert!(line.contains("PASS"), "{line}");
    }

    // unequal split between interchangeable players breaks symmetry
    std::fs::write(dir.path().join("a.txt"), "3 1 0\n").unwrap();
    let out = shapmort(dir.path(), &["audit-axioms", "--game", "g.txt", "--allocation", "a.txt"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().find(|l| l.starts_with("symmetry")).unwrap().contains("FAIL"));
    assert!(text.lines().find(|l| l.starts_with("efficiency")).unwrap().contains("PASS"));
}
