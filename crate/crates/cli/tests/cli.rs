use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pvtrip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvtrip")).args(args).current_dir(dir).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pvtrip(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
    feeder: String,
    series: String,
}

impl Fixture {
    fn new(name: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["synth", "--fixture", name, "--seed", "1", "--out", "data"]);
        let p = |f: &str| dir.path().join("data").join(f).display().to_string();
        Fixture { feeder: p("feeder.json"), series: p("series.csv"), dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap())).unwrap_or_else(|| panic!("{key} missing from {text}"))
}

#[test]
fn assess_writes_one_row_per_node_plus_summary() {
    let f = Fixture::new("over-voltage");
    ok(f.path(), &["assess", "--feeder", &f.feeder, "--series", &f.series, "--start", "660", "--out", "a"]);
    let table = rows(&f.out("a/assess.csv"));
    assert_eq!(table.len(), 6 + 1);
    assert_eq!(&table[6][0], "ALL");
    assert!(f.out("a/model.json").exists());
}

#[test]
fn missing_feeder_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = pvtrip(dir.path(), &["assess", "--feeder", "nowhere/feeder.json", "--stats", "s.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/feeder.json"));
}

#[test]
fn benign_feeder_never_trips() {
    let f = Fixture::new("benign");
    ok(f.path(), &["validate", "--feeder", &f.feeder, "--series", &f.series, "--out", "v"]);
    for r in rows(&f.out("v/validate.csv")) {
        let (empirical, model, gap): (f64, f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap());
        assert_eq!(empirical, 100.0);
        assert!(gap >= 0.0 && (gap - (100.0 - model)).abs() < 1e-9);
        assert_eq!(&r[5], "0");
    }
}

#[test]
fn over_voltage_trips_and_model_stays_below() {
    let f = Fixture::new("over-voltage");
    let stdout = ok(f.path(), &["validate", "--feeder", &f.feeder, "--series", &f.series, "--on-inconsistent", "latch", "--out", "v"]);
    assert!(stdout.contains("flagged=0"), "{stdout}");
    let tripped = rows(&f.out("v/validate.csv"))
        .iter()
        .any(|r| r[1].parse::<f64>().unwrap() < 100.0 && r[2].parse::<f64>().unwrap() < r[1].parse::<f64>().unwrap());
    assert!(tripped);
}

#[test]
fn over_voltage_without_latch_is_infeasible() {
    let f = Fixture::new("over-voltage");
    let out = pvtrip(f.path(), &["validate", "--feeder", &f.feeder, "--series", &f.series, "--out", "v"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn countermeasure_lowers_setpoint_under_over_voltage() {
    let f = Fixture::new("over-voltage");
    let text =
        ok(f.path(), &["mitigate", "--feeder", &f.feeder, "--series", &f.series, "--start", "660", "--v0-initial", "1", "--out", "m"]);
    assert!(kv(&text, "v0_star") < 1.0);
    assert!(kv(&text, "objective_after") > kv(&text, "objective_before"));
    assert_eq!(std::fs::read_to_string(f.out("m/countermeasure.txt")).unwrap(), text);
}

#[test]
fn countermeasure_raises_setpoint_under_sag() {
    let f = Fixture::new("under-voltage");
    let text = ok(f.path(), &["mitigate", "--feeder", &f.feeder, "--series", &f.series, "--start", "1080", "--out", "m"]);
    assert!(kv(&text, "v0_star") > 1.0);
    assert!(kv(&text, "s_p_after") > kv(&text, "s_p_before"));
}

#[test]
fn empty_setpoint_grid_exits_3() {
    let f = Fixture::new("over-voltage");
    let out = pvtrip(f.path(), &["mitigate", "--feeder", &f.feeder, "--series", &f.series, "--start", "660", "--v0-initial", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not intersect"));
}

#[test]
fn invalid_rate_band_exits_2() {
    let f = Fixture::new("over-voltage");
    let out = pvtrip(f.path(), &["mitigate", "--feeder", &f.feeder, "--series", &f.series, "--start", "660", "--rate", "0.05,0.1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn starved_solver_exits_4() {
    let f = Fixture::new("over-voltage");
    let out = pvtrip(
        f.path(),
        &[
            "assess",
            "--feeder",
            &f.feeder,
            "--series",
            &f.series,
            "--start",
            "660",
            "--damping",
            "1",
            "--max-iter",
            "3",
            "--multistart",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn deadband_sweep_quarters_coupling() {
    let f = Fixture::new("over-voltage");
    ok(
        f.path(),
        &[
            "sweep",
            "--feeder",
            &f.feeder,
            "--series",
            &f.series,
            "--on-inconsistent",
            "latch",
            "--axis",
            "deadband",
            "--grid",
            "1:2:2",
            "--out",
            "s",
        ],
    );
    let table = rows(&f.out("s/sweep.csv"));
    let c: Vec<f64> = table.iter().map(|r| r[7].parse().unwrap()).collect();
    assert!((c[0] / c[1] - 4.0).abs() < 1e-9, "{c:?}");
}

#[test]
fn oracle_agrees_with_resolver() {
    let f = Fixture::new("under-voltage");
    let stdout = ok(f.path(), &["oracle", "--feeder", &f.feeder, "--series", &f.series, "--out", "o"]);
    assert!(stdout.contains("resolver_outside_oracle=0"), "{stdout}");
}
