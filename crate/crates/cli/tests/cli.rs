use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn trafspread(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafspread"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Small two-user scenario; `top` holds top-level keys, `tables` extra tables.
fn two_users(dispatcher: &str, lambda: f64, top: &str, tables: &str) -> String {
    format!(
        r#"dispatcher = "{dispatcher}"
seed = 3
{top}

[[users]]
distance_m = 100.0
arrival_rate = {lambda}

[[users]]
distance_m = 100.0
arrival_rate = {lambda}

[stopping]
batch_slots = 20000
min_batches = 4
max_batches = 4
{tables}"#
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `policy.csv` rows as (q1, q2, action label).
fn policy(dir: &Path) -> Vec<(u32, u32, String)> {
    let text = fs::read_to_string(dir.join("policy.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema: trafspread.policy/1"));
    assert_eq!(lines.next(), Some("q1,q2,action"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].to_string())
        })
        .collect()
}

#[test]
fn zero_weight_policy_hugs_the_diagonal() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &two_users("optimal", 0.2, "", ""));
    let out = tmp.path().join("out");
    let o = trafspread(&["solve", "--config", path_str(&cfg), "--weight", "0", "--trunc", "20", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = policy(&out);
    assert_eq!(grid.len(), 21 * 21);
    // Away from the box edge, files move from the longer queue to the shorter
    // one whenever the gap is at least two, and never the other way.
    for (q1, q2, a) in &grid {
        if *q1 >= 18 || *q2 >= 18 {
            continue;
        }
        if *q1 >= q2 + 2 {
            assert_eq!(a, "U1_TO_U2", "({q1},{q2})");
        } else if *q2 >= q1 + 2 {
            assert_eq!(a, "U2_TO_U1", "({q1},{q2})");
        } else if q1 <= q2 {
            assert_ne!(a, "U1_TO_U2", "({q1},{q2})");
        }
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["seed"], 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["contiguous_columns"], true);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("# schema: trafspread.switching/1\nq1,q2a,q2b\n"));
}

#[test]
fn prohibitive_weight_never_reroutes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &two_users("optimal", 0.2, "", ""));
    let out = tmp.path().join("out");
    let o = trafspread(&["solve", "--config", path_str(&cfg), "--weight", "1e6", "--trunc", "15", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(policy(&out).iter().all(|(_, _, a)| a == "NONE"));
}

#[test]
fn malformed_config_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", &two_users("optimal", 0.2, "", "").replace("distance_m = 100.0", "distance_m = -5.0"));
    let o = trafspread(&["simulate", "--config", path_str(&bad), "--out", path_str(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("users[0].distance_m"), "{}", stderr(&o));

    let typo = write_config(tmp.path(), "typo.toml", "dispatchr = \"jsq\"\n");
    let o = trafspread(&["simulate", "--config", path_str(&typo)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dispatchr"), "{}", stderr(&o));

    let o = trafspread(&["simulate", "--config", path_str(&tmp.path().join("missing.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn equal_seeds_give_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &two_users("jsq", 0.2, "", ""));
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = trafspread(&["simulate", "--config", path_str(&cfg), "--seed", "11", "--out", path_str(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1);
    let record: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(record["dispatcher"], "jsq");
    assert!(record["mean_delay_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn heuristic_smoke_run_reports_the_reroute_matrix() {
    let tmp = TempDir::new().unwrap();
    let mut body = String::from(
        "dispatcher = \"heuristic\"\nseed = 5\nheuristic_truncation = 12\n\n[costs]\nweight = 5.0\n\n\
         [stopping]\nbatch_slots = 10000\nmin_batches = 2\nmax_batches = 2\n",
    );
    for _ in 0..4 {
        body.push_str("\n[[users]]\ndistance_m = 100.0\narrival_rate = 0.1\n");
    }
    let cfg = write_config(tmp.path(), "four.toml", &body);
    let out = tmp.path().join("out");
    let o = trafspread(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let record: Value = serde_json::from_str(text.trim()).unwrap();
    let matrix = record["reroute_rates"].as_array().unwrap();
    assert_eq!(matrix.len(), 4);
    for (i, row) in matrix.iter().enumerate() {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 4);
        assert_eq!(row[i].as_f64().unwrap(), 0.0);
        assert!(row.iter().all(|r| r.as_f64().unwrap() >= 0.0));
    }
}

#[test]
fn sweep_writes_sorted_rows_under_a_schema_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &two_users("optimal", 0.15, "truncation = 15", ""));
    let out = tmp.path().join("out");
    let o = trafspread(&["sweep", "--config", path_str(&cfg), "--weights", "30,0,1e6", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema: trafspread.sweep/1"));
    assert_eq!(lines.next(), Some("w,delay_s,delay_hw,power_W,power_hw"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    let w: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(w, vec![0.0, 30.0, 1e6]);
    assert_eq!(rows[2][3], 0.0, "prohibitive weight spends no power");
    assert!(rows[0][3] > rows[1][3]);
}

#[test]
fn sweep_without_weights_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &two_users("optimal", 0.15, "", ""));
    let o = trafspread(&["sweep", "--config", path_str(&cfg), "--out", path_str(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

fn verify_report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("verify.json")).unwrap()).unwrap()
}

fn status<'a>(report: &'a Value, name: &str) -> &'a str {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))["status"]
        .as_str()
        .unwrap()
}

#[test]
fn builtin_verification_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = trafspread(&["verify", "--trunc", "20", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = verify_report(&out);
    assert_eq!(report["passed"], true);
    for name in [
        "transition-probabilities",
        "deterministic-actions",
        "gain-reference-invariance",
        "delta-monotonicity",
        "switching-curves",
    ] {
        assert_eq!(status(&report, name), "pass", "{name}");
    }
}

#[test]
fn corrupted_rate_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = trafspread(&["verify", "--trunc", "12", "--corrupt-rate", "--out", path_str(&out)]);
    assert_eq!(code(&o), 5);
    let report = verify_report(&out);
    assert_eq!(report["passed"], false);
    assert_eq!(status(&report, "transition-probabilities"), "fail");
}

#[test]
fn asymmetric_weights_skip_the_monotonicity_check() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "asym.toml",
        &two_users("optimal", 0.15, "truncation = 12", "\n[costs]\nweights = [[0.0, 1.0], [5.0, 0.0]]\n"),
    );
    let out = tmp.path().join("out");
    let o = trafspread(&["verify", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = verify_report(&out);
    assert_eq!(status(&report, "delta-monotonicity"), "skipped");
    let detail = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "delta-monotonicity")
        .unwrap()["detail"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(detail.contains("precondition unmet"), "{detail}");
}

#[test]
fn overload_exits_with_the_instability_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "hot.toml",
        &two_users("none", 0.6, "max_backlog = 200", ""),
    );
    let o = trafspread(&["simulate", "--config", path_str(&cfg), "--out", path_str(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
