use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_visifilter"));
    c.env_remove("VISIFILTER_SEED");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_outputs_and_metrics_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", scenario("example3.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["--set", "duration=3.0"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics_text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&metrics_text).unwrap();
    assert!(metrics["min_w"].as_f64().unwrap() >= 5.0);
    assert_eq!(metrics["breaches"], 0);

    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,q0,q1,q2,w,w_hat,h1_min,h2_min,h3_min,h4_min,h5_min,h6,v_ref0"));
    assert_eq!(csv.lines().count(), 302);

    let replay = bin().args(["metrics", dir.path().join("trace.csv").to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&replay), 0);
    assert_eq!(String::from_utf8(replay.stdout).unwrap().trim_end(), metrics_text.trim_end());

    // Re-running the resolved scenario reproduces the trace byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    let again = bin()
        .args(["run", dir.path().join("resolved_scenario.json").to_str().unwrap(), "--out", dir2.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read(dir.path().join("trace.csv")).unwrap(), std::fs::read(dir2.path().join("trace.csv")).unwrap());
}

#[test]
fn malformed_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"schema_version\": 1,\n  \"duration\": \n}").unwrap();
    let out = bin().args(["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn unknown_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", scenario("example3.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["--set", "filter.bogus=1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn zero_duration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", scenario("example3.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["--set", "duration=0.0"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("duration > 0"));
}

#[test]
fn infeasible_start_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", scenario("example3.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["--set", "filter.w_min=25"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("infeasible"));
}

#[test]
fn seed_variable_changes_the_draw() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, seed: Option<&str>| {
        let mut c = bin();
        c.args(["run", scenario("example3_baseline.json").to_str().unwrap(), "--out", dir.to_str().unwrap()])
            .args(["--set", "duration=0.5"]);
        if let Some(s) = seed {
            c.env("VISIFILTER_SEED", s);
        }
        c.output().unwrap()
    };
    assert_eq!(code(&run(a.path(), None)), 0);
    assert_eq!(code(&run(b.path(), Some("12345"))), 0);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.path().join("resolved_scenario.json")).unwrap()).unwrap();
    assert_eq!(resolved["landmarks"]["seed"], 12345);
    assert_eq!(resolved["filter"]["seed"], 12345);
    assert_ne!(std::fs::read(a.path().join("trace.csv")).unwrap(), std::fs::read(b.path().join("trace.csv")).unwrap());
    assert_eq!(code(&run(b.path(), Some("abc"))), 2);
}

#[test]
fn check_equivalence_passes() {
    let out = bin().args(["check", "equivalence"]).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn check_unknown_suite_exits_2() {
    let out = bin().args(["check", "bogus"]).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn serve_requires_external_reference() {
    let out = bin().args(["serve", scenario("example3.json").to_str().unwrap(), "--port", "0"]).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn serve_on_busy_port_exits_4() {
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port().to_string();
    let out = bin().args(["serve", scenario("teleop.json").to_str().unwrap(), "--port", &port]).output().unwrap();
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn serve_streams_state() {
    let mut child = bin()
        .args(["serve", scenario("teleop.json").to_str().unwrap(), "--port", "0"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(stdout), &mut line).unwrap();
    let addr = line.split("http://").nth(1).unwrap().split_whitespace().next().unwrap().to_string();
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    std::io::Write::write_all(&mut stream, format!("GET /scenario HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes())
        .unwrap();
    let mut body = String::new();
    std::io::Read::read_to_string(&mut stream, &mut body).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"));
    assert!(body.contains("\"external\""));
}
