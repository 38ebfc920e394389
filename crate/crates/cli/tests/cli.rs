use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chordal-verify"))
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

fn identity_net(dir: &Path) -> PathBuf {
    let path = dir.join("id.json");
    let text = r#"{"dims":[2,2,2],"activation":"relu",
        "weights":[[[1,0],[0,1]],[[1,0],[0,1]]],
        "biases":[[0,0],[0,0]]}"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_exit_codes_follow_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let net = identity_net(dir.path());
    let out = dir.path().join("res.json");
    let csv = dir.path().join("runs.csv");
    let ok = run(&[
        "verify",
        "--net",
        s(&net),
        "--box",
        "0",
        "1",
        "--spec",
        "l2gain:10",
        "--mode",
        "chordal",
        "--out",
        s(&out),
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["certified"], true);
    assert_eq!(v["status"], "certified");
    assert!(v["lambda_max"].as_f64().unwrap() <= 1e-6);

    let no = run(&[
        "verify",
        "--net",
        s(&net),
        "--box",
        "0",
        "1",
        "--spec",
        "l2gain:0.5",
        "--max-iter",
        "300",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&no), 2, "{}", stderr(&no));
    let v: Value = serde_json::from_slice(&no.stdout).unwrap();
    assert_eq!(v["certified"], false);

    let rows = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "net,beta,mode,iters,wall_time,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(",certified"));
    assert!(lines[2].ends_with(",max_iter_reached"));
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let net = identity_net(dir.path());
    let o = run(&[
        "verify",
        "--net",
        s(&net),
        "--box",
        "0",
        "1",
        "--beta",
        "-1",
    ]);
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("beta = -1 is out of range"),
        "{}",
        stderr(&o)
    );

    let o = run(&[
        "verify",
        "--net",
        s(&dir.path().join("missing.json")),
        "--box",
        "0",
        "1",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"));

    let o = run(&["verify", "--net", s(&net), "--box", "1", "0"]);
    assert_eq!(code(&o), 1);

    let o = run(&[
        "verify",
        "--net",
        s(&net),
        "--box",
        "0",
        "1",
        "--mode",
        "sparse",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sparsity_reports_the_clique_count() {
    let o = run(&[
        "sparsity",
        "--dims",
        "3,3,3,3,3,3",
        "--out-dim",
        "3",
        "--beta",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["p"], 3);
    assert_eq!(v["cliques"].as_array().unwrap().len(), 3);
    assert_eq!(v["double_cliques"].as_array().unwrap().len(), 3);
    assert_eq!(v["dim"], 19);
    for beta in ["0", "2"] {
        let o = run(&[
            "sparsity",
            "--dims",
            "3,3,3,3,3,3",
            "--out-dim",
            "3",
            "--beta",
            beta,
        ]);
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["p"], 4);
    }
}

#[test]
fn gen_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let nets = dir.path().join("nets");
    let o = run(&["gen", "--widths", "3", "--depths", "2,4", "--out", s(&nets)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for d in [2, 4] {
        let text = std::fs::read_to_string(nets.join(format!("w3_d{d}.json"))).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["dims"].as_array().unwrap().len(), d + 2);
    }
    let sdpa = dir.path().join("p.dat-s");
    let o = run(&[
        "export",
        "--net",
        s(&nets.join("w3_d4.json")),
        "--box",
        "-1",
        "1",
        "--beta",
        "1",
        "--out",
        s(&sdpa),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = chordal_verify::sdpcore::read_sdpa(&sdpa).unwrap();
    assert!(data.nvars > 0);
    assert!(data.block_sizes.len() >= 2);
}

#[test]
fn reach_writes_results_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let net = identity_net(dir.path());
    let out = dir.path().join("reach.json");
    let o = run(&[
        "reach",
        "--net",
        s(&net),
        "--box",
        "0.5",
        "1.5",
        "--beta",
        "0,1",
        "--samples",
        "200",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let results = v.as_array().unwrap();
    assert_eq!(results.len(), 2);
    let r0 = results[0]["rho_star"].as_f64().unwrap();
    let r1 = results[1]["rho_star"].as_f64().unwrap();
    assert!(r1 <= r0 * (1.0 + 1e-6));
    let samples = std::fs::read_to_string(dir.path().join("reach.samples.csv")).unwrap();
    let mut lines = samples.lines();
    assert_eq!(lines.next(), Some("x0,x1,y0,y1"));
    assert_eq!(lines.count(), 200);
}
