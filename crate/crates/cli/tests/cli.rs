use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dapo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const T2: &str = r#"{
  "states": [
    {"id": "root", "terminal": false},
    {"id": "s1", "terminal": false},
    {"id": "s2", "terminal": false},
    {"id": "win", "terminal": true, "reward": 1},
    {"id": "lose", "terminal": true, "reward": 0},
    {"id": "z0", "terminal": true, "reward": 0},
    {"id": "z1", "terminal": true, "reward": 0}
  ],
  "transitions": [
    {"from": "root", "action": "left", "to": "s1"},
    {"from": "root", "action": "right", "to": "s2"},
    {"from": "s1", "action": "a_win", "to": "win"},
    {"from": "s1", "action": "a_lose", "to": "lose"},
    {"from": "s2", "action": "a0", "to": "z0"},
    {"from": "s2", "action": "a1", "to": "z1"}
  ],
  "mu": [{"state": "root", "prob": 1.0}],
  "horizon_bound": 2
}"#;

#[test]
fn validate_reports_every_violation_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t2.json"), T2).unwrap();
    assert_eq!(code(&dapo(dir.path(), &["validate", "t2.json"])), 0);

    let bad = T2.replace(r#""to": "lose""#, r#""to": "root""#).replace(r#""prob": 1.0"#, r#""prob": 0.9"#);
    fs::write(dir.path().join("bad.json"), bad).unwrap();
    let o = dapo(dir.path(), &["validate", "bad.json"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cycle"), "{err}");
    assert!(err.contains("sums to 0.9"), "{err}");
}

#[test]
fn gen_mdp_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-mdp", "--depth", "3", "--branching", "3", "--width-cap", "4", "--seed", "9"];
    let a = dapo(dir.path(), &args);
    let b = dapo(dir.path(), &args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    fs::write(dir.path().join("g.json"), &a.stdout).unwrap();
    assert_eq!(code(&dapo(dir.path(), &["validate", "g.json"])), 0);
    let capped = dapo(dir.path(), &["gen-mdp", "--depth", "12", "--branching", "4", "--state-cap", "100"]);
    assert_eq!(code(&capped), 2);
}

#[test]
fn exact_dapo_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("t2.json"), T2).unwrap();

    let o = dapo(p, &["values", "t2.json", "--beta", "1", "--optimal", "--out", "opt.csv"]);
    assert_eq!(code(&o), 0);
    let opt = fs::read_to_string(p.join("opt.csv")).unwrap();
    let s1 = opt.lines().find(|l| l.starts_with("s1,,")).unwrap();
    let v: f64 = s1.split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 0.620115).abs() < 1e-6);

    assert_eq!(code(&dapo(p, &["dapo", "build", "t2.json", "--full", "--out", "ds.csv"])), 0);
    let ds = fs::read_to_string(p.join("ds.csv")).unwrap();
    assert!(ds.starts_with("state,action,a_hat,source"));
    assert!(ds.contains("s1,a_win,0.5,exact"));
    assert!(!ds.contains("s2,"));

    assert_eq!(code(&dapo(p, &["dapo", "solve-exact", "t2.json", "--dataset", "ds.csv", "--out", "sol.csv"])), 0);
    let sol = fs::read_to_string(p.join("sol.csv")).unwrap();
    assert!(sol.starts_with("state,action,u_plus,lambda_star"));

    assert_eq!(code(&dapo(p, &["dapo", "train", "t2.json", "--dataset", "ds.csv", "--out", "pol.csv"])), 0);
    let pol = fs::read_to_string(p.join("pol.csv")).unwrap();
    let logit = |a: &str| -> f64 {
        let line = pol.lines().find(|l| l.starts_with(&format!("s1,{a},"))).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    let p_win = 1.0 / (1.0 + (logit("a_lose") - logit("a_win")).exp());
    assert!((p_win - 0.714).abs() < 2e-3, "{p_win}");
}

#[test]
fn critic_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("t2.json"), T2).unwrap();
    assert_eq!(code(&dapo(p, &["critic", "estimate", "t2.json", "--n", "4096", "--out", "t.csv"])), 0);
    assert_eq!(code(&dapo(p, &["critic", "train", "t2.json", "--targets", "t.csv", "--out", "c.csv"])), 0);
    let o = dapo(p, &["critic", "accuracy", "t2.json", "--critic", "c.csv"]);
    assert_eq!(code(&o), 0);
    let worst = String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(worst < 0.05);
    let o = dapo(p, &["dapo", "build", "t2.json", "--source", "critic", "--critic", "c.csv", "--m", "16"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains(",critic,"));
    let missing = dapo(p, &["dapo", "build", "t2.json", "--source", "critic"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn verify_exit_codes_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = dapo(p, &["verify", "--suite", "pdl", "--instances", "5", "--out", "verify.csv"]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(p.join("verify.csv")).unwrap().starts_with("check_name,instances,max_residual"));
    assert_eq!(code(&dapo(p, &["verify", "--suite", "nope"])), 2);
}

#[test]
fn run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("cfg.json"),
        r#"{"mdp": {"kind": "builtin", "name": "t2"}, "pipeline": {"iterations": 3}, "master_seed": 5}"#,
    )
    .unwrap();
    let a = dapo(p, &["run", "--config", "cfg.json", "--out", "a"]);
    let b = dapo(p, &["run", "--config", "cfg.json", "--out", "b"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(p.join("a/manifest.json")).unwrap(), fs::read(p.join("b/manifest.json")).unwrap());

    let o = dapo(p, &["report", "a"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches(" ok").count(), 3);
    assert!(p.join("a/report.csv").exists());

    fs::write(
        p.join("a/verify.csv"),
        "check_name,instances,max_residual,tolerance,passed,failures\npdl,1,1.0,1e-9,false,0:1\n",
    )
    .unwrap();
    assert_eq!(code(&dapo(p, &["report", "a"])), 1);
    fs::remove_file(p.join("a/iter2/policy.csv")).unwrap();
    assert_eq!(code(&dapo(p, &["report", "a"])), 2);

    fs::write(p.join("zero.json"), r#"{"mdp": {"kind": "builtin", "name": "t2"}, "pipeline": {"iterations": 0}}"#).unwrap();
    assert_eq!(code(&dapo(p, &["run", "--config", "zero.json", "--out", "z"])), 2);
}

#[test]
fn iterate_writes_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("t2.json"), T2).unwrap();
    let o = dapo(p, &["dapo", "iterate", "t2.json", "--iterations", "2", "--out", "it"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("it/iter2/policy.csv").exists());
}
