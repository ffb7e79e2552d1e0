use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stoknap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoknap")).args(args).current_dir(dir).env_remove("STOKNAP_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn gen_small(dir: &Path, name: &str, seed: &str) {
    let o = stoknap(&["gen", "random", "--n-base", "2", "--budget", "3", "--seed", seed, "-o", name], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "a.json", "9");
    gen_small(d.path(), "b.json", "9");
    assert_eq!(fs::read(d.path().join("a.json")).unwrap(), fs::read(d.path().join("b.json")).unwrap());
}

#[test]
fn seed_from_environment() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "a.json", "4");
    let o = Command::new(env!("CARGO_BIN_EXE_stoknap"))
        .args(["gen", "random", "--n-base", "2", "--budget", "3"])
        .env("STOKNAP_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, fs::read(d.path().join("a.json")).unwrap());
}

#[test]
fn exit_codes_for_bad_input() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.json"), "{\"expanded\": false}").unwrap();
    assert_eq!(code(&stoknap(&["solve", "bad.json", "--seed", "1"], d.path())), 1);
    assert_eq!(code(&stoknap(&["solve", "missing.json", "--seed", "1"], d.path())), 1);
    assert_eq!(code(&stoknap(&["solve", "bad.json"], d.path())), 1);
    assert_eq!(code(&stoknap(&["--help"], d.path())), 0);
    assert_eq!(code(&stoknap(&["gen", "random", "--n-base", "9", "--seed", "1"], d.path())), 1);
}

#[test]
fn violations_are_listed() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"{"expanded": false, "budget": 2, "reward_bound": 1,
        "base_items": [{"id": "a", "sizes": {"1": 0.7}, "rewards": {"1": 1}}],
        "objective": {"family": "additive", "params": {"weights": {"a": 1.0}}}}"#;
    fs::write(d.path().join("bad.json"), text).unwrap();
    let o = stoknap(&["solve", "bad.json", "--seed", "1"], d.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("a"));
}

#[test]
fn solve_simulate_trace_pipeline() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "i.json", "3");
    let o = stoknap(&["solve", "i.json", "--seed", "1", "-o", "s.json", "--report", "q.csv", "--lp-dump", "r.lp", "--iterations", "it.csv"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(d.path().join("s.json")).unwrap();
    stoknap(&["solve", "i.json", "--seed", "1", "-o", "s2.json"], d.path());
    assert_eq!(first, fs::read(d.path().join("s2.json")).unwrap());
    assert!(fs::read_to_string(d.path().join("r.lp")).unwrap().contains("Subject To"));
    assert!(fs::read_to_string(d.path().join("q.csv")).unwrap().starts_with("key,value"));

    let o = stoknap(&["simulate", "i.json", "s.json", "--runs", "20000", "--seed", "2"], d.path());
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",pass,0"), "{csv}");

    let a = stoknap(&["trace", "i.json", "s.json", "--seed", "5"], d.path());
    let b = stoknap(&["trace", "i.json", "s.json", "--seed", "5"], d.path());
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("order,item,slot,status"));
}

#[test]
fn verify_suites_report_rows() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "i.json", "8");
    for suite in ["polytope", "multilinear", "dp-ratio"] {
        let o = stoknap(&["verify", "i.json", "--suite", suite, "--seed", "3", "--runs", "5000", "--repetitions", "100"], d.path());
        assert_eq!(code(&o), 0, "{suite}: {}", String::from_utf8_lossy(&o.stdout));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("property,instance,estimate,stderr,threshold,verdict,trials"));
    }
}

#[test]
fn verify_fails_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "i.json", "3");
    stoknap(&["solve", "i.json", "--seed", "1", "-o", "s.json", "--b", "1.0", "--delta", "0.05"], d.path());
    // a full-time solution scaled by 1/0.5 leaves the polytope
    let o = stoknap(&["verify", "i.json", "--suite", "polytope", "--solution", "s.json", "--seed", "1"], d.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
}
