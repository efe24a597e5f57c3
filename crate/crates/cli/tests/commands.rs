use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[gen]
t_bar = 0
settlement = 2
[[gen.subsidiaries]]
types = 1
increments = [{ independent = [[[0.5, 1.2], [0.5, -0.8]]] }, { independent = [[[0.5, 1.5], [0.5, 0.5]]] }]
[[gen.subsidiaries]]
types = 1
increments = [{ independent = [[[0.5, 1.0], [0.5, -0.5]]] }, { deterministic = [0.1] }]

[constraints]
k0 = 2.0
eps_quad = 0.2
delta = 0.5
market = [{ kind = "constant", upper = 3.0 }]

[basic]
sigma2 = 2.0
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_equity-alloc"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

#[test]
fn generated_instance_verifies() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), BASE, &["generate"]).status.code(), Some(0));
    assert!(dir.path().join("out/generate/tree.csv").exists());
    assert_eq!(run(dir.path(), BASE, &["verify"]).status.code(), Some(0));
}

#[test]
fn solvers_succeed_and_report() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["solve-basic", "solve-quadratic", "solve-relaxed", "spectrum"] {
        let o = run(dir.path(), BASE, &[cmd]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let q = std::fs::read_to_string(dir.path().join("out/quadratic/summary.txt")).unwrap();
    assert!(q.contains("status                optimal"));
    let header = std::fs::read_to_string(dir.path().join("out/relaxed/degeneracy_basis.csv")).unwrap();
    assert!(header.starts_with("direction,coordinate,value\n"));
    // verify now checks the stored quadratic solution
    let o = run(dir.path(), BASE, &["verify"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(run(dir.path(), BASE, &["report"]).status.code(), Some(0));
    assert!(dir.path().join("out/report.txt").exists());
}

#[test]
fn infeasible_is_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[gen]
t_bar = 0
settlement = 1
[[gen.subsidiaries]]
types = 1
increments = [{ independent = [[[0.5, 0.6], [0.5, -1.4]]] }]
[basic]
k0 = 1.0
roe_floor = 0.1
sigma2 = 1.0
"#;
    let o = run(dir.path(), cfg, &["solve-basic"]);
    assert_eq!(o.status.code(), Some(1));
    let s = std::fs::read_to_string(dir.path().join("out/basic/summary.txt")).unwrap();
    assert!(s.contains("infeasible"));
}

#[test]
fn config_errors_are_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &BASE.replace("[basic]", "[basic]\nsigma = 1"), &["solve-basic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
    let o = run(dir.path(), "[gen]\nt_bar = 0\n", &["generate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &BASE.replace("[basic]\nsigma2 = 2.0", ""), &["solve-basic"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), BASE, &["report"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn epsilon_sum_violation_names_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("eps_quad = 0.2", "eps_quad = 0.6\nruin_tol = 1.0");
    let o = run(dir.path(), &cfg, &["verify"]);
    assert_eq!(o.status.code(), Some(1));
    let s = std::fs::read_to_string(dir.path().join("out/verify/summary.txt")).unwrap();
    assert!(s.lines().any(|l| l.starts_with("FAIL  epsilon_sums")), "{s}");
}

#[test]
fn copied_utility_fails_h3_with_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[gen]
t_bar = 1
settlement = 1
[[gen.subsidiaries]]
types = 1
increments = [{ independent = [[[0.5, 1.0], [0.5, -1.0]]] }]
[[copy_final]]
j = 0
from = 0
to = 1
"#;
    let o = run(dir.path(), cfg, &["verify"]);
    assert_eq!(o.status.code(), Some(1));
    let s = std::fs::read_to_string(dir.path().join("out/verify/summary.txt")).unwrap();
    let h3 = s.lines().find(|l| l.contains("h3")).unwrap();
    assert!(h3.starts_with("FAIL") && h3.contains("k=0") && h3.contains("k=1"), "{h3}");
}

#[test]
fn dividend_volatility_refusal_is_named() {
    let dir = tempfile::tempdir().unwrap();
    // fixed dividends with no run-off: V(ΣD) > 0 = V(U) for the empty portfolio
    let cfg = format!("{BASE}\n[policy]\nkind = \"table\"\nvalues = [0, 0.5, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]\n");
    let o = run(dir.path(), &cfg, &["solve-quadratic"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let s = std::fs::read_to_string(dir.path().join("out/quadratic/summary.txt")).unwrap();
    assert!(s.contains("dividend_volatility"), "{s}");
}

#[test]
fn fixed_seed_gives_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        for cmd in ["generate", "solve-basic", "solve-quadratic", "solve-relaxed", "spectrum"] {
            run(d.path(), BASE, &[cmd, "--seed", "17"]);
        }
    }
    let mut compared = 0;
    for sub in ["generate", "basic", "quadratic", "relaxed", "spectrum"] {
        for e in std::fs::read_dir(a.path().join("out").join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "csv") {
                let q = b.path().join("out").join(sub).join(p.file_name().unwrap());
                assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
                compared += 1;
            }
        }
    }
    assert!(compared >= 10);
}
