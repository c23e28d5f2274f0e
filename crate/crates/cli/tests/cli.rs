use std::path::Path;
use std::process::{Command, Output};

use meth::dressing::{dump_residual, DressingDump};
use meth::hierarchy::LatticeState;
use meth::report::Report;

fn meth(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meth")).args(args).current_dir(dir).output().expect("run meth")
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = meth(&["--print-config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("order = 10"));
    std::fs::write(dir.path().join("c.toml"), &text).unwrap();
    let again = meth(&["--config", "c.toml", "--print-config"], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(meth(&["verify", "--suite", "nonsense"], dir.path()).status.code(), Some(2));
    assert_eq!(meth(&["frobnicate"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(meth(&["--config", "bad.toml", "--print-config"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("neg.toml"), "tol_os = -1.0\n").unwrap();
    assert_eq!(meth(&["--config", "neg.toml", "dress"], dir.path()).status.code(), Some(2));
}

#[test]
fn resonant_epsilon_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // ε = 2π/3 puts mode 3 at a root of 1 − Λ.
    std::fs::write(dir.path().join("res.toml"), format!("epsilon = {}\n", 2.0 * std::f64::consts::PI / 3.0)).unwrap();
    let out = meth(&["--config", "res.toml", "dress", "--order", "4"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dressing_suite_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.json", "b.json"] {
        let out = meth(&["verify", "--suite", "dressing", "--seed", "7", "--out", name], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    }
    let a: Report = read(&dir.path().join("a.json"));
    let b: Report = read(&dir.path().join("b.json"));
    let strip = |r: &Report| serde_json::to_string(&r.without_timings()).unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert!(a.checks.iter().all(|c| !c.anchor.is_empty()));
    let shown = meth(&["report", "a.json"], dir.path());
    assert!(shown.status.success());
    assert!(String::from_utf8(shown.stdout).unwrap().contains("dressing.s7.recursion"));
}

#[test]
fn dress_dump_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    assert!(meth(&["dress", "--out", "d.json"], dir.path()).status.success());
    let d: DressingDump = read(&dir.path().join("d.json"));
    assert!(d.residual <= 1e-9 && d.conjugation[0] <= 1e-9);
    assert!((dump_residual(&d).unwrap() - d.stored_residual).abs() <= 1e-12);

    assert!(meth(&["dress", "--order", "0", "--out", "d0.json"], dir.path()).status.success());
    let d0: DressingDump = read(&dir.path().join("d0.json"));
    assert_eq!(d0.s.iter().count(), 1);
    assert!(d0.residual > 1e-3);
}

#[test]
fn evolve_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(meth(&["evolve", "--steps", "0", "--out", "z"], dir.path()).status.success());
    let init = LatticeState::random(meth::report::RunConfig::default().grid_spec(), 0.2, 1);
    let fin: LatticeState = read(&dir.path().join("z/final_state.json"));
    assert_eq!(fin.u, init.u);
    assert_eq!(fin.v, init.v);

    assert!(meth(&["evolve", "--steps", "20", "--dt", "0.01", "--order", "4", "--out", "t"], dir.path()).status.success());
    let csv = std::fs::read_to_string(dir.path().join("t/trajectory.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21);
    for col in 2..5 {
        let first = rows[0][col];
        assert!(rows.iter().all(|r| (r[col] - first).abs() <= 1e-8 * first.abs().max(1.0)), "column {col}");
    }
}

#[test]
fn spatial_flow_is_a_translation() {
    let dir = tempfile::tempdir().unwrap();
    let out = meth(&["evolve", "--flow", "1,0", "--steps", "10", "--dt", "0.05", "--order", "4", "--out", "x"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let init = LatticeState::random(meth::report::RunConfig::default().grid_spec(), 0.2, 1);
    let fin: LatticeState = read(&dir.path().join("x/final_state.json"));
    // t_{1,0} = 2ε∂_x: after time T the fields are shifted by 2εT.
    let shift = 2.0 * 0.1 * 0.5;
    for x in [0.0, 0.7, 2.0, 4.5] {
        assert!((fin.u.eval(x) - init.u.eval(x + shift)).norm() < 1e-8);
        assert!((fin.v.eval(x) - init.v.eval(x + shift)).norm() < 1e-8);
    }
}

#[test]
fn state_file_overrides_seed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(meth(&["evolve", "--steps", "0", "--seed", "5", "--out", "s"], dir.path()).status.success());
    assert!(meth(&["dress", "--state", "s/final_state.json", "--out", "a.json"], dir.path()).status.success());
    assert!(meth(&["dress", "--seed", "5", "--out", "b.json"], dir.path()).status.success());
    let a: DressingDump = read(&dir.path().join("a.json"));
    let b: DressingDump = read(&dir.path().join("b.json"));
    assert_eq!(a.u, b.u);
    assert_eq!(a.s, b.s);
}
