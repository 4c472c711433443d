use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn favlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_favlab")).args(args).env_remove("FAVLAB_THREADS").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn unit_segment(dir: &Path) -> String {
    let o = favlab(&["generate", "segments", "--offsets", "0", "--lengths", "1", "--out", path(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    path(&dir.join("set.json")).to_string()
}

#[test]
fn generate_writes_set_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let o = favlab(&["generate", "cantor4", "--n", "3", "--h", "1e-2", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("64 primitives"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("set.json")).unwrap()).unwrap();
    let prims = json["primitives"].as_array().unwrap();
    assert_eq!(prims.len(), 64);
    assert!(prims.iter().all(|p| p["kind"] == "box"));
    let sample = fs::read_to_string(dir.path().join("sample.csv")).unwrap();
    assert!(sample.starts_with("# "));
    assert!(sample.lines().any(|l| l == "x,y,w"));
}

#[test]
fn bad_input_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = favlab(&["generate", "cantor4", "--n", "0", "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));
    let o = favlab(&["favard", path(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
    let o = favlab(&["verify", "-p", "kind=staircase", "-p", "eps=1.5", "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("eps"));
    assert_eq!(code(&favlab(&["no-such-command"])), 2);
    assert_eq!(code(&favlab(&["verify", "-p", "nokey", "--out", path(dir.path())])), 2);
}

#[test]
fn favard_and_projection_of_a_segment() {
    let dir = tempfile::tempdir().unwrap();
    let set = unit_segment(dir.path());
    let o = favlab(&["favard", &set, "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let value: f64 = stdout(&o).trim().strip_prefix("favard = ").unwrap().parse().unwrap();
    assert!((value - 2.0 / std::f64::consts::PI).abs() < 1e-3);
    assert!(dir.path().join("favard.csv").exists());
    assert!(fs::read_to_string(dir.path().join("favard.svg")).unwrap().starts_with("<svg"));

    let o = favlab(&["project", &set, "--theta", "0.125", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sup: f64 = stdout(&o).rsplit("sup density = ").next().unwrap().trim().parse().unwrap();
    assert!((sup - std::f64::consts::SQRT_2).abs() < 0.05 * std::f64::consts::SQRT_2);
    assert!(dir.path().join("density.csv").exists());
}

fn small_verify(out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_favlab"));
    cmd.args(["verify", "-p", "kind=staircase", "-p", "h=5e-4", "-p", "gap_lemma=false", "--out", path(out)]);
    cmd.env_remove("FAVLAB_THREADS");
    match threads {
        Some(t) => cmd.env("FAVLAB_THREADS", t),
        None => cmd.args(["--threads", "1"]),
    };
    cmd.output().unwrap()
}

#[test]
fn verify_is_deterministic_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = small_verify(a.path(), None);
    let ob = small_verify(b.path(), Some("4"));
    assert_eq!(code(&oa), 0, "{}{}", stdout(&oa), stderr(&oa));
    assert_eq!(code(&ob), 0);
    let mut names: Vec<String> =
        fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.len() >= 10, "{names:?}");
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n} differs");
    }
    let checks = fs::read_to_string(a.path().join("checks.csv")).unwrap();
    assert!(checks.contains("gap_lemma,skipped"), "{checks}");
}

#[test]
fn energies_and_corona_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, "# cantor set\nkind = cantor4\nn = 2\nh = 1e-3\ndepth = 3\nwith_j = true\n").unwrap();
    let o = favlab(&["energies", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let energies = fs::read_to_string(dir.path().join("energies.csv")).unwrap();
    assert!(energies.contains("# kind = cantor4\n") && energies.contains("# with_j = true\n"));
    let o = favlab(&["corona", "--config", path(&config), "-p", "delta=2", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("trees"));
    assert!(dir.path().join("tree_bounds.csv").exists());
    assert!(dir.path().join("lattice.jsonl").exists());
}

#[test]
fn iterate_directions_reaches_density() {
    let dir = tempfile::tempdir().unwrap();
    let o = favlab(&["iterate-directions", "--j0", "0:0", "--g", "depth=4;hex=f000", "--s", "0.5", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("k0 = "));
    let last = fs::read_to_string(dir.path().join("g_final.txt")).unwrap();
    assert!(last.ends_with("\ndepth=4;hex=ffff\n"));
    assert_eq!(code(&favlab(&["iterate-directions", "--j0", "9", "--g", "depth=4;hex=f000"])), 2);
}

#[test]
fn standard_corpus_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = favlab(&["verify", "--corpus", "standard", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);
    let table = fs::read_to_string(dir.path().join("corpus.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn mutation_flips_its_checker() {
    let dir = tempfile::tempdir().unwrap();
    let o = favlab(&["verify", "--corpus", "mutations", "--mutation", "g-below-window", "--out", path(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("FAIL g_window (g-below-window)"), "{}", stderr(&o));
    assert!(dir.path().join("g-below-window").join("checks.csv").exists());
}
