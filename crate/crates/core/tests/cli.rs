use std::fs;
use std::path::Path;
use std::process::Command;

fn nlramsey(config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_nlramsey"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8(o.stdout).unwrap())
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SOLVE: &str = "mode = solve\nupper = 1\nepsilon = 0.2\nh = 0.05\nsteps = 10\n\
a0 = gaussian:1,0.5,0.3\nk0 = constant:1\ncontrol = constant:0.2\n";

#[test]
fn solve_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", SOLVE);
    let out = dir.path().join("out");
    let (code, stdout) = nlramsey(&cfg, &out, &[]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.starts_with("picard:"));
    for f in ["grid.csv", "trajectory.csv", "picard_report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert!(grid.starts_with("idx,x1,weight,region"));
}

#[test]
fn file_inputs_round_trip_through_a_solve() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let (code, _) = nlramsey(&write(dir.path(), "a.cfg", SOLVE), &first, &[]);
    assert_eq!(code, 0);
    // final state of the first run as a `value` column on the grid
    let traj = fs::read_to_string(first.join("trajectory.csv")).unwrap();
    let mut last = Vec::new();
    for line in traj.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "10" {
            last.push((f[2].to_string(), f[4].to_string()));
        }
    }
    let grid = fs::read_to_string(first.join("grid.csv")).unwrap();
    let mut csv = String::from("idx,x1,weight,region,value\n");
    for (line, (idx, k)) in grid.lines().skip(1).zip(&last) {
        assert!(line.starts_with(&format!("{idx},")));
        csv.push_str(&format!("{line},{k}\n"));
    }
    write(dir.path(), "k0.csv", &csv);
    let cfg = SOLVE.replace("k0 = constant:1", "k0 = file:k0.csv");
    let (code, stdout) = nlramsey(&write(dir.path(), "b.cfg", &cfg), &dir.path().join("second"), &[]);
    assert_eq!(code, 0, "{stdout}");
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, _) = nlramsey(&write(dir.path(), "bad.cfg", "epsilon = 0.2\n"), &out, &[]);
    assert_eq!(code, 1, "missing mode");
    let (code, _) = nlramsey(&write(dir.path(), "mu.cfg", "mode = solve\nmu = 0.5\n"), &out, &[]);
    assert_eq!(code, 1, "mu outside (0, epsilon)");
    let (code, _) = nlramsey(&dir.path().join("absent.cfg"), &out, &[]);
    assert_eq!(code, 4, "unreadable config");
    let stiff = "mode = solve\nsteps = 1\nmax_iter = 2\npicard_tol = 1e-15\na0 = constant:5\nlambda_p = 50\n";
    let (code, _) = nlramsey(&write(dir.path(), "stiff.cfg", stiff), &out, &[]);
    assert_eq!(code, 2, "Picard budget exhausted on a one-step window");
}

#[test]
fn verify_kernel_prints_one_line_per_property() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "k.cfg", "mode = verify-kernel\ndim = 2\nlower = 0,0\nupper = 1,1\nh = 0.05\n");
    let (code, stdout) = nlramsey(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 5);
}

#[test]
fn sweep_runs_each_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SOLVE}mode = sweep\nsweep_param = beta\nsweep_values = 0.5,1,2\nsweep_mode = solve\n")
        .replacen("mode = solve\n", "", 1);
    let out = dir.path().join("out");
    let (code, stdout) = nlramsey(&write(dir.path(), "s.cfg", &cfg), &out, &[]);
    assert_eq!(code, 0, "{stdout}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(out.join("sweep_002").join("trajectory.csv").exists());
}
