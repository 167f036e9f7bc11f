use std::fs;
use std::path::Path;

use nonlocal_ramsey::config::parse_config;
use nonlocal_ramsey::run::run;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn twice(text: &str) {
    let cfg = parse_config(text).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&cfg, a.path()).unwrap();
    let rb = run(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn calculus_reports_are_byte_identical() {
    twice("mode = verify-calculus\nh = 0.05\nsamples = 20\nseed = 42\n");
}

#[test]
fn solve_outputs_are_byte_identical() {
    twice("mode = solve\nh = 0.05\nsteps = 10\na0 = gaussian:1,0.5,0.3\ncontrol = 0.3\n");
}

#[test]
fn optimize_outputs_are_byte_identical() {
    twice("mode = optimize\nh = 0.1\nsteps = 5\nk_target = 1.5\nrho = 0.1\nc_max = 1\nc_init = 0.5\nopt_tol = 1e-5\n");
}
