use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spinforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinforge"))
        .args(args)
        .env_remove("SPINFORGE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spinforge")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim());
    assert!(dir.join("manifest.toml").is_file());
    dir
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn optimize_then_evaluate_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let opt = run_dir(&spinforge(&[
        "optimize",
        "--gate",
        "i-x",
        "--output-dir",
        out,
        "--master-seed",
        "5",
        "--optimization.restarts",
        "1",
        "--optimization.max_iterations",
        "15",
    ]));
    let summary = read(&opt, "optimization_summary.csv");
    assert!(summary.starts_with("stage,j1,j2,fluence_mT2us,xi,total"));
    assert_eq!(summary.lines().count(), 3);
    assert!(read(&opt, "trace_stage1.csv").lines().count() > 2);

    let pulse = opt.join("i-x.pulse");
    let pulse = pulse.to_str().unwrap();
    let eval = run_dir(&spinforge(&[
        "evaluate",
        "--gate",
        "i-x",
        "--pulse",
        pulse,
        "--output-dir",
        out,
        "-n",
        "12",
    ]));
    let table = read(&eval, "evaluation.csv");
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "gate,filtered,sigma_MHz,alpha_t0_MHz,mean_infidelity,std_error,n,j1"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "i-x");
    assert_eq!(row[6], "12");
    let mean: f64 = row[4].parse().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    // the manifest replays the run bit for bit
    let manifest = eval.join("manifest.toml");
    let again = run_dir(&spinforge(&["--config", manifest.to_str().unwrap()]));
    assert_ne!(again, eval);
    assert_eq!(read(&again, "evaluation.csv"), table);
}

#[test]
fn seed_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let pulse = tmp.path().join("x.pulse");
    let c = spinforge::pulse::PulseParameterization::new(vec![0.2, 0.1], vec![0.0, -0.1], 200.0)
        .unwrap();
    fs::write(&pulse, c.to_text()).unwrap();
    let seed_of = |extra: &[&str]| {
        let mut args = vec![
            "evaluate",
            "--gate",
            "i-x",
            "--pulse",
            pulse.to_str().unwrap(),
            "--output-dir",
            out,
            "-n",
            "2",
        ];
        args.extend_from_slice(extra);
        let res = Command::new(env!("CARGO_BIN_EXE_spinforge"))
            .args(&args)
            .env("SPINFORGE_SEED", "4")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        let dir = run_dir(&res);
        let manifest = read(&dir, "manifest.toml");
        manifest
            .lines()
            .find_map(|l| l.strip_prefix("master_seed = "))
            .unwrap()
            .to_string()
    };
    assert_eq!(seed_of(&[]), "4");
    assert_eq!(seed_of(&["--master-seed", "9"]), "9");
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let out = spinforge(&["evaluate", "--system.t0-mhz", "-5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.t0_mhz"));

    let out = spinforge(&["evaluate", "--noise.bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = spinforge(&["not-a-command"]);
    assert_eq!(out.status.code(), Some(2));
}
