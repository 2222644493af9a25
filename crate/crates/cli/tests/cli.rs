//! End-to-end tests of the `popmix` binary: reproducibility, error paths,
//! and the shapes of the files each command writes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_popmix"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn simulate_is_byte_identical_under_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(&["simulate", "--seed", "42", "--out", out.to_str().unwrap()]);
        assert_ok(&res);
    }
    let left = read(a.join("dataset.csv"));
    assert_eq!(left, read(b.join("dataset.csv")));
    assert!(left.starts_with("id,time,value,dose\n"));
    // 32 individuals, 8 observations each, plus the header.
    assert_eq!(left.lines().count(), 32 * 8 + 1);
    // A different seed must move the data.
    let c = dir.path().join("c");
    assert_ok(&run(&["simulate", "--seed", "43", "--out", c.to_str().unwrap()]));
    assert_ne!(left, read(c.join("dataset.csv")));
}

#[test]
fn simulate_event_preset_censors_at_the_configured_time() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"preset": "weibull-tte", "n_individuals": 12}"#,
    );
    let out = dir.path().join("out");
    assert_ok(&run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = read(out.join("dataset.csv"));
    assert!(text.starts_with("id,time,event\n"));
    let censor_rows: Vec<&str> = text.lines().filter(|l| l.ends_with(",0")).collect();
    assert_eq!(censor_rows.len(), 12, "one censoring row per individual");
    assert!(censor_rows.iter().all(|l| l.contains(",20,")));
}

#[test]
fn sample_with_zero_iterations_writes_empty_trace_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"n_individuals": 2, "sampler": {"kernels": ["rwm_cycle"], "n_iter": 0}}"#,
    );
    let out = dir.path().join("out");
    let res = run(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = read(out.join("chain_rwm_cycle_1.csv"));
    assert_eq!(text.lines().count(), 1, "header only: {text}");
    assert!(!out.join("summary_rwm_cycle_1.csv").exists());
    let manifest = read(out.join("manifest.json"));
    assert!(manifest.contains("skipped"), "{manifest}");
}

#[test]
fn unknown_kernel_tag_fails_before_writing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"sampler": {"kernels": ["warp"], "n_iter": 10}}"#,
    );
    let out = dir.path().join("out");
    let res = run(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("warp"), "{stderr}");
    assert!(!out.join("dataset.csv").exists());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn unknown_config_field_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"sede": 12}"#);
    let res = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("sede"), "{stderr}");
}

#[test]
fn sample_outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"n_individuals": 4, "sampler": {"kernels": ["rwm_cycle", "nlme_imh"], "n_iter": 120}}"#,
    );
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    for (threads, out) in [("1", &one), ("4", &many)] {
        let res = run(&[
            "sample",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "9",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
    }
    for kernel in ["rwm_cycle", "nlme_imh"] {
        for id in 1..=4 {
            let name = format!("chain_{kernel}_{id}.csv");
            assert_eq!(read(one.join(&name)), read(many.join(&name)), "{name}");
        }
    }
}

#[test]
fn fit_shows_the_kernel_switch_and_honors_multiple_inits() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "n_individuals": 4,
            "saem": {
                "algorithm": "fsaem",
                "n_iter": 30,
                "burn": 15,
                "switch_after": 20,
                "inits": [
                    {"psi_pop": [1.0, 8.0, 0.1]},
                    {"psi_pop": [2.0, 12.0, 0.05]},
                    {"psi_pop": [0.5, 5.0, 0.2]}
                ]
            }
        }"#,
    );
    let out = dir.path().join("out");
    let res = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "21",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    for i in 1..=3 {
        let text = read(out.join(format!("fit_{i}.csv")));
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("iter,gamma,kernel,ka_pop,v_pop,k_pop"));
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let iter: usize = fields[0].parse().unwrap();
            let expected = if iter <= 20 { "nlme_imh" } else { "rwm_cycle" };
            assert_eq!(fields[2], expected, "iteration {iter} of fit_{i}");
        }
    }
    let estimates = read(out.join("estimates.json"));
    let parsed: serde_json::Value = serde_json::from_str(&estimates).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 3);
}

#[test]
fn fit_reads_a_dataset_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert_ok(&run(&["simulate", "--seed", "4", "--out", sim.to_str().unwrap()]));
    let data_path = sim.join("dataset.csv");
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"data": {:?}, "saem": {{"n_iter": 12, "burn": 6}}}}"#,
            data_path.to_str().unwrap()
        ),
    );
    let out = dir.path().join("out");
    let res = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    // Reading from disk, nothing should be re-simulated.
    assert!(!out.join("dataset.csv").exists());
    assert_eq!(read(out.join("fit_1.csv")).lines().count(), 13);
}

#[test]
fn mcstudy_is_deterministic_and_ends_curves_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "n_individuals": 3,
            "mcstudy": {"replicates": 2, "n_iter": 10},
            "saem": {"burn": 5}
        }"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(&[
            "mcstudy",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "33",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
    }
    for algo in ["saem", "fsaem"] {
        let name = format!("distance_{algo}.csv");
        let left = read(a.join(&name));
        assert_eq!(left, read(b.join(&name)), "{name}");
        assert!(left.starts_with("iter,component,value\n"));
        // Every component's curve ends at exactly zero.
        for line in left.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[0] == "10" {
                assert_eq!(fields[2], "0", "{line}");
            }
        }
    }
}

#[test]
fn benchmark_reports_every_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "n_individuals": 2,
            "sampler": {"kernels": ["prior_imh", "rwm_cycle", "nlme_imh"], "n_iter": 120}
        }"#,
    );
    let out = dir.path().join("out");
    let res = run(&[
        "benchmark",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = read(out.join("benchmark.csv"));
    assert!(text.starts_with("kernel,individual,coordinate,msjd,ess,acceptance_rate,seconds\n"));
    for kernel in ["prior_imh", "rwm_cycle", "nlme_imh"] {
        assert!(text.lines().any(|l| l.starts_with(kernel)), "{kernel} missing");
    }
    // 3 kernels x 2 individuals x 3 coordinates + header.
    assert_eq!(text.lines().count(), 3 * 2 * 3 + 1);
}

#[test]
fn manifest_echoes_config_seed_and_versions() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"n_individuals": 2, "seed": 5}"#);
    let out = dir.path().join("out");
    // The --seed flag wins over the configured seed.
    assert_ok(&run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["n_individuals"], 2);
    assert!(manifest["versions"]["core"].is_string());
    assert_eq!(manifest["outputs"][0], "dataset.csv");
}
