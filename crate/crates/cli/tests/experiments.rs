use std::fs;
use std::path::Path;
use std::process::Command;

use adra_cli::config::Experiment;
use adra_cli::{run, run_pretrain, ExperimentConfig};
use tempfile::tempdir;

mod common;

fn pretrained(dir: &Path) {
    run_pretrain(&common::tiny("pretrain", dir, "")).unwrap();
}

#[test]
fn config_files_round_trip() {
    let dir = tempdir().unwrap();
    let cfg = common::tiny(
        "small-mode",
        dir.path(),
        r#"methods = ["adra-k4", "tf", "knn-ad"]"#,
    );
    assert_eq!(cfg.experiment, Experiment::SmallMode);
    assert_eq!(cfg.methods[0].experts, Some(4));
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("unknown-key = 1").is_err());
    assert!(ExperimentConfig::from_toml(r#"methods = ["nope"]"#).is_err());
}

#[test]
fn one_vs_rest_produces_one_row_per_cell() {
    let dir = tempdir().unwrap();
    pretrained(dir.path());
    let cfg = common::tiny("ovr", dir.path(), "seeds = 5");
    let out = run(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.rows.len(), 10 * 2 * 5);
    assert!(out
        .rows
        .iter()
        .all(|r| r.metric == "auc" && (0.0..=1.0).contains(&r.value)));
    assert_eq!(out.aggregate.len(), 20);
    assert!(out.aggregate.iter().all(|a| a.n == 5));

    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 101);
    assert!(results.starts_with("task,method,seed,metric,value\n"));
    let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
    assert!(table.contains("ovr-c9") && table.contains("knn-ad"));
    // kNN trains nothing, so only the adapter cells leave a loss curve.
    assert_eq!(fs::read_dir(dir.path().join("curves")).unwrap().count(), 50);
}

#[test]
fn small_mode_sweeps_every_ratio() {
    let dir = tempdir().unwrap();
    pretrained(dir.path());
    let extra = "[small-mode]\npairs = [[0, 1], [2, 3]]\nratios = [0.0, 0.5]";
    let cfg = ExperimentConfig::from_toml(&format!(
        "{}\n{extra}",
        common::tiny_toml("small-mode", dir.path(), "")
    ))
    .unwrap();
    let out = run(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    for task in ["small-a0-b1", "small-a2-b3"] {
        for method in ["adra", "knn-ad"] {
            let metrics: Vec<&str> = out
                .rows
                .iter()
                .filter(|r| r.task == task && r.method == method)
                .map(|r| r.metric.as_str())
                .collect();
            for r in ["0", "0.5", "1"] {
                for kind in [
                    "auc-primary",
                    "auc-secondary",
                    "rel-primary",
                    "rel-secondary",
                ] {
                    assert!(
                        metrics.contains(&format!("{kind}@{r}").as_str()),
                        "{task} {method} {kind}@{r}"
                    );
                }
            }
        }
    }
    for r in out
        .rows
        .iter()
        .filter(|r| r.metric.ends_with("@1") && r.metric.starts_with("rel-"))
    {
        assert_eq!(r.value, 1.0);
    }
    for f in [
        "small-a0-b1-rel-primary.svg",
        "small-mode-rel-secondary.svg",
        "table.txt",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn runs_are_byte_reproducible() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let results = |dir: &Path, threads: &str| {
        pretrained(dir);
        let cfg = common::tiny(
            "hoo",
            dir,
            "classes = [0, 4]\nseeds = 2\nsave-bundles = true",
        );
        // SAFETY: single-threaded use of the variable within this test binary.
        unsafe { std::env::set_var("ADRA_THREADS", threads) };
        run(&cfg).unwrap();
        let bundle = fs::read(dir.join("bundles/hoo-c4-adra-s1.adrb")).unwrap();
        (fs::read(dir.join("results.csv")).unwrap(), bundle)
    };
    assert_eq!(results(a.path(), "1"), results(b.path(), "3"));
}

#[test]
fn failed_cells_are_recorded_and_fail_the_command() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        common::tiny_toml("ovr", dir.path(), "classes = [1]"),
    )
    .unwrap();
    let adra = env!("CARGO_BIN_EXE_adra");
    let status = Command::new(adra)
        .args(["pretrain", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let ok = Command::new(adra)
        .args(["run", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(ok.success());

    // A wild learning rate makes the adapter cell diverge; kNN is unaffected.
    let bad = Command::new(adra)
        .args(["run", "--lr", "1e12", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(!bad.success());
    let failures = fs::read_to_string(dir.path().join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 2, "{failures}");
    assert!(failures.contains("ovr-c1,adra,0,"));
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.contains("ovr-c1,knn-ad,0,auc,"));

    let missing = Command::new(adra)
        .args(["run", "--out"])
        .arg(dir.path().join("nowhere"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("pretrain"));
}

#[test]
fn inspect_bundle_prints_the_header() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        common::tiny_toml(
            "ovr",
            dir.path(),
            "classes = [2]\nmethods = [\"adra\"]\nsave-bundles = true",
        ),
    )
    .unwrap();
    let adra = env!("CARGO_BIN_EXE_adra");
    for cmd in ["pretrain", "run"] {
        assert!(Command::new(adra)
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .status()
            .unwrap()
            .success());
    }
    let out = Command::new(adra)
        .arg("inspect-bundle")
        .arg(dir.path().join("bundles/ovr-c2-adra-s0.adrb"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("task:ovr-c2"), "{text}");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 5);
}
