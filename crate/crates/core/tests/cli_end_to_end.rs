use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pseudoglmm::ingest::write_clusters_csv;
use pseudoglmm::simlab::{simulate_dataset, SimConfig, Truth};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudoglmm"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_data(dir: &Path) -> PathBuf {
    let cfg = SimConfig {
        m: 6,
        n: 100,
        truth: Truth { beta0: -1.0, ..Truth::default() },
        ..SimConfig::default()
    };
    let data = simulate_dataset(&cfg, 0).unwrap();
    let path = dir.join("data.csv");
    write_clusters_csv(fs::File::create(&path).unwrap(), "cluster_id", "y", &data.predictor_names, &data.clusters)
        .unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn provider_and_analyst_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let bundles = dir.path().join("bundles");
    run(&["--out", p(&bundles), "summarize", "--input", p(&data), "--standardize", "x1,x2"]);
    assert!(bundles.join("manifest.json").exists());
    let n_bundles = fs::read_dir(&bundles)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".bundle.json"))
        .count();
    assert_eq!(n_bundles, 6);

    let gen = dir.path().join("gen");
    let out = run(&["--seed", "5", "--out", p(&gen), "generate", "--bundles", p(&bundles)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("order 3: max |moment difference|"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_slice(&read(&gen.join("generate_summary.json"))).unwrap();
    assert!(summary["max_abs_difference"].as_f64().unwrap() < 1e-6, "{summary}");
    assert_eq!(summary["n_obs"], 600);

    let fit = dir.path().join("fit");
    let out = run(&[
        "--out", p(&fit), "fit", "--data", p(&data), "--compare", p(&gen.join("pseudo.csv")),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["(Intercept)", "x3_3", "sigma_cluster", "AIC", "BIC", "Median"] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
    let json: serde_json::Value = serde_json::from_slice(&read(&fit.join("fit.json"))).unwrap();
    let actual = &json["report"];
    let pseudo = &json["compare"]["report"];
    assert_eq!(actual["n_agq"], 7);
    assert_eq!(actual["n_obs"], pseudo["n_obs"]);
    let aic_gap = (actual["aic"].as_f64().unwrap() - pseudo["aic"].as_f64().unwrap()).abs();
    assert!(aic_gap < 10.0, "AIC gap {aic_gap}");
}

#[test]
fn fixed_model_has_no_random_effect_and_nagq_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let fixed = dir.path().join("fixed");
    let out = run(&["--out", p(&fixed), "fit", "--data", p(&data), "--model", "fixed"]);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("sigma_cluster"));
    let json: serde_json::Value = serde_json::from_slice(&read(&fixed.join("fit.json"))).unwrap();
    assert_eq!(json["report"]["random_effects"].as_array().unwrap().len(), 0);

    let mut aics = Vec::new();
    for k in ["1", "7"] {
        let o = dir.path().join(format!("agq{k}"));
        run(&["--out", p(&o), "fit", "--data", p(&data), "--nagq", k]);
        let json: serde_json::Value = serde_json::from_slice(&read(&o.join("fit.json"))).unwrap();
        assert_eq!(json["report"]["n_agq"].as_u64().unwrap().to_string(), k);
        aics.push(json["report"]["aic"].as_f64().unwrap());
    }
    assert!((aics[0] - aics[1]).abs() < 5.0, "{aics:?}");
}

#[test]
fn singleton_clusters_are_skipped_and_bad_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("small.csv");
    fs::write(&csv, "cluster_id,y,x\na,0,1.5\na,1,2.0\na,0,0.1\nb,1,3.0\n").unwrap();
    let out_dir = dir.path().join("b");
    let out = run(&["--out", p(&out_dir), "summarize", "--input", p(&csv), "--max-order", "2"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping cluster `b`"));
    let manifest = String::from_utf8_lossy(&read(&out_dir.join("manifest.json"))).into_owned();
    assert!(manifest.contains("\"a\"") && !manifest.contains("\"b\""));

    let out = bin()
        .args(["--out", p(&out_dir), "summarize", "--input", p(&csv), "--response-col", "outcome"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "cluster_id,y,x\na,0,1.5\na,1,oops\n").unwrap();
    let out = bin().args(["--out", p(&out_dir), "summarize", "--input", p(&bad)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = bin().args(["--out", p(&out_dir), "generate", "--bundles", p(&empty)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_smoke_run_emits_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"m": 4, "n": 25, "replicates": 1, "truth": {"beta0": -1.0}}"#).unwrap();
    let out = dir.path().join("sim");
    run(&["--out", p(&out), "simulate", "--config", p(&cfg)]);
    for f in ["report.csv", "arms.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let arms = String::from_utf8_lossy(&read(&out.join("arms.csv"))).into_owned();
    for arm in ["sim", "ps2", "ps3", "ps4"] {
        assert!(arms.lines().any(|l| l.split(',').nth(1) == Some(arm)), "{arm}");
    }
}

#[test]
fn seeds_change_pseudo_values_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let bundles = dir.path().join("bundles");
    run(&["--out", p(&bundles), "summarize", "--input", p(&data)]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["--seed", "1", "--out", p(&a), "generate", "--bundles", p(&bundles)]);
    run(&["--seed", "2", "--out", p(&b), "generate", "--bundles", p(&bundles)]);
    assert_ne!(read(&a.join("pseudo.csv")), read(&b.join("pseudo.csv")));
    for d in [&a, &b] {
        let s: serde_json::Value = serde_json::from_slice(&read(&d.join("generate_summary.json"))).unwrap();
        assert!(s["max_abs_difference"].as_f64().unwrap() < 1e-6);
    }
}
