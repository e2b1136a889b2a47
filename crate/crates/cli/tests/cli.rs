use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbe"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        r#"seed = 42
out = "out"

[simulate]
n_plants = 600
n_years = 7

[estimate]
pooling = "auto"
bootstrap_replicates = 4
restarts = 2

[matching]
bootstrap_replicates = 10
"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

/// Stage progress goes to stderr.
fn progress(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_writes_every_artifact_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = lbe(&["--config", &cfg]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let out = dir.path().join("out");
    for name in [
        "panel.csv",
        "table2.json",
        "table3.json",
        "productivity.csv",
        "ccp_scores.csv",
        "matched_sample.json",
        "balance.csv",
        "score_histograms.csv",
        "did_omega_h.csv",
        "did_omega_s.csv",
        "did_omega_u.csv",
        "event_study_skill_ratio.csv",
        "estimate.manifest.json",
        "event-study.manifest.json",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let table2: serde_json::Value = serde_json::from_slice(&fs::read(out.join("table2.json")).unwrap()).unwrap();
    assert!(table2.is_object());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("did.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["inputs"].as_object().unwrap().contains_key("matched_sample.json"));

    // A second run in a fresh directory reproduces every artifact byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    let cfg2 = write_config(dir2.path());
    assert!(lbe(&["--config", &cfg2]).status.success());
    let out2 = dir2.path().join("out");
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        assert_eq!(
            fs::read(out.join(&name)).unwrap(),
            fs::read(out2.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }

    // With unchanged inputs every stage is skipped and nothing is rewritten.
    let before = fs::metadata(out.join("table2.json")).unwrap().modified().unwrap();
    let again = lbe(&["--config", &cfg, "--skip-if-fresh"]);
    assert!(again.status.success());
    let text = progress(&again);
    assert_eq!(text.matches("up to date").count(), 6, "{text}");
    assert_eq!(fs::metadata(out.join("table2.json")).unwrap().modified().unwrap(), before);

    // Changing a stage's configuration makes that stage stale again.
    let k = lbe(&["--config", &cfg, "--skip-if-fresh", "--k", "3", "match"]);
    assert!(k.status.success());
    assert!(progress(&k).contains("match: done"));
}

#[test]
fn downstream_stage_without_inputs_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = lbe(&["--seed", "1", "--out", out.to_str().unwrap(), "did"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing upstream artifact"));
}

#[test]
fn stochastic_stage_without_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = lbe(&["--out", out.to_str().unwrap(), "--stage", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\n[matching]\nk = 0\n").unwrap();
    let o = lbe(&["--config", path.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&path, "seed = 1\n[input]\npanel = \"missing.csv\"\n").unwrap();
    let o = lbe(&["--config", path.to_str().unwrap(), "estimate"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&path, "seed = 1\nunknown_key = 3\n").unwrap();
    let o = lbe(&["--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
