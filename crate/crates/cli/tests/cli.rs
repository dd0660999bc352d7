//! End-to-end runs of the `physseg` binary on a tiny configuration.

mod common;

use std::fs;
use std::process::Command;

use common::{annealing_pipeline, code, every_command, files, stderr, Run};

#[test]
fn help_and_version_exit_zero() {
    let r = Run::new();
    assert_eq!(code(&r.cmd(&["--help"])), 0);
    assert_eq!(code(&r.cmd(&["--version"])), 0);
}

#[test]
fn bad_arguments_exit_one() {
    let r = Run::new();
    assert_eq!(code(&r.cmd(&["no-such-command"])), 1);
    let o = r.cmd(&["simulate", "--mpm", "x", "--seq", "nope", "-o", "y"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_config_field_is_named() {
    let r = Run::new();
    fs::write(r.path("bad.toml"), "[model]\nlerning_rate = 0.1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_physseg"))
        .current_dir(r.dir.path())
        .args(["-c", "bad.toml", "phantom"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("model.lerning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_override_exits_one() {
    let r = Run::new();
    let o = r.cmd(&["--set", "model.learning_rate=-1", "phantom"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_one_and_name_the_path() {
    let r = Run::new();
    let o = r.cmd(&["train", "--arm", "phys"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing input: cohort manifest"), "{}", stderr(&o));
    let o = r.cmd(&["infer", "--checkpoint", "nowhere", "--image", "nothing", "-o", "out"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    let o = r.cmd(&["harmonize", "--features", "absent.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_two() {
    let r = Run::new();
    r.ok(&["phantom"]);
    r.ok(&["train", "--arm", "phys"]);
    // Two validation subjects with two pairs each cannot fit a calibration.
    let o = r.cmd(&[
        "--set",
        "uncertainty.pairs_per_subject=2",
        "calibrate",
        "--checkpoint",
        "work/checkpoints/annealing/phys",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn reports_refuse_inputs_from_another_config() {
    let r = Run::new();
    r.ok(&["phantom"]);
    r.ok(&["train", "--arm", "phys"]);
    let o = r.cmd(&["--set", "model.patience=1", "report", "--arms", "phys"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    r.ok(&["--set", "model.patience=1", "report", "--arms", "phys", "--force"]);
}

#[test]
fn annealing_pipeline_writes_every_artifact() {
    let r = Run::new();
    annealing_pipeline(&r);
    for f in [
        "work/cohort/manifest.csv",
        "work/cohort/run.json",
        "work/checkpoints/annealing/phys_strat_aug.ckpt.json",
        "work/checkpoints/annealing/phys_strat_aug.ckpt.raw",
        "work/checkpoints/annealing/phys_strat_aug.log.csv",
        "work/img.mvol.json",
        "work/pgs/pool_000_soft.mvol.json",
        "work/pgs/pool_000_labels.mvol.json",
        "work/pgs/pool_000_gmm.json",
        "work/seg.mvol.json",
        "work/seg_labels.mvol.json",
        "work/seg_volumes.json",
        "work/calibration/calibration.json",
        "work/calibration/coverage.csv",
        "work/calibration/volume_vs_ti.svg",
        "work/sweep/sweep.csv",
        "work/sweep/sweep.svg",
        "work/report/annealing/table_dice.csv",
        "work/report/annealing/table_cov.csv",
        "work/report/annealing/comparisons.csv",
        "work/report/annealing/run.json",
    ] {
        assert!(r.path(f).is_file(), "missing {f}");
    }
    let vols: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.path("work/seg_volumes.json")).unwrap()).unwrap();
    let tissues = vols["tissues"].as_array().unwrap();
    assert_eq!(tissues.len(), 3);
    for t in tissues {
        assert_eq!(t["percentile_volumes_ml"].as_array().unwrap().len(), 99);
        let iqr = &t["iqr_ml"];
        assert!(iqr["lo"].as_f64().unwrap() <= iqr["hi"].as_f64().unwrap());
    }
    let dice = fs::read_to_string(r.path("work/report/annealing/table_dice.csv")).unwrap();
    // Header plus two arms over two distributions.
    assert_eq!(dice.lines().count(), 5);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.path("work/report/annealing/run.json")).unwrap()).unwrap();
    assert_eq!(run["provenance"]["seed"], 3);
    assert_eq!(run["provenance"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical() {
    let a = Run::new();
    let b = Run::new();
    every_command(&a);
    every_command(&b);
    let fa = files(&a.path("work"));
    assert_eq!(fa, files(&b.path("work")));
    assert!(fa.len() > 40);
    for f in &fa {
        let x = fs::read(a.path("work").join(f)).unwrap();
        let y = fs::read(b.path("work").join(f)).unwrap();
        assert!(x == y, "{} differs between reruns", f.display());
    }
}

#[test]
fn seed_env_overrides_the_config() {
    let r = Run::new();
    r.ok(&["phantom", "-o", "a"]);
    let o = Command::new(env!("CARGO_BIN_EXE_physseg"))
        .current_dir(r.dir.path())
        .env("PHYSSEG_SEED", "11")
        .args(["-c", "tiny.toml", "phantom", "-o", "b"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let ra = fs::read(r.path("a/pool_000_mpm.mvol.raw")).unwrap();
    let rb = fs::read(r.path("b/pool_000_mpm.mvol.raw")).unwrap();
    assert_ne!(ra, rb);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.path("b/run.json")).unwrap()).unwrap();
    assert_eq!(run["provenance"]["seed"], 11);
}

#[test]
fn harmonization_pipeline_and_standalone_combat() {
    let r = Run::new();
    r.ok(&["phantom", "--multisite"]);
    for arm in ["phys_strat_aug", "cnn_baseline"] {
        r.ok(&["train", "--arm", arm, "--preset", "harmonization", "--cohort", "work/multisite"]);
    }
    let out = r.ok(&["report", "--study", "harmonization", "--arms", "phys_strat_aug,cnn_baseline"]);
    assert!(out.contains("cnn_baseline-C"), "{out}");
    let dir = r.path("work/report/harmonization");
    let trends = fs::read_to_string(dir.join("table_trends.csv")).unwrap();
    // Four arms (raw and ComBat) x two age groups x three tissues.
    assert_eq!(trends.lines().count(), 1 + 4 * 2 * 3);
    assert!(dir.join("wm_trends_phys_strat_aug-C.svg").is_file());

    r.ok(&["harmonize", "--features", "work/report/harmonization/features_phys_strat_aug.csv"]);
    let h = fs::read_to_string(r.path("work/harmonized/harmonized.csv")).unwrap();
    let raw = fs::read_to_string(dir.join("features_phys_strat_aug.csv")).unwrap();
    assert_eq!(h.lines().count(), raw.lines().count());
    assert_eq!(h.lines().next(), Some("subject_id,site_id,age,gm,wm,csf"));
}
