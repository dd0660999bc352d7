//! Helpers shared by the CLI integration and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 3
work_dir = "work"

[phantom]
n_subjects = 6
dims = [24, 24, 24]
subjects_per_site = 3

[model]
batch_size = 2
patch_size = 12
voxels_per_patch = 128
steps_per_epoch = 10
max_epochs = 2
patience = 2
n_pregenerated = 8
n_val_params = 2

[split]
n_train = 2
n_val = 2
n_test = 2

[uncertainty]
pairs_per_subject = 3
band_points = 3

[uncertainty.mc]
n_samples = 4

[sweep]
nx = 3
ny = 3
mc_samples = 4

[annealing]
n_mprage = 3
n_spgr = 3
"#;

pub struct Run {
    pub dir: tempfile::TempDir,
}

impl Run {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Run { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_physseg"))
            .current_dir(self.dir.path())
            .env_remove("PHYSSEG_SEED")
            .args(["-c", "tiny.toml", "--jobs", "1"])
            .args(args)
            .output()
            .unwrap()
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Relative paths of every file under `root`, sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

pub fn annealing_pipeline(r: &Run) {
    r.ok(&["phantom"]);
    r.ok(&["train", "--arm", "baseline"]);
    r.ok(&["train", "--arm", "phys_strat_aug"]);
    r.ok(&["simulate", "--mpm", "pool_000", "--seq", "mprage", "--ti", "900", "-o", "work/img"]);
    r.ok(&["pgs", "--mpm", "work/cohort/pool_000_mpm", "-o", "work/pgs/pool_000"]);
    r.ok(&["calibrate", "--checkpoint", "work/checkpoints/annealing/phys_strat_aug"]);
    r.ok(&[
        "infer",
        "--checkpoint",
        "work/checkpoints/annealing/phys_strat_aug",
        "--image",
        "work/img",
        "--mc",
        "4",
        "--calibration",
        "work/calibration/calibration.json",
        "-o",
        "work/seg",
    ]);
    r.ok(&[
        "sweep",
        "--checkpoint",
        "work/checkpoints/annealing/phys_strat_aug",
        "--calibration",
        "work/calibration/calibration.json",
    ]);
    r.ok(&["report", "--arms", "baseline,phys_strat_aug", "--persist-segmentations"]);
}

/// Every subcommand once, on both cohorts.
pub fn every_command(r: &Run) {
    annealing_pipeline(r);
    r.ok(&["pgs", "--cohort", "work/cohort", "-o", "work/pgs_all"]);
    r.ok(&["phantom", "--multisite"]);
    for arm in ["phys_strat_aug", "cnn_baseline"] {
        r.ok(&["train", "--arm", arm, "--preset", "harmonization", "--cohort", "work/multisite"]);
    }
    r.ok(&["report", "--study", "harmonization", "--arms", "phys_strat_aug,cnn_baseline"]);
    r.ok(&["harmonize", "--features", "work/report/harmonization/features_phys_strat_aug.csv"]);
}
