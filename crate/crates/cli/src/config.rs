//! Run configuration: TOML file, `--set` overrides, seed plumbing and the
//! provenance block embedded in every artifact.

use std::path::{Path, PathBuf};

use physseg::analysis::{AnnealingConfig, HarmonizationStudyConfig, UncertaintyStudyConfig};
use physseg::model::TrainConfig;
use physseg::pgs::GmmConfig;
use physseg::phantom::PhantomConfig;
use physseg::simulate::AugmentConfig;
use physseg::uncertainty::SweepSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PHYSSEG_SEED";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub age_range: [f64; 2],
    /// Subjects per site of the multi-site cohort.
    pub subjects_per_site: usize,
    pub anatomy: PhantomConfig,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            n_subjects: 16,
            dims: [48; 3],
            age_range: [20.0, 60.0],
            subjects_per_site: 6,
            anatomy: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Applied by `simulate --augment`.
    pub augment: AugmentConfig,
}

/// Consecutive manifest rows used for training, validation and testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_val: 4,
            n_test: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// Experiment arm used when a command does not name one.
    pub arm: String,
    pub phantom: PhantomSection,
    pub simulate: SimulateSection,
    pub pgs: GmmConfig,
    pub model: TrainConfig,
    pub split: SplitSection,
    pub uncertainty: UncertaintyStudyConfig,
    pub sweep: SweepSpec,
    pub annealing: AnnealingConfig,
    pub harmonize: HarmonizationStudyConfig,
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Sets `key` (dotted path) in `table`, parsing `value` as a TOML value
/// and falling back to a plain string.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(validation(format!("--set key '{key}' is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| validation(format!("--set {key}: '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Dotted paths present in `given` but absent from `known`.
fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl RunConfig {
    /// Loads `path` (or defaults), applies `--set` overrides and the seed
    /// environment variable, and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| validation(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| validation(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| validation(format!("--set expects key=value, got '{s}'")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let given = toml::Value::Table(table.clone());
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| validation(format!("config: {}", e.message())))?;
        // Keys that deserialisation silently ignored.
        let known = toml::Value::try_from(&cfg).map_err(|e| validation(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(validation(format!("unknown config field(s): {}", unknown.join(", "))));
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| validation(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        if cfg.work_dir.as_os_str().is_empty() {
            cfg.work_dir = PathBuf::from("work");
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Section seeds follow the top-level seed.
    fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.uncertainty.seed = self.seed;
        self.sweep.seed = self.seed;
        self.annealing.seed = self.seed;
        self.harmonize.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        fn field(path: &'static str) -> impl Fn(physseg::Error) -> CliError {
            move |e| validation(format!("{path}: {e}"))
        }
        self.model.validate().map_err(field("model"))?;
        self.phantom.anatomy.tissue_params.validate().map_err(field("phantom.anatomy.tissue_params"))?;
        self.simulate.augment.validate().map_err(field("simulate.augment"))?;
        if self.phantom.dims.iter().any(|&d| d < 16) {
            return Err(validation("phantom.dims: every dimension must be >= 16"));
        }
        if self.phantom.n_subjects == 0 {
            return Err(validation("phantom.n_subjects: must be >= 1"));
        }
        if self.phantom.subjects_per_site < 3 {
            return Err(validation("phantom.subjects_per_site: must be >= 3"));
        }
        if !(self.phantom.age_range[0] >= 0.0 && self.phantom.age_range[0] < self.phantom.age_range[1]) {
            return Err(validation("phantom.age_range: must be [lo, hi] with 0 <= lo < hi"));
        }
        if self.split.n_train == 0 || self.split.n_val == 0 || self.split.n_test == 0 {
            return Err(validation("split: n_train, n_val and n_test must each be >= 1"));
        }
        if self.pgs.max_iters == 0 {
            return Err(validation("pgs.max_iters: must be >= 1"));
        }
        if self.uncertainty.mc.n_samples < 2 {
            return Err(validation("uncertainty.mc.n_samples: must be >= 2"));
        }
        if self.sweep.nx == 0 || self.sweep.ny == 0 || self.sweep.mc_samples < 2 {
            return Err(validation("sweep: nx, ny must be >= 1 and mc_samples >= 2"));
        }
        if self.annealing.n_mprage < 2 || self.annealing.n_spgr < 2 {
            return Err(validation("annealing: n_mprage and n_spgr must be >= 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The arm name and work directory
    /// are excluded: arms of one experiment share a hash, and moving a run
    /// does not change it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.arm.clear();
        c.work_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "tool_version": TOOL_VERSION,
        })
    }

    /// `extra` merged with a `provenance` entry.
    pub fn meta(&self, extra: serde_json::Value) -> serde_json::Value {
        let mut m = serde_json::json!({ "provenance": self.provenance() });
        if let serde_json::Value::Object(e) = extra {
            m.as_object_mut().expect("object").extend(e);
        }
        m
    }
}

/// Config hash recorded in an artifact's metadata, if any.
pub fn artifact_hash(meta: &serde_json::Value) -> Option<&str> {
    meta.get("provenance")?.get("config_hash")?.as_str()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values_and_paths() {
        let c = RunConfig::load(None, &["model.learning_rate=0.5".into(), "arm=phys".into(), "phantom.dims=[20,20,20]".into()]).unwrap();
        assert_eq!(c.model.learning_rate, 0.5);
        assert_eq!(c.arm, "phys");
        assert_eq!(c.phantom.dims, [20; 3]);
    }

    #[test]
    fn unknown_fields_are_reported_with_paths() {
        let e = RunConfig::load(None, &["model.mlp.widht=3".into()]).unwrap_err();
        assert!(e.to_string().contains("model.mlp.widht"), "{e}");
        let e = RunConfig::load(None, &["phantom.dimz=3".into()]).unwrap_err();
        assert!(e.to_string().contains("dimz"), "{e}");
    }

    #[test]
    fn hash_ignores_arm_and_location() {
        let a = RunConfig::load(None, &["arm=x".into()]).unwrap();
        let b = RunConfig::load(None, &["arm=y".into(), "work_dir=/elsewhere".into()]).unwrap();
        let c = RunConfig::load(None, &["model.patience=3".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_name_their_section() {
        let e = RunConfig::load(None, &["model.learning_rate=-1".into()]).unwrap_err();
        assert!(e.to_string().starts_with("model:"), "{e}");
        let e = RunConfig::load(None, &["phantom.dims=[4,4,4]".into()]).unwrap_err();
        assert!(e.to_string().contains("phantom.dims"), "{e}");
    }
}
