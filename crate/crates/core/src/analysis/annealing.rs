use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_std, score_realizations, Segmenter, StudySubject};
use crate::error::{Error, Result};
use crate::harmonize::wilcoxon_signed_rank;
use crate::seed::rng_for;
use crate::simulate::{ParamRange, SequenceKind, SequenceParams};
use crate::volumes::{write_mvol, HardSegmentation, Tissue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    In,
    Ood,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::In => "in",
            Distribution::Ood => "ood",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Distribution::In),
            "ood" => Ok(Distribution::Ood),
            _ => Err(Error::InvalidParameter(format!("unknown distribution '{s}' (expected in or ood)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealingConfig {
    pub mprage_in: ParamRange,
    pub mprage_ood: ParamRange,
    pub spgr_in: ParamRange,
    pub spgr_ood: ParamRange,
    /// Equally spaced TIs per MPRAGE sweep.
    pub n_mprage: usize,
    /// Random triples per SPGR sweep.
    pub n_spgr: usize,
    pub distributions: Vec<Distribution>,
    pub seed: u64,
}

impl Default for AnnealingConfig {
    fn default() -> Self {
        Self {
            mprage_in: ParamRange::mprage_in_distribution(),
            mprage_ood: ParamRange::mprage_out_of_distribution(),
            spgr_in: ParamRange::spgr_in_distribution(),
            spgr_ood: ParamRange::spgr_out_of_distribution(),
            n_mprage: 11,
            n_spgr: 40,
            distributions: vec![Distribution::In, Distribution::Ood],
            seed: 0,
        }
    }
}

impl AnnealingConfig {
    pub fn range(&self, seq: SequenceKind, dist: Distribution) -> &ParamRange {
        match (seq, dist) {
            (SequenceKind::Mprage, Distribution::In) => &self.mprage_in,
            (SequenceKind::Mprage, Distribution::Ood) => &self.mprage_ood,
            (SequenceKind::Spgr, Distribution::In) => &self.spgr_in,
            (SequenceKind::Spgr, Distribution::Ood) => &self.spgr_ood,
        }
    }

    /// Acquisitions of one sweep; identical for every arm and subject so
    /// that comparisons are paired.
    pub fn realizations(&self, seq: SequenceKind, dist: Distribution) -> Result<Vec<SequenceParams>> {
        let range = self.range(seq, dist);
        if range.kind() != seq {
            return Err(Error::InvalidParameter(format!("{} {} range has the wrong sequence", seq.name(), dist.name())));
        }
        let n = match seq {
            SequenceKind::Mprage => self.n_mprage,
            SequenceKind::Spgr => self.n_spgr,
        };
        if n < 2 {
            return Err(Error::InvalidParameter("a sweep needs at least two realizations".into()));
        }
        let mut rng = rng_for(self.seed, &[0xA22E, seq as u64, dist as u64]);
        range.pregenerated(n, &mut rng)
    }
}

/// One segmenter evaluated on one sequence.
pub struct StudyArm<'a> {
    pub name: String,
    pub sequence: SequenceKind,
    pub segmenter: &'a dyn Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub arm: String,
    pub sequence: SequenceKind,
    pub distribution: Distribution,
    pub subject_id: String,
    pub dice: Vec<[f64; 3]>,
    pub volumes_ml: Vec<[f64; 3]>,
    pub cov: [f64; 3],
}

impl SubjectRecord {
    pub fn mean_dice(&self) -> [f64; 3] {
        let n = self.dice.len() as f64;
        [0, 1, 2].map(|t| self.dice.iter().map(|d| d[t]).sum::<f64>() / n)
    }
}

/// Mean and sample standard deviation across subjects. CoV is scaled by
/// 10³.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingCell {
    pub arm: String,
    pub sequence: SequenceKind,
    pub distribution: Distribution,
    pub tissue: Tissue,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub cov_mean_x1e3: f64,
    pub cov_std_x1e3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub arm_a: String,
    pub arm_b: String,
    pub sequence: SequenceKind,
    pub distribution: Distribution,
    pub tissue: Tissue,
    /// "dice" (paired per image) or "cov" (paired per subject).
    pub metric: String,
    /// None when too few non-zero differences for the approximation.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingResult {
    pub sweeps: Vec<(SequenceKind, Distribution, Vec<SequenceParams>)>,
    pub records: Vec<SubjectRecord>,
    pub cells: Vec<AnnealingCell>,
    pub comparisons: Vec<ArmComparison>,
}

impl AnnealingResult {
    pub fn cell(&self, arm: &str, seq: SequenceKind, dist: Distribution, tissue: Tissue) -> Option<&AnnealingCell> {
        self.cells
            .iter()
            .find(|c| c.arm == arm && c.sequence == seq && c.distribution == dist && c.tissue == tissue)
    }

    fn records_for(&self, arm: &str, seq: SequenceKind, dist: Distribution) -> Vec<&SubjectRecord> {
        self.records
            .iter()
            .filter(|r| r.arm == arm && r.sequence == seq && r.distribution == dist)
            .collect()
    }

    /// Paired signed-rank tests of two arms. All-zero differences (an arm
    /// against itself) give statistic 0 and p = 1.
    pub fn compare(&self, a: &str, b: &str, seq: SequenceKind, dist: Distribution) -> Vec<ArmComparison> {
        let ra = self.records_for(a, seq, dist);
        let rb = self.records_for(b, seq, dist);
        let mut out = Vec::new();
        for t in Tissue::ALL {
            let i = t.index();
            let mut da = Vec::new();
            let mut db = Vec::new();
            let mut ca = Vec::new();
            let mut cb = Vec::new();
            for x in &ra {
                let Some(y) = rb.iter().find(|y| y.subject_id == x.subject_id) else {
                    continue;
                };
                da.extend(x.dice.iter().map(|d| d[i]));
                db.extend(y.dice.iter().map(|d| d[i]));
                ca.push(x.cov[i]);
                cb.push(y.cov[i]);
            }
            for (metric, xa, xb) in [("dice", &da, &db), ("cov", &ca, &cb)] {
                let (statistic, p_value) = match wilcoxon_signed_rank(xa, xb) {
                    Ok((s, p)) => (Some(s), Some(p)),
                    Err(Error::AllZeroDifferences) => (Some(0.0), Some(1.0)),
                    Err(_) => (None, None),
                };
                out.push(ArmComparison {
                    arm_a: a.into(),
                    arm_b: b.into(),
                    sequence: seq,
                    distribution: dist,
                    tissue: t,
                    metric: metric.into(),
                    statistic,
                    p_value,
                });
            }
        }
        out
    }

    /// Writes the Dice table, the CoV table, the arm comparisons and the
    /// per-image volumes and scores.
    pub fn write_csv(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        super::write_run_json(dir, meta)?;
        let mut dice = String::from("arm,sequence,distribution,csf_mean,csf_std,gm_mean,gm_std,wm_mean,wm_std\n");
        let mut covs = dice.clone();
        let mut keys: Vec<(String, SequenceKind, Distribution)> = Vec::new();
        for c in &self.cells {
            let k = (c.arm.clone(), c.sequence, c.distribution);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (arm, seq, dist) in &keys {
            let _ = write!(dice, "{arm},{},{}", seq.name(), dist.name());
            let _ = write!(covs, "{arm},{},{}", seq.name(), dist.name());
            for t in Tissue::ALL {
                let c = self.cell(arm, *seq, *dist, t).expect("every tissue is tabulated");
                let _ = write!(dice, ",{:.6},{:.6}", c.dice_mean, c.dice_std);
                let _ = write!(covs, ",{:.6},{:.6}", c.cov_mean_x1e3, c.cov_std_x1e3);
            }
            dice.push('\n');
            covs.push('\n');
        }
        let mut cmp = String::from("arm_a,arm_b,sequence,distribution,tissue,metric,statistic,p_value\n");
        for c in &self.comparisons {
            // `+ 0.0` folds -0 into +0 so identical runs print identically.
            let opt = |v: Option<f64>| v.map(|x| format!("{:.6}", x + 0.0)).unwrap_or_default();
            let _ = writeln!(
                cmp,
                "{},{},{},{},{},{},{},{}",
                c.arm_a,
                c.arm_b,
                c.sequence.name(),
                c.distribution.name(),
                c.tissue.name(),
                c.metric,
                opt(c.statistic),
                opt(c.p_value)
            );
        }
        let mut per = String::from(
            "arm,sequence,distribution,subject_id,realization,params,vol_csf_ml,vol_gm_ml,vol_wm_ml,dice_csf,dice_gm,dice_wm\n",
        );
        for r in &self.records {
            let params = &self
                .sweeps
                .iter()
                .find(|(s, d, _)| *s == r.sequence && *d == r.distribution)
                .expect("record belongs to a sweep")
                .2;
            for (k, (v, d)) in r.volumes_ml.iter().zip(&r.dice).enumerate() {
                let _ = writeln!(
                    per,
                    "{},{},{},{},{k},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    r.arm,
                    r.sequence.name(),
                    r.distribution.name(),
                    r.subject_id,
                    params[k].describe(),
                    v[0],
                    v[1],
                    v[2],
                    d[0],
                    d[1],
                    d[2]
                );
            }
        }
        for (name, body) in [
            ("table_dice.csv", dice),
            ("table_cov.csv", covs),
            ("comparisons.csv", cmp),
            ("realizations.csv", per),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Where an arm's segmentation of one realization is persisted.
pub fn segmentation_path(dir: &Path, arm: &str, seq: SequenceKind, dist: Distribution, subject: &str, k: usize) -> std::path::PathBuf {
    dir.join(arm)
        .join(format!("{}_{}", seq.name(), dist.name()))
        .join(format!("{subject}_r{k:03}"))
}

/// Segments every subject under every realization of each arm's sequence
/// and aggregates Dice against the reference and CoV across realizations.
/// Subjects run in parallel; aggregation order is fixed. When `persist` is
/// set, every segmentation is written there.
pub fn run_annealing_study(
    subjects: &[StudySubject],
    arms: &[StudyArm<'_>],
    config: &AnnealingConfig,
    persist: Option<&Path>,
) -> Result<AnnealingResult> {
    if subjects.is_empty() || arms.is_empty() {
        return Err(Error::InsufficientData("annealing study needs subjects and arms".into()));
    }
    let mut sequences: Vec<SequenceKind> = Vec::new();
    for a in arms {
        if !sequences.contains(&a.sequence) {
            sequences.push(a.sequence);
        }
    }
    let mut sweeps = Vec::new();
    for &seq in &sequences {
        for &dist in &config.distributions {
            sweeps.push((seq, dist, config.realizations(seq, dist)?));
        }
    }
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for arm in arms {
        for (seq, dist, params) in sweeps.iter().filter(|(s, _, _)| *s == arm.sequence) {
            let per_subject: Vec<SubjectRecord> = subjects
                .par_iter()
                .map(|s| {
                    let segs = params
                        .iter()
                        .map(|p| arm.segmenter.segment(s, p))
                        .collect::<Result<Vec<HardSegmentation>>>()?;
                    if let Some(dir) = persist {
                        for (k, seg) in segs.iter().enumerate() {
                            let meta = serde_json::json!({ "arm": arm.name, "params": params[k] });
                            write_mvol(
                                &seg.to_stack(meta),
                                segmentation_path(dir, &arm.name, *seq, *dist, &s.subject_id, k),
                            )?;
                        }
                    }
                    let sc = score_realizations(&segs, s.reference())?;
                    Ok(SubjectRecord {
                        arm: arm.name.clone(),
                        sequence: *seq,
                        distribution: *dist,
                        subject_id: s.subject_id.clone(),
                        dice: sc.dice,
                        volumes_ml: sc.volumes_ml,
                        cov: sc.cov,
                    })
                })
                .collect::<Result<_>>()?;
            for t in Tissue::ALL {
                let i = t.index();
                let (dm, ds) = mean_std(&per_subject.iter().map(|r| r.mean_dice()[i]).collect::<Vec<_>>());
                let (cm, cs) = mean_std(&per_subject.iter().map(|r| r.cov[i]).collect::<Vec<_>>());
                cells.push(AnnealingCell {
                    arm: arm.name.clone(),
                    sequence: *seq,
                    distribution: *dist,
                    tissue: t,
                    dice_mean: dm,
                    dice_std: ds,
                    cov_mean_x1e3: cm * 1e3,
                    cov_std_x1e3: cs * 1e3,
                });
            }
            records.extend(per_subject);
        }
    }
    let mut result = AnnealingResult {
        sweeps,
        records,
        cells,
        comparisons: Vec::new(),
    };
    // Each arm against the previous arm of the same sequence.
    let mut comparisons = Vec::new();
    for &seq in &sequences {
        let names: Vec<&str> = arms.iter().filter(|a| a.sequence == seq).map(|a| a.name.as_str()).collect();
        for w in names.windows(2) {
            for &dist in &config.distributions {
                comparisons.extend(result.compare(w[0], w[1], seq, dist));
            }
        }
    }
    result.comparisons = comparisons;
    Ok(result)
}
