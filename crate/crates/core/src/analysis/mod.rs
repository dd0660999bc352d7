//! Experiment drivers: the annealing study over training modes, the
//! uncertainty calibration study, and the multi-site harmonisation study.
//!
//! The segmentation reference throughout is the physics gold standard
//! (PGS) derived from the quantitative maps.

mod annealing;
mod harmonization;
mod uncertainty_study;

pub use annealing::*;
pub use harmonization::*;
pub use uncertainty_study::*;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cov, dice};
use crate::model::{predict_mpm, LabelledSubject, McConfig, Model, TrainConfig, TrainMode};
use crate::pgs::{fit_gmm, label_pgs, GmmConfig};
use crate::phantom::{CohortMember, TissueParams};
use crate::seed::rng_for;
use crate::simulate::{ParamRange, SequenceParams, DEFAULT_PTD_MS};
use crate::volumes::{HardSegmentation, Tissue};

/// A phantom with its PGS reference and cohort metadata.
#[derive(Debug, Clone)]
pub struct StudySubject {
    pub subject_id: String,
    pub site_id: String,
    pub age: f64,
    /// Acquisition assigned by the cohort, if any.
    pub params: Option<SequenceParams>,
    pub data: LabelledSubject,
}

impl StudySubject {
    pub fn reference(&self) -> &HardSegmentation {
        &self.data.hard
    }
}

/// Fits the tissue mixture to every member's maps and labels it, in
/// parallel; output order follows `members`.
pub fn pgs_subjects(members: Vec<CohortMember>, tissue_params: &TissueParams, gmm: &GmmConfig) -> Result<Vec<StudySubject>> {
    members
        .into_par_iter()
        .map(|m| {
            let fit = fit_gmm(&m.mpm, tissue_params, gmm)?;
            let (soft, _) = label_pgs(&m.mpm, &fit.gmm)?;
            Ok(StudySubject {
                subject_id: m.mpm.subject_id.clone(),
                site_id: m.site_id,
                age: m.age,
                params: m.params,
                data: LabelledSubject::new(m.mpm, soft)?,
            })
        })
        .collect()
}

/// Anything that turns a subject imaged under `params` into tissue labels.
pub trait Segmenter: Sync {
    fn segment(&self, subject: &StudySubject, params: &SequenceParams) -> Result<HardSegmentation>;
}

impl Segmenter for Model {
    fn segment(&self, subject: &StudySubject, params: &SequenceParams) -> Result<HardSegmentation> {
        let mut rng = rng_for(0, &[]);
        let mut out = predict_mpm(self, &subject.data.mpm, params, &McConfig::deterministic(), &mut rng)?;
        Ok(out.pop().expect("one sample").harden())
    }
}

/// Returns the PGS labels whatever the acquisition: a perfectly
/// contrast-invariant oracle.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceSegmenter;

impl Segmenter for ReferenceSegmenter {
    fn segment(&self, subject: &StudySubject, _: &SequenceParams) -> Result<HardSegmentation> {
        Ok(subject.reference().clone())
    }
}

/// Dice per realization against the reference, and CoV of each tissue
/// volume across realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationScores {
    pub dice: Vec<[f64; 3]>,
    pub volumes_ml: Vec<[f64; 3]>,
    pub cov: [f64; 3],
}

pub fn score_realizations(segs: &[HardSegmentation], reference: &HardSegmentation) -> Result<RealizationScores> {
    let mut d = Vec::with_capacity(segs.len());
    let mut v = Vec::with_capacity(segs.len());
    for s in segs {
        d.push(Tissue::ALL.map(|t| dice(s, reference, t)).map(|r| r.unwrap_or(f64::NAN)));
        if d.last().unwrap().iter().any(|x| x.is_nan()) {
            return Err(Error::DimMismatch("segmentation and reference differ in shape".into()));
        }
        v.push(Tissue::ALL.map(|t| s.volume_ml(t)));
    }
    let mut c = [0.0; 3];
    for t in 0..3 {
        let vols: Vec<f64> = v.iter().map(|x| x[t]).collect();
        c[t] = match cov(&vols) {
            Ok(x) => x,
            // A tissue absent from every realization does not vary.
            Err(Error::Degenerate(_)) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(RealizationScores {
        dice: d,
        volumes_ml: v,
        cov: c,
    })
}

/// Writes `meta` as `run.json` in `dir`.
pub fn write_run_json(dir: &std::path::Path, meta: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&p, e))
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// MPRAGE acquisition used to train the single-contrast baseline.
pub fn single_contrast_params() -> SequenceParams {
    SequenceParams::mprage(900.0, DEFAULT_PTD_MS).expect("valid constant")
}

/// Training configuration of one annealing arm.
pub fn annealing_arm_config(base: &TrainConfig, mode: TrainMode) -> TrainConfig {
    TrainConfig { mode, ..base.clone() }
}

/// Training configurations of the harmonisation arms: the two physics
/// variants train across the multi-site range, the baseline on one
/// acquisition.
pub fn harmonization_arm_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let multisite = ParamRange::mprage_multisite();
    let fixed = ParamRange::mprage((900.0, 900.0), (DEFAULT_PTD_MS, DEFAULT_PTD_MS));
    vec![
        (
            "phys_strat_aug".into(),
            TrainConfig {
                mode: TrainMode::PhysStratAug,
                train_range: multisite,
                val_range: multisite,
                ..base.clone()
            },
        ),
        (
            "phys_aug_base".into(),
            TrainConfig {
                mode: TrainMode::PhysAugBase,
                train_range: multisite,
                val_range: multisite,
                ..base.clone()
            },
        ),
        (
            "cnn_baseline".into(),
            TrainConfig {
                mode: TrainMode::Baseline,
                train_range: fixed,
                val_range: fixed,
                n_val_params: 1,
                ..base.clone()
            },
        ),
    ]
}
