use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_std, Segmenter, StudySubject};
use crate::error::{Error, Result};
use crate::harmonize::{
    age_regression_rmse, apply_combat, dice, fit_combat, fit_site_trends, levene_test, partition_age_groups,
    trend_dispersion, trend_scatter_svg, AgePartition, CombatConfig, CombatModel, FeatureTable, LeveneCenter, SiteTrend,
};
use crate::volumes::Tissue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizationStudyConfig {
    pub combat: CombatConfig,
    /// Features as fractions of total tissue volume rather than ml.
    pub ratios: bool,
    /// Arm whose residual spread the others are tested against.
    pub baseline_arm: String,
    pub significance: f64,
    pub rmse_train_fraction: f64,
    pub rmse_repeats: usize,
    /// Smallest number of distinct site acquisitions accepted.
    pub min_distinct_acquisitions: usize,
    pub seed: u64,
}

impl Default for HarmonizationStudyConfig {
    fn default() -> Self {
        Self {
            combat: CombatConfig::default(),
            ratios: true,
            baseline_arm: "cnn_baseline-C".into(),
            significance: 0.05,
            rmse_train_fraction: 0.8,
            rmse_repeats: 50,
            min_distinct_acquisitions: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Young,
    Old,
}

impl AgeGroup {
    pub fn name(self) -> &'static str {
        match self {
            AgeGroup::Young => "young",
            AgeGroup::Old => "old",
        }
    }
}

/// One row of the trend table: dispersion of per-site trends for an age
/// group and tissue, and Levene's test of residual spread against the
/// baseline arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub group: AgeGroup,
    pub tissue: Tissue,
    pub trends: Vec<SiteTrend>,
    pub mean_b: f64,
    pub std_b: f64,
    pub mean_m_x1e3: f64,
    pub std_m_x1e3: f64,
    /// Absolute residuals about the group's pooled age trend.
    pub residuals: Vec<f64>,
    pub levene_p: Option<f64>,
    /// Significantly smaller residual spread than the baseline arm.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationArmResult {
    pub arm: String,
    pub features: FeatureTable,
    pub combat: Option<CombatModel>,
    pub rows: Vec<TrendRow>,
    pub age_rmse: Vec<f64>,
    /// Dice against the reference per subject, CSF, GM, WM.
    pub dice: Vec<[f64; 3]>,
}

impl HarmonizationArmResult {
    pub fn row(&self, group: AgeGroup, tissue: Tissue) -> Option<&TrendRow> {
        self.rows.iter().find(|r| r.group == group && r.tissue == tissue)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationStudyResult {
    pub partition: AgePartition,
    pub arms: Vec<HarmonizationArmResult>,
}

impl HarmonizationStudyResult {
    pub fn arm(&self, name: &str) -> Option<&HarmonizationArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Absolute residuals of `table` about one OLS age line fitted over all of
/// its rows.
fn pooled_residuals(table: &FeatureTable, tissue: Tissue) -> Vec<f64> {
    let n = table.rows.len() as f64;
    let ma = table.rows.iter().map(|r| r.age).sum::<f64>() / n;
    let my = table.rows.iter().map(|r| r.feature(tissue)).sum::<f64>() / n;
    let sxx: f64 = table.rows.iter().map(|r| (r.age - ma).powi(2)).sum();
    let sxy: f64 = table.rows.iter().map(|r| (r.age - ma) * (r.feature(tissue) - my)).sum();
    let m = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    table
        .rows
        .iter()
        .map(|r| (r.feature(tissue) - my - m * (r.age - ma)).abs())
        .collect()
}

fn trend_rows(table: &FeatureTable, partition: &AgePartition) -> Result<Vec<TrendRow>> {
    let mut rows = Vec::new();
    for (group, sites) in [(AgeGroup::Young, &partition.young), (AgeGroup::Old, &partition.old)] {
        if sites.len() < 2 {
            continue;
        }
        let sub = table.filter_sites(sites);
        for tissue in [Tissue::Gm, Tissue::Wm, Tissue::Csf] {
            let trends = fit_site_trends(&sub, tissue, None)?;
            let d = trend_dispersion(&trends)?;
            rows.push(TrendRow {
                group,
                tissue,
                trends,
                mean_b: d.mean_b,
                std_b: d.std_b,
                mean_m_x1e3: d.mean_m * 1e3,
                std_m_x1e3: d.std_m * 1e3,
                residuals: pooled_residuals(&sub, tissue),
                levene_p: None,
                improved: false,
            });
        }
    }
    Ok(rows)
}

/// Segments every subject at its site acquisition with each arm, builds the
/// volume feature table, and evaluates per-site age trends, their
/// dispersion, age-prediction error and Dice against the reference. Each
/// arm is also evaluated after ComBat, under the name `<arm>-C`.
pub fn run_harmonization_study(
    subjects: &[StudySubject],
    arms: &[(&str, &dyn Segmenter)],
    cfg: &HarmonizationStudyConfig,
) -> Result<HarmonizationStudyResult> {
    let mut acquisitions: Vec<String> = Vec::new();
    let mut sites: Vec<&str> = Vec::new();
    for s in subjects {
        let p = s
            .params
            .ok_or_else(|| Error::InvalidParameter(format!("subject {} has no site acquisition", s.subject_id)))?;
        let key = p.describe();
        if !acquisitions.contains(&key) {
            acquisitions.push(key);
        }
        if !sites.contains(&s.site_id.as_str()) {
            sites.push(&s.site_id);
        }
    }
    if acquisitions.len() < cfg.min_distinct_acquisitions {
        return Err(Error::InsufficientData(format!(
            "{} distinct site acquisitions, need >= {}",
            acquisitions.len(),
            cfg.min_distinct_acquisitions
        )));
    }

    let mut results = Vec::new();
    let mut partition = None;
    for &(name, seg) in arms {
        let out: Vec<([f64; 3], [f64; 3])> = subjects
            .par_iter()
            .map(|s| {
                let h = seg.segment(s, &s.params.expect("checked above"))?;
                let vols = Tissue::ALL.map(|t| h.volume_ml(t));
                let mut d = [0.0; 3];
                for t in Tissue::ALL {
                    d[t.index()] = dice(&h, s.reference(), t)?;
                }
                Ok((vols, d))
            })
            .collect::<Result<_>>()?;
        let features = FeatureTable::new(
            subjects
                .iter()
                .zip(&out)
                .map(|(s, (v, _))| FeatureTable::row_from_volumes(&s.subject_id, &s.site_id, s.age, *v, cfg.ratios))
                .collect(),
        )?;
        let part = partition.get_or_insert_with(|| partition_age_groups(&features)).clone();
        let dice: Vec<[f64; 3]> = out.iter().map(|(_, d)| *d).collect();
        let combat = fit_combat(&features, &cfg.combat)?;
        let harmonised = apply_combat(&combat, &features)?;
        for (arm, table, model) in [
            (name.to_string(), features, None),
            (format!("{name}-C"), harmonised, Some(combat)),
        ] {
            results.push(HarmonizationArmResult {
                arm,
                rows: trend_rows(&table, &part)?,
                age_rmse: age_regression_rmse(&table, cfg.rmse_train_fraction, cfg.seed, cfg.rmse_repeats)?,
                features: table,
                combat: model,
                dice: dice.clone(),
            });
        }
    }

    if let Some(base) = results.iter().find(|a| a.arm == cfg.baseline_arm).cloned() {
        for arm in &mut results {
            for row in &mut arm.rows {
                let Some(b) = base.row(row.group, row.tissue) else { continue };
                let p = match levene_test(&[&row.residuals, &b.residuals], LeveneCenter::Mean) {
                    Ok((_, p)) => p,
                    Err(Error::Degenerate(_)) => 1.0,
                    Err(e) => return Err(e),
                };
                let spread = |v: &[f64]| mean_std(v).0;
                row.levene_p = Some(p);
                row.improved = p < cfg.significance && spread(&row.residuals) < spread(&b.residuals);
            }
        }
    }

    Ok(HarmonizationStudyResult {
        partition: partition.unwrap_or_default(),
        arms: results,
    })
}

impl HarmonizationStudyResult {
    /// Writes the trend table, per-arm feature tables, ComBat models, age
    /// RMSE and Dice distributions, and a WM-ratio scatter per arm.
    pub fn write(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        super::write_run_json(dir, meta)?;
        let mut table = String::from("arm,group,tissue,b_mean,b_std,m_mean_x1e3,m_std_x1e3,levene_p,improved\n");
        let mut rmse = String::from("arm,repeat,rmse_years\n");
        let mut dice = String::from("arm,subject_id,site_id,dice_csf,dice_gm,dice_wm\n");
        let mut trends = String::from("arm,group,tissue,site_id,n,b,m\n");
        for a in &self.arms {
            for r in &a.rows {
                let _ = writeln!(
                    table,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                    a.arm,
                    r.group.name(),
                    r.tissue.name(),
                    r.mean_b,
                    r.std_b,
                    r.mean_m_x1e3,
                    r.std_m_x1e3,
                    r.levene_p.map(|p| format!("{p:.6}")).unwrap_or_default(),
                    r.improved as u8
                );
                for t in &r.trends {
                    let _ = writeln!(
                        trends,
                        "{},{},{},{},{},{:.8},{:.8}",
                        a.arm,
                        r.group.name(),
                        r.tissue.name(),
                        t.site_id,
                        t.n,
                        t.b,
                        t.m
                    );
                }
            }
            for (k, e) in a.age_rmse.iter().enumerate() {
                let _ = writeln!(rmse, "{},{k},{e:.6}", a.arm);
            }
            for (row, d) in a.features.rows.iter().zip(&a.dice) {
                let _ = writeln!(dice, "{},{},{},{:.6},{:.6},{:.6}", a.arm, row.subject_id, row.site_id, d[0], d[1], d[2]);
            }
            a.features.write_csv(&dir.join(format!("features_{}.csv", a.arm)))?;
            if let Some(m) = &a.combat {
                let p = dir.join(format!("combat_{}.json", a.arm));
                let body = serde_json::json!({ "meta": meta, "model": m });
                fs::write(&p, serde_json::to_string_pretty(&body)? + "\n").map_err(|e| Error::io(&p, e))?;
            }
            let wm = fit_site_trends(&a.features, Tissue::Wm, None)?;
            let svg = trend_scatter_svg(&a.features, Tissue::Wm, &wm, &format!("WM volume ratio vs age: {}", a.arm));
            let p = dir.join(format!("wm_trends_{}.svg", a.arm));
            fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        }
        for (name, body) in [
            ("table_trends.csv", table),
            (
                "reference.txt",
                "Dice and trends use the physics gold standard labels derived from the quantitative maps \
                 as the reference segmentation.\n"
                    .to_string(),
            ),
            ("site_trends.csv", trends),
            ("age_rmse.csv", rmse),
            ("dice.csv", dice),
            ("partition.json", serde_json::to_string_pretty(&self.partition)? + "\n"),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
