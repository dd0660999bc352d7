use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StudySubject;
use crate::error::{Error, Result};
use crate::model::{predict_mpm, McConfig, Model};
use crate::seed::rng_for;
use crate::simulate::{sample_params, Interval, ParamRange, SequenceParams, DEFAULT_PTD_MS};
use crate::svg::{Axes, Svg, PALETTE};
use crate::uncertainty::{
    calibrate, iqr_bounds, mean_iqr_width, percentile_volumes, Aggregation, IqrBounds, PercentileCurve, TissueMaps,
};
use crate::volumes::{SoftSegmentation, Tissue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyStudyConfig {
    /// Acquisitions drawn for calibration and held-out pairs.
    pub range: ParamRange,
    pub pairs_per_subject: usize,
    pub mc: McConfig,
    pub aggregation: Aggregation,
    /// TIs inside the training range for the width comparison.
    pub in_tis: Vec<f64>,
    /// TIs outside the training range for the width comparison.
    pub ood_tis: Vec<f64>,
    pub ptd_ms: f64,
    /// TI span and point count of the volume-vs-TI figure.
    pub band_ti: Interval,
    pub band_points: usize,
    pub seed: u64,
}

impl Default for UncertaintyStudyConfig {
    fn default() -> Self {
        Self {
            range: ParamRange::mprage_in_distribution(),
            pairs_per_subject: 5,
            mc: McConfig {
                dropout: true,
                logit_noise: false,
                n_samples: 20,
            },
            aggregation: Aggregation::Hard,
            in_tis: vec![800.0, 1000.0],
            ood_tis: vec![100.0, 2000.0],
            ptd_ms: DEFAULT_PTD_MS,
            band_ti: Interval::new(100.0, 2000.0),
            band_points: 11,
            seed: 0,
        }
    }
}

/// Calibrated interval of one held-out subject/acquisition pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub subject_id: String,
    pub params: SequenceParams,
    pub tissue: Tissue,
    pub truth_ml: f64,
    pub bounds: IqrBounds,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRecord {
    pub subject_id: String,
    pub ti_ms: f64,
    pub out_of_distribution: bool,
    /// Mean over tissues of the calibrated IQR width (ml).
    pub mean_width_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeBand {
    pub ti_ms: f64,
    pub tissue: Tissue,
    pub bounds: IqrBounds,
    pub truth_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStudyResult {
    pub maps: TissueMaps,
    pub coverage_records: Vec<CoverageRecord>,
    /// Fraction of held-out pairs whose interval holds the truth, per tissue.
    pub coverage: [f64; 3],
    pub widths: Vec<WidthRecord>,
    pub mean_width_in_ml: f64,
    pub mean_width_ood_ml: f64,
    pub bands: Vec<VolumeBand>,
}

struct PairCurves {
    subject: usize,
    params: SequenceParams,
    curves: [PercentileCurve; 3],
}

fn mc_samples(model: &Model, s: &StudySubject, p: &SequenceParams, cfg: &UncertaintyStudyConfig, stream: &[u64]) -> Result<Vec<SoftSegmentation>> {
    let mut rng = rng_for(cfg.seed, stream);
    predict_mpm(model, &s.data.mpm, p, &cfg.mc, &mut rng)
}

fn pair_curves(model: &Model, subjects: &[StudySubject], cfg: &UncertaintyStudyConfig, tag: u64) -> Result<Vec<PairCurves>> {
    let jobs: Vec<(usize, usize)> = (0..subjects.len())
        .flat_map(|i| (0..cfg.pairs_per_subject).map(move |k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, k)| {
            let mut rng = rng_for(cfg.seed, &[tag, i as u64, k as u64, 0]);
            let params = sample_params(&cfg.range, &mut rng)?;
            let samples = mc_samples(model, &subjects[i], &params, cfg, &[tag, i as u64, k as u64, 1])?;
            let curve = |t: Tissue| percentile_volumes(&samples, t, cfg.aggregation);
            Ok(PairCurves {
                subject: i,
                params,
                curves: [curve(Tissue::Csf)?, curve(Tissue::Gm)?, curve(Tissue::Wm)?],
            })
        })
        .collect()
}

/// Calibrates the model's Monte-Carlo intervals on one set of subjects,
/// measures their coverage on held-out subjects, and compares interval
/// widths inside and outside the training TI range.
pub fn run_uncertainty_study(
    model: &Model,
    calibration: &[StudySubject],
    held_out: &[StudySubject],
    cfg: &UncertaintyStudyConfig,
) -> Result<UncertaintyStudyResult> {
    if held_out.is_empty() {
        return Err(Error::InsufficientData("no held-out subjects".into()));
    }
    if cfg.mc.n_samples < 2 || !(cfg.mc.dropout || cfg.mc.logit_noise) {
        return Err(Error::InvalidParameter("uncertainty needs >= 2 stochastic samples".into()));
    }
    let cal = pair_curves(model, calibration, cfg, 1)?;
    let maps: TissueMaps = Tissue::ALL
        .map(|t| {
            let curves: Vec<PercentileCurve> = cal.iter().map(|p| p.curves[t.index()].clone()).collect();
            let truths: Vec<f64> = cal.iter().map(|p| calibration[p.subject].reference().volume_ml(t)).collect();
            calibrate(&curves, &truths)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .try_into()
        .expect("three tissues");

    let test = pair_curves(model, held_out, cfg, 2)?;
    let mut coverage_records = Vec::new();
    let mut hits = [0usize; 3];
    for p in &test {
        let s = &held_out[p.subject];
        for t in Tissue::ALL {
            let truth = s.reference().volume_ml(t);
            let bounds = iqr_bounds(&p.curves[t.index()], &maps[t.index()]);
            let inside = bounds.contains(truth);
            hits[t.index()] += inside as usize;
            coverage_records.push(CoverageRecord {
                subject_id: s.subject_id.clone(),
                params: p.params,
                tissue: t,
                truth_ml: truth,
                bounds,
                inside,
            });
        }
    }
    let coverage = hits.map(|h| h as f64 / test.len() as f64);

    let mut jobs = Vec::new();
    for i in 0..held_out.len() {
        for &ti in &cfg.in_tis {
            jobs.push((i, ti, false));
        }
        for &ti in &cfg.ood_tis {
            jobs.push((i, ti, true));
        }
    }
    let widths: Vec<WidthRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(i, ti, ood))| {
            let params = SequenceParams::mprage(ti, cfg.ptd_ms)?;
            let samples = mc_samples(model, &held_out[i], &params, cfg, &[3, j as u64])?;
            Ok(WidthRecord {
                subject_id: held_out[i].subject_id.clone(),
                ti_ms: ti,
                out_of_distribution: ood,
                mean_width_ml: mean_iqr_width(&samples, &maps, cfg.aggregation)?,
            })
        })
        .collect::<Result<_>>()?;
    let avg = |ood: bool| {
        let v: Vec<f64> = widths.iter().filter(|w| w.out_of_distribution == ood).map(|w| w.mean_width_ml).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };

    let s = &held_out[0];
    let bands: Vec<Vec<VolumeBand>> = cfg
        .band_ti
        .linspace(cfg.band_points)
        .par_iter()
        .enumerate()
        .map(|(j, &ti)| {
            let params = SequenceParams::mprage(ti, cfg.ptd_ms)?;
            let samples = mc_samples(model, s, &params, cfg, &[4, j as u64])?;
            Tissue::ALL
                .iter()
                .map(|&t| {
                    let curve = percentile_volumes(&samples, t, cfg.aggregation)?;
                    Ok(VolumeBand {
                        ti_ms: ti,
                        tissue: t,
                        bounds: iqr_bounds(&curve, &maps[t.index()]),
                        truth_ml: s.reference().volume_ml(t),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(UncertaintyStudyResult {
        maps,
        coverage_records,
        coverage,
        mean_width_in_ml: avg(false),
        mean_width_ood_ml: avg(true),
        widths,
        bands: bands.into_iter().flatten().collect(),
    })
}

impl UncertaintyStudyResult {
    /// Writes coverage, widths, the volume-vs-TI figure, and the maps as
    /// `calibration.json` (`{"meta", "maps"}`).
    pub fn write(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        super::write_run_json(dir, meta)?;
        let mut cov = String::from("subject_id,params,tissue,truth_ml,lo_ml,mid_ml,hi_ml,inside\n");
        for r in &self.coverage_records {
            let _ = writeln!(
                cov,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.subject_id,
                r.params.describe(),
                r.tissue.name(),
                r.truth_ml,
                r.bounds.lo,
                r.bounds.mid,
                r.bounds.hi,
                r.inside as u8
            );
        }
        let mut w = String::from("subject_id,ti_ms,out_of_distribution,mean_iqr_ml\n");
        for r in &self.widths {
            let _ = writeln!(w, "{},{},{},{:.6}", r.subject_id, r.ti_ms, r.out_of_distribution as u8, r.mean_width_ml);
        }
        let files = [
            (
                "calibration.json",
                serde_json::to_string_pretty(&serde_json::json!({ "meta": meta, "maps": self.maps }))? + "\n",
            ),
            ("coverage.csv", cov),
            ("iqr_widths.csv", w),
            ("volume_vs_ti.svg", volume_band_svg(&self.bands, "Tissue volume vs TI (calibrated IQR)")),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Median volume against TI per tissue with the calibrated IQR as a shaded
/// band and the reference volume dashed.
pub fn volume_band_svg(bands: &[VolumeBand], title: &str) -> String {
    let tis: Vec<f64> = bands.iter().map(|b| b.ti_ms).collect();
    let lo = bands.iter().map(|b| b.bounds.lo.min(b.truth_ml)).fold(f64::INFINITY, f64::min);
    let hi = bands.iter().map(|b| b.bounds.hi.max(b.truth_ml)).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (
        tis.iter().copied().fold(f64::INFINITY, f64::min),
        tis.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (x0, x1) = if x0.is_finite() { (x0, x1) } else { (0.0, 1.0) };
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = (hi - lo).max(1e-9) * 0.05;
    let ax = Axes::new((x0, x1), ((lo - pad).max(0.0), hi + pad), 80.0, 40.0, 460.0, 320.0);
    let mut svg = Svg::new(680.0, 420.0);
    for t in Tissue::ALL {
        let b: Vec<&VolumeBand> = bands.iter().filter(|b| b.tissue == t).collect();
        if b.is_empty() {
            continue;
        }
        let colour = PALETTE[t.index()];
        let mut poly: Vec<(f64, f64)> = b.iter().map(|v| ax.px(v.ti_ms, v.bounds.hi)).collect();
        poly.extend(b.iter().rev().map(|v| ax.px(v.ti_ms, v.bounds.lo)));
        svg.polygon(&poly, colour, 0.3);
        let mid: Vec<(f64, f64)> = b.iter().map(|v| ax.px(v.ti_ms, v.bounds.mid)).collect();
        svg.polyline(&mid, colour, 2.0, false);
        let truth: Vec<(f64, f64)> = b.iter().map(|v| ax.px(v.ti_ms, v.truth_ml)).collect();
        svg.polyline(&truth, colour, 1.0, true);
        let y = 60.0 + 18.0 * t.index() as f64;
        svg.rect(556.0, y - 8.0, 10.0, 10.0, colour);
        svg.text((572.0, y), t.name(), 11.0, "start", false);
    }
    ax.draw(&mut svg, "TI (ms)", "volume (ml)", title);
    svg.finish()
}
