//! Monte-Carlo volumetric uncertainty: percentile volume curves,
//! calibration of their intervals, IQR bounds and acquisition sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_mpm, McConfig, Model};
use crate::seed::{derive_seed, rng_for};
use crate::simulate::{Interval, SequenceParams};
use crate::svg::{marching_squares, ramp, Axes, Svg};
use crate::volumes::{HardSegmentation, MpmVolume, SoftSegmentation, Tissue};

/// Floor applied before taking log10 of an IQR width (ml).
pub const LOG_WIDTH_FLOOR_ML: f64 = 1e-6;
pub const PERCENTILES: usize = 99;

/// How Monte-Carlo samples are reduced to a per-voxel inclusion fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Fraction of samples whose argmax is the tissue.
    #[default]
    Hard,
    /// Mean tissue probability across samples.
    Soft,
}

/// Tissue volume as a function of the inclusion threshold `q` = 1..=99.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileCurve {
    pub tissue: Tissue,
    pub voxel_volume_ml: f64,
    /// `volumes[q - 1]` in ml.
    pub volumes: Vec<f64>,
}

impl PercentileCurve {
    /// Volume at a real-valued percentile, linear between integer
    /// percentiles and clamped to the 1..=99 range.
    pub fn volume_at(&self, q: f64) -> f64 {
        let q = q.clamp(1.0, PERCENTILES as f64);
        let i = (q.floor() as usize).min(PERCENTILES - 1);
        let t = q - i as f64;
        let a = self.volumes[i - 1];
        let b = if i < PERCENTILES { self.volumes[i] } else { a };
        a + t * (b - a)
    }

    pub fn is_flat(&self) -> bool {
        self.volumes.iter().all(|&v| v == self.volumes[0])
    }

    /// Percentile at which the curve passes through `volume`; the midpoint of
    /// the solution interval on flat stretches, 0 or 100 outside the curve.
    pub fn percentile_of(&self, volume: f64) -> f64 {
        let v = &self.volumes;
        let n = v.len();
        if volume > v[0] {
            return 0.0;
        }
        if volume < v[n - 1] {
            return 100.0;
        }
        let q = |i: usize| (i + 1) as f64;
        let mut a = q(0);
        for i in 0..n {
            if v[i] <= volume {
                a = if i == 0 { q(0) } else { q(i - 1) + (v[i - 1] - volume) / (v[i - 1] - v[i]) };
                break;
            }
        }
        let mut b = q(n - 1);
        for i in (0..n).rev() {
            if v[i] >= volume {
                b = if i == n - 1 { q(n - 1) } else { q(i) + (v[i] - volume) / (v[i] - v[i + 1]) };
                break;
            }
        }
        0.5 * (a + b)
    }
}

fn curve_from_counts(hist: &[usize], k: usize, voxel_volume_ml: f64, tissue: Tissue) -> PercentileCurve {
    let volumes = (1..=PERCENTILES)
        .map(|q| {
            // c / k >= q / 100, in integers.
            let n: usize = hist.iter().enumerate().filter(|(c, _)| 100 * c >= q * k).map(|(_, h)| h).sum();
            n as f64 * voxel_volume_ml
        })
        .collect();
    PercentileCurve {
        tissue,
        voxel_volume_ml,
        volumes,
    }
}

/// Curve from hardened samples.
pub fn percentile_volumes_hard(samples: &[HardSegmentation], tissue: Tissue) -> Result<PercentileCurve> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("need >= 2 samples, got {}", samples.len())));
    }
    let first = &samples[0];
    if let Some(s) = samples.iter().find(|s| s.dims() != first.dims()) {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", s.dims(), first.dims())));
    }
    let k = samples.len();
    let label = tissue.label();
    let mut counts = vec![0usize; first.labels().len()];
    for s in samples {
        for (c, &l) in counts.iter_mut().zip(s.labels()) {
            *c += (l == label) as usize;
        }
    }
    let mut hist = vec![0usize; k + 1];
    for c in counts {
        hist[c] += 1;
    }
    hist[0] = 0;
    Ok(curve_from_counts(&hist, k, first.voxel_volume_ml(), tissue))
}

/// Curve from Monte-Carlo segmentations.
pub fn percentile_volumes(samples: &[SoftSegmentation], tissue: Tissue, aggregation: Aggregation) -> Result<PercentileCurve> {
    match aggregation {
        Aggregation::Hard => {
            let hard: Vec<HardSegmentation> = samples.iter().map(|s| s.harden()).collect();
            percentile_volumes_hard(&hard, tissue)
        }
        Aggregation::Soft => {
            if samples.len() < 2 {
                return Err(Error::InsufficientData(format!("need >= 2 samples, got {}", samples.len())));
            }
            let first = &samples[0].mask;
            if samples.iter().any(|s| !s.mask.same_shape(first)) {
                return Err(Error::DimMismatch("samples differ in shape".into()));
            }
            let k = samples.len() as f64;
            let t = tissue.index();
            let fr: Vec<f64> = (0..first.len())
                .map(|i| samples.iter().map(|s| s.tissues[t].data()[i] as f64).sum::<f64>() / k)
                .collect();
            let vox = first.voxel_volume_ml();
            let volumes = (1..=PERCENTILES)
                .map(|q| fr.iter().filter(|&&f| f > 0.0 && f >= q as f64 / 100.0).count() as f64 * vox)
                .collect();
            Ok(PercentileCurve {
                tissue,
                voxel_volume_ml: vox,
                volumes,
            })
        }
    }
}

/// Monotone piecewise-linear map from nominal to calibrated percentiles
/// with knots at the deciles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub nominal: Vec<f64>,
    pub calibrated: Vec<f64>,
    /// Set when calibration fell back to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl CalibrationMap {
    pub fn identity() -> Self {
        let k: Vec<f64> = (0..=10).map(|i| 10.0 * i as f64).collect();
        Self {
            nominal: k.clone(),
            calibrated: k,
            warning: None,
        }
    }

    pub fn apply(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 100.0);
        let n = &self.nominal;
        let i = n.partition_point(|&k| k <= p).clamp(1, n.len() - 1);
        let (x0, x1) = (n[i - 1], n[i]);
        let (y0, y1) = (self.calibrated[i - 1], self.calibrated[i]);
        y0 + (p - x0) / (x1 - x0) * (y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nominal.len() == self.calibrated.len()
            && self.nominal.len() >= 2
            && self.nominal.first() == Some(&0.0)
            && self.nominal.last() == Some(&100.0)
            && self.calibrated.first() == Some(&0.0)
            && self.calibrated.last() == Some(&100.0)
            && self.nominal.windows(2).all(|w| w[1] > w[0])
            && self.calibrated.windows(2).all(|w| w[1] >= w[0]);
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant("calibration map must be monotone and anchored at 0 and 100".into()))
        }
    }
}

/// Pool-adjacent-violators fit of a non-decreasing sequence.
pub fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb));
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (h - i as f64) * (sorted[j] - sorted[i])
}

/// Fits the map so that the interval between mapped percentiles `p` and
/// `100 - p` contains the truth for the nominal fraction of subjects: each
/// knot is the empirical quantile of the percentiles at which the curves
/// cross their true volumes.
pub fn calibrate(curves: &[PercentileCurve], truths: &[f64]) -> Result<CalibrationMap> {
    if curves.len() != truths.len() {
        return Err(Error::DimMismatch(format!("{} curves, {} truths", curves.len(), truths.len())));
    }
    if curves.len() < 5 {
        return Err(Error::InsufficientData(format!("need >= 5 calibration subjects, got {}", curves.len())));
    }
    if curves.iter().all(|c| c.is_flat()) {
        return Ok(CalibrationMap {
            warning: Some("all calibration curves are flat; using the identity map".into()),
            ..CalibrationMap::identity()
        });
    }
    let mut qs: Vec<f64> = curves.iter().zip(truths).map(|(c, &t)| c.percentile_of(t)).collect();
    qs.sort_by(f64::total_cmp);
    let nominal: Vec<f64> = (0..=10).map(|i| 10.0 * i as f64).collect();
    let mut interior: Vec<f64> = nominal[1..10].iter().map(|&p| quantile_sorted(&qs, p / 100.0)).collect();
    interior = isotonic(&interior).into_iter().map(|v| v.clamp(0.0, 100.0)).collect();
    let mut calibrated = vec![0.0];
    calibrated.extend(interior);
    calibrated.push(100.0);
    let map = CalibrationMap {
        nominal,
        calibrated,
        warning: None,
    };
    map.validate()?;
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqrBounds {
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
}

impl IqrBounds {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Volumes at the calibrated 25th, 50th and 75th percentiles, ordered.
pub fn iqr_bounds(curve: &PercentileCurve, map: &CalibrationMap) -> IqrBounds {
    let mut v = [25.0, 50.0, 75.0].map(|p| curve.volume_at(map.apply(p)));
    v.sort_by(f64::total_cmp);
    IqrBounds {
        lo: v[0],
        mid: v[1],
        hi: v[2],
    }
}

/// Flip angle maximising SPGR signal, in degrees.
pub fn ernst_angle(tr_ms: f64, t1_ms: f64) -> Result<f64> {
    if !(tr_ms > 0.0 && t1_ms > 0.0) {
        return Err(Error::InvalidParameter(format!("TR {tr_ms} and T1 {t1_ms} must be > 0")));
    }
    Ok((-tr_ms / t1_ms).exp().acos().to_degrees())
}

/// Per-tissue calibration maps in CSF, GM, WM order.
pub type TissueMaps = [CalibrationMap; 3];

/// Mean calibrated IQR width over tissues for one set of MC samples.
pub fn mean_iqr_width(samples: &[SoftSegmentation], maps: &TissueMaps, aggregation: Aggregation) -> Result<f64> {
    let mut total = 0.0;
    for t in Tissue::ALL {
        let curve = percentile_volumes(samples, t, aggregation)?;
        total += iqr_bounds(&curve, &maps[t.index()]).width();
    }
    Ok(total / 3.0)
}

/// Two-parameter acquisition grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sequence", rename_all = "lowercase")]
pub enum SweepGrid {
    /// x: TR, y: flip angle, TE fixed.
    Spgr { tr_ms: Interval, fa_deg: Interval, te_ms: f64 },
    /// x: TI, y: pTD.
    Mprage { ti_ms: Interval, ptd_ms: Interval },
}

impl SweepGrid {
    pub fn spgr_default() -> Self {
        SweepGrid::Spgr {
            tr_ms: Interval::new(5.0, 100.0),
            fa_deg: Interval::new(5.0, 90.0),
            te_ms: 4.0,
        }
    }

    pub fn mprage_default() -> Self {
        SweepGrid::Mprage {
            ti_ms: Interval::new(400.0, 2000.0),
            ptd_ms: Interval::new(200.0, 2000.0),
        }
    }

    pub fn axis_labels(&self) -> (&'static str, &'static str) {
        match self {
            SweepGrid::Spgr { .. } => ("TR (ms)", "flip angle (deg)"),
            SweepGrid::Mprage { .. } => ("TI (ms)", "pTD (ms)"),
        }
    }

    fn axes(&self) -> (Interval, Interval) {
        match self {
            SweepGrid::Spgr { tr_ms, fa_deg, .. } => (*tr_ms, *fa_deg),
            SweepGrid::Mprage { ti_ms, ptd_ms } => (*ti_ms, *ptd_ms),
        }
    }

    pub fn params(&self, x: f64, y: f64) -> Result<SequenceParams> {
        match self {
            SweepGrid::Spgr { te_ms, .. } => SequenceParams::spgr(x, *te_ms, y),
            SweepGrid::Mprage { .. } => SequenceParams::mprage(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub grid: SweepGrid,
    pub nx: usize,
    pub ny: usize,
    pub mc_samples: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            grid: SweepGrid::spgr_default(),
            nx: 20,
            ny: 20,
            mc_samples: 50,
            aggregation: Aggregation::Hard,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `mean_iqr_ml[iy][ix]`.
    pub mean_iqr_ml: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn log10(&self) -> Vec<Vec<f64>> {
        self.mean_iqr_ml
            .iter()
            .map(|r| r.iter().map(|&w| w.max(LOG_WIDTH_FLOOR_ML).log10()).collect())
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["param1", "param2", "mean_iqr_ml", "log10_iqr"])?;
        let logs = self.log10();
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                w.write_record([
                    x.to_string(),
                    y.to_string(),
                    self.mean_iqr_ml[iy][ix].to_string(),
                    logs[iy][ix].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Filled contour of log10 width with iso-lines at the band edges.
    pub fn to_svg(&self, title: &str) -> String {
        const BANDS: usize = 8;
        let z = self.log10();
        let lo = z.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let band = |v: f64| ((((v - lo) / span) * BANDS as f64).floor() as usize).min(BANDS - 1);
        let ax = Axes::new(
            (self.xs[0], *self.xs.last().unwrap()),
            (self.ys[0], *self.ys.last().unwrap()),
            70.0,
            40.0,
            420.0,
            320.0,
        );
        let mut svg = Svg::new(600.0, 420.0);
        let half = |v: &[f64], i: usize| {
            let prev = if i > 0 { v[i - 1] } else { v[i] };
            let next = if i + 1 < v.len() { v[i + 1] } else { v[i] };
            (0.5 * (prev + v[i]), 0.5 * (v[i] + next))
        };
        for (iy, _) in self.ys.iter().enumerate() {
            for (ix, _) in self.xs.iter().enumerate() {
                let (x0, x1) = half(&self.xs, ix);
                let (y0, y1) = half(&self.ys, iy);
                let (px0, py1) = ax.px(x0, y1);
                let (px1, py0) = ax.px(x1, y0);
                let b = band(z[iy][ix]);
                svg.rect(px0, py1, px1 - px0, py0 - py1, &ramp((b as f64 + 0.5) / BANDS as f64));
            }
        }
        for k in 1..BANDS {
            let level = lo + span * k as f64 / BANDS as f64;
            for (a, b) in marching_squares(&z, &self.xs, &self.ys, level) {
                svg.line(ax.px(a.0, a.1), ax.px(b.0, b.1), "black", 0.6);
            }
        }
        ax.draw(&mut svg, &self.x_label, &self.y_label, title);
        for k in 0..BANDS {
            let y = 40.0 + 320.0 * (1.0 - (k + 1) as f64 / BANDS as f64);
            svg.rect(510.0, y, 16.0, 320.0 / BANDS as f64, &ramp((k as f64 + 0.5) / BANDS as f64));
        }
        svg.text((530.0, 44.0), &format!("{hi:.2}"), 10.0, "start", false);
        svg.text((530.0, 360.0), &format!("{lo:.2}"), 10.0, "start", false);
        svg.text((560.0, 200.0), "log10 IQR width (ml)", 11.0, "middle", true);
        svg.finish()
    }
}

fn id_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Evaluates the mean calibrated IQR width at every grid point. Each
/// (point, subject) job has its own seed derived from the grid index and
/// the subject id, so results do not depend on subject order or threads.
pub fn sweep_contour(model: &Model, mpms: &[MpmVolume], maps: &TissueMaps, spec: &SweepSpec) -> Result<SweepResult> {
    if mpms.is_empty() || spec.nx == 0 || spec.ny == 0 {
        return Err(Error::InsufficientData("sweep needs subjects and a non-empty grid".into()));
    }
    if spec.mc_samples < 2 {
        return Err(Error::InvalidParameter("sweep needs >= 2 MC samples".into()));
    }
    for m in maps {
        m.validate()?;
    }
    let (ax, ay) = spec.grid.axes();
    let xs = ax.linspace(spec.nx);
    let ys = ay.linspace(spec.ny);
    for &x in &xs {
        for &y in &ys {
            spec.grid.params(x, y)?;
        }
    }
    let mc = McConfig {
        dropout: true,
        logit_noise: false,
        n_samples: spec.mc_samples,
    };
    let jobs: Vec<(usize, usize)> = (0..spec.ny).flat_map(|iy| (0..spec.nx).map(move |ix| (iy, ix))).collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(iy, ix)| -> Result<f64> {
            let params = spec.grid.params(xs[ix], ys[iy])?;
            let mut widths = Vec::with_capacity(mpms.len());
            for mpm in mpms {
                let mut rng = rng_for(derive_seed(spec.seed, &[iy as u64, ix as u64]), &[id_hash(&mpm.subject_id)]);
                let samples = predict_mpm(model, mpm, &params, &mc, &mut rng)?;
                widths.push(mean_iqr_width(&samples, maps, spec.aggregation)?);
            }
            widths.sort_by(f64::total_cmp);
            Ok(widths.iter().sum::<f64>() / widths.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mean_iqr_ml = values.chunks(spec.nx).map(|r| r.to_vec()).collect();
    let (xl, yl) = spec.grid.axis_labels();
    Ok(SweepResult {
        x_label: xl.into(),
        y_label: yl.into(),
        xs,
        ys,
        mean_iqr_ml,
    })
}
