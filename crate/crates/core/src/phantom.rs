//! Procedural brain-like quantitative phantoms with known tissue labels.
//!
//! Anatomy: a deformed ellipsoidal mask, a thin outer CSF rim plus
//! ventricles, a cortical GM shell carved from a band-limited random depth
//! field, and WM inside. GM fraction shrinks linearly with age by moving the
//! GM/WM quantile threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::simulate::SequenceParams;
use crate::volumes::{write_mvol, Dims, Grid3, HardSegmentation, MpmVolume, Spacing, Tissue};

/// Gaussian description of one tissue's (T1 ms, T2* ms, PD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl TissueStats {
    /// Standard deviations set to `frac` of the means.
    pub fn with_relative_std(mean: [f64; 3], frac: f64) -> Self {
        Self {
            mean,
            std: [mean[0] * frac, mean[1] * frac, mean[2] * frac],
        }
    }
}

/// Per-tissue quantitative distributions in the order CSF, GM, WM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub csf: TissueStats,
    pub gm: TissueStats,
    pub wm: TissueStats,
}

impl Default for TissueParams {
    /// 3T literature-style values, standard deviations at 5% of the means.
    fn default() -> Self {
        Self {
            csf: TissueStats::with_relative_std([4000.0, 1500.0, 1.0], 0.05),
            gm: TissueStats::with_relative_std([1330.0, 66.0, 0.82], 0.05),
            wm: TissueStats::with_relative_std([830.0, 53.0, 0.70], 0.05),
        }
    }
}

impl TissueParams {
    pub fn get(&self, t: Tissue) -> &TissueStats {
        match t {
            Tissue::Csf => &self.csf,
            Tissue::Gm => &self.gm,
            Tissue::Wm => &self.wm,
        }
    }

    pub fn zero_std(mut self) -> Self {
        for s in [&mut self.csf, &mut self.gm, &mut self.wm] {
            s.std = [0.0; 3];
        }
        self
    }

    /// Largest mean proton density across tissues.
    pub fn max_pd(&self) -> f64 {
        Tissue::ALL
            .iter()
            .map(|&t| self.get(t).mean[2])
            .fold(f64::MIN, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for t in Tissue::ALL {
            let s = self.get(t);
            if s.mean.iter().any(|&m| !(m > 0.0)) || s.std.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "{t} parameters need positive means and non-negative stds"
                )));
            }
        }
        for (i, &a) in Tissue::ALL.iter().enumerate() {
            for &b in &Tissue::ALL[i + 1..] {
                if self.get(a).mean == self.get(b).mean {
                    return Err(Error::InvalidParameter(format!(
                        "{a} and {b} have identical means in every channel"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub tissue_params: TissueParams,
    pub spacing_mm: Spacing,
    /// Relative GM fraction lost per year of age.
    pub atrophy_rate: f64,
    /// Fraction of the non-ventricular mask assigned to the outer CSF rim.
    pub csf_fraction: f64,
    /// GM fraction of the non-ventricular mask at age zero.
    pub gm_fraction: f64,
    /// Amplitude of the band-limited depth perturbation that folds the cortex.
    pub folding: f64,
    /// Relative amplitude of smooth multiplicative modulation of the
    /// quantitative values (0 disables it).
    pub modulation: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            tissue_params: TissueParams::default(),
            spacing_mm: [3.0; 3],
            atrophy_rate: 0.002,
            csf_fraction: 0.10,
            gm_fraction: 0.45,
            folding: 0.12,
            modulation: 0.0,
        }
    }
}

impl PhantomConfig {
    pub fn gm_fraction_at(&self, age: f64) -> f64 {
        self.gm_fraction * (1.0 - self.atrophy_rate * age)
    }
}

/// Sum of random-phase plane cosines with wavelengths in `[lmin, lmax]`
/// voxels, normalised to unit variance.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    const N_WAVES: usize = 30;

    fn new<R: Rng + ?Sized>(rng: &mut R, lmin: f64, lmax: f64) -> Self {
        let waves = (0..Self::N_WAVES)
            .map(|_| {
                let mut d: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                let lambda = lmin + (lmax - lmin) * rng.random::<f64>();
                let k = 2.0 * std::f64::consts::PI / lambda;
                for c in &mut d {
                    *c *= k / n;
                }
                (d, 2.0 * std::f64::consts::PI * rng.random::<f64>())
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phi)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phi).cos())
            .sum();
        s / (Self::N_WAVES as f64 / 2.0).sqrt()
    }
}

/// Generates one phantom: quantitative maps and the true tissue labels.
pub fn generate_phantom(
    seed: u64,
    dims: Dims,
    config: &PhantomConfig,
    age: f64,
    subject_id: &str,
) -> Result<(MpmVolume, HardSegmentation)> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidParameter(format!("phantom dims {dims:?} must each be >= 16")));
    }
    if !(age >= 0.0) {
        return Err(Error::InvalidParameter(format!("age {age} must be non-negative")));
    }
    config.tissue_params.validate()?;
    let mut rng = rng_for(seed, &[0x5048_414e]);
    let l = *dims.iter().min().unwrap() as f64;
    let shape = SmoothField::new(&mut rng, 0.7 * l, 1.5 * l);
    let fold = SmoothField::new(&mut rng, 0.15 * l, 0.4 * l);
    let vent_shape = SmoothField::new(&mut rng, 0.5 * l, 1.0 * l);
    let modulation = SmoothField::new(&mut rng, 0.5 * l, 1.2 * l);
    let jitter = |rng: &mut _| 1.0 + 0.05 * (2.0 * Rng::random::<f64>(rng) - 1.0);
    let radii: [f64; 3] = [
        0.44 * dims[0] as f64 * jitter(&mut rng),
        0.44 * dims[1] as f64 * jitter(&mut rng),
        0.40 * dims[2] as f64 * jitter(&mut rng),
    ];
    let centre: [f64; 3] = [
        0.5 * (dims[0] as f64 - 1.0),
        0.5 * (dims[1] as f64 - 1.0),
        0.5 * (dims[2] as f64 - 1.0),
    ];
    let n = dims[0] * dims[1] * dims[2];
    let mut inside = vec![false; n];
    let mut ventricle = vec![false; n];
    let mut depth = vec![0f64; n];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let q = [
                    (p[0] - centre[0]) / radii[0],
                    (p[1] - centre[1]) / radii[1],
                    (p[2] - centre[2]) / radii[2],
                ];
                let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() * (1.0 + 0.06 * shape.at(p));
                if r < 1.0 {
                    inside[i] = true;
                    let v = ((q[0] / 0.30).powi(2) + (q[1] / 0.16).powi(2) + (q[2] / 0.20).powi(2))
                        .sqrt()
                        * (1.0 + 0.1 * vent_shape.at(p));
                    ventricle[i] = v < 1.0;
                    depth[i] = (1.0 - r) + config.folding * fold.at(p);
                }
                i += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| inside[i] && !ventricle[i]).collect();
    let mask_count = inside.iter().filter(|&&b| b).count();
    if order.is_empty() {
        return Err(Error::EmptyMask);
    }
    order.sort_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(a.cmp(&b)));
    let m = order.len() as f64;
    let gm_frac = config.gm_fraction_at(age);
    let n_csf = (config.csf_fraction * m).round() as usize;
    let n_gm = (gm_frac.max(0.0) * m).round() as usize;
    if n_csf + n_gm > order.len() {
        return Err(Error::InvalidParameter("CSF and GM fractions exceed the mask".into()));
    }
    let mut labels = vec![0u8; n];
    for i in 0..n {
        if ventricle[i] && inside[i] {
            labels[i] = Tissue::Csf.label();
        }
    }
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if rank < n_csf {
            Tissue::Csf.label()
        } else if rank < n_csf + n_gm {
            Tissue::Gm.label()
        } else {
            Tissue::Wm.label()
        };
    }
    for t in Tissue::ALL {
        let c = labels.iter().filter(|&&l| l == t.label()).count();
        if (c as f64) < 0.02 * mask_count as f64 {
            return Err(Error::InvalidParameter(format!(
                "{t} occupies {c} of {mask_count} mask voxels (< 2%) at age {age}"
            )));
        }
    }

    let tp = &config.tissue_params;
    let mut chans = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if let Some(t) = Tissue::from_label(labels[i]) {
                    let s = tp.get(t);
                    let md = if config.modulation != 0.0 {
                        1.0 + config.modulation * modulation.at([x as f64, y as f64, z as f64])
                    } else {
                        1.0
                    };
                    for c in 0..3 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        let v = (s.mean[c] + s.std[c] * e) * md;
                        let floor = if c == 2 { 0.0 } else { 1e-3 * s.mean[c] };
                        chans[c][i] = v.max(floor) as f32;
                    }
                }
                i += 1;
            }
        }
    }
    let sp = config.spacing_mm;
    let [t1, t2, pd] = chans;
    let mask = Grid3::new(dims, sp, inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    let mpm = MpmVolume::new(
        Grid3::new(dims, sp, t1)?,
        Grid3::new(dims, sp, t2)?,
        Grid3::new(dims, sp, pd)?,
        mask,
        subject_id,
        age,
    )?;
    let hard = HardSegmentation::new(dims, sp, labels)?;
    Ok((mpm, hard))
}

/// One acquisition site of a multi-site cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub params: SequenceParams,
    pub n_subjects: usize,
    #[serde(default)]
    pub age_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub dims: Dims,
    pub seed: u64,
    pub age_range: [f64; 2],
    #[serde(default)]
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub phantom: PhantomConfig,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidParameter("cohort needs at least one subject".into()));
        }
        if !(self.age_range[0] < self.age_range[1]) || self.age_range[0] < 0.0 {
            return Err(Error::InvalidParameter(format!("age range {:?} is invalid", self.age_range)));
        }
        let total: usize = self.sites.iter().map(|s| s.n_subjects).sum();
        if total > self.n_subjects {
            return Err(Error::InvalidParameter(format!(
                "sites request {total} subjects but the cohort has {}",
                self.n_subjects
            )));
        }
        for s in &self.sites {
            s.params.validate()?;
            if let Some([lo, hi]) = s.age_range {
                if !(lo <= hi) || lo < 0.0 {
                    return Err(Error::InvalidParameter(format!("site {} age range invalid", s.site_id)));
                }
            }
        }
        Ok(())
    }
}

/// A generated subject with its site assignment.
#[derive(Debug, Clone)]
pub struct CohortMember {
    pub mpm: MpmVolume,
    pub labels: HardSegmentation,
    pub site_id: String,
    pub params: Option<SequenceParams>,
    pub age: f64,
}

/// Site id given to subjects not claimed by any configured site.
pub const POOL_SITE: &str = "pool";

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<CohortMember>> {
    spec.validate()?;
    let mut plan: Vec<(String, Option<SequenceParams>, [f64; 2])> = Vec::with_capacity(spec.n_subjects);
    for s in &spec.sites {
        for _ in 0..s.n_subjects {
            plan.push((s.site_id.clone(), Some(s.params), s.age_range.unwrap_or(spec.age_range)));
        }
    }
    while plan.len() < spec.n_subjects {
        plan.push((POOL_SITE.to_string(), None, spec.age_range));
    }
    let mut per_site_index = std::collections::HashMap::<String, usize>::new();
    plan.into_iter()
        .enumerate()
        .map(|(idx, (site, params, [lo, hi]))| {
            let mut rng = rng_for(spec.seed, &[1, idx as u64]);
            let age = lo + (hi - lo) * rng.random::<f64>();
            let j = per_site_index.entry(site.clone()).or_insert(0);
            let id = format!("{}_{:03}", site.to_lowercase(), *j);
            *j += 1;
            let (mpm, labels) = generate_phantom(
                crate::seed::derive_seed(spec.seed, &[2, idx as u64]),
                spec.dims,
                &spec.phantom,
                age,
                &id,
            )?;
            Ok(CohortMember {
                mpm,
                labels,
                site_id: site,
                params,
                age,
            })
        })
        .collect()
}

/// 3D MPRAGE acquisitions of the multi-site autism imaging cohort:
/// (site, TI ms, TR ms). pTD is TR − TI.
pub const ABIDE_MPRAGE_SITES: [(&str, f64, f64); 10] = [
    ("CALTECH", 800.0, 1590.0),
    ("CMU", 1100.0, 1870.0),
    ("NYU", 1100.0, 2530.0),
    ("OLIN", 900.0, 2500.0),
    ("OHSU", 900.0, 2300.0),
    ("UCLA_1", 853.0, 2300.0),
    ("UCLA_2", 853.0, 2300.0),
    ("PITT", 1000.0, 2100.0),
    ("USM", 900.0, 2300.0),
    ("YALE", 624.0, 1230.0),
];

/// Synthetic age ranges placing each site's mean age in the same
/// young (< 16), old (> 22) or excluded band as the real cohort.
pub fn abide_site_age_range(site: &str) -> [f64; 2] {
    match site {
        "OHSU" | "UCLA_1" | "UCLA_2" | "YALE" | "NYU" => [8.0, 18.0],
        "CALTECH" | "USM" | "CMU" => [20.0, 40.0],
        _ => [15.0, 23.0],
    }
}

/// Site list for a phantom cohort that mirrors the multi-site MPRAGE table.
pub fn abide_sites(subjects_per_site: usize) -> Vec<SiteSpec> {
    ABIDE_MPRAGE_SITES
        .iter()
        .map(|&(id, ti, tr)| SiteSpec {
            site_id: id.to_string(),
            params: SequenceParams::mprage(ti, tr - ti).expect("table parameters are valid"),
            n_subjects: subjects_per_site,
            age_range: Some(abide_site_age_range(id)),
        })
        .collect()
}

/// Writes every member as MVOL pairs plus `manifest.csv`.
pub fn write_cohort(members: &[CohortMember], dir: &Path, meta: &serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("subject_id,site_id,age,mpm_path,labels_path\n");
    for m in members {
        let id = &m.mpm.subject_id;
        let mut extra = meta.clone();
        if let serde_json::Value::Object(o) = &mut extra {
            o.insert("site_id".into(), m.site_id.clone().into());
            if let Some(p) = m.params {
                o.insert("params".into(), serde_json::to_value(p)?);
            }
        }
        let mpm_name = format!("{id}_mpm");
        let lab_name = format!("{id}_labels");
        write_mvol(&m.mpm.to_stack(extra.clone()), dir.join(&mpm_name))?;
        write_mvol(
            &crate::volumes::MvolStack::single("labels", m.labels.to_grid(), extra),
            dir.join(&lab_name),
        )?;
        let _ = writeln!(csv, "{id},{},{:.6},{mpm_name}.mvol.json,{lab_name}.mvol.json", m.site_id, m.age);
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub site_id: String,
    pub age: f64,
    pub mpm_path: PathBuf,
    pub labels_path: PathBuf,
}

/// Reads `manifest.csv`, resolving file paths relative to its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        out.push(ManifestRow {
            subject_id: field(0),
            site_id: field(1),
            age: field(2)
                .parse()
                .map_err(|_| Error::Serde(format!("bad age '{}' in manifest", field(2))))?,
            mpm_path: base.join(field(3)),
            labels_path: base.join(field(4)),
        });
    }
    Ok(out)
}
